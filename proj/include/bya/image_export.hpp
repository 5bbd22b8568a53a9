#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "bya/mask_algebra.hpp"

namespace bya {

/// Palette-indexed image; index c < n is character c, index n background.
struct IndexedImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> index;
};

/// Character 1 red, character 2 blue, background dark grey; extra
/// characters continue with green, yellow and so on.
std::vector<std::array<std::uint8_t, 3>> mask_palette(int characters);

/// Argmax labels of one layer of an L x (n+1) x T' x h x w mask tensor;
/// layer -1 selects the layer mean.
std::vector<int> mask_tensor_labels(const Tensor& mask, int layer);

/// One frame of labels scaled up by `cell` pixels per token.
IndexedImage label_panel(const std::vector<int>& labels, const TokenGridDims& grid, int frame, int cell);

/// All frames side by side, left to right.
IndexedImage label_grid(const std::vector<int>& labels, const TokenGridDims& grid, int cell);

std::vector<std::uint8_t> encode_png(const IndexedImage& image, const std::vector<std::array<std::uint8_t, 3>>& palette);
/// Looping animation with one frame per image; `delay_cs` in hundredths of a second.
std::vector<std::uint8_t> encode_gif(const std::vector<IndexedImage>& frames, const std::vector<std::array<std::uint8_t, 3>>& palette,
                                     int delay_cs = 25);

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path);

}  // namespace bya
