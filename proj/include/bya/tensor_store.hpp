#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <vector>

#include "bya/errors.hpp"

namespace bya {

enum class DType : std::uint8_t { f32 = 1, u8 = 2 };

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor holding either f32 or u8 values.
///
/// The element count always equals the product of the shape; constructing a
/// tensor whose data does not match its shape throws ShapeError.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<std::uint8_t> values);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);

  DType dtype() const { return dtype_; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return shape_size(shape_); }

  std::span<float> f32();
  std::span<const float> f32() const;
  std::span<std::uint8_t> u8();
  std::span<const std::uint8_t> u8() const;

  /// Flat offset of a full multi-index, bounds checked.
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  float& at(std::initializer_list<std::size_t> index) { return f32()[offset(index)]; }
  float at(std::initializer_list<std::size_t> index) const { return f32()[offset(index)]; }
  std::uint8_t& at_u8(std::initializer_list<std::size_t> index) { return u8()[offset(index)]; }
  std::uint8_t at_u8(std::initializer_list<std::size_t> index) const { return u8()[offset(index)]; }

  bool operator==(const Tensor& other) const = default;

 private:
  DType dtype_ = DType::f32;
  Shape shape_;
  std::vector<float> f32_;
  std::vector<std::uint8_t> u8_;
};

/// Serialize in the BYAT layout: "BYAT", version 1, dtype code, rank,
/// reserved 0, rank x u32 LE dims, raw row-major LE payload.
void write_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

struct TokenGridDims {
  int t_len = 0;
  int h_len = 0;
  int w_len = 0;

  int tokens() const { return t_len * h_len * w_len; }
  int plane() const { return h_len * w_len; }
  bool operator==(const TokenGridDims&) const = default;
};

struct TokenIndex {
  int t = 0;
  int h = 0;
  int w = 0;
  bool operator==(const TokenIndex&) const = default;
};

/// t-major, then h, then w.
int token_flatten(int t, int h, int w, const TokenGridDims& dims);
TokenIndex token_unflatten(int flat, const TokenGridDims& dims);

/// Area-mean downsampling of an n x T x H x W u8 {0,1} mask to
/// n x T x H/(factor*patch) x W/(factor*patch) soft f32 coverage.
Tensor downsample_mask(const Tensor& pixel_mask, int spatial_factor, int patch);

/// Average-pool the trailing two axes of an f32 tensor by `factor`.
Tensor avg_pool_spatial(const Tensor& input, int factor);

}  // namespace bya
