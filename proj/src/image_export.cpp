#include "bya/image_export.hpp"

#include <png.h>

#include <fstream>
#include <map>

namespace bya {

std::vector<std::array<std::uint8_t, 3>> mask_palette(int characters) {
  static const std::array<std::uint8_t, 3> colors[] = {
      {230, 57, 70}, {52, 104, 235}, {60, 180, 75}, {240, 200, 40}, {170, 80, 200}, {70, 200, 200}};
  std::vector<std::array<std::uint8_t, 3>> out;
  for (int c = 0; c < characters; ++c) out.push_back(colors[static_cast<std::size_t>(c) % std::size(colors)]);
  out.push_back({40, 40, 40});
  return out;
}

std::vector<int> mask_tensor_labels(const Tensor& mask, int layer) {
  const RoutingMask m = RoutingMask::from_tensor(mask);
  if (layer < -1 || layer >= m.layer_count()) throw BoundsError("layer " + std::to_string(layer) + " out of range");
  return argmax_labels(layer < 0 ? m.layer_mean() : m.layers[static_cast<std::size_t>(layer)]);
}

IndexedImage label_panel(const std::vector<int>& labels, const TokenGridDims& grid, int frame, int cell) {
  if (static_cast<int>(labels.size()) != grid.tokens()) throw ShapeError("label count does not match the token grid");
  if (frame < 0 || frame >= grid.t_len) throw BoundsError("frame out of range");
  if (cell < 1) throw ParameterError("cell size must be positive");
  IndexedImage img;
  img.width = grid.w_len * cell;
  img.height = grid.h_len * cell;
  img.index.resize(static_cast<std::size_t>(img.width * img.height));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      img.index[static_cast<std::size_t>(y * img.width + x)] =
          static_cast<std::uint8_t>(labels[static_cast<std::size_t>(token_flatten(frame, y / cell, x / cell, grid))]);
  return img;
}

IndexedImage label_grid(const std::vector<int>& labels, const TokenGridDims& grid, int cell) {
  IndexedImage out;
  out.width = grid.t_len * grid.w_len * cell;
  out.height = grid.h_len * cell;
  out.index.resize(static_cast<std::size_t>(out.width * out.height));
  for (int t = 0; t < grid.t_len; ++t) {
    const IndexedImage panel = label_panel(labels, grid, t, cell);
    for (int y = 0; y < panel.height; ++y)
      for (int x = 0; x < panel.width; ++x)
        out.index[static_cast<std::size_t>(y * out.width + t * panel.width + x)] = panel.index[static_cast<std::size_t>(y * panel.width + x)];
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const IndexedImage& image, const std::vector<std::array<std::uint8_t, 3>>& palette) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(image.width);
  info.height = static_cast<png_uint_32>(image.height);
  info.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb;
  rgb.reserve(image.index.size() * 3);
  for (std::uint8_t i : image.index) {
    if (i >= palette.size()) throw BoundsError("palette index out of range");
    rgb.insert(rgb.end(), palette[i].begin(), palette[i].end());
  }
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&info, nullptr, &size, 0, rgb.data(), 0, nullptr))
    throw IoError(std::string("png encoding failed: ") + info.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&info, out.data(), &size, 0, rgb.data(), 0, nullptr))
    throw IoError(std::string("png encoding failed: ") + info.message);
  out.resize(size);
  return out;
}

namespace {

class BitWriter {
 public:
  void put(int code, int bits) {
    acc_ |= static_cast<std::uint32_t>(code) << count_;
    count_ += bits;
    while (count_ >= 8) {
      bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
      acc_ >>= 8;
      count_ -= 8;
    }
  }
  void flush() {
    if (count_ > 0) bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
    acc_ = 0;
    count_ = 0;
  }
  std::vector<std::uint8_t> bytes;

 private:
  std::uint32_t acc_ = 0;
  int count_ = 0;
};

std::vector<std::uint8_t> lzw(const std::vector<std::uint8_t>& pixels, int min_code_size) {
  const int clear = 1 << min_code_size, eoi = clear + 1;
  BitWriter out;
  std::map<std::pair<int, std::uint8_t>, int> dict;
  int next = eoi + 1, width = min_code_size + 1;
  out.put(clear, width);
  int prefix = -1;
  for (std::uint8_t px : pixels) {
    if (prefix < 0) {
      prefix = px;
      continue;
    }
    const auto it = dict.find({prefix, px});
    if (it != dict.end()) {
      prefix = it->second;
      continue;
    }
    out.put(prefix, width);
    if (next < 4096) {
      dict[{prefix, px}] = next++;
      if (next > (1 << width) && width < 12) ++width;
    } else {
      out.put(clear, width);
      dict.clear();
      next = eoi + 1;
      width = min_code_size + 1;
    }
    prefix = px;
  }
  if (prefix >= 0) out.put(prefix, width);
  out.put(eoi, width);
  out.flush();
  return out.bytes;
}

void put16(std::vector<std::uint8_t>& out, int v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}

}  // namespace

std::vector<std::uint8_t> encode_gif(const std::vector<IndexedImage>& frames, const std::vector<std::array<std::uint8_t, 3>>& palette,
                                     int delay_cs) {
  if (frames.empty()) throw ParameterError("gif needs at least one frame");
  if (palette.size() > 256) throw ParameterError("gif palette holds at most 256 colors");
  int depth = 1;
  while ((1 << depth) < static_cast<int>(palette.size())) ++depth;
  const int table = 1 << depth;
  const int width = frames.front().width, height = frames.front().height;
  std::vector<std::uint8_t> out = {'G', 'I', 'F', '8', '9', 'a'};
  put16(out, width);
  put16(out, height);
  out.push_back(static_cast<std::uint8_t>(0x80 | ((depth - 1) << 4) | (depth - 1)));
  out.push_back(0);
  out.push_back(0);
  for (int i = 0; i < table; ++i) {
    const auto c = i < static_cast<int>(palette.size()) ? palette[static_cast<std::size_t>(i)] : std::array<std::uint8_t, 3>{0, 0, 0};
    out.insert(out.end(), c.begin(), c.end());
  }
  // Netscape looping extension, loop forever.
  const std::uint8_t loop[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.insert(out.end(), std::begin(loop), std::end(loop));
  const int min_code = std::max(2, depth);
  for (const IndexedImage& f : frames) {
    if (f.width != width || f.height != height) throw ShapeError("gif frames differ in size");
    out.insert(out.end(), {0x21, 0xF9, 0x04, 0x00});
    put16(out, delay_cs);
    out.insert(out.end(), {0x00, 0x00});
    out.push_back(0x2C);
    put16(out, 0);
    put16(out, 0);
    put16(out, width);
    put16(out, height);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(min_code));
    const std::vector<std::uint8_t> data = lzw(f.index, min_code);
    for (std::size_t i = 0; i < data.size(); i += 255) {
      const std::size_t len = std::min<std::size_t>(255, data.size() - i);
      out.push_back(static_cast<std::uint8_t>(len));
      out.insert(out.end(), data.begin() + static_cast<long>(i), data.begin() + static_cast<long>(i + len));
    }
    out.push_back(0);
  }
  out.push_back(0x3B);
  return out;
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace bya
