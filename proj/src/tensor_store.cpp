#include "bya/tensor_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace bya {

namespace {

constexpr char kMagic[4] = {'B', 'Y', 'A', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8;

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
    if (d > 0xffffffffu) throw ShapeError("tensor dimension exceeds u32");
  }
  if (shape.size() > 255) throw ShapeError("tensor rank exceeds 255");
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : dtype_(DType::f32), shape_(std::move(shape)), f32_(std::move(values)) {
  check_shape(shape_);
  if (f32_.size() != shape_size(shape_))
    throw ShapeError("tensor data length " + std::to_string(f32_.size()) +
                     " does not match shape size " + std::to_string(shape_size(shape_)));
}

Tensor::Tensor(Shape shape, std::vector<std::uint8_t> values)
    : dtype_(DType::u8), shape_(std::move(shape)), u8_(std::move(values)) {
  check_shape(shape_);
  if (u8_.size() != shape_size(shape_))
    throw ShapeError("tensor data length " + std::to_string(u8_.size()) +
                     " does not match shape size " + std::to_string(shape_size(shape_)));
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const std::size_t n = shape_size(shape);
  if (dtype == DType::f32) return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
  return Tensor(std::move(shape), std::vector<std::uint8_t>(n, 0));
}

std::span<float> Tensor::f32() {
  if (dtype_ != DType::f32) throw FormatError("tensor is not f32");
  return f32_;
}
std::span<const float> Tensor::f32() const {
  if (dtype_ != DType::f32) throw FormatError("tensor is not f32");
  return f32_;
}
std::span<std::uint8_t> Tensor::u8() {
  if (dtype_ != DType::u8) throw FormatError("tensor is not u8");
  return u8_;
}
std::span<const std::uint8_t> Tensor::u8() const {
  if (dtype_ != DType::u8) throw FormatError("tensor is not u8");
  return u8_;
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw BoundsError("tensor index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor) {
  check_shape(tensor.shape());
  const std::size_t n = tensor.size();
  std::vector<std::uint8_t> out;
  const std::size_t elem = tensor.dtype() == DType::f32 ? 4 : 1;
  out.reserve(kHeaderBytes + 4 * tensor.rank() + elem * n);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(tensor.dtype()));
  out.push_back(static_cast<std::uint8_t>(tensor.rank()));
  out.push_back(0);
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  if (tensor.dtype() == DType::f32) {
    for (float v : tensor.f32()) {
      if (!std::isfinite(v)) throw ShapeError("f32 tensor contains a non-finite value");
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  } else {
    const auto data = tensor.u8();
    out.insert(out.end(), data.begin(), data.end());
  }
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated BYAT header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad BYAT magic");
  if (bytes[4] != kVersion) throw FormatError("unsupported BYAT version");
  const std::uint8_t code = bytes[5];
  if (code != static_cast<std::uint8_t>(DType::f32) && code != static_cast<std::uint8_t>(DType::u8))
    throw FormatError("unknown BYAT dtype code");
  const std::size_t rank = bytes[6];
  if (bytes[7] != 0) throw FormatError("BYAT reserved byte must be zero");
  if (bytes.size() < kHeaderBytes + 4 * rank) throw FormatError("truncated BYAT dims");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(bytes, kHeaderBytes + 4 * i);
    if (shape[i] == 0) throw FormatError("BYAT dimension is zero");
  }
  const std::size_t n = shape_size(shape);
  const std::size_t payload_at = kHeaderBytes + 4 * rank;
  const std::size_t elem = code == static_cast<std::uint8_t>(DType::f32) ? 4 : 1;
  if (bytes.size() != payload_at + elem * n) throw FormatError("BYAT payload length does not match dims");
  if (elem == 4) {
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = get_u32(bytes, payload_at + 4 * i);
      std::memcpy(&values[i], &bits, 4);
    }
    return Tensor(std::move(shape), std::move(values));
  }
  return Tensor(std::move(shape), std::vector<std::uint8_t>(bytes.begin() + payload_at, bytes.end()));
}

void write_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

int token_flatten(int t, int h, int w, const TokenGridDims& dims) {
  if (t < 0 || t >= dims.t_len || h < 0 || h >= dims.h_len || w < 0 || w >= dims.w_len)
    throw BoundsError("token index out of range");
  return (t * dims.h_len + h) * dims.w_len + w;
}

TokenIndex token_unflatten(int flat, const TokenGridDims& dims) {
  if (flat < 0 || flat >= dims.tokens()) throw BoundsError("flat token index out of range");
  TokenIndex idx;
  idx.w = flat % dims.w_len;
  idx.h = (flat / dims.w_len) % dims.h_len;
  idx.t = flat / dims.plane();
  return idx;
}

Tensor downsample_mask(const Tensor& pixel_mask, int spatial_factor, int patch) {
  if (pixel_mask.rank() != 4) throw ShapeError("downsample_mask expects n x T x H x W");
  if (spatial_factor <= 0 || patch <= 0) throw ShapeError("downsample factors must be positive");
  const std::size_t block = static_cast<std::size_t>(spatial_factor) * static_cast<std::size_t>(patch);
  const std::size_t n = pixel_mask.dim(0), frames = pixel_mask.dim(1);
  const std::size_t height = pixel_mask.dim(2), width = pixel_mask.dim(3);
  if (height % block != 0 || width % block != 0)
    throw ShapeError("mask size is not divisible by spatial_factor * patch");
  const std::size_t gh = height / block, gw = width / block;
  Tensor out = Tensor::zeros({n, frames, gh, gw});
  const auto src = pixel_mask.u8();
  auto dst = out.f32();
  const double inv = 1.0 / static_cast<double>(block * block);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t by = 0; by < gh; ++by)
        for (std::size_t bx = 0; bx < gw; ++bx) {
          std::size_t count = 0;
          for (std::size_t y = by * block; y < (by + 1) * block; ++y) {
            const std::size_t row = ((c * frames + t) * height + y) * width;
            for (std::size_t x = bx * block; x < (bx + 1) * block; ++x) count += src[row + x] != 0;
          }
          dst[((c * frames + t) * gh + by) * gw + bx] = static_cast<float>(count * inv);
        }
  return out;
}

Tensor avg_pool_spatial(const Tensor& input, int factor) {
  if (input.rank() < 2) throw ShapeError("avg_pool_spatial needs rank >= 2");
  if (factor <= 0) throw ShapeError("pool factor must be positive");
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t height = input.dim(input.rank() - 2), width = input.dim(input.rank() - 1);
  if (height % f != 0 || width % f != 0) throw ShapeError("spatial size is not divisible by pool factor");
  Shape shape = input.shape();
  shape[shape.size() - 2] = height / f;
  shape[shape.size() - 1] = width / f;
  const std::size_t planes = input.size() / (height * width);
  const std::size_t oh = height / f, ow = width / f;
  std::vector<float> out(planes * oh * ow, 0.0f);
  const auto src = input.f32();
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t y = oy * f; y < (oy + 1) * f; ++y)
          for (std::size_t x = ox * f; x < (ox + 1) * f; ++x) acc += src[(p * height + y) * width + x];
        out[(p * oh + oy) * ow + ox] = static_cast<float>(acc * inv);
      }
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace bya
