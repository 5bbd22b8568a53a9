#include "bya/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

namespace bya {

namespace {

using json = nlohmann::ordered_json;

constexpr std::array<Rgb, 6> kPalette = {{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.80f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.90f, 0.85f, 0.10f},
    {0.85f, 0.20f, 0.85f},
    {0.10f, 0.80f, 0.85f},
}};

constexpr int kMouthWidth = 8;
constexpr int kMouthHeight = 3;

Box mouth_box(Point c) {
  Box b;
  b.x0 = static_cast<int>(std::lround(c.x - kMouthWidth / 2.0));
  b.y0 = static_cast<int>(std::lround(c.y + 1.0));
  b.x1 = b.x0 + kMouthWidth;
  b.y1 = b.y0 + kMouthHeight;
  return b;
}

bool inside_disc(int x, int y, Point c, double r) {
  const double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
  return dx * dx + dy * dy <= r * r;
}

Point position(const TrajectorySpec& spec, int ch, int t) {
  const auto i = static_cast<std::size_t>(ch);
  return {spec.start[i].x + t * spec.velocity[i].x, spec.start[i].y + t * spec.velocity[i].y};
}

std::vector<float> smooth_envelope(int length, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> raw(static_cast<std::size_t>(length));
  for (auto& v : raw) v = noise(rng);
  std::vector<double> smooth(raw.size());
  constexpr int kHalf = 2;
  for (int i = 0; i < length; ++i) {
    double acc = 0.0;
    int n = 0;
    for (int j = std::max(0, i - kHalf); j <= std::min(length - 1, i + kHalf); ++j, ++n) acc += raw[static_cast<std::size_t>(j)];
    smooth[static_cast<std::size_t>(i)] = acc / n;
  }
  const auto [lo, hi] = std::minmax_element(smooth.begin(), smooth.end());
  const double span = std::max(*hi - *lo, 1e-9);
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((smooth[i] - *lo) / span);
  return out;
}

std::uint64_t hash_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x5EEDF00Dull); }

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::still: return "static";
    case TrajectoryKind::parallel: return "parallel";
    case TrajectoryKind::crossing: return "crossing";
    case TrajectoryKind::single: return "single";
  }
  return "static";
}

TrajectoryKind trajectory_kind_from_string(const std::string& name) {
  if (name == "static") return TrajectoryKind::still;
  if (name == "parallel") return TrajectoryKind::parallel;
  if (name == "crossing") return TrajectoryKind::crossing;
  if (name == "single") return TrajectoryKind::single;
  throw ParameterError("unknown trajectory kind: " + name);
}

TrajectorySpec make_trajectory(TrajectoryKind kind, const ClipDims& dims, std::mt19937_64& rng) {
  TrajectorySpec spec;
  spec.kind = kind;
  spec.radius = 6.5;
  const double w = dims.width, h = dims.height;
  const double left = w * 0.25, right = w * 0.75;
  const double top = h * 0.25, bottom = h * 0.75;
  const double travel_x = (right - left) / std::max(1, dims.frames - 1);
  const double travel_y = (bottom - top) / std::max(1, dims.frames - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(kPalette.size()) - 1);

  const int c0 = pick(rng);
  int c1 = pick(rng);
  while (c1 == c0) c1 = pick(rng);
  const bool flip = coin(rng) == 1;
  const double x0 = flip ? right : left, x1 = flip ? left : right;

  switch (kind) {
    case TrajectoryKind::still: {
      const double dy0 = jitter(rng), dy1 = jitter(rng);
      spec.start = {{x0 + 0.5 * jitter(rng), h / 2 + 2 * dy0}, {x1 + 0.5 * jitter(rng), h / 2 + 2 * dy1}};
      spec.velocity = {{0, 0}, {0, 0}};
      break;
    }
    case TrajectoryKind::parallel: {
      const bool down = coin(rng) == 1;
      const double y = down ? top : bottom;
      const double vy = down ? travel_y : -travel_y;
      spec.start = {{x0 + 0.5 * jitter(rng), y + 0.5 * jitter(rng)}, {x1 + 0.5 * jitter(rng), y + 0.5 * jitter(rng)}};
      spec.velocity = {{0, vy}, {0, vy}};
      break;
    }
    case TrajectoryKind::crossing: {
      spec.start = {{x0, h / 2 - 4 + jitter(rng)}, {x1, h / 2 + 4 + jitter(rng)}};
      spec.velocity = {{flip ? -travel_x : travel_x, 0}, {flip ? travel_x : -travel_x, 0}};
      break;
    }
    case TrajectoryKind::single: {
      const bool moving = coin(rng) == 1;
      if (moving) {
        spec.start = {{x0, h / 2 + 2 * jitter(rng)}};
        spec.velocity = {{flip ? -travel_x : travel_x, 0}};
      } else {
        std::uniform_real_distribution<double> ux(left, right), uy(top + 2, bottom - 2);
        spec.start = {{std::round(ux(rng) * 2) / 2, std::round(uy(rng) * 2) / 2}};
        spec.velocity = {{0, 0}};
      }
      spec.colors = {kPalette[static_cast<std::size_t>(c0)]};
      return spec;
    }
  }
  spec.colors = {kPalette[static_cast<std::size_t>(c0)], kPalette[static_cast<std::size_t>(c1)]};
  return spec;
}

FeatureBasis feature_basis(std::uint64_t seed, int audio_dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  FeatureBasis basis;
  std::vector<double> p(static_cast<std::size_t>(audio_dim));
  double norm = 0.0;
  for (auto& v : p) {
    v = dist(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double v : p) basis.direction.push_back(static_cast<float>(v / norm));
  for (int i = 0; i < audio_dim; ++i) basis.offset.push_back(static_cast<float>(0.1 * dist(rng)));
  return basis;
}

Tensor envelope_to_features(std::span<const float> envelope, std::uint64_t seed, int audio_dim) {
  const FeatureBasis basis = feature_basis(seed, audio_dim);
  Tensor out = Tensor::zeros({envelope.size(), static_cast<std::size_t>(audio_dim)});
  auto data = out.f32();
  for (std::size_t t = 0; t < envelope.size(); ++t)
    for (std::size_t j = 0; j < static_cast<std::size_t>(audio_dim); ++j)
      data[t * static_cast<std::size_t>(audio_dim) + j] = envelope[t] * basis.direction[j] + basis.offset[j];
  return out;
}

std::vector<float> features_to_envelope(const Tensor& feats, std::size_t stream, std::uint64_t seed) {
  const std::size_t frames = feats.dim(feats.rank() - 2), dim = feats.dim(feats.rank() - 1);
  const FeatureBasis basis = feature_basis(seed, static_cast<int>(dim));
  const auto data = feats.f32();
  const std::size_t base = feats.rank() == 3 ? stream * frames * dim : 0;
  std::vector<float> env(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) acc += (data[base + t * dim + j] - basis.offset[j]) * basis.direction[j];
    env[t] = static_cast<float>(acc);
  }
  return env;
}

std::vector<double> to_frame_rate(std::span<const float> audio_rate, int frames) {
  const std::size_t stride = audio_rate.size() / static_cast<std::size_t>(frames);
  std::vector<double> out(static_cast<std::size_t>(frames), 0.0);
  for (std::size_t f = 0; f < out.size(); ++f) {
    for (std::size_t k = 0; k < stride; ++k) out[f] += audio_rate[f * stride + k];
    out[f] /= static_cast<double>(stride);
  }
  return out;
}

double region_brightness(const Tensor& video, int t, const Box& box) {
  const std::size_t height = video.dim(2), width = video.dim(3);
  const auto data = video.f32();
  double acc = 0.0;
  int n = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = std::max(0, box.y0); y < std::min<int>(static_cast<int>(height), box.y1); ++y)
      for (int x = std::max(0, box.x0); x < std::min<int>(static_cast<int>(width), box.x1); ++x, ++n)
        acc += data[((static_cast<std::size_t>(t) * 3 + static_cast<std::size_t>(c)) * height + static_cast<std::size_t>(y)) * width +
                    static_cast<std::size_t>(x)];
  return n > 0 ? acc / n : 0.0;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.begin() + static_cast<long>(n), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.begin() + static_cast<long>(n), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 1e-18 || sbb <= 1e-18) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

ClipRecord gen_clip(const TrajectorySpec& spec, const ClipDims& dims, std::uint64_t seed) {
  const int n = spec.characters();
  if (n < 1 || n > 2) throw ParameterError("clips hold one or two characters");
  if (spec.start.size() != static_cast<std::size_t>(n) || spec.velocity.size() != static_cast<std::size_t>(n))
    throw ParameterError("trajectory arrays must have one entry per character");
  if (dims.frames <= 0 || dims.height <= 0 || dims.width <= 0 || dims.audio_frames <= 0 || dims.audio_dim <= 0 ||
      dims.ref_size <= 0)
    throw ParameterError("clip dimensions must be positive");
  if (dims.audio_frames % dims.frames != 0) throw ParameterError("audio frames must be a multiple of video frames");
  if (spec.radius <= 0 || 2 * spec.radius > dims.ref_size) throw ParameterError("disc radius does not fit the reference crop");
  for (int c = 0; c < n; ++c)
    for (int t = 0; t < dims.frames; ++t) {
      const Point p = position(spec, c, t);
      if (p.x - spec.radius < 0 || p.y - spec.radius < 0 || p.x + spec.radius > dims.width ||
          p.y + spec.radius > dims.height)
        throw ParameterError("disc leaves the frame at t=" + std::to_string(t));
    }

  std::mt19937_64 rng(seed);
  const auto un = static_cast<std::size_t>(n);
  const auto frames = static_cast<std::size_t>(dims.frames);
  const auto height = static_cast<std::size_t>(dims.height), width = static_cast<std::size_t>(dims.width);
  const auto afr = static_cast<std::size_t>(dims.audio_frames), adim = static_cast<std::size_t>(dims.audio_dim);
  const auto rs = static_cast<std::size_t>(dims.ref_size);

  ClipRecord clip;
  clip.seed = seed;
  clip.n_chars = n;
  clip.kind = spec.kind;
  clip.prompt_id = prompt_id_of(spec.kind);

  // Envelopes: independent smoothed signals; the second is redrawn until its
  // frame-rate correlation with the first is weak.
  std::vector<std::vector<float>> env;
  env.push_back(smooth_envelope(dims.audio_frames, rng));
  if (n == 2) {
    const auto first = to_frame_rate(env[0], dims.frames);
    std::vector<float> candidate = smooth_envelope(dims.audio_frames, rng);
    for (int attempt = 0; attempt < 256; ++attempt) {
      const auto second = to_frame_rate(candidate, dims.frames);
      if (std::abs(pearson(first, second)) < 0.5) break;
      candidate = smooth_envelope(dims.audio_frames, rng);
    }
    env.push_back(std::move(candidate));
  }

  // Audio-character binding.
  std::vector<int> audio_of(un);
  std::iota(audio_of.begin(), audio_of.end(), 0);
  if (n == 2 && std::uniform_int_distribution<int>(0, 1)(rng) == 1) std::swap(audio_of[0], audio_of[1]);
  clip.a_ac = Tensor::zeros({un, un}, DType::u8);
  for (std::size_t c = 0; c < un; ++c) clip.a_ac.at_u8({static_cast<std::size_t>(audio_of[c]), c}) = 1;

  clip.envelopes = Tensor::zeros({un, afr});
  clip.audio_feats = Tensor::zeros({un, afr, adim});
  for (std::size_t a = 0; a < un; ++a) {
    std::copy(env[a].begin(), env[a].end(), clip.envelopes.f32().begin() + static_cast<long>(a * afr));
    const Tensor feats = envelope_to_features(env[a], kAudioFeatureSeed, dims.audio_dim);
    std::copy(feats.f32().begin(), feats.f32().end(), clip.audio_feats.f32().begin() + static_cast<long>(a * afr * adim));
  }

  // Render, bottom character first so character 0 occludes character 1.
  clip.video = Tensor::zeros({frames, 3, height, width});
  clip.gt_masks = Tensor::zeros({un, frames, height, width}, DType::u8);
  clip.mouth_boxes.assign(un, std::vector<Box>(frames));
  auto video = clip.video.f32();
  std::fill(video.begin(), video.end(), kBackgroundLevel);
  std::vector<int> owner(height * width);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(owner.begin(), owner.end(), -1);
    for (int c = n - 1; c >= 0; --c) {
      const auto uc = static_cast<std::size_t>(c);
      const Point p = position(spec, c, static_cast<int>(t));
      const Box mouth = mouth_box(p);
      clip.mouth_boxes[uc][t] = mouth;
      const auto env_frames = to_frame_rate(env[static_cast<std::size_t>(audio_of[uc])], dims.frames);
      const auto level = static_cast<float>(0.5 + 0.5 * env_frames[t]);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          if (!inside_disc(static_cast<int>(x), static_cast<int>(y), p, spec.radius)) continue;
          owner[y * width + x] = c;
          const bool in_mouth = static_cast<int>(x) >= mouth.x0 && static_cast<int>(x) < mouth.x1 &&
                                static_cast<int>(y) >= mouth.y0 && static_cast<int>(y) < mouth.y1;
          for (std::size_t ch = 0; ch < 3; ++ch)
            video[((t * 3 + ch) * height + y) * width + x] = in_mouth ? level : spec.colors[uc][ch];
        }
    }
    for (std::size_t i = 0; i < owner.size(); ++i)
      if (owner[i] >= 0) clip.gt_masks.u8()[(static_cast<std::size_t>(owner[i]) * frames + t) * height * width + i] = 1;
  }

  clip.inpaint = Tensor::zeros({3, height, width});
  std::copy(video.begin(), video.begin() + static_cast<long>(3 * height * width), clip.inpaint.f32().begin());

  // References: each character alone, centred, mouth at rest.
  clip.refs = Tensor::zeros({un, 3, rs, rs});
  clip.ref_masks = Tensor::zeros({un, rs, rs}, DType::u8);
  std::fill(clip.refs.f32().begin(), clip.refs.f32().end(), kBackgroundLevel);
  for (std::size_t c = 0; c < un; ++c) {
    const Point centre{dims.ref_size / 2.0, dims.ref_size / 2.0 - 1.0};
    const Box mouth = mouth_box(centre);
    for (std::size_t y = 0; y < rs; ++y)
      for (std::size_t x = 0; x < rs; ++x) {
        if (!inside_disc(static_cast<int>(x), static_cast<int>(y), centre, spec.radius)) continue;
        clip.ref_masks.at_u8({c, y, x}) = 1;
        const bool in_mouth = static_cast<int>(x) >= mouth.x0 && static_cast<int>(x) < mouth.x1 &&
                              static_cast<int>(y) >= mouth.y0 && static_cast<int>(y) < mouth.y1;
        for (std::size_t ch = 0; ch < 3; ++ch) clip.refs.at({c, ch, y, x}) = in_mouth ? 0.5f : spec.colors[c][ch];
      }
  }
  return clip;
}

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : clips)
    if (e.split == name) out.push_back(&e);
  return out;
}

namespace {

json a_ac_json(const Tensor& a_ac) {
  json rows = json::array();
  for (std::size_t r = 0; r < a_ac.dim(0); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < a_ac.dim(1); ++c) row.push_back(static_cast<int>(a_ac.at_u8({r, c})));
    rows.push_back(row);
  }
  return rows;
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_clip(const ClipRecord& clip, const std::filesystem::path& dir, const std::string& split) {
  std::filesystem::create_directories(dir);
  write_tensor(clip.video, dir / "video.byat");
  write_tensor(clip.gt_masks, dir / "masks.byat");
  write_tensor(clip.audio_feats, dir / "audio.byat");
  write_tensor(clip.envelopes, dir / "envelopes.byat");
  write_tensor(clip.refs, dir / "refs.byat");
  write_tensor(clip.ref_masks, dir / "ref_masks.byat");
  write_tensor(clip.inpaint, dir / "inpaint.byat");
  json meta;
  meta["seed"] = clip.seed;
  meta["kind"] = to_string(clip.kind);
  meta["prompt_id"] = clip.prompt_id;
  meta["n_chars"] = clip.n_chars;
  meta["a_ac"] = a_ac_json(clip.a_ac);
  json boxes = json::array();
  for (const auto& per_char : clip.mouth_boxes) {
    json frames = json::array();
    for (const Box& b : per_char) frames.push_back({b.x0, b.y0, b.x1, b.y1});
    boxes.push_back(frames);
  }
  meta["mouth_boxes"] = boxes;
  meta["split"] = split;
  write_json(meta, dir / "meta.json");
}

ClipRecord load_clip(const std::filesystem::path& dir) {
  ClipRecord clip;
  clip.video = read_tensor(dir / "video.byat");
  clip.gt_masks = read_tensor(dir / "masks.byat");
  clip.audio_feats = read_tensor(dir / "audio.byat");
  clip.envelopes = read_tensor(dir / "envelopes.byat");
  clip.refs = read_tensor(dir / "refs.byat");
  clip.ref_masks = read_tensor(dir / "ref_masks.byat");
  clip.inpaint = read_tensor(dir / "inpaint.byat");
  const json meta = read_json(dir / "meta.json");
  clip.seed = meta.at("seed").get<std::uint64_t>();
  clip.kind = trajectory_kind_from_string(meta.at("kind").get<std::string>());
  clip.prompt_id = meta.at("prompt_id").get<int>();
  clip.n_chars = meta.at("n_chars").get<int>();
  const auto rows = meta.at("a_ac");
  const auto un = static_cast<std::size_t>(clip.n_chars);
  clip.a_ac = Tensor::zeros({un, un}, DType::u8);
  for (std::size_t r = 0; r < un; ++r)
    for (std::size_t c = 0; c < un; ++c) clip.a_ac.at_u8({r, c}) = static_cast<std::uint8_t>(rows.at(r).at(c).get<int>());
  for (const auto& per_char : meta.at("mouth_boxes")) {
    std::vector<Box> frames;
    for (const auto& b : per_char) frames.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()});
    clip.mouth_boxes.push_back(std::move(frames));
  }
  return clip;
}

DatasetManifest gen_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir, std::uint64_t seed) {
  if (options.count <= 0) throw ParameterError("count must be positive");
  if (!(options.mix >= 0.0 && options.mix <= 1.0)) throw ParameterError("mix must lie in [0, 1]");
  if (!(options.test_fraction >= 0.0 && options.test_fraction < 1.0)) throw ParameterError("test fraction must lie in [0, 1)");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const auto count = static_cast<std::size_t>(options.count);
  const auto n_single = static_cast<std::size_t>(std::lround(options.mix * static_cast<double>(count)));
  const auto n_test = static_cast<std::size_t>(std::lround(options.test_fraction * static_cast<double>(count)));

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> single(count, false);
  for (std::size_t i = 0; i < n_single; ++i) single[order[i]] = true;

  std::vector<std::uint64_t> clip_seeds(count);
  for (std::size_t i = 0; i < count; ++i) clip_seeds[i] = splitmix64(seed * 0x100000001b3ull + i);

  // Test split: the clips with the smallest seed hashes.
  std::vector<std::size_t> by_hash(count);
  std::iota(by_hash.begin(), by_hash.end(), 0);
  std::sort(by_hash.begin(), by_hash.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = hash_seed(clip_seeds[a]), hb = hash_seed(clip_seeds[b]);
    return ha != hb ? ha < hb : a < b;
  });
  std::vector<std::string> split(count, "train");
  for (std::size_t i = 0; i < n_test; ++i) split[by_hash[i]] = "test";

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.seed = seed;
  manifest.mix = options.mix;
  manifest.test_fraction = options.test_fraction;
  manifest.dims = options.dims;
  json clips = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 clip_rng(clip_seeds[i]);
    TrajectoryKind kind = TrajectoryKind::single;
    if (!single[i]) kind = static_cast<TrajectoryKind>(std::uniform_int_distribution<int>(0, 2)(clip_rng));
    const TrajectorySpec spec = make_trajectory(kind, options.dims, clip_rng);
    const ClipRecord clip = gen_clip(spec, options.dims, clip_seeds[i]);
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05zu", i);
    save_clip(clip, out_dir / name, split[i]);

    ManifestEntry entry;
    entry.path = name;
    entry.split = split[i];
    entry.prompt_id = clip.prompt_id;
    entry.kind = clip.kind;
    entry.n_chars = clip.n_chars;
    entry.seed = clip.seed;
    for (std::size_t r = 0; r < clip.a_ac.dim(0); ++r) {
      std::vector<int> row;
      for (std::size_t c = 0; c < clip.a_ac.dim(1); ++c) row.push_back(clip.a_ac.at_u8({r, c}));
      entry.a_ac.push_back(row);
    }
    clips.push_back({{"path", entry.path},
                     {"split", entry.split},
                     {"prompt_id", entry.prompt_id},
                     {"kind", to_string(entry.kind)},
                     {"a_ac", a_ac_json(clip.a_ac)},
                     {"n_chars", entry.n_chars},
                     {"seed", entry.seed}});
    manifest.clips.push_back(std::move(entry));
  }
  json j;
  j["seed"] = seed;
  j["count"] = options.count;
  j["mix"] = options.mix;
  j["test_fraction"] = options.test_fraction;
  j["dims"] = {{"frames", options.dims.frames},
               {"height", options.dims.height},
               {"width", options.dims.width},
               {"audio_frames", options.dims.audio_frames},
               {"audio_dim", options.dims.audio_dim},
               {"ref_size", options.dims.ref_size}};
  j["clips"] = clips;
  write_json(j, out_dir / "manifest.json");
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  const json j = read_json(manifest_path);
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.mix = j.at("mix").get<double>();
  m.test_fraction = j.at("test_fraction").get<double>();
  const auto& d = j.at("dims");
  m.dims = {d.at("frames").get<int>(),       d.at("height").get<int>(),    d.at("width").get<int>(),
            d.at("audio_frames").get<int>(), d.at("audio_dim").get<int>(), d.at("ref_size").get<int>()};
  for (const auto& c : j.at("clips")) {
    ManifestEntry e;
    e.path = c.at("path").get<std::string>();
    e.split = c.at("split").get<std::string>();
    e.prompt_id = c.at("prompt_id").get<int>();
    e.kind = trajectory_kind_from_string(c.at("kind").get<std::string>());
    e.n_chars = c.at("n_chars").get<int>();
    e.seed = c.at("seed").get<std::uint64_t>();
    e.a_ac = c.at("a_ac").get<std::vector<std::vector<int>>>();
    m.clips.push_back(std::move(e));
  }
  return m;
}

}  // namespace bya
