#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "bya/conditioning.hpp"
#include "bya/eval.hpp"
#include "bya/synthgen.hpp"

using namespace bya;
namespace fs = std::filesystem;

namespace {

ClipRecord make_clip(TrajectoryKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ClipDims dims;
  return gen_clip(make_trajectory(kind, dims, rng), dims, seed);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gen_clip is deterministic and well formed") {
  const ClipRecord a = make_clip(TrajectoryKind::crossing, 5);
  const ClipRecord b = make_clip(TrajectoryKind::crossing, 5);
  CHECK(a.video == b.video);
  CHECK(a.gt_masks == b.gt_masks);
  CHECK(a.audio_feats == b.audio_feats);
  CHECK(a.refs == b.refs);

  REQUIRE(a.video.shape() == Shape{8, 3, 32, 32});
  REQUIRE(a.gt_masks.shape() == Shape{2, 8, 32, 32});
  // Masks are disjoint.
  const std::size_t plane = 8 * 32 * 32;
  for (std::size_t i = 0; i < plane; ++i) CHECK(a.gt_masks.u8()[i] + a.gt_masks.u8()[plane + i] <= 1);
  // A^ac is a permutation.
  const AssignmentMatrix p = assignment_from_tensor(a.a_ac);
  CHECK(p.rowwise().sum().isOnes());
  CHECK(p.colwise().sum().isOnes());
}

TEST_CASE("mouth brightness follows the assigned envelope exactly") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ClipRecord clip = make_clip(TrajectoryKind::parallel, seed);
    const AssignmentMatrix p = assignment_from_tensor(clip.a_ac);
    const std::size_t ta = clip.envelopes.dim(1);
    for (int c = 0; c < 2; ++c) {
      int a = 0;
      for (int r = 0; r < 2; ++r)
        if (p(r, c) == 1) a = r;
      const auto env = to_frame_rate(clip.envelopes.f32().subspan(static_cast<std::size_t>(a) * ta, ta), 8);
      std::vector<double> mouth;
      for (int t = 0; t < 8; ++t) mouth.push_back(region_brightness(clip.video, t, clip.mouth_boxes[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)]));
      CHECK(pearson(mouth, env) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("crossing trajectories swap horizontal order") {
  const ClipDims dims;
  std::mt19937_64 rng(9);
  const TrajectorySpec spec = make_trajectory(TrajectoryKind::crossing, dims, rng);
  auto x = [&](int i, int t) { return spec.start[static_cast<std::size_t>(i)].x + t * spec.velocity[static_cast<std::size_t>(i)].x; };
  const bool before = x(0, 0) < x(1, 0);
  const bool after = x(0, dims.frames - 1) < x(1, dims.frames - 1);
  CHECK(before != after);
}

TEST_CASE("discs leaving the frame are rejected") {
  TrajectorySpec spec;
  spec.kind = TrajectoryKind::parallel;
  spec.colors = {{1, 0, 0}, {0, 0, 1}};
  spec.start = {{8, 16}, {24, 16}};
  spec.velocity = {{5, 0}, {0, 0}};
  CHECK_THROWS_AS(gen_clip(spec, ClipDims{}, 1), ParameterError);
}

TEST_CASE("envelope features are an invertible affine map") {
  const FeatureBasis basis = feature_basis(kAudioFeatureSeed, 8);
  double norm = 0;
  for (float v : basis.direction) norm += static_cast<double>(v) * v;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

  const std::vector<float> zero(16, 0.0f);
  const Tensor f0 = envelope_to_features(zero, kAudioFeatureSeed, 8);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t j = 0; j < 8; ++j) CHECK(f0.at({t, j}) == doctest::Approx(basis.offset[j]));

  std::vector<float> env(16), env2(16);
  for (std::size_t t = 0; t < 16; ++t) {
    env[t] = 0.2f + 0.03f * static_cast<float>(t);
    env2[t] = 2.0f * env[t];
  }
  const Tensor f1 = envelope_to_features(env, kAudioFeatureSeed, 8);
  const Tensor f2 = envelope_to_features(env2, kAudioFeatureSeed, 8);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(f2.at({t, j}) - basis.offset[j] == doctest::Approx(2.0 * (f1.at({t, j}) - basis.offset[j])).epsilon(1e-5));

  Tensor stacked({1, 16, 8}, std::vector<float>(f1.f32().begin(), f1.f32().end()));
  const auto back = features_to_envelope(stacked, 0, kAudioFeatureSeed);
  for (std::size_t t = 0; t < 16; ++t) CHECK(back[t] == doctest::Approx(env[t]).epsilon(1e-6));
}

TEST_CASE("gen_dataset writes a deterministic manifest") {
  const fs::path root = fs::temp_directory_path() / "bya_unit" / "ds";
  fs::remove_all(root);
  DatasetOptions opt;
  opt.count = 10;
  const DatasetManifest m = gen_dataset(opt, root / "a", 4);
  CHECK(m.clips.size() == 10);
  for (const auto& e : m.clips) CHECK(e.n_chars == 2);
  gen_dataset(opt, root / "b", 4);
  CHECK(slurp(root / "a" / "manifest.json") == slurp(root / "b" / "manifest.json"));
  CHECK(slurp(root / "a" / m.clips[3].path / "video.byat") == slurp(root / "b" / m.clips[3].path / "video.byat"));

  DatasetOptions mixed;
  mixed.count = 100;
  mixed.mix = 0.5;
  const DatasetManifest mm = gen_dataset(mixed, root / "c", 2);
  int singles = 0;
  for (const auto& e : mm.clips) singles += e.n_chars == 1 ? 1 : 0;
  CHECK(singles == 50);

  DatasetOptions bad;
  bad.count = 4;
  bad.mix = 2.0;
  CHECK_THROWS_AS(gen_dataset(bad, root / "d", 1), ParameterError);
  fs::remove_all(root);
}

TEST_CASE("ground-truth clips carry a positive sync margin") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u}) {
    const ClipRecord clip = make_clip(TrajectoryKind::still, seed);
    CHECK(sync_proxy_margin(clip, clip.video, 1) >= 0.3);
    CHECK(routing_accuracy(clip, clip.video, 1) == 1.0);
  }
}
