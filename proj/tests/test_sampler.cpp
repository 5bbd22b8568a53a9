#include <doctest.h>

#include "bya/sampler.hpp"
#include "test_support.hpp"

using namespace bya;

namespace {

ClipRecord make_clip(TrajectoryKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ClipDims dims;
  return gen_clip(make_trajectory(kind, dims, rng), dims, seed);
}

SampleRequest request_for(const ClipRecord& clip, RouterMode mode, int steps) {
  std::mt19937_64 rng(1);
  SampleRequest req;
  req.mode = mode;
  req.steps = steps;
  req.conditions = clip_conditions(clip, 4, 0.0, rng);
  req.a_ac = assignment_from_tensor(clip.a_ac);
  req.seed = 77;
  return req;
}

Model<float>& shared_model() {
  static Model<float> model = build_model<float>(ModelConfig{}, 3);
  return model;
}

}  // namespace

TEST_CASE("cfg_combine") {
  std::mt19937_64 rng(1);
  const Matrix<double> u = testing::random_matrix(4, 3, rng), c = testing::random_matrix(4, 3, rng);
  CHECK((cfg_combine(u, u, 7.0) - u).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(cfg_combine(u, c, 0.0) == u);
  CHECK((cfg_combine(u, c, 1.0) - c).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((cfg_combine(u, c, 7.0) - (u + 7.0 * (c - u))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(cfg_combine(u, Matrix<double>(testing::random_matrix(3, 3, rng)), 2.0), ShapeError);
  CHECK_THROWS_AS(cfg_combine(Tensor::zeros({2, 2}), Tensor::zeros({2, 3}), 2.0), ShapeError);
}

TEST_CASE("decode_for_view") {
  Tensor half = Tensor::zeros({2, 3, 2, 2});
  for (float& v : half.f32()) v = 0.5f;
  const Tensor view = decode_for_view(half, 4);
  CHECK(view.shape() == Shape{2, 3, 8, 8});
  for (std::uint8_t v : view.u8()) CHECK(v == 128);

  const Tensor out_of_range({1, 1, 1, 2}, std::vector<float>{-0.3f, 1.7f});
  const Tensor clamped = decode_for_view(out_of_range, 1);
  CHECK(clamped.u8()[0] == 0);
  CHECK(clamped.u8()[1] == 255);

  std::mt19937_64 rng(2);
  const Tensor x = testing::random_tensor({1, 3, 2, 2}, rng);
  const Tensor up = decode_for_view(x, 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t xx = 0; xx < 6; ++xx) CHECK(up.at_u8({0, c, y, xx}) == decode_for_view(x, 1).at_u8({0, c, y / 3, xx / 3}));
}

TEST_CASE("sampling timesteps") {
  CHECK(sampling_timesteps(1000, 4) == std::vector<int>{750, 500, 250, 0});
  CHECK(sampling_timesteps(1000, 50).size() == 50);
  CHECK(sampling_timesteps(1000, 50).front() == 980);
  CHECK_THROWS_AS(sampling_timesteps(1000, 0), ParameterError);
  CHECK_THROWS_AS(sampling_timesteps(10, 11), ParameterError);
  CHECK(router_mode_from_string("post") == RouterMode::post);
  CHECK_THROWS_AS(router_mode_from_string("mid"), ConfigError);
}

TEST_CASE("sample counts evaluations and is deterministic") {
  Model<float>& model = shared_model();
  const NoiseSchedule schedule = NoiseSchedule::linear();
  const ClipRecord clip = make_clip(TrajectoryKind::crossing, 4);
  for (auto [mode, nfe] : {std::pair{RouterMode::pre, 100}, std::pair{RouterMode::intra, 100}, std::pair{RouterMode::post, 200}}) {
    const SampleResult r = sample(model, request_for(clip, mode, 50), schedule);
    CHECK(r.nfe == nfe);
    CHECK(r.masks.size() == 50);
  }
  const SampleResult a = sample(model, request_for(clip, RouterMode::intra, 6), schedule);
  const SampleResult b = sample(model, request_for(clip, RouterMode::intra, 6), schedule);
  CHECK(a.video_latent == b.video_latent);
  CHECK(a.view == b.view);
  CHECK(a.video_latent.shape() == Shape{8, 3, 8, 8});
  CHECK(a.view.shape() == Shape{8, 3, 32, 32});
  // Intra-denoise masks are refined to one-hot at every step.
  for (const RoutingMask& m : a.masks)
    for (const auto& layer : m.layers) {
      CHECK((layer.rowwise().sum().array() - 1.0f).abs().maxCoeff() == 0.0f);
      CHECK(((layer.array() == 0.0f) || (layer.array() == 1.0f)).all());
    }

  SampleRequest other = request_for(clip, RouterMode::intra, 6);
  other.seed = 78;
  CHECK(sample(model, other, schedule).video_latent != a.video_latent);
}

TEST_CASE("sample errors") {
  Model<float>& model = shared_model();
  const NoiseSchedule schedule = NoiseSchedule::linear();
  const ClipRecord clip = make_clip(TrajectoryKind::parallel, 5);
  SampleRequest no_frame = request_for(clip, RouterMode::pre, 2);
  no_frame.conditions.inpaint_frame = Tensor();
  CHECK_THROWS_AS(sample(model, no_frame, schedule), InputError);
  SampleRequest untrained = request_for(clip, RouterMode::intra, 2);
  untrained.router_trained = false;
  CHECK_THROWS_AS(sample(model, untrained, schedule), ConfigError);
  SampleRequest bad = request_for(clip, RouterMode::intra, 0);
  CHECK_THROWS_AS(sample(model, bad, schedule), ParameterError);
  bad.steps = 2;
  bad.cfg_scale = -1.0;
  CHECK_THROWS_AS(sample(model, bad, schedule), ParameterError);
}

TEST_CASE("a fully unconditional request ignores its conditions") {
  Model<float>& model = shared_model();
  const NoiseSchedule schedule = NoiseSchedule::linear();
  SampleRequest a = request_for(make_clip(TrajectoryKind::still, 6), RouterMode::post, 4);
  SampleRequest b = request_for(make_clip(TrajectoryKind::still, 7), RouterMode::post, 4);
  a.keep = b.keep = ConditionSet{false, false, false, false};
  // Masks come from segmenting the coarse pass against the refs, and gates
  // from A^ac, so those two stay fixed.
  b.conditions.refs = a.conditions.refs;
  b.a_ac = a.a_ac;
  CHECK(sample(model, a, schedule).video_latent == sample(model, b, schedule).video_latent);
}
