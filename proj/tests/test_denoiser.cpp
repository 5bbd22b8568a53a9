#include <doctest.h>

#include "bya/denoiser.hpp"
#include "test_support.hpp"

using namespace bya;

namespace {

DiTConfig tiny_dit() {
  DiTConfig cfg;
  cfg.layers = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.frames = 2;
  cfg.height = 4;
  cfg.latent_width = 4;
  cfg.text_len = 2;
  cfg.face_queries = 2;
  cfg.mlp_ratio = 2;
  cfg.lora_rank = 2;
  return cfg;
}

/// Plain multi-head attention of x against one embedding, by hand.
Matrix<double> cross_attention_oracle(const Matrix<double>& x, const Matrix<double>& e, const CrossAttentionParams<double>& p, int heads) {
  const Matrix<double> q = x * p.wq->value, k = e * p.wk->value, v = e * p.wv->value;
  const Eigen::Index dh = q.cols() / heads;
  Matrix<double> out = Matrix<double>::Zero(x.rows(), q.cols());
  for (int h = 0; h < heads; ++h)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::vector<double> w(static_cast<std::size_t>(e.rows()));
      double mx = -1e300, sum = 0;
      for (Eigen::Index j = 0; j < e.rows(); ++j) {
        double dot = 0;
        for (Eigen::Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        w[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[static_cast<std::size_t>(j)]);
      }
      for (double& x : w) sum += x = std::exp(x - mx);
      for (Eigen::Index j = 0; j < e.rows(); ++j)
        for (Eigen::Index c = 0; c < dh; ++c) out(i, h * dh + c) += w[static_cast<std::size_t>(j)] / sum * v(j, h * dh + c);
    }
  return out;
}

struct TinyInputs {
  Tensor latent;
  Matrix<double> text;
  std::vector<Matrix<double>> faces, audio;
};

TinyInputs tiny_inputs(const DiTConfig& cfg, std::mt19937_64& rng) {
  TinyInputs in;
  in.latent = testing::random_tensor({2, 9, 4, 4}, rng, -1.0f, 1.0f);
  in.text = testing::random_matrix(cfg.text_len, cfg.width, rng);
  for (int c = 0; c < 2; ++c) {
    in.faces.push_back(testing::random_matrix(cfg.face_queries, cfg.width, rng));
    in.audio.push_back(testing::random_matrix(cfg.frames, cfg.width, rng));
  }
  return in;
}

Var<double> run_tiny(Tape<double>& tape, const DenoiserParams<double>& p, const TinyInputs& in, const GateProvider<double>& gates,
                     std::vector<AttentionTap<double>>* taps = nullptr) {
  DenoiserInputs<double> d;
  d.latent = &in.latent;
  d.t = 321;
  d.text = tape.constant(in.text);
  for (const auto& f : in.faces) d.faces.push_back(tape.constant(f));
  for (const auto& a : in.audio) d.audio.push_back(tape.constant(a));
  return denoiser_forward(p, d, gates, taps);
}

}  // namespace

TEST_CASE("patchify token count and round trip") {
  DiTConfig cfg;
  CHECK(cfg.tokens() == 128);
  std::mt19937_64 rng(1);
  const Tensor x = testing::random_tensor({8, 3, 8, 8}, rng);
  const Matrix<float> rows = patchify_rows<float>(x, 2);
  CHECK(rows.rows() == 128);
  CHECK(rows.cols() == 12);
  CHECK(unpatchify_rows(rows, cfg.grid(), 3, 2) == x);

  // One pixel touches exactly the row of its token.
  Tensor y = x;
  y.at({5, 1, 3, 6}) += 1.0f;
  const Matrix<float> diff = patchify_rows<float>(y, 2) - rows;
  const int s = token_flatten(5, 1, 3, cfg.grid());
  for (Eigen::Index r = 0; r < diff.rows(); ++r) CHECK((diff.row(r).cwiseAbs().maxCoeff() > 0) == (r == s));
  CHECK_THROWS_AS(patchify_rows<float>(testing::random_tensor({8, 3, 7, 8}, rng), 2), ShapeError);
}

TEST_CASE("lora_apply") {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  const Matrix<double> w = testing::random_matrix(5, 4, rng), x = testing::random_matrix(4, 3, rng);
  LoRAAdapter<double> off;
  CHECK(lora_apply(w, off, x) == w * x);

  LoRAAdapter<double> ad{&store.add("a", "lora", testing::random_matrix(2, 4, rng)), &store.add("b", "lora", Matrix<double>::Zero(5, 2)), 2, 4.0};
  CHECK(lora_apply(w, ad, x) == w * x);
  ad.b->value = testing::random_matrix(5, 2, rng);
  const Matrix<double> dense = w + 2.0 * ad.b->value * ad.a->value;
  CHECK(testing::relative_error(lora_apply(w, ad, x), dense * x) < 1e-12);
  CHECK((lora_apply(w, ad, x) - dense * x).cwiseAbs().maxCoeff() < 1e-5);

  // The row-convention layer agrees with the dense merge.
  Parameter<double>& base = store.add("w", "dit", w.transpose());
  Tape<double> tape;
  const Matrix<double> rows = x.transpose();
  CHECK((lora_linear(tape.constant(rows), base, &ad).value() - rows * dense.transpose()).cwiseAbs().maxCoeff() < 1e-12);

  LoRAAdapter<double> bad = ad;
  bad.rank = 3;
  CHECK_THROWS_AS(lora_apply(w, bad, x), ShapeError);
}

TEST_CASE("masked_cross_attention against a per-character loop") {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  CrossAttentionParams<double> p{&store.add("q", "x", testing::random_matrix(8, 8, rng)), &store.add("k", "x", testing::random_matrix(8, 8, rng)),
                                 &store.add("v", "x", testing::random_matrix(8, 8, rng)), &store.add("o", "x", testing::random_matrix(8, 8, rng))};
  const Matrix<double> x = testing::random_matrix(6, 8, rng);
  const std::vector<Matrix<double>> e{testing::random_matrix(3, 8, rng), testing::random_matrix(3, 8, rng)};
  auto run = [&](const Matrix<double>& gate) {
    Tape<double> tape;
    std::vector<Var<double>> ev{tape.constant(e[0]), tape.constant(e[1])};
    return Matrix<double>(masked_cross_attention(tape.constant(x), ev, gate, p, 2).value());
  };
  CHECK(run(Matrix<double>::Zero(2, 6)).isZero());

  Matrix<double> first = Matrix<double>::Zero(2, 6);
  first.row(0).setOnes();
  CHECK((run(first) - cross_attention_oracle(x, e[0], p, 2) * p.wo->value).cwiseAbs().maxCoeff() < 1e-5);

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix<double> gate = testing::random_matrix(2, 6, rng, 0.0, 1.0);
    Matrix<double> want = Matrix<double>::Zero(6, 8);
    for (int c = 0; c < 2; ++c) want += gate.row(c).transpose().asDiagonal() * cross_attention_oracle(x, e[static_cast<std::size_t>(c)], p, 2);
    CHECK((run(gate) - want * p.wo->value).cwiseAbs().maxCoeff() < 1e-5);
  }
  CHECK_THROWS_AS(run(Matrix<double>::Zero(2, 5)), ShapeError);
}

TEST_CASE("denoiser_forward contracts") {
  const DiTConfig cfg = tiny_dit();
  ParamStore<double> store;
  std::mt19937_64 rng(4);
  DenoiserParams<double> p = add_denoiser(store, cfg, rng);
  const TinyInputs in = tiny_inputs(cfg, rng);
  const int s_count = cfg.tokens();
  const GateProvider<double> closed = [&](int, const AttentionTap<double>&) {
    return LayerGates<double>{Matrix<double>::Zero(2, s_count), Matrix<double>::Zero(2, s_count)};
  };

  std::vector<AttentionTap<double>> taps;
  Tape<double> tape;
  const Matrix<double> base = run_tiny(tape, p, in, closed, &taps).value();
  CHECK(base.rows() == s_count);
  CHECK(base.cols() == cfg.output_features());
  REQUIRE(taps.size() == 1);
  CHECK(taps[0].q.rows() == s_count);
  CHECK(taps[0].q.cols() == cfg.heads * cfg.head_dim());
  CHECK(taps[0].k.rows() == 2 * cfg.face_queries);

  TinyInputs other = in;
  for (auto& f : other.faces) f = testing::random_matrix(f.rows(), f.cols(), rng);
  for (auto& a : other.audio) a = testing::random_matrix(a.rows(), a.cols(), rng);
  Tape<double> tape2;
  CHECK(run_tiny(tape2, p, other, closed).value() == base);

  Tape<double> tape3;
  CHECK_THROWS_AS(run_tiny(tape3, p, in, GateProvider<double>{}), ContractError);

  p.head_w->value.setZero();
  p.head_b->value.setZero();
  Tape<double> tape4;
  CHECK(run_tiny(tape4, p, in, closed).value().isZero());
}

TEST_CASE("denoiser gradients match finite differences in every group") {
  const DiTConfig cfg = tiny_dit();
  ParamStore<double> store;
  std::mt19937_64 rng(5);
  DenoiserParams<double> p = add_denoiser(store, cfg, rng);
  // Nonzero LoRA up-projections so the adapters carry gradient both ways.
  for (Parameter<double>* q : store.in_group(group::kLora)) q->value = testing::random_matrix(q->value.rows(), q->value.cols(), rng, -0.3, 0.3);
  const TinyInputs in = tiny_inputs(cfg, rng);
  const int s_count = cfg.tokens();
  const Matrix<double> gf = testing::random_matrix(2, s_count, rng, 0.0, 1.0), ga = testing::random_matrix(2, s_count, rng, 0.0, 1.0);
  const GateProvider<double> gates = [&](int, const AttentionTap<double>&) { return LayerGates<double>{gf, ga}; };
  const Matrix<double> eps = testing::random_matrix(s_count, cfg.output_features(), rng);

  auto loss = [&](bool backward) {
    Tape<double> tape;
    Var<double> l = diffusion_loss(run_tiny(tape, p, in, gates), eps, static_cast<const Matrix<double>*>(nullptr));
    if (backward) tape.backward(l);
    return l.item();
  };
  for (const char* g : {group::kDit, group::kFaceXattn, group::kAudioXattn, group::kLora}) {
    for (Parameter<double>* q : store.in_group(g)) {
      INFO(q->name);
      CHECK(testing::parameter_gradient_error(store, *q, loss, 1e-6, 3) < 1e-4);
    }
  }
}

TEST_CASE("add_noise") {
  const NoiseSchedule s = NoiseSchedule::linear();
  CHECK(s.steps() == 1000);
  CHECK(s.beta.front() == doctest::Approx(1e-4));
  CHECK(s.beta.back() == doctest::Approx(0.02));

  std::mt19937_64 rng(6);
  const Tensor z0 = testing::random_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  const NoiseSchedule tiny = NoiseSchedule::linear(10, 1e-12, 1e-12);
  const Tensor eps = testing::random_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  const Tensor same = add_noise(z0, 0, eps, tiny);
  for (std::size_t i = 0; i < z0.size(); ++i) CHECK(std::abs(same.f32()[i] - z0.f32()[i]) < 1e-5);

  const Tensor scaled = add_noise(z0, 400, Tensor::zeros(z0.shape()), s);
  for (std::size_t i = 0; i < z0.size(); ++i) CHECK(scaled.f32()[i] == doctest::Approx(std::sqrt(s.alpha_bar[400]) * z0.f32()[i]).epsilon(1e-6));
  CHECK_THROWS_AS(add_noise(z0, 1000, eps, s), BoundsError);

  // Monte-Carlo variance.
  const std::size_t n = 100000;
  std::normal_distribution<float> g(0.0f, 1.0f), g0(0.0f, 0.5f);
  std::vector<float> a(n), e(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = g0(rng), e[i] = g(rng);
  const int t = 500;
  const Tensor zt = add_noise(Tensor({n}, a), t, Tensor({n}, e), s);
  double mean = 0, var = 0;
  for (float v : zt.f32()) mean += v;
  mean /= n;
  for (float v : zt.f32()) var += (v - mean) * (v - mean);
  var /= n;
  const double ab = s.alpha_bar[t];
  CHECK(std::abs(var / (ab * 0.25 + (1 - ab)) - 1.0) < 0.02);
}

TEST_CASE("diffusion_loss") {
  std::mt19937_64 rng(7);
  const Tensor eps = testing::random_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  const Tensor hat = testing::random_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  CHECK(diffusion_loss(eps, eps, nullptr, false) == 0.0);
  const double plain = diffusion_loss(hat, eps, nullptr, false);
  double mse = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) mse += std::pow(static_cast<double>(hat.f32()[i]) - eps.f32()[i], 2);
  CHECK(plain == doctest::Approx(mse / static_cast<double>(eps.size())));

  const Tensor zeros = Tensor::zeros({2, 4, 4});
  CHECK(diffusion_loss(hat, eps, &zeros, true) == plain);
  Tensor ones = zeros;
  for (float& v : ones.f32()) v = 1.0f;
  CHECK(diffusion_loss(hat, eps, &ones, true, 1.0) == doctest::Approx(2.0 * plain).epsilon(1e-12));
  CHECK_THROWS_AS(diffusion_loss(hat, Tensor::zeros({2, 3, 4, 2}), nullptr, false), ShapeError);
}
