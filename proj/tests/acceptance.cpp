// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "bya/eval.hpp"
#include "bya/trainer.hpp"

using namespace bya;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kOracleTol = 1e-6;
constexpr double kLossGradTol = 1e-4;
constexpr double kDenoiserGradTol = 1e-3;
constexpr double kSimplexTol = 1e-5;
// Toy-run targets.
constexpr double kToyIou = 0.6;
constexpr double kToyRouting = 0.9;
constexpr double kToySyncFraction = 0.75;
constexpr double kToyCrossingGain = 0.2;
constexpr double kToyPostGap = 0.1;
// The production rate of 1e-5 barely moves a from-scratch toy model in
// 3500 steps; the toy run uses this instead.
constexpr double kToyLearningRate = 1e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::mt19937_64& rng() {
  static std::mt19937_64 r(20240501);
  return r;
}

Matrix<double> rand_matrix(Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng());
  return m;
}

Matrix<double> rand_simplex(Eigen::Index rows, Eigen::Index cols) {
  std::exponential_distribution<double> e(1.0);
  Matrix<double> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = e(rng()) + 1e-2;
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

double rel_err(const Matrix<double>& a, const Matrix<double>& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale < 1e-300 ? 0.0 : (a - b).norm() / scale;
}

/// Relative error between the analytic gradient of `p` and central differences.
double grad_error(ParamStore<double>& store, Parameter<double>& p, const std::function<double(bool)>& loss, int stride = 1) {
  store.zero_grads();
  loss(true);
  Matrix<double> analytic = Matrix<double>::Zero(p.value.rows(), p.value.cols());
  Matrix<double> numeric = analytic;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p.value.size(); i += stride) {
    analytic.data()[i] = p.grad.data()[i];
    const double keep = p.value.data()[i];
    p.value.data()[i] = keep + h;
    const double up = loss(false);
    p.value.data()[i] = keep - h;
    const double down = loss(false);
    p.value.data()[i] = keep;
    numeric.data()[i] = (up - down) / (2 * h);
  }
  return rel_err(analytic, numeric);
}

ClipRecord make_clip(TrajectoryKind kind, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  const ClipDims dims;
  return gen_clip(make_trajectory(kind, dims, r), dims, seed);
}

// ---------------------------------------------------------------- oracles

double ce_oracle(const std::vector<Matrix<double>>& p, const std::vector<Matrix<double>>& y) {
  double acc = 0;
  for (std::size_t l = 0; l < p.size(); ++l)
    for (Eigen::Index s = 0; s < p[l].rows(); ++s)
      for (Eigen::Index c = 0; c < p[l].cols(); ++c) acc -= y[l](s, c) * std::log(std::max(p[l](s, c), 1e-12));
  return acc;
}

double st_oracle(const std::vector<Matrix<double>>& p, const TokenGridDims& g, int n) {
  double acc = 0;
  auto at = [&](const Matrix<double>& m, int t, int h, int w, int c) { return m((t * g.h_len + h) * g.w_len + w, c); };
  for (const auto& m : p)
    for (int c = 0; c < n; ++c)
      for (int t = 0; t < g.t_len; ++t)
        for (int h = 0; h < g.h_len; ++h)
          for (int w = 0; w < g.w_len; ++w) {
            if (t + 1 < g.t_len) acc += std::abs(at(m, t + 1, h, w, c) - at(m, t, h, w, c));
            if (h + 1 < g.h_len) acc += std::abs(at(m, t, h + 1, w, c) - at(m, t, h, w, c));
            if (w + 1 < g.w_len) acc += std::abs(at(m, t, h, w + 1, c) - at(m, t, h, w, c));
          }
  return acc;
}

double layer_oracle(const std::vector<Matrix<double>>& p, int n) {
  double acc = 0;
  const double l = static_cast<double>(p.size());
  for (Eigen::Index s = 0; s < p[0].rows(); ++s)
    for (int c = 0; c < n; ++c) {
      double mean = 0;
      for (const auto& m : p) mean += m(s, c);
      mean /= l;
      for (const auto& m : p) acc += (m(s, c) - mean) * (m(s, c) - mean) / l;
    }
  return acc;
}

Matrix<double> attention_oracle(const Matrix<double>& x, const Matrix<double>& e, const CrossAttentionParams<double>& p, int heads) {
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
      for (double& z : w) sum += z = std::exp(z - mx);
      for (Eigen::Index j = 0; j < e.rows(); ++j)
        for (Eigen::Index c = 0; c < dh; ++c) out(i, h * dh + c) += w[static_cast<std::size_t>(j)] / sum * v(j, h * dh + c);
    }
  return out;
}

// ------------------------------------------------------------- criteria

Outcome constants() {
  const Config c = parse_config("");
  std::vector<std::string> bad;
  auto expect = [&](const char* name, double got, double want) {
    if (got != want) bad.push_back(std::string(name) + "=" + std::to_string(got));
  };
  expect("loss.ce", c.loss.ce, 1.0);
  expect("loss.st", c.loss.st, 0.001);
  expect("loss.layer", c.loss.layer, 8.0);
  expect("sample.cfg_scale", c.sample.cfg_scale, 7.0);
  expect("sample.steps", c.sample.steps, 50);
  expect("train.condition_drop", c.train.condition_drop, 0.05);
  expect("train.stage1_inpaint_drop", c.train.stage1_inpaint_drop, 0.5);
  expect("train.dynamic_mask_rate", c.train.dynamic_mask_rate, 0.5);
  expect("train.lr", c.train.lr, 1e-5);
  const StagePlan s1 = StagePlan::make(1, c.train), s2 = StagePlan::make(2, c.train);
  expect("stage1.drops.inpaint", s1.drops.inpaint, 0.5);
  expect("stage2.drops.audio", s2.drops.audio, 0.05);
  std::string detail = "lambda=(1,0.001,8) cfg=7 steps=50 drop=0.05 inpaint_drop=0.5 dyn_rate=0.5 lr=1e-5";
  for (const auto& b : bad) detail += " MISMATCH " + b;
  return {bad.empty(), detail};
}

Outcome loss_oracles() {
  const int trials = 120;
  double worst_ce = 0, worst_st = 0, worst_layer = 0, worst_av = 0, worst_xattn = 0;
  for (int i = 0; i < trials; ++i) {
    const TokenGridDims g{1 + static_cast<int>(rng()() % 3), 1 + static_cast<int>(rng()() % 3), 1 + static_cast<int>(rng()() % 3)};
    const int n = 1 + static_cast<int>(rng()() % 3);
    const int layers = 2 + static_cast<int>(rng()() % 3);
    Tape<double> tape;
    std::vector<Matrix<double>> pm, ym;
    std::vector<Var<double>> pv;
    for (int l = 0; l < layers; ++l) {
      pm.push_back(rand_simplex(g.tokens(), n + 1));
      ym.push_back(rand_simplex(g.tokens(), n + 1));
      pv.push_back(tape.constant(pm.back()));
    }
    worst_ce = std::max(worst_ce, std::abs(loss_ce(pv, ym).item() - ce_oracle(pm, ym)));
    worst_st = std::max(worst_st, std::abs(loss_st(pv, g, n).item() - st_oracle(pm, g, n)));
    worst_layer = std::max(worst_layer, std::abs(loss_layer(pv, n).item() - layer_oracle(pm, n)));

    AssignmentMatrix a(n, n);
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = static_cast<int>(rng()() % 2);
    const Matrix<double> cv = rand_matrix(n, g.tokens(), 0.0, 1.0);
    const Matrix<double> av = compose_av(a, cv);
    for (int r = 0; r < n; ++r)
      for (int s = 0; s < g.tokens(); ++s) {
        double acc = 0;
        for (int k = 0; k < n; ++k) acc += a(r, k) * cv(k, s);
        worst_av = std::max(worst_av, std::abs(av(r, s) - acc));
      }

    ParamStore<double> store;
    const int d = 8, heads = 2;
    CrossAttentionParams<double> p{&store.add("q", "x", rand_matrix(d, d)), &store.add("k", "x", rand_matrix(d, d)),
                                   &store.add("v", "x", rand_matrix(d, d)), &store.add("o", "x", rand_matrix(d, d))};
    const Matrix<double> x = rand_matrix(g.tokens(), d);
    std::vector<Matrix<double>> em;
    std::vector<Var<double>> ev;
    for (int c = 0; c < n; ++c) {
      em.push_back(rand_matrix(1 + static_cast<int>(rng()() % 4), d));
      ev.push_back(tape.constant(em.back()));
    }
    const Matrix<double> gate = rand_matrix(n, g.tokens(), 0.0, 1.0);
    const Matrix<double> got = masked_cross_attention(tape.constant(x), ev, gate, p, heads).value();
    Matrix<double> want = Matrix<double>::Zero(g.tokens(), d);
    for (int c = 0; c < n; ++c) want += gate.row(c).transpose().asDiagonal() * attention_oracle(x, em[static_cast<std::size_t>(c)], p, heads);
    worst_xattn = std::max(worst_xattn, (got - want * p.wo->value).cwiseAbs().maxCoeff());
  }
  std::ostringstream os;
  os << trials << " instances each; max abs err ce=" << worst_ce << " st=" << worst_st << " layer=" << worst_layer
     << " compose_av=" << worst_av << " xattn=" << worst_xattn;
  const bool ok = std::max({worst_ce, worst_st, worst_layer, worst_av, worst_xattn}) < kOracleTol;
  return {ok, os.str()};
}

RouterConfig tiny_router() {
  RouterConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.face_queries = 2;
  cfg.grid = {2, 2, 2};
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.block_heads = 2;
  return cfg;
}

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

Outcome gradients() {
  std::ostringstream os;
  bool ok = true;

  // loss_router, each term and the sum, with respect to the probabilities.
  {
    const TokenGridDims g{2, 2, 3};
    ParamStore<double> store;
    std::vector<Parameter<double>*> probs;
    std::vector<Matrix<double>> targets;
    for (int l = 0; l < 3; ++l) {
      probs.push_back(&store.add("p" + std::to_string(l), "x", rand_simplex(g.tokens(), 3)));
      targets.push_back(rand_simplex(g.tokens(), 3));
    }
    const RouterLossWeights weights[4] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0.001, 8}};
    double worst = 0;
    for (const auto& wts : weights) {
      auto loss = [&](bool backward) {
        Tape<double> tape;
        std::vector<Var<double>> pv;
        for (auto* p : probs) pv.push_back(tape.param(*p));
        Var<double> l = loss_router(pv, targets, g, 2, wts);
        if (backward) tape.backward(l);
        return l.item();
      };
      for (auto* p : probs) worst = std::max(worst, grad_error(store, *p, loss));
    }
    os << "loss_router=" << worst;
    ok = ok && worst < kLossGradTol;
  }

  // audio_project.
  {
    ParamStore<double> store;
    ConditioningConfig cfg;
    AudioEncoderParams<double> p = add_audio_encoder(store, cfg, rng());
    Tensor feats = Tensor::zeros({2, 32, 8});
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (float& v : feats.f32()) v = u(rng());
    const Matrix<double> w = rand_matrix(8, 64);
    auto loss = [&](bool backward) {
      Tape<double> tape;
      const auto out = audio_project(tape, p, feats, 8);
      Var<double> total = ad::add(ad::sum(ad::mul(out[0], tape.constant(w))), ad::sum(ad::mul(out[1], tape.constant(w))));
      if (backward) tape.backward(total);
      return total.item();
    };
    double worst = 0;
    for (Parameter<double>* q : store.all()) {
      if (q->name == "audio.null") continue;
      worst = std::max(worst, grad_error(store, *q, loss));
    }
    os << " audio_project=" << worst;
    ok = ok && worst < kLossGradTol;
  }

  // router_forward under loss_router, every parameter.
  {
    const RouterConfig cfg = tiny_router();
    ParamStore<double> store;
    RouterParams<double> p = add_router(store, cfg, rng());
    std::vector<Matrix<double>> qs, ks, targets;
    for (int l = 0; l < cfg.layers; ++l) {
      qs.push_back(rand_matrix(cfg.grid.tokens(), cfg.heads * cfg.head_dim));
      ks.push_back(rand_matrix(cfg.keys(), cfg.heads * cfg.head_dim));
      targets.push_back(rand_simplex(cfg.grid.tokens(), 3));
    }
    auto loss = [&](bool backward) {
      Tape<double> tape;
      std::vector<AttentionTap<double>> taps;
      for (int l = 0; l < cfg.layers; ++l)
        taps.push_back({tape.constant(qs[static_cast<std::size_t>(l)]), tape.constant(ks[static_cast<std::size_t>(l)])});
      Var<double> total = loss_router(router_forward(p, taps).probs, targets, cfg.grid, 2, RouterLossWeights{});
      if (backward) tape.backward(total);
      return total.item();
    };
    double worst = 0;
    for (Parameter<double>* q : store.all()) worst = std::max(worst, grad_error(store, *q, loss));
    os << " router_forward=" << worst;
    ok = ok && worst < kLossGradTol;
  }

  // Full denoiser, one parameter per group.
  {
    const DiTConfig cfg = tiny_dit();
    ParamStore<double> store;
    DenoiserParams<double> p = add_denoiser(store, cfg, rng());
    for (Parameter<double>* q : store.in_group(group::kLora)) q->value = rand_matrix(q->value.rows(), q->value.cols(), -0.3, 0.3);
    Tensor latent = Tensor::zeros({2, 9, 4, 4});
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (float& v : latent.f32()) v = u(rng());
    const Matrix<double> text = rand_matrix(cfg.text_len, cfg.width);
    const std::vector<Matrix<double>> faces{rand_matrix(2, cfg.width), rand_matrix(2, cfg.width)};
    const std::vector<Matrix<double>> audio{rand_matrix(2, cfg.width), rand_matrix(2, cfg.width)};
    const Matrix<double> gf = rand_matrix(2, cfg.tokens(), 0, 1), ga = rand_matrix(2, cfg.tokens(), 0, 1);
    const Matrix<double> eps = rand_matrix(cfg.tokens(), cfg.output_features());
    const GateProvider<double> gates = [&](int, const AttentionTap<double>&) { return LayerGates<double>{gf, ga}; };
    auto loss = [&](bool backward) {
      Tape<double> tape;
      DenoiserInputs<double> in;
      in.latent = &latent;
      in.t = 400;
      in.text = tape.constant(text);
      for (const auto& f : faces) in.faces.push_back(tape.constant(f));
      for (const auto& a : audio) in.audio.push_back(tape.constant(a));
      Var<double> l = diffusion_loss(denoiser_forward(p, in, gates), eps, static_cast<const Matrix<double>*>(nullptr));
      if (backward) tape.backward(l);
      return l.item();
    };
    double worst = 0;
    std::string names;
    for (const char* g : {group::kDit, group::kFaceXattn, group::kAudioXattn, group::kLora}) {
      const auto params = store.in_group(g);
      Parameter<double>* q = params[rng()() % params.size()];
      names += " " + q->name;
      worst = std::max(worst, grad_error(store, *q, loss));
    }
    os << " denoiser=" << worst << " (" << names.substr(1) << ")";
    ok = ok && worst < kDenoiserGradTol;
  }
  return {ok, os.str()};
}

Outcome detach() {
  Model<double> model = build_model<double>(ModelConfig{}, 11);
  Config config;
  const NoiseSchedule schedule = NoiseSchedule::linear();
  const ModelConfig& mc = model.cfg;
  StagePlan plan = StagePlan::make(3, config.train);
  model.store.set_trainable(plan.trainable);
  std::vector<ClipRecord> clips;
  for (int i = 0; i < 4; ++i) clips.push_back(make_clip(static_cast<TrajectoryKind>(i % 3), 100 + static_cast<std::uint64_t>(i)));
  const std::vector<TrainingExample> batch = prepare_examples(clips, mc);

  auto router_grad_norm = [&] {
    double acc = 0;
    for (Parameter<double>* p : model.store.in_group(group::kRouter)) acc += p->grad.squaredNorm();
    return std::sqrt(acc);
  };
  auto non_router_grad_norm = [&] {
    double acc = 0;
    for (Parameter<double>* p : model.store.all())
      if (p->group != group::kRouter) acc += p->grad.squaredNorm();
    return std::sqrt(acc);
  };

  // Build the stage-3 graph once per loss and backpropagate that loss alone.
  auto run = [&](bool diffusion) {
    model.store.zero_grads();
    std::mt19937_64 r(5);
    for (const TrainingExample& ex : batch) {
      const ClipConditions cond = clip_conditions(ex.clip, mc.spatial_factor, config.train.face_noise, r);
      const Tensor z0 = to_diffusion_space(avg_pool_spatial(ex.clip.video, mc.spatial_factor));
      Tensor eps = Tensor::zeros(z0.shape());
      std::normal_distribution<float> normal(0.0f, 1.0f);
      for (float& e : eps.f32()) e = normal(r);
      const int t = std::uniform_int_distribution<int>(0, schedule.steps() - 1)(r);
      const Tensor input = model_input(add_noise(z0, t, eps, schedule), cond, ConditionSet{});
      RoutingMask gt{mc.dit.grid(), mc.dit.characters, std::vector<Matrix<float>>(static_cast<std::size_t>(mc.dit.layers), ex.target)};
      const RoutingMask forced = teacher_force_mask(gt, plan.teacher, r);
      const AssignmentMatrix a_ac = assignment_from_tensor(ex.clip.a_ac);
      Tape<double> tape;
      DenoiserInputs<double> in = encode_conditions(model, tape, cond, ConditionSet{}, true);
      in.latent = &input;
      in.t = t;
      std::vector<AttentionTap<double>> taps;
      const GateProvider<double> gates = [&](int layer, const AttentionTap<double>&) { return gates_from_mask<double>(forced, layer, a_ac, false); };
      Var<double> eps_hat = denoiser_forward(model.dit, in, gates, &taps);
      Var<double> l_d = diffusion_loss(eps_hat, patchify_rows<double>(eps, mc.dit.patch), static_cast<const Matrix<double>*>(nullptr));
      const std::vector<Matrix<double>> targets(static_cast<std::size_t>(mc.dit.layers), ex.target.cast<double>());
      Var<double> l_r = loss_router(router_forward(model.router, taps).probs, targets, mc.dit.grid(), mc.dit.characters, config.loss);
      tape.backward(diffusion ? l_d : l_r);
    }
    return std::pair{router_grad_norm(), non_router_grad_norm()};
  };
  const auto [d_router, d_rest] = run(true);
  const auto [r_router, r_rest] = run(false);

  // The training step itself: the router term leaves every other gradient untouched.
  auto step_grads = [&](bool with_router) {
    StagePlan p = plan;
    p.router_loss = with_router;
    model.store.zero_grads();
    std::mt19937_64 r(6);
    for (const TrainingExample& ex : batch) train_example(model, p, ex, ConditionSet{}, config, schedule, r, 0.25);
    std::vector<Matrix<double>> g;
    for (Parameter<double>* q : model.store.all())
      if (q->group != group::kRouter) g.push_back(q->grad);
    return g;
  };
  const bool same_rest = step_grads(false) == step_grads(true);

  std::ostringstream os;
  os << "|dL_d/dRouter|=" << d_router << " |dL_router/dRouter|=" << r_router << " |dL_router/dOther|=" << r_rest
     << " |dL_d/dOther|=" << d_rest << " step grads outside router unchanged=" << (same_rest ? "yes" : "no");
  return {d_router == 0.0 && r_router > 0.0 && r_rest == 0.0 && d_rest > 0.0 && same_rest, os.str()};
}

Outcome mask_invariants() {
  Model<float> model = build_model<float>(ModelConfig{}, 12);
  const RouterConfig& cfg = model.cfg.router;
  int simplex_bad = 0, onehot_bad = 0, idem_bad = 0;
  double worst = 0;
  std::uniform_real_distribution<double> scale(-2.0, 1.5);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const int total = 1000;
  for (int i = 0; i < total; ++i) {
    // Spread tap magnitudes so outputs range from flat to confident.
    const float s = static_cast<float>(std::pow(10.0, scale(rng())));
    Tape<float> tape;
    std::vector<AttentionTap<float>> taps;
    for (int l = 0; l < cfg.layers; ++l) {
      Matrix<float> q(cfg.grid.tokens(), cfg.heads * cfg.head_dim), k(cfg.keys(), cfg.heads * cfg.head_dim);
      for (Eigen::Index j = 0; j < q.size(); ++j) q.data()[j] = s * normal(rng());
      for (Eigen::Index j = 0; j < k.size(); ++j) k.data()[j] = s * normal(rng());
      taps.push_back({tape.constant(q), tape.constant(k)});
    }
    const RoutingMask mask = to_routing_mask(router_forward(model.router, taps), cfg.grid, cfg.characters);
    for (const auto& layer : mask.layers) {
      const double err = (layer.cast<double>().rowwise().sum().array() - 1.0).abs().maxCoeff();
      worst = std::max(worst, err);
      if (err > kSimplexTol || (layer.array() < 0.0f).any()) ++simplex_bad;
    }
    const RoutingMask refined = refine_mask(mask, 0.6, 64);
    for (const auto& layer : refined.layers)
      if (!((layer.array() == 0.0f) || (layer.array() == 1.0f)).all() || !(layer.rowwise().sum().array() == 1.0f).all()) ++onehot_bad;
    const RoutingMask again = refine_mask(refined, 0.6, 64);
    for (std::size_t l = 0; l < again.layers.size(); ++l)
      if (again.layers[l] != refined.layers[l]) ++idem_bad;
  }
  std::ostringstream os;
  os << total << " outputs; max |row sum - 1|=" << worst << " simplex violations=" << simplex_bad << " non-one-hot=" << onehot_bad
     << " non-idempotent=" << idem_bad;
  return {simplex_bad == 0 && onehot_bad == 0 && idem_bad == 0, os.str()};
}

Outcome nfe() {
  Model<float> model = build_model<float>(ModelConfig{}, 13);
  const NoiseSchedule schedule = NoiseSchedule::linear();
  const ClipRecord clip = make_clip(TrajectoryKind::crossing, 14);
  std::ostringstream os;
  bool ok = true;
  for (auto [mode, want] : {std::pair{RouterMode::pre, 100}, std::pair{RouterMode::intra, 100}, std::pair{RouterMode::post, 200}}) {
    std::mt19937_64 r(1);
    SampleRequest req;
    req.mode = mode;
    req.steps = 50;
    req.conditions = clip_conditions(clip, 4, 0.0, r);
    req.a_ac = assignment_from_tensor(clip.a_ac);
    const SampleResult res = sample(model, req, schedule);
    os << to_string(mode) << "=" << res.nfe << " ";
    ok = ok && res.nfe == want;
  }
  return {ok, os.str() + "(want 100/100/200)"};
}

double mean_iou(const ClipMetrics& m) {
  double acc = 0;
  for (double v : m.mask_iou) acc += v;
  return acc / static_cast<double>(m.mask_iou.size());
}

Outcome toy() {
  const fs::path root = fs::temp_directory_path() / "bya_acceptance_toy";
  fs::remove_all(root);
  DatasetOptions dopt;
  dopt.count = 288;
  dopt.test_fraction = 32.0 / 288.0;
  const DatasetManifest manifest = gen_dataset(dopt, root / "data", 1);
  const auto train_entries = manifest.split("train");
  const auto test_entries = manifest.split("test");

  Config config;
  config.train.lr = kToyLearningRate;
  Model<float> model = build_model<float>(config.model, config.train.seed);
  std::vector<ClipRecord> clips;
  for (const ManifestEntry* e : train_entries) clips.push_back(load_clip(manifest.root / e->path));
  const std::vector<TrainingExample> data = prepare_examples(clips, model.cfg);

  std::vector<double> stage1_ld;
  for (int stage = 1; stage <= 3; ++stage) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainReport r = run_stage(StagePlan::make(stage, config.train), data, model, config, config.train.seed);
    if (stage == 1)
      for (const auto& s : r.log) stage1_ld.push_back(s.l_d);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "  stage " << stage << ": " << r.log.size() << " steps, " << secs << " s, last L_d " << r.log.back().l_d
              << " last L_router " << r.log.back().l_router << "\n";
  }
  const std::size_t tenth = stage1_ld.size() / 10;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < tenth; ++i) first += stage1_ld[i], last += stage1_ld[stage1_ld.size() - 1 - i];

  EvalOptions opt = EvalOptions::from_config(config);
  std::map<RouterMode, EvalReport> reports;
  for (RouterMode mode : {RouterMode::intra, RouterMode::pre, RouterMode::post}) {
    opt.mode = mode;
    reports[mode] = evaluate(model, manifest, "test", opt);
    std::cerr << "  eval " << to_string(mode) << ": iou " << reports[mode].mask_iou[0] << "/" << reports[mode].mask_iou[1] << " routing "
              << reports[mode].routing_accuracy << " sync+ " << reports[mode].sync_positive_fraction << "\n";
  }
  const EvalReport& intra = reports[RouterMode::intra];
  const EvalReport& pre = reports[RouterMode::pre];
  const EvalReport& post = reports[RouterMode::post];

  double cross_intra = 0, cross_pre = 0;
  int crossing = 0;
  for (std::size_t i = 0; i < intra.clips.size(); ++i)
    if (intra.clips[i].kind == TrajectoryKind::crossing) {
      cross_intra += mean_iou(intra.clips[i]);
      cross_pre += mean_iou(pre.clips[i]);
      ++crossing;
    }
  cross_intra /= std::max(1, crossing);
  cross_pre /= std::max(1, crossing);
  const double intra_iou = (intra.mask_iou[0] + intra.mask_iou[1]) / 2, post_iou = (post.mask_iou[0] + post.mask_iou[1]) / 2;

  const bool a = intra.mask_iou[0] >= kToyIou && intra.mask_iou[1] >= kToyIou;
  const bool b = intra.routing_accuracy >= kToyRouting;
  const bool c = intra.sync_positive_fraction >= kToySyncFraction;
  const bool d = crossing > 0 && cross_intra - cross_pre >= kToyCrossingGain;
  const bool e = post_iou - intra_iou <= kToyPostGap;
  const bool f = last < first;
  std::ostringstream os;
  os << train_entries.size() << " train/" << test_entries.size() << " test; "
     << "(a) intra IoU " << intra.mask_iou[0] << "," << intra.mask_iou[1] << (a ? " ok" : " LOW") << "; (b) routing "
     << intra.routing_accuracy << (b ? " ok" : " LOW") << "; (c) sync>0 on " << intra.sync_positive_fraction << (c ? " ok" : " LOW")
     << "; (d) crossing intra-pre " << cross_intra << "-" << cross_pre << "=" << cross_intra - cross_pre << (d ? " ok" : " LOW")
     << "; (e) post-intra " << post_iou << "-" << intra_iou << "=" << post_iou - intra_iou << (e ? " ok" : " HIGH")
     << "; stage-1 L_d first/last tenth " << first / static_cast<double>(tenth) << "/" << last / static_cast<double>(tenth);
  fs::remove_all(root);
  return {a && b && c && d && e && f, os.str()};
}

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& diff) {
  std::set<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) names.insert(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b)) names.insert(fs::relative(e.path(), b).string());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  for (const auto& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n)) return diff = n, false;
    if (fs::is_regular_file(a / n) && slurp(a / n) != slurp(b / n)) return diff = n, false;
  }
  return true;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "bya_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cli = BYA_CLI_PATH;
  std::ostringstream os;
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const fs::path r = root / run;
    const std::string data = (r / "data").string();
    if (shell(cli + " gen-data --count 12 --seed 5 --out " + data) != 0 ||
        shell(cli + " train --stage 1 --steps 10 --batch 2 --seed 3 --data " + data + "/manifest.json --out " + (r / "ck").string()) != 0 ||
        shell(cli + " sample --mode pre --steps 10 --seed 9 --ckpt " + (r / "ck").string() + " --clip " + data + "/clip_00000 --out " +
              (r / "sample").string()) != 0 ||
        shell(cli + " train --stage 2 --steps 2 --batch 2 --seed 3 --resume " + (r / "ck").string() + " --data " + data +
              "/manifest.json --out " + (r / "ck2").string()) != 0 ||
        shell(cli + " train --stage 3 --steps 2 --batch 2 --seed 3 --resume " + (r / "ck2").string() + " --data " + data +
              "/manifest.json --out " + (r / "ck3").string()) != 0 ||
        shell(cli + " sample --mode intra --steps 10 --seed 9 --ckpt " + (r / "ck3").string() + " --clip " + data + "/clip_00001 --out " +
              (r / "sample3").string()) != 0) {
      return {false, std::string("a CLI command failed in run ") + run};
    }
  }
  for (const char* part : {"data", "ck", "sample", "ck3", "sample3"}) {
    std::string diff;
    const bool same = same_tree(root / "a" / part, root / "b" / part, diff);
    os << part << (same ? " identical; " : " DIFFERS at " + diff + "; ");
    ok = ok && same;
  }
  fs::remove_all(root);
  return {ok, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"constants fidelity", constants},
      {"loss oracle equivalence", loss_oracles},
      {"gradient correctness", gradients},
      {"teacher-forcing detach", detach},
      {"mask invariants", mask_invariants},
      {"NFE accounting", nfe},
      {"toy end-to-end", toy},
      {"determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << " (" << secs << " s): " << o.detail << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
