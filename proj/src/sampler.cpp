#include "bya/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>

#include <json.hpp>

namespace bya {

std::string to_string(RouterMode mode) {
  switch (mode) {
    case RouterMode::pre: return "pre";
    case RouterMode::post: return "post";
    case RouterMode::intra: return "intra";
  }
  return "intra";
}

RouterMode router_mode_from_string(const std::string& name) {
  if (name == "pre") return RouterMode::pre;
  if (name == "post") return RouterMode::post;
  if (name == "intra") return RouterMode::intra;
  throw ConfigError("unknown router mode '" + name + "' (expected pre, post or intra)");
}

template <typename S>
Matrix<S> cfg_combine(const Matrix<S>& eps_uncond, const Matrix<S>& eps_cond, double scale) {
  if (eps_uncond.rows() != eps_cond.rows() || eps_uncond.cols() != eps_cond.cols())
    throw ShapeError("cfg_combine: conditional and unconditional predictions differ in shape");
  return eps_uncond + static_cast<S>(scale) * (eps_cond - eps_uncond);
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
  if (eps_uncond.shape() != eps_cond.shape()) throw ShapeError("cfg_combine: conditional and unconditional predictions differ in shape");
  Tensor out = eps_uncond;
  auto u = eps_uncond.f32();
  auto c = eps_cond.f32();
  auto o = out.f32();
  const auto s = static_cast<float>(scale);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = u[i] + s * (c[i] - u[i]);
  return out;
}

std::vector<int> sampling_timesteps(int diffusion_steps, int steps) {
  if (steps < 1 || steps > diffusion_steps) throw ParameterError("sampling steps must lie in [1, diffusion steps]");
  std::vector<int> ts;
  for (int k = steps - 1; k >= 0; --k)
    ts.push_back(static_cast<int>(static_cast<long>(k) * diffusion_steps / steps));
  return ts;
}

Tensor decode_for_view(const Tensor& video_latent, int factor) {
  if (video_latent.rank() != 4) throw ShapeError("decode_for_view expects T x C x H x W");
  if (factor < 1) throw ParameterError("upsampling factor must be positive");
  const std::size_t frames = video_latent.dim(0), ch = video_latent.dim(1), h = video_latent.dim(2), w = video_latent.dim(3);
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t oh = h * f, ow = w * f;
  std::vector<std::uint8_t> out(frames * ch * oh * ow);
  auto src = video_latent.f32();
  for (std::size_t p = 0; p < frames * ch; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const float v = std::clamp(src[(p * h + y / f) * w + x / f], 0.0f, 1.0f);
        out[(p * oh + y) * ow + x] = static_cast<std::uint8_t>(std::floor(static_cast<double>(v) * 255.0 + 0.5));
      }
  return Tensor({frames, ch, oh, ow}, std::move(out));
}

namespace {

using GateFn = std::function<LayerGates<float>(int layer, const AttentionTap<float>& tap, Matrix<float>* used)>;

Matrix<float> softmax_rows(const Matrix<float>& logits) {
  Matrix<float> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto e = (logits.row(r).array() - logits.row(r).maxCoeff()).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

ConditionSet both(const ConditionSet& a, const ConditionSet& b) {
  return {a.text && b.text, a.ref && b.ref, a.audio && b.audio, a.inpaint && b.inpaint};
}

struct Sampler {
  Model<float>& model;
  const SampleRequest& req;
  const NoiseSchedule& schedule;
  std::mt19937_64 rng;
  int nfe = 0;

  Matrix<float> forward(const Tensor& x, int t, const ConditionSet& embed, const ConditionSet& input_keep,
                        const GateProvider<float>& gates) {
    Tape<float> tape;
    DenoiserInputs<float> in = encode_conditions(model, tape, req.conditions, embed, req.use_audio);
    const Tensor input = model_input(x, req.conditions, input_keep);
    in.latent = &input;
    in.t = t;
    ++nfe;
    return denoiser_forward(model.dit, in, gates).value();
  }

  /// One guided pass from fresh noise; returns the final x0 in diffusion space.
  Tensor pass(const ConditionSet& embed_keep, const GateFn& gate_fn, std::vector<RoutingMask>* masks) {
    const DiTConfig& d = model.cfg.dit;
    const TokenGridDims grid = d.grid();
    const auto frames = static_cast<std::size_t>(d.frames), ch = static_cast<std::size_t>(d.latent_channels);
    Tensor x = Tensor::zeros({frames, ch, static_cast<std::size_t>(d.height), static_cast<std::size_t>(d.latent_width)});
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (float& v : x.f32()) v = normal(rng);

    const ConditionSet none{false, false, false, false};
    const std::vector<int> ts = sampling_timesteps(schedule.steps(), req.steps);
    Tensor x0;
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const int t = ts[k];
      std::vector<LayerGates<float>> used(static_cast<std::size_t>(d.layers));
      RoutingMask step{grid, d.characters, std::vector<Matrix<float>>(static_cast<std::size_t>(d.layers))};
      const GateProvider<float> cond_gates = [&](int layer, const AttentionTap<float>& tap) {
        auto& slot = used[static_cast<std::size_t>(layer)];
        slot = gate_fn(layer, tap, &step.layers[static_cast<std::size_t>(layer)]);
        return slot;
      };
      // The unconditional branch reuses the conditional branch's gates.
      const GateProvider<float> uncond_gates = [&](int layer, const AttentionTap<float>&) {
        return used[static_cast<std::size_t>(layer)];
      };
      const Matrix<float> eps_c = forward(x, t, both(embed_keep, req.keep), req.keep, cond_gates);
      const Matrix<float> eps_u = forward(x, t, none, none, uncond_gates);
      const Tensor eps = unpatchify_rows(cfg_combine(eps_u, eps_c, req.cfg_scale), grid, d.latent_channels, d.patch);
      if (masks != nullptr) masks->push_back(std::move(step));

      const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
      x0 = x;
      auto xv = x.f32();
      auto x0v = x0.f32();
      auto ev = eps.f32();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double pred = (xv[i] - std::sqrt(1.0 - ab) * ev[i]) / std::sqrt(ab);
        x0v[i] = static_cast<float>(std::clamp(pred, -1.0, 1.0));
      }
      if (k + 1 == ts.size()) break;
      const double ab_prev = schedule.alpha_bar[static_cast<std::size_t>(ts[k + 1])];
      const double alpha = ab / ab_prev;
      const double beta = 1.0 - alpha;
      const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
      const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      for (std::size_t i = 0; i < xv.size(); ++i)
        xv[i] = static_cast<float>(c0 * x0v[i] + ct * xv[i] + sigma * normal(rng));
    }
    return x0;
  }
};

AssignmentMatrix resolve_assignment(const SampleRequest& req, int characters) {
  if (req.a_ac) return *req.a_ac;
  if (req.alignment) return predict_audio_character_matrix(correlation_scorer()(*req.alignment));
  if (!req.use_audio) return AssignmentMatrix::Identity(characters, characters);
  throw InputError("audio-to-character assignment neither given nor predictable");
}

}  // namespace

SampleResult sample(Model<float>& model, const SampleRequest& req, const NoiseSchedule& schedule) {
  if (req.steps < 1) throw ParameterError("steps must be at least 1");
  if (!(req.cfg_scale >= 0.0)) throw ParameterError("cfg_scale must be nonnegative");
  const DiTConfig& d = model.cfg.dit;
  const TokenGridDims grid = d.grid();
  const int n = d.characters;
  if (req.mode == RouterMode::pre && req.conditions.inpaint_frame.rank() != 3)
    throw InputError("pre-denoise routing needs an inpainting frame");
  if (req.mode == RouterMode::intra && !req.router_trained) throw ConfigError("intra-denoise routing needs a trained router checkpoint");

  SampleResult result;
  result.mode = req.mode;
  result.seed = req.seed;
  result.a_ac = resolve_assignment(req, n);
  const AssignmentMatrix a_ac = result.a_ac;
  Sampler s{model, req, schedule, std::mt19937_64(req.seed)};

  auto static_gates = [&a_ac](const RoutingMask& mask) -> GateFn {
    return [&a_ac, mask](int layer, const AttentionTap<float>&, Matrix<float>* used) {
      *used = mask.layers[static_cast<std::size_t>(layer)];
      return gates_from_mask<float>(mask, layer, a_ac, true);
    };
  };

  const ConditionSet all{};
  Tensor x0;
  switch (req.mode) {
    case RouterMode::pre: {
      const RoutingMask mask = pre_denoise_mask(req.conditions.inpaint_frame, req.conditions.refs, grid, d.layers);
      x0 = s.pass(all, static_gates(mask), &result.masks);
      break;
    }
    case RouterMode::post: {
      // Coarse pass: zero gates and null face/audio embeddings.
      const ConditionSet coarse{true, false, false, true};
      const Tensor coarse_x0 = s.pass(coarse, static_gates(RoutingMask::background(grid, n, d.layers)), nullptr);
      const RoutingMask mask = segment_coarse_video(from_diffusion_space(coarse_x0), req.conditions.refs, grid, d.layers);
      x0 = s.pass(all, static_gates(mask), &result.masks);
      break;
    }
    case RouterMode::intra: {
      const GateFn routed = [&](int layer, const AttentionTap<float>& tap, Matrix<float>* used) {
        const Matrix<float> probs = softmax_rows(router_layer_logits(model.router, layer, tap).value());
        const RoutingMask refined = refine_mask(RoutingMask{grid, n, {probs}}, req.theta, req.refine_iters);
        *used = refined.layers[0];
        return gates_from_mask<float>(refined, 0, a_ac, true);
      };
      x0 = s.pass(all, routed, &result.masks);
      break;
    }
  }
  result.nfe = s.nfe;
  result.video_latent = from_diffusion_space(x0);
  result.view = decode_for_view(result.video_latent, model.cfg.spatial_factor);
  return result;
}

std::string sample_result_json(const SampleResult& result) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(result.mode);
  j["seed"] = result.seed;
  j["nfe"] = result.nfe;
  j["steps"] = result.masks.size();
  auto rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < result.a_ac.rows(); ++r) {
    auto row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < result.a_ac.cols(); ++c) row.push_back(result.a_ac(r, c));
    rows.push_back(row);
  }
  j["a_ac"] = rows;
  return j.dump(2) + "\n";
}

void write_sample(const SampleResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_tensor(result.video_latent, dir / "video.byat");
  write_tensor(result.view, dir / "view.u8.byat");
  for (std::size_t k = 0; k < result.masks.size(); ++k)
    write_tensor(result.masks[k].to_tensor(), dir / ("masks_step" + std::to_string(k) + ".byat"));
  std::ofstream out(dir / "result.json", std::ios::binary);
  out << sample_result_json(result);
  if (!out) throw IoError("cannot write " + (dir / "result.json").string());
}

template Matrix<float> cfg_combine(const Matrix<float>&, const Matrix<float>&, double);
template Matrix<double> cfg_combine(const Matrix<double>&, const Matrix<double>&, double);

}  // namespace bya
