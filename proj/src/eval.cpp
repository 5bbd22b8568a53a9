#include "bya/eval.hpp"

#include <random>

#include <json.hpp>

namespace bya {

EvalOptions EvalOptions::from_config(const Config& config) {
  EvalOptions o;
  o.mode = router_mode_from_string(config.sample.mode);
  o.steps = config.sample.steps;
  o.cfg_scale = config.sample.cfg_scale;
  o.theta = config.sample.theta;
  o.refine_iters = config.sample.refine_iters;
  o.face_noise = config.train.face_noise;
  o.diffusion_steps = config.sample.diffusion_steps;
  o.beta_start = config.sample.beta_start;
  o.beta_end = config.sample.beta_end;
  o.seed = config.sample.seed;
  return o;
}

std::vector<double> mask_iou(const RoutingMask& mask, const std::vector<int>& truth) {
  const std::vector<int> pred = argmax_labels(mask.layer_mean());
  std::vector<double> out;
  for (int c = 0; c < mask.characters; ++c) out.push_back(label_iou(pred, truth, c));
  return out;
}

double sync_proxy_margin(const ClipRecord& clip, const Tensor& video, int pixel_scale) {
  const AssignmentMatrix a_ac = assignment_from_tensor(clip.a_ac);
  const auto n = static_cast<std::size_t>(a_ac.rows());
  if (n < 2) throw UnsupportedError("sync proxy needs at least two audio streams");
  const int frames = static_cast<int>(video.dim(0));
  const std::size_t ta = clip.envelopes.dim(1);
  std::vector<std::vector<double>> env;
  for (std::size_t a = 0; a < n; ++a)
    env.push_back(to_frame_rate(clip.envelopes.f32().subspan(a * ta, ta), frames));
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t assigned = 0;
    for (std::size_t a = 0; a < n; ++a)
      if (a_ac(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(c)) == 1) assigned = a;
    const std::size_t swapped = (assigned + 1) % n;
    const std::vector<double> mouth = mouth_signal(video, clip.mouth_boxes[c], pixel_scale);
    total += pearson(mouth, env[assigned]) - pearson(mouth, env[swapped]);
  }
  return total / static_cast<double>(n);
}

double routing_accuracy(const ClipRecord& clip, const Tensor& video, int pixel_scale) {
  const AssignmentMatrix predicted = predict_audio_character_matrix(correlation_scorer()(scorer_input(clip, video, pixel_scale)));
  return predicted == assignment_from_tensor(clip.a_ac) ? 1.0 : 0.0;
}

double eps_mse(Model<float>& model, const ClipRecord& clip, const ClipConditions& cond, const EvalOptions& opt, std::uint64_t seed) {
  const ModelConfig& mc = model.cfg;
  const NoiseSchedule schedule = NoiseSchedule::linear(opt.diffusion_steps, opt.beta_start, opt.beta_end);
  std::mt19937_64 rng(seed);
  const Tensor z0 = to_diffusion_space(avg_pool_spatial(clip.video, mc.spatial_factor));
  const int t = std::uniform_int_distribution<int>(0, schedule.steps() - 1)(rng);
  Tensor eps = Tensor::zeros(z0.shape());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (float& e : eps.f32()) e = normal(rng);
  const ConditionSet all{};
  const Tensor input = model_input(add_noise(z0, t, eps, schedule), cond, all);

  RoutingMask gt;
  gt.grid = mc.dit.grid();
  gt.characters = mc.dit.characters;
  gt.layers.assign(static_cast<std::size_t>(mc.dit.layers), routing_target(clip, gt.grid, mc.spatial_factor, mc.dit.patch, false));
  const AssignmentMatrix a_ac = assignment_from_tensor(clip.a_ac);

  Tape<float> tape;
  DenoiserInputs<float> in = encode_conditions(model, tape, cond, all, opt.use_audio);
  in.latent = &input;
  in.t = t;
  const GateProvider<float> provider = [&](int layer, const AttentionTap<float>&) {
    return gates_from_mask<float>(gt, layer, a_ac, false);
  };
  const Matrix<float> pred = denoiser_forward(model.dit, in, provider).value();
  const Matrix<float> target = patchify_rows<float>(eps, mc.dit.patch);
  return static_cast<double>((pred - target).squaredNorm()) / static_cast<double>(pred.size());
}

ClipMetrics evaluate_clip(Model<float>& model, const ClipRecord& source, const EvalOptions& opt, std::uint64_t seed,
                          const std::string& name) {
  const ModelConfig& mc = model.cfg;
  const ClipRecord clip = source.n_chars == mc.dit.characters ? source : replicate_characters(source, mc.dit.characters);
  std::mt19937_64 rng(seed);
  SampleRequest req;
  req.mode = opt.mode;
  req.steps = opt.steps;
  req.cfg_scale = opt.cfg_scale;
  req.conditions = clip_conditions(clip, mc.spatial_factor, opt.face_noise, rng);
  req.a_ac = assignment_from_tensor(clip.a_ac);
  req.seed = splitmix64(seed);
  req.theta = opt.theta;
  req.refine_iters = opt.refine_iters;
  req.use_audio = opt.use_audio;
  req.router_trained = opt.router_trained;
  const NoiseSchedule schedule = NoiseSchedule::linear(opt.diffusion_steps, opt.beta_start, opt.beta_end);
  const SampleResult result = sample(model, req, schedule);

  ClipMetrics m;
  m.name = name;
  m.kind = clip.kind;
  m.nfe = result.nfe;
  const std::vector<int> truth = ground_truth_labels(clip.gt_masks, mc.dit.grid(), mc.spatial_factor, mc.dit.patch);
  m.mask_iou = mask_iou(result.masks.back(), truth);
  m.routing_accuracy = routing_accuracy(clip, result.video_latent, mc.spatial_factor);
  m.routing_accuracy_gt = routing_accuracy(clip, clip.video, 1);
  m.sync_proxy_margin = sync_proxy_margin(clip, result.video_latent, mc.spatial_factor);
  m.eps_mse = eps_mse(model, clip, req.conditions, opt, splitmix64(seed + 1));
  return m;
}

EvalReport aggregate(RouterMode mode, std::vector<ClipMetrics> clips) {
  EvalReport r;
  r.mode = mode;
  r.clips = std::move(clips);
  if (r.clips.empty()) return r;
  const double count = static_cast<double>(r.clips.size());
  r.mask_iou.assign(r.clips.front().mask_iou.size(), 0.0);
  double positive = 0.0;
  for (const ClipMetrics& c : r.clips) {
    for (std::size_t i = 0; i < r.mask_iou.size() && i < c.mask_iou.size(); ++i) r.mask_iou[i] += c.mask_iou[i];
    r.routing_accuracy += c.routing_accuracy;
    r.routing_accuracy_gt += c.routing_accuracy_gt;
    r.sync_proxy_margin += c.sync_proxy_margin;
    r.eps_mse += c.eps_mse;
    positive += c.sync_proxy_margin > 0.0 ? 1.0 : 0.0;
  }
  for (double& v : r.mask_iou) v /= count;
  r.routing_accuracy /= count;
  r.routing_accuracy_gt /= count;
  r.sync_proxy_margin /= count;
  r.eps_mse /= count;
  r.sync_positive_fraction = positive / count;
  return r;
}

EvalReport evaluate(Model<float>& model, const DatasetManifest& manifest, const std::string& split, const EvalOptions& opt,
                    const std::function<void(const ClipMetrics&)>& on_clip) {
  const std::vector<const ManifestEntry*> entries = manifest.split(split);
  if (entries.empty()) throw InputError("split '" + split + "' has no clips");
  std::vector<ClipMetrics> clips;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ClipRecord clip = load_clip(manifest.root / entries[i]->path);
    clips.push_back(evaluate_clip(model, clip, opt, splitmix64(opt.seed ^ (0x5EEDull + i)), entries[i]->path));
    if (on_clip) on_clip(clips.back());
  }
  return aggregate(opt.mode, std::move(clips));
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(report.mode);
  j["clips"] = report.clips.size();
  j["mask_iou"] = report.mask_iou;
  j["routing_accuracy"] = report.routing_accuracy;
  j["routing_accuracy_gt"] = report.routing_accuracy_gt;
  j["sync_proxy_margin"] = report.sync_proxy_margin;
  j["sync_positive_fraction"] = report.sync_positive_fraction;
  j["eps_mse"] = report.eps_mse;
  auto per = nlohmann::ordered_json::array();
  for (const ClipMetrics& c : report.clips) {
    nlohmann::ordered_json e;
    e["name"] = c.name;
    e["kind"] = to_string(c.kind);
    e["mask_iou"] = c.mask_iou;
    e["routing_accuracy"] = c.routing_accuracy;
    e["routing_accuracy_gt"] = c.routing_accuracy_gt;
    e["sync_proxy_margin"] = c.sync_proxy_margin;
    e["eps_mse"] = c.eps_mse;
    e["nfe"] = c.nfe;
    per.push_back(e);
  }
  j["per_clip"] = per;
  return j.dump(2) + "\n";
}

}  // namespace bya
