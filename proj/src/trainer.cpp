#include "bya/trainer.hpp"

#include <cmath>
#include <cstring>
#include <json.hpp>

namespace bya {

StagePlan StagePlan::make(int stage, const TrainConfig& train) {
  StagePlan p;
  p.stage = stage;
  switch (stage) {
    case 1:
      p.trainable = {group::kDit, group::kText, group::kFaceEncoder, group::kFaceXattn};
      // The guidance drops apply in every stage; audio is absent here.
      p.drops = {train.stage1_inpaint_drop, train.condition_drop, 0.0, train.condition_drop};
      p.dynamic_mask_rate = train.dynamic_mask_rate;
      p.dynamic_mask_kappa = train.dynamic_mask_kappa;
      break;
    case 2:
      p.trainable = {group::kAudioEncoder, group::kAudioXattn, group::kFaceEncoder, group::kFaceXattn, group::kLora};
      p.drops = {train.condition_drop, train.condition_drop, train.condition_drop, train.condition_drop};
      p.use_audio = true;
      break;
    case 3:
      p.trainable = {group::kRouter, group::kAudioXattn, group::kFaceXattn, group::kLora};
      p.drops = {train.condition_drop, train.condition_drop, train.condition_drop, train.condition_drop};
      p.use_audio = true;
      p.teacher_forcing = true;
      p.teacher = {train.teacher_p_drop, train.teacher_sigma};
      p.router_loss = true;
      p.router_loss_weight = train.router_loss_weight;
      break;
    default:
      throw ConfigError("stage must be 1, 2 or 3");
  }
  p.steps = train.stage_steps[static_cast<std::size_t>(stage - 1)];
  return p;
}

std::vector<ConditionSet> drop_conditions(const std::vector<ConditionSet>& batch, const DropRates& rates, std::mt19937_64& rng) {
  for (double r : {rates.inpaint, rates.ref, rates.audio, rates.text})
    if (!(r >= 0.0 && r <= 1.0)) throw ParameterError("drop rates must lie in [0,1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ConditionSet> out = batch;
  for (auto& c : out) {
    if (u(rng) < rates.inpaint) c.inpaint = false;
    if (u(rng) < rates.ref) c.ref = false;
    if (u(rng) < rates.audio) c.audio = false;
    if (u(rng) < rates.text) c.text = false;
  }
  return out;
}

RoutingMask teacher_force_mask(const RoutingMask& gt, const TeacherForcingConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  RoutingMask out = gt;
  const int bg = gt.characters;
  for (auto& layer : out.layers) {
    for (Eigen::Index s = 0; s < layer.rows(); ++s) {
      if (u(rng) < cfg.p_drop) {
        layer.row(s).setZero();
        layer(s, bg) = 1.0f;
      }
      if (cfg.sigma > 0.0)
        for (Eigen::Index c = 0; c < layer.cols(); ++c)
          layer(s, c) = static_cast<float>(std::clamp(layer(s, c) + cfg.sigma * noise(rng), 0.0, 1.0));
      const float total = layer.row(s).sum();
      if (total > 0.0f) {
        layer.row(s) /= total;
      } else {
        layer.row(s).setZero();
        layer(s, bg) = 1.0f;
      }
    }
  }
  return out;
}

template <typename S>
void Adam<S>::step(ParamStore<S>& store, double clip) {
  ++t_;
  std::vector<Parameter<S>*> params;
  double norm2 = 0.0;
  for (Parameter<S>* p : store.all())
    if (p->trainable) {
      params.push_back(p);
      norm2 += static_cast<double>(p->grad.squaredNorm());
    }
  const double norm = std::sqrt(norm2);
  const double factor = clip > 0.0 && norm > clip ? clip / norm : 1.0;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (Parameter<S>* p : params) {
    auto& [m, v] = moments_[p];
    if (m.size() == 0) {
      m = Matrix<S>::Zero(p->value.rows(), p->value.cols());
      v = Matrix<S>::Zero(p->value.rows(), p->value.cols());
    }
    const Matrix<S> g = p->grad * static_cast<S>(factor);
    m = static_cast<S>(b1_) * m + static_cast<S>(1.0 - b1_) * g;
    v = static_cast<S>(b2_) * v + static_cast<S>(1.0 - b2_) * g.cwiseProduct(g);
    const auto m_hat = m.array() / static_cast<S>(c1);
    const auto v_hat = v.array() / static_cast<S>(c2);
    p->value.array() -= static_cast<S>(lr_) * m_hat / (v_hat.sqrt() + static_cast<S>(eps_));
  }
  store.zero_grads();
}

std::vector<TrainingExample> prepare_examples(const std::vector<ClipRecord>& clips, const ModelConfig& cfg) {
  std::vector<TrainingExample> out;
  const TokenGridDims grid = cfg.dit.grid();
  for (const auto& clip : clips) {
    TrainingExample ex;
    ex.replicated = clip.n_chars < cfg.dit.characters;
    ex.clip = ex.replicated ? replicate_characters(clip, cfg.dit.characters) : clip;
    ex.target = routing_target(ex.clip, grid, cfg.spatial_factor, cfg.dit.patch, ex.replicated);
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename S>
StepLog train_example(Model<S>& model, const StagePlan& plan, const TrainingExample& ex, const ConditionSet& keep,
                      const Config& config, const NoiseSchedule& schedule, std::mt19937_64& rng, double weight) {
  const ModelConfig& mc = model.cfg;
  const ClipRecord& clip = ex.clip;
  const ClipConditions cond = clip_conditions(clip, mc.spatial_factor, config.train.face_noise, rng);
  const Tensor z0 = to_diffusion_space(avg_pool_spatial(clip.video, mc.spatial_factor));
  const int t = std::uniform_int_distribution<int>(0, schedule.steps() - 1)(rng);
  Tensor eps = Tensor::zeros(z0.shape());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (float& e : eps.f32()) e = normal(rng);
  const Tensor input = model_input(add_noise(z0, t, eps, schedule), cond, keep);
  const bool dynamic = plan.dynamic_mask_rate > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < plan.dynamic_mask_rate;

  RoutingMask gt;
  gt.grid = mc.dit.grid();
  gt.characters = mc.dit.characters;
  gt.layers.assign(static_cast<std::size_t>(mc.dit.layers), ex.target);
  const RoutingMask forced = plan.teacher_forcing ? teacher_force_mask(gt, plan.teacher, rng) : gt;
  const AssignmentMatrix a_ac = assignment_from_tensor(clip.a_ac);

  Tape<S> tape;
  DenoiserInputs<S> in = encode_conditions(model, tape, cond, keep, plan.use_audio);
  in.latent = &input;
  in.t = t;
  std::vector<AttentionTap<S>> taps;
  const GateProvider<S> provider = [&](int layer, const AttentionTap<S>&) {
    return gates_from_mask<S>(forced, layer, a_ac, false);
  };
  Var<S> eps_hat = denoiser_forward(model.dit, in, provider, plan.router_loss ? &taps : nullptr);
  const Matrix<S> eps_rows = patchify_rows<S>(eps, mc.dit.patch);

  StepLog log;
  log.stage = plan.stage;
  Var<S> l_d;
  if (dynamic) {
    const Tensor uni = latent_union_mask(clip.gt_masks, mc.spatial_factor);
    const std::size_t plane = uni.dim(1) * uni.dim(2);
    Tensor broadcast = Tensor::zeros(z0.shape());
    for (std::size_t f = 0; f < uni.dim(0); ++f)
      for (std::size_t c = 0; c < z0.dim(1); ++c)
        std::copy(uni.f32().begin() + static_cast<long>(f * plane), uni.f32().begin() + static_cast<long>((f + 1) * plane),
                  broadcast.f32().begin() + static_cast<long>((f * z0.dim(1) + c) * plane));
    const Matrix<S> w = patchify_rows<S>(broadcast, mc.dit.patch);
    l_d = diffusion_loss(eps_hat, eps_rows, &w, plan.dynamic_mask_kappa);
  } else {
    l_d = diffusion_loss(eps_hat, eps_rows, static_cast<const Matrix<S>*>(nullptr));
  }
  log.l_d = static_cast<double>(l_d.item());
  Var<S> total = l_d;

  if (plan.router_loss) {
    const RouterOutput<S> out = router_forward(model.router, taps);
    const std::vector<Matrix<S>> targets(static_cast<std::size_t>(mc.dit.layers), ex.target.template cast<S>());
    const int n = mc.dit.characters;
    Var<S> ce = loss_ce(out.probs, targets, config.loss_mean);
    Var<S> st = loss_st(out.probs, gt.grid, n);
    Var<S> lay = loss_layer(out.probs, n);
    Var<S> router = ad::add(ad::add(ad::scale(ce, static_cast<S>(config.loss.ce)), ad::scale(st, static_cast<S>(config.loss.st))),
                            ad::scale(lay, static_cast<S>(config.loss.layer)));
    log.l_r = static_cast<double>(ce.item());
    log.l_st = static_cast<double>(st.item());
    log.l_layer = static_cast<double>(lay.item());
    log.l_router = static_cast<double>(router.item());
    total = ad::add(total, ad::scale(router, static_cast<S>(plan.router_loss_weight)));
  }
  tape.backward(ad::scale(total, static_cast<S>(weight)));
  return log;
}

template <typename S>
TrainReport run_stage(const StagePlan& plan, const std::vector<TrainingExample>& data, Model<S>& model, const Config& config,
                      std::uint64_t seed, const std::function<void(const StepLog&)>& on_step) {
  if (data.empty()) throw InputError("training split is empty");
  const NoiseSchedule schedule =
      NoiseSchedule::linear(config.sample.diffusion_steps, config.sample.beta_start, config.sample.beta_end);
  model.store.set_trainable(plan.trainable);
  model.store.zero_grads();
  Adam<S> adam(config.train.lr, config.train.adam_beta1, config.train.adam_beta2, config.train.adam_eps);
  std::mt19937_64 rng(splitmix64(seed ^ static_cast<std::uint64_t>(plan.stage)));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const int batch = config.train.batch;
  TrainReport report;

  std::vector<const Parameter<S>*> frozen;
  for (const Parameter<S>* p : model.store.all())
    if (!p->trainable) frozen.push_back(p);
  std::vector<Matrix<S>> snapshot;

  for (int step = 0; step < plan.steps; ++step) {
    snapshot.clear();
    for (const Parameter<S>* p : frozen) snapshot.push_back(p->value);
    std::vector<std::size_t> idx;
    for (int b = 0; b < batch; ++b) idx.push_back(pick(rng));
    const std::vector<ConditionSet> keep = drop_conditions(std::vector<ConditionSet>(static_cast<std::size_t>(batch)), plan.drops, rng);
    StepLog mean;
    mean.step = step;
    mean.stage = plan.stage;
    for (int b = 0; b < batch; ++b) {
      const StepLog one = train_example(model, plan, data[idx[static_cast<std::size_t>(b)]], keep[static_cast<std::size_t>(b)], config,
                                        schedule, rng, 1.0 / batch);
      mean.l_d += one.l_d / batch;
      mean.l_r += one.l_r / batch;
      mean.l_st += one.l_st / batch;
      mean.l_layer += one.l_layer / batch;
      mean.l_router += one.l_router / batch;
    }
    adam.step(model.store, config.train.grad_clip);
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      const Matrix<S>& now = frozen[i]->value;
      if (std::memcmp(now.data(), snapshot[i].data(), sizeof(S) * static_cast<std::size_t>(now.size())) != 0)
        throw ContractError("frozen parameter changed during training: " + frozen[i]->name);
    }
    report.log.push_back(mean);
    if (on_step) on_step(mean);
  }
  return report;
}

std::string step_log_json(const StepLog& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["stage"] = e.stage;
  j["L_d"] = e.l_d;
  j["L_r"] = e.l_r;
  j["L_st"] = e.l_st;
  j["L_layer"] = e.l_layer;
  j["L_router"] = e.l_router;
  return j.dump();
}

template class Adam<float>;
template class Adam<double>;
template StepLog train_example(Model<float>&, const StagePlan&, const TrainingExample&, const ConditionSet&, const Config&,
                               const NoiseSchedule&, std::mt19937_64&, double);
template StepLog train_example(Model<double>&, const StagePlan&, const TrainingExample&, const ConditionSet&, const Config&,
                               const NoiseSchedule&, std::mt19937_64&, double);
template TrainReport run_stage(const StagePlan&, const std::vector<TrainingExample>&, Model<float>&, const Config&, std::uint64_t,
                               const std::function<void(const StepLog&)>&);
template TrainReport run_stage(const StagePlan&, const std::vector<TrainingExample>&, Model<double>&, const Config&, std::uint64_t,
                               const std::function<void(const StepLog&)>&);

}  // namespace bya
