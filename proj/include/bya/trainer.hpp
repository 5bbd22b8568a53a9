#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bya/config.hpp"
#include "bya/model.hpp"

namespace bya {

struct DropRates {
  double inpaint = 0.0;
  double ref = 0.0;
  double audio = 0.0;
  double text = 0.0;
};

struct TeacherForcingConfig {
  double p_drop = 0.1;
  double sigma = 0.05;
};

struct StagePlan {
  int stage = 1;
  int steps = 0;
  std::vector<std::string> trainable;
  DropRates drops;
  bool use_audio = false;
  bool teacher_forcing = false;
  TeacherForcingConfig teacher;
  double dynamic_mask_rate = 0.0;
  double dynamic_mask_kappa = 1.0;
  bool router_loss = false;
  double router_loss_weight = 1.0;

  /// The stage's freeze set, drops and loss terms from a training config.
  static StagePlan make(int stage, const TrainConfig& train);
};

struct StepLog {
  int step = 0;
  int stage = 0;
  double l_d = 0.0;
  double l_r = 0.0;
  double l_st = 0.0;
  double l_layer = 0.0;
  double l_router = 0.0;
};

struct TrainReport {
  std::vector<StepLog> log;
};

/// Independently drops each condition of each sample.
std::vector<ConditionSet> drop_conditions(const std::vector<ConditionSet>& batch, const DropRates& rates, std::mt19937_64& rng);

/// Ground truth with cells dropped to background, Gaussian noise, clamped
/// and renormalised per token; one independent draw per layer.
RoutingMask teacher_force_mask(const RoutingMask& gt, const TeacherForcingConfig& cfg, std::mt19937_64& rng);

/// Adam over the trainable parameters of a store.
template <typename S>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  /// Global-norm clip (when positive), update, and zero the gradients.
  void step(ParamStore<S>& store, double clip = 0.0);
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<const Parameter<S>*, std::pair<Matrix<S>, Matrix<S>>> moments_;
};

/// A training example: the (possibly replicated) clip and its routing target.
struct TrainingExample {
  ClipRecord clip;
  Matrix<float> target;  // S x (n+1)
  bool replicated = false;
};

std::vector<TrainingExample> prepare_examples(const std::vector<ClipRecord>& clips, const ModelConfig& cfg);

/// Losses of one example, with gradients accumulated into the parameters
/// scaled by `weight`.
template <typename S>
StepLog train_example(Model<S>& model, const StagePlan& plan, const TrainingExample& ex, const ConditionSet& keep,
                      const Config& config, const NoiseSchedule& schedule, std::mt19937_64& rng, double weight);

/// Runs a stage. Throws ContractError if a frozen parameter changes.
/// `on_step` (optional) sees every log entry as it is produced.
template <typename S>
TrainReport run_stage(const StagePlan& plan, const std::vector<TrainingExample>& data, Model<S>& model, const Config& config,
                      std::uint64_t seed, const std::function<void(const StepLog&)>& on_step = {});

std::string step_log_json(const StepLog& entry);

}  // namespace bya
