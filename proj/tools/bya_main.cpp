// Command-line front end: gen-data, train, sample, eval, inspect-mask.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "bya/config.hpp"
#include "bya/eval.hpp"
#include "bya/image_export.hpp"
#include "bya/sampler.hpp"
#include "bya/trainer.hpp"

namespace fs = std::filesystem;
using namespace bya;

namespace {

Config base_config(const std::string& path) { return path.empty() ? parse_config("") : load_config(path); }

int cmd_gen_data(int count, double mix, double test_fraction, std::uint64_t seed, const std::string& out) {
  DatasetOptions opt;
  opt.count = count;
  opt.mix = mix;
  opt.test_fraction = test_fraction;
  const DatasetManifest m = gen_dataset(opt, out, seed);
  std::cout << (fs::path(out) / "manifest.json").string() << "\n";
  std::cerr << m.clips.size() << " clips\n";
  return 0;
}

struct TrainFlags {
  int stage = 1;
  std::string config, resume, out, data;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> batch;
  std::optional<double> lr;
};

int cmd_train(const TrainFlags& f) {
  Config cfg = base_config(f.config);
  if (!f.data.empty()) cfg.data.manifest = f.data;
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.batch) cfg.train.batch = *f.batch;
  if (f.lr) cfg.train.lr = *f.lr;
  if (cfg.train.batch < 1 || cfg.train.lr <= 0.0) throw ParameterError("batch and lr must be positive");
  StagePlan plan = StagePlan::make(f.stage, cfg.train);
  if (f.steps) {
    if (*f.steps < 0) throw ParameterError("steps must be nonnegative");
    plan.steps = *f.steps;
  }
  if (cfg.data.manifest.empty()) throw ConfigError("no dataset: pass --data or set data.manifest");

  Model<float> model;
  if (f.stage > 1) {
    if (f.resume.empty()) throw ConfigError("stage " + std::to_string(f.stage) + " needs a stage " + std::to_string(f.stage - 1) +
                                            " checkpoint (--resume)");
    int prior = 0;
    model = load_model(f.resume, &prior);
    if (prior < f.stage - 1)
      throw ConfigError("checkpoint " + f.resume + " is from stage " + std::to_string(prior) + ", stage " +
                        std::to_string(f.stage - 1) + " required");
  } else {
    model = f.resume.empty() ? build_model<float>(cfg.model, cfg.train.seed) : load_model(f.resume);
  }

  const DatasetManifest manifest = load_manifest(cfg.data.manifest);
  std::vector<ClipRecord> clips;
  for (const ManifestEntry* e : manifest.split("train")) clips.push_back(load_clip(manifest.root / e->path));
  const std::vector<TrainingExample> data = prepare_examples(clips, model.cfg);

  fs::create_directories(f.out);
  std::ofstream log(fs::path(f.out) / "log.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot write training log in " + f.out);
  run_stage<float>(plan, data, model, cfg, cfg.train.seed, [&log](const StepLog& s) { log << step_log_json(s) << "\n" << std::flush; });
  log.close();
  save_model(model, f.out, f.stage);
  std::cout << f.out << "\n";
  return 0;
}

struct SampleFlags {
  std::string mode, ckpt, clip, out, config;
  std::optional<int> steps;
  std::optional<double> cfg;
  std::optional<std::uint64_t> seed;
  bool no_inpaint = false;
  bool predict_a_ac = false;
};

int cmd_sample(const SampleFlags& f) {
  const Config cfg = base_config(f.config);
  if (f.clip.empty()) throw ConfigError("sample needs --clip");
  int stage = 0;
  Model<float> model = load_model(f.ckpt, &stage);
  ClipRecord clip = load_clip(f.clip);
  if (clip.n_chars != model.cfg.dit.characters) clip = replicate_characters(clip, model.cfg.dit.characters);
  if (f.no_inpaint) clip.inpaint = Tensor();

  SampleRequest req;
  req.mode = router_mode_from_string(f.mode.empty() ? cfg.sample.mode : f.mode);
  req.steps = f.steps.value_or(cfg.sample.steps);
  req.cfg_scale = f.cfg.value_or(cfg.sample.cfg_scale);
  req.seed = f.seed.value_or(cfg.sample.seed);
  req.theta = cfg.sample.theta;
  req.refine_iters = cfg.sample.refine_iters;
  req.use_audio = stage >= 2;
  req.router_trained = stage >= 3;
  std::mt19937_64 rng(splitmix64(req.seed));
  req.conditions = clip_conditions(clip, model.cfg.spatial_factor, cfg.train.face_noise, rng);
  if (f.predict_a_ac) req.alignment = scorer_input(clip, clip.video, 1);
  else req.a_ac = assignment_from_tensor(clip.a_ac);

  const NoiseSchedule schedule = NoiseSchedule::linear(cfg.sample.diffusion_steps, cfg.sample.beta_start, cfg.sample.beta_end);
  const SampleResult result = sample(model, req, schedule);
  write_sample(result, f.out);
  std::cout << "nfe " << result.nfe << "\n";
  return 0;
}

struct EvalFlags {
  std::string ckpt, split = "test", mode, data, config, out;
  std::optional<int> steps;
  std::optional<double> cfg;
  std::optional<std::uint64_t> seed;
  int limit = 0;
};

int cmd_eval(const EvalFlags& f) {
  Config cfg = base_config(f.config);
  if (!f.data.empty()) cfg.data.manifest = f.data;
  if (cfg.data.manifest.empty()) throw ConfigError("no dataset: pass --data or set data.manifest");
  int stage = 0;
  Model<float> model = load_model(f.ckpt, &stage);
  EvalOptions opt = EvalOptions::from_config(cfg);
  if (!f.mode.empty()) opt.mode = router_mode_from_string(f.mode);
  if (f.steps) opt.steps = *f.steps;
  if (f.cfg) opt.cfg_scale = *f.cfg;
  if (f.seed) opt.seed = *f.seed;
  opt.use_audio = stage >= 2;
  opt.router_trained = stage >= 3;
  DatasetManifest manifest = load_manifest(cfg.data.manifest);
  if (f.limit > 0) {
    std::vector<ManifestEntry> kept;
    int taken = 0;
    for (const auto& e : manifest.clips)
      if (e.split != f.split || taken++ < f.limit) kept.push_back(e);
    manifest.clips = std::move(kept);
  }
  const EvalReport report = evaluate(model, manifest, f.split, opt);
  const std::string json = eval_report_json(report);
  if (f.out.empty()) {
    std::cout << json;
  } else {
    std::ofstream out(f.out, std::ios::binary);
    out << json;
    if (!out) throw IoError("cannot write " + f.out);
  }
  return 0;
}

struct InspectFlags {
  std::string sample_dir, format = "png-grid", out;
  int layer = -1;
  int step = -1;
  int cell = 8;
};

int cmd_inspect_mask(const InspectFlags& f) {
  const fs::path dir(f.sample_dir);
  if (!fs::exists(dir / "result.json")) throw IoError("no sample in " + f.sample_dir);
  int step = f.step;
  if (step < 0) {
    int count = 0;
    while (fs::exists(dir / ("masks_step" + std::to_string(count) + ".byat"))) ++count;
    if (count == 0) throw IoError("no mask files in " + f.sample_dir);
    step = count - 1;
  }
  const Tensor mask = read_tensor(dir / ("masks_step" + std::to_string(step) + ".byat"));
  const std::vector<int> labels = mask_tensor_labels(mask, f.layer);
  const TokenGridDims grid{static_cast<int>(mask.dim(2)), static_cast<int>(mask.dim(3)), static_cast<int>(mask.dim(4))};
  const auto palette = mask_palette(static_cast<int>(mask.dim(1)) - 1);
  fs::path out = f.out;
  if (f.format == "png-grid") {
    if (out.empty()) out = dir / "mask_grid.png";
    write_bytes(encode_png(label_grid(labels, grid, f.cell), palette), out);
  } else if (f.format == "gif") {
    if (out.empty()) out = dir / "mask.gif";
    std::vector<IndexedImage> frames;
    for (int t = 0; t < grid.t_len; ++t) frames.push_back(label_panel(labels, grid, t, f.cell));
    write_bytes(encode_gif(frames, palette), out);
  } else {
    throw ConfigError("format must be png-grid or gif");
  }
  std::cout << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding-router toy video generator"};
  app.require_subcommand(1);

  int count = 0;
  double mix = 0.0, test_fraction = 0.1;
  std::uint64_t data_seed = 0;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  gen->add_option("--count", count, "Number of clips")->required();
  gen->add_option("--mix", mix, "Fraction of single-character clips");
  gen->add_option("--test-fraction", test_fraction, "Fraction of clips in the test split");
  gen->add_option("--seed", data_seed, "Seed");
  gen->add_option("--out", data_out, "Output directory")->required();

  TrainFlags tf;
  std::uint64_t train_seed = 0;
  int train_steps = 0, train_batch = 0;
  double train_lr = 0.0;
  auto* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--stage", tf.stage, "Stage 1, 2 or 3")->required()->check(CLI::Range(1, 3));
  train->add_option("--config", tf.config, "Configuration file");
  train->add_option("--resume", tf.resume, "Checkpoint directory to start from");
  train->add_option("--out", tf.out, "Checkpoint output directory")->required();
  train->add_option("--data", tf.data, "Dataset manifest (overrides data.manifest)");
  auto* o_tseed = train->add_option("--seed", train_seed, "Seed (overrides train.seed)");
  auto* o_tsteps = train->add_option("--steps", train_steps, "Step count (overrides the stage's configured steps)");
  auto* o_tbatch = train->add_option("--batch", train_batch, "Batch size (overrides train.batch)");
  auto* o_tlr = train->add_option("--lr", train_lr, "Learning rate (overrides train.lr)");

  SampleFlags sf;
  std::uint64_t sample_seed = 0;
  int sample_steps = 0;
  double sample_cfg = 0.0;
  auto* samp = app.add_subcommand("sample", "Generate one clip");
  samp->add_option("--mode", sf.mode, "pre, post or intra")->check(CLI::IsMember({"pre", "post", "intra"}));
  samp->add_option("--ckpt", sf.ckpt, "Checkpoint directory")->required();
  samp->add_option("--clip,--conditions", sf.clip, "Clip directory providing the conditions");
  samp->add_option("--out", sf.out, "Output directory")->required();
  samp->add_option("--config", sf.config, "Configuration file");
  auto* o_ssteps = samp->add_option("--steps", sample_steps, "Sampling steps");
  auto* o_scfg = samp->add_option("--cfg", sample_cfg, "Guidance scale");
  auto* o_sseed = samp->add_option("--seed", sample_seed, "Seed");
  samp->add_flag("--no-inpaint", sf.no_inpaint, "Ignore the clip's inpainting frame");
  samp->add_flag("--predict-a-ac", sf.predict_a_ac, "Predict A^ac from the clip video instead of using its label");

  EvalFlags ef;
  std::uint64_t eval_seed = 0;
  int eval_steps = 0;
  double eval_cfg = 0.0;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a split");
  ev->add_option("--ckpt", ef.ckpt, "Checkpoint directory")->required();
  ev->add_option("--split", ef.split, "Split name");
  ev->add_option("--mode", ef.mode, "pre, post or intra")->check(CLI::IsMember({"pre", "post", "intra"}));
  ev->add_option("--data", ef.data, "Dataset manifest (overrides data.manifest)");
  ev->add_option("--config", ef.config, "Configuration file");
  ev->add_option("--out", ef.out, "Report path (default stdout)");
  ev->add_option("--limit", ef.limit, "Evaluate at most this many clips");
  auto* o_esteps = ev->add_option("--steps", eval_steps, "Sampling steps");
  auto* o_ecfg = ev->add_option("--cfg", eval_cfg, "Guidance scale");
  auto* o_eseed = ev->add_option("--seed", eval_seed, "Seed");

  InspectFlags inf;
  auto* insp = app.add_subcommand("inspect-mask", "Render a sample's routing masks");
  insp->add_option("--sample-dir", inf.sample_dir, "Sample output directory")->required();
  insp->add_option("--layer", inf.layer, "Layer index, -1 for the layer mean");
  insp->add_option("--step", inf.step, "Sampling step, -1 for the last");
  insp->add_option("--format", inf.format, "png-grid or gif")->check(CLI::IsMember({"png-grid", "gif"}));
  insp->add_option("--cell", inf.cell, "Pixels per token");
  insp->add_option("--out", inf.out, "Output image path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(count, mix, test_fraction, data_seed, data_out);
    if (*train) {
      if (*o_tseed) tf.seed = train_seed;
      if (*o_tsteps) tf.steps = train_steps;
      if (*o_tbatch) tf.batch = train_batch;
      if (*o_tlr) tf.lr = train_lr;
      return cmd_train(tf);
    }
    if (*samp) {
      if (*o_ssteps) sf.steps = sample_steps;
      if (*o_scfg) sf.cfg = sample_cfg;
      if (*o_sseed) sf.seed = sample_seed;
      return cmd_sample(sf);
    }
    if (*ev) {
      if (*o_esteps) ef.steps = eval_steps;
      if (*o_ecfg) ef.cfg = eval_cfg;
      if (*o_eseed) ef.seed = eval_seed;
      return cmd_eval(ef);
    }
    if (*insp) return cmd_inspect_mask(inf);
  } catch (const ContractError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
