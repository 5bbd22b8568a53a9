#include "bya/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace bya {

namespace {

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return value;
}

std::string show(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

template <typename T>
Field number(const std::string& key, T& ref) {
  return {key, [&ref, key](const std::string& v) { ref = parse_number<T>(key, v); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) return show(ref);
            else return std::to_string(ref);
          }};
}

Field boolean(const std::string& key, bool& ref) {
  return {key,
          [&ref, key](const std::string& v) {
            if (v == "true") ref = true;
            else if (v == "false") ref = false;
            else throw ConfigError("bad value for " + key + ": expected true or false");
          },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field text(const std::string& key, std::string& ref) {
  return {key, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }};
}

std::vector<Field> fields(Config& c) {
  DiTConfig& d = c.model.dit;
  TrainConfig& t = c.train;
  SampleConfig& s = c.sample;
  return {
      text("data.manifest", c.data.manifest),
      number("model.layers", d.layers),
      number("model.width", d.width),
      number("model.heads", d.heads),
      number("model.patch", d.patch),
      number("model.frames", d.frames),
      number("model.height", d.height),
      number("model.latent_width", d.latent_width),
      number("model.text_len", d.text_len),
      number("model.characters", d.characters),
      number("model.face_queries", d.face_queries),
      number("model.mlp_ratio", d.mlp_ratio),
      number("model.lora_rank", d.lora_rank),
      number("model.lora_alpha", d.lora_alpha),
      number("model.audio_window", d.audio_window),
      boolean("model.audio_residual_on_face", d.audio_residual_on_face),
      number("model.audio_dim", c.model.cond.audio_dim),
      number("model.audio_frames", c.model.cond.audio_frames),
      number("model.face_grid", c.model.cond.face_grid),
      number("model.spatial_factor", c.model.spatial_factor),
      number("router.width", c.model.router.width),
      number("router.blocks", c.model.router.blocks),
      number("router.block_heads", c.model.router.block_heads),
      number("router.mlp_ratio", c.model.router.mlp_ratio),
      number("loss.lambda_r", c.loss.ce),
      number("loss.lambda_st", c.loss.st),
      number("loss.lambda_layer", c.loss.layer),
      boolean("loss.mean", c.loss_mean),
      number("train.lr", t.lr),
      number("train.batch", t.batch),
      number("train.seed", t.seed),
      number("train.stage1_steps", t.stage_steps[0]),
      number("train.stage2_steps", t.stage_steps[1]),
      number("train.stage3_steps", t.stage_steps[2]),
      number("train.stage1_inpaint_drop", t.stage1_inpaint_drop),
      number("train.dynamic_mask_rate", t.dynamic_mask_rate),
      number("train.dynamic_mask_kappa", t.dynamic_mask_kappa),
      number("train.condition_drop", t.condition_drop),
      number("train.teacher_p_drop", t.teacher_p_drop),
      number("train.teacher_sigma", t.teacher_sigma),
      number("train.router_loss_weight", t.router_loss_weight),
      number("train.grad_clip", t.grad_clip),
      number("train.face_noise", t.face_noise),
      number("train.adam_beta1", t.adam_beta1),
      number("train.adam_beta2", t.adam_beta2),
      number("train.adam_eps", t.adam_eps),
      text("sample.mode", s.mode),
      number("sample.steps", s.steps),
      number("sample.cfg_scale", s.cfg_scale),
      number("sample.theta", s.theta),
      number("sample.refine_iters", s.refine_iters),
      number("sample.diffusion_steps", s.diffusion_steps),
      number("sample.beta_start", s.beta_start),
      number("sample.beta_end", s.beta_end),
      number("sample.seed", s.seed),
  };
}

void validate(Config& c) {
  c.model.sync();
  const TrainConfig& t = c.train;
  auto rate = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
  };
  rate(t.stage1_inpaint_drop, "train.stage1_inpaint_drop");
  rate(t.dynamic_mask_rate, "train.dynamic_mask_rate");
  rate(t.condition_drop, "train.condition_drop");
  if (!(t.teacher_p_drop >= 0.0 && t.teacher_p_drop < 1.0)) throw ConfigError("train.teacher_p_drop must lie in [0,1)");
  if (t.teacher_sigma < 0.0) throw ConfigError("train.teacher_sigma must be nonnegative");
  if (t.lr <= 0.0 || t.batch < 1) throw ConfigError("train.lr and train.batch must be positive");
  for (int steps : t.stage_steps)
    if (steps < 0) throw ConfigError("stage step counts must be nonnegative");
  if (c.loss.ce < 0 || c.loss.st < 0 || c.loss.layer < 0) throw ConfigError("loss weights must be nonnegative");
  if (c.sample.steps < 1 || c.sample.cfg_scale < 0) throw ConfigError("sample.steps >= 1 and sample.cfg_scale >= 0 required");
  if (c.sample.mode != "pre" && c.sample.mode != "post" && c.sample.mode != "intra")
    throw ConfigError("sample.mode must be pre, post or intra");
  if (!c.data.manifest.empty() && !std::filesystem::exists(c.data.manifest))
    throw ConfigError("data.manifest does not exist: " + c.data.manifest);
}

}  // namespace

Config parse_config(const std::string& source) {
  Config c;
  std::vector<Field> table = fields(c);
  std::istringstream in(source);
  std::string line;
  int number_of_line = 0;
  while (std::getline(in, line)) {
    ++number_of_line;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number_of_line) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    bool found = false;
    for (auto& f : table)
      if (f.key == key) {
        f.set(value);
        found = true;
        break;
      }
    if (!found) throw ConfigError("unknown configuration key: " + key);
  }
  validate(c);
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string dump_config(const Config& config) {
  Config copy = config;
  std::string out;
  for (const auto& f : fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

}  // namespace bya
