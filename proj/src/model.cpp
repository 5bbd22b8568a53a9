#include "bya/model.hpp"

#include <json.hpp>

namespace bya {

void ModelConfig::sync() {
  dit.validate();
  cond.width = dit.width;
  cond.latent_frames = dit.frames;
  cond.face_queries = dit.face_queries;
  cond.text_len = dit.text_len;
  cond.spatial_factor = spatial_factor;
  router.layers = dit.layers;
  router.heads = dit.heads;
  router.head_dim = dit.head_dim();
  router.characters = dit.characters;
  router.face_queries = dit.face_queries;
  router.grid = dit.grid();
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["dit"] = {{"layers", dit.layers},
              {"width", dit.width},
              {"heads", dit.heads},
              {"patch", dit.patch},
              {"latent_channels", dit.latent_channels},
              {"cond_channels", dit.cond_channels},
              {"frames", dit.frames},
              {"height", dit.height},
              {"latent_width", dit.latent_width},
              {"text_len", dit.text_len},
              {"characters", dit.characters},
              {"face_queries", dit.face_queries},
              {"mlp_ratio", dit.mlp_ratio},
              {"lora_rank", dit.lora_rank},
              {"lora_alpha", dit.lora_alpha},
              {"audio_window", dit.audio_window},
              {"audio_residual_on_face", dit.audio_residual_on_face}};
  j["cond"] = {{"audio_dim", cond.audio_dim},
               {"audio_frames", cond.audio_frames},
               {"face_grid", cond.face_grid},
               {"prompt_classes", cond.prompt_classes}};
  j["router"] = {{"width", router.width},
                 {"blocks", router.blocks},
                 {"block_heads", router.block_heads},
                 {"mlp_ratio", router.mlp_ratio}};
  j["spatial_factor"] = spatial_factor;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& d = j.at("dit");
    c.dit.layers = d.at("layers");
    c.dit.width = d.at("width");
    c.dit.heads = d.at("heads");
    c.dit.patch = d.at("patch");
    c.dit.latent_channels = d.at("latent_channels");
    c.dit.cond_channels = d.at("cond_channels");
    c.dit.frames = d.at("frames");
    c.dit.height = d.at("height");
    c.dit.latent_width = d.at("latent_width");
    c.dit.text_len = d.at("text_len");
    c.dit.characters = d.at("characters");
    c.dit.face_queries = d.at("face_queries");
    c.dit.mlp_ratio = d.at("mlp_ratio");
    c.dit.lora_rank = d.at("lora_rank");
    c.dit.lora_alpha = d.at("lora_alpha");
    c.dit.audio_window = d.at("audio_window");
    c.dit.audio_residual_on_face = d.at("audio_residual_on_face");
    const auto& k = j.at("cond");
    c.cond.audio_dim = k.at("audio_dim");
    c.cond.audio_frames = k.at("audio_frames");
    c.cond.face_grid = k.at("face_grid");
    c.cond.prompt_classes = k.at("prompt_classes");
    const auto& r = j.at("router");
    c.router.width = r.at("width");
    c.router.blocks = r.at("blocks");
    c.router.block_heads = r.at("block_heads");
    c.router.mlp_ratio = r.at("mlp_ratio");
    c.spatial_factor = j.at("spatial_factor");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model configuration: ") + e.what());
  }
  c.sync();
  return c;
}

template <typename S>
Model<S> build_model(ModelConfig cfg, std::uint64_t seed) {
  cfg.sync();
  Model<S> m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  m.dit = add_denoiser(m.store, cfg.dit, rng);
  m.audio = add_audio_encoder(m.store, cfg.cond, rng);
  m.face = add_face_encoder(m.store, cfg.cond, rng);
  m.text = add_text_table(m.store, cfg.cond, rng);
  m.router = add_router(m.store, cfg.router, rng);
  return m;
}

template <typename S>
void save_model(const Model<S>& model, const std::filesystem::path& dir, int stage) {
  nlohmann::ordered_json meta;
  meta["stage"] = stage;
  meta["model"] = nlohmann::ordered_json::parse(model.cfg.to_json());
  save_checkpoint(model.store, dir, meta.dump());
}

Model<float> load_model(const std::filesystem::path& dir, int* stage) {
  const auto meta = nlohmann::json::parse(read_checkpoint_meta(dir));
  if (!meta.contains("model")) throw FormatError("checkpoint has no model configuration: " + dir.string());
  Model<float> m = build_model<float>(ModelConfig::from_json(meta.at("model").dump()), 0);
  load_checkpoint(m.store, dir);
  if (stage != nullptr) *stage = meta.value("stage", 0);
  return m;
}

Tensor to_diffusion_space(const Tensor& latent01) {
  Tensor out = latent01;
  for (float& v : out.f32()) v = 2.0f * v - 1.0f;
  return out;
}

Tensor from_diffusion_space(const Tensor& latent) {
  Tensor out = latent;
  for (float& v : out.f32()) v = 0.5f * (v + 1.0f);
  return out;
}

ClipConditions clip_conditions(const ClipRecord& clip, int spatial_factor, double face_noise, std::mt19937_64& rng) {
  VisualConditionOptions opt;
  opt.face_noise = face_noise;
  const VisualConditions vis = prep_visual_conditions(clip, opt, rng, spatial_factor);
  ClipConditions c;
  c.refs = clip.ref_masks.rank() == 3 ? remove_reference_background(clip.refs, clip.ref_masks) : clip.refs;
  c.audio_feats = clip.audio_feats;
  c.inpaint_frame = clip.inpaint;
  c.inpaint_latent = vis.inpaint_latent;
  c.ref_latent = vis.ref_latent;
  c.prompt_id = clip.prompt_id;
  return c;
}

template <typename S>
DenoiserInputs<S> encode_conditions(Model<S>& model, Tape<S>& tape, const ClipConditions& cond, const ConditionSet& keep,
                                    bool use_audio) {
  DenoiserInputs<S> in;
  const int n = model.cfg.dit.characters;
  in.text = keep.text ? text_embed(tape, model.text, cond.prompt_id, model.cfg.cond) : tape.param(*model.text.null_embed);
  if (keep.ref) {
    if (static_cast<int>(cond.refs.dim(0)) != n) throw ShapeError("reference count does not match the character count");
    in.faces = face_encode(tape, model.face, cond.refs, model.cfg.cond);
  } else {
    Var<S> null_face = tape.param(*model.face.null_embed);
    in.faces.assign(static_cast<std::size_t>(n), null_face);
  }
  if (use_audio) {
    if (keep.audio) {
      if (static_cast<int>(cond.audio_feats.dim(0)) != n) throw ShapeError("audio stream count does not match the character count");
      in.audio = audio_project(tape, model.audio, cond.audio_feats, model.cfg.dit.frames);
    } else {
      Var<S> null_audio = tape.param(*model.audio.null_embed);
      in.audio.assign(static_cast<std::size_t>(n), null_audio);
    }
  }
  return in;
}

Tensor model_input(const Tensor& noisy, const ClipConditions& cond, const ConditionSet& keep) {
  const Tensor zeros = Tensor::zeros(noisy.shape());
  const Tensor parts[3] = {noisy, keep.inpaint ? cond.inpaint_latent : zeros, keep.ref ? cond.ref_latent : zeros};
  return concat_channels(parts);
}

template <typename S>
LayerGates<S> gates_from_mask(const RoutingMask& mask, int layer, const AssignmentMatrix& a_ac, bool inflate) {
  LayerGates<S> g;
  const Matrix<float> cv = mask_to_cv_matrix(mask, layer);
  g.face = cv.template cast<S>();
  g.audio = compose_av(a_ac, inflate ? inflate_audio_matrix(cv) : cv).template cast<S>();
  return g;
}

ClipRecord replicate_characters(const ClipRecord& clip, int characters) {
  if (clip.n_chars != 1) throw InputError("only single-character clips are replicated");
  const auto n = static_cast<std::size_t>(characters);
  auto repeat = [n](const Tensor& t) {
    if (t.rank() == 0) return t;
    Shape shape = t.shape();
    shape[0] = n;
    if (t.dtype() == DType::u8) {
      std::vector<std::uint8_t> data;
      for (std::size_t i = 0; i < n; ++i) data.insert(data.end(), t.u8().begin(), t.u8().end());
      return Tensor(shape, std::move(data));
    }
    std::vector<float> data;
    for (std::size_t i = 0; i < n; ++i) data.insert(data.end(), t.f32().begin(), t.f32().end());
    return Tensor(shape, std::move(data));
  };
  ClipRecord out = clip;
  out.gt_masks = repeat(clip.gt_masks);
  out.audio_feats = repeat(clip.audio_feats);
  out.envelopes = repeat(clip.envelopes);
  out.refs = repeat(clip.refs);
  out.ref_masks = repeat(clip.ref_masks);
  AssignmentMatrix eye = AssignmentMatrix::Identity(characters, characters);
  out.a_ac = assignment_to_tensor(eye);
  out.mouth_boxes.assign(n, clip.mouth_boxes.front());
  out.n_chars = characters;
  return out;
}

Matrix<float> routing_target(const ClipRecord& clip, const TokenGridDims& grid, int spatial_factor, int patch, bool replicated) {
  if (!replicated) {
    const Matrix<float> probs = ground_truth_probs(clip.gt_masks, grid, spatial_factor, patch);
    return one_hot(argmax_labels(probs), static_cast<int>(probs.cols()));
  }
  const std::size_t n = clip.gt_masks.dim(0);
  const std::size_t slot = clip.gt_masks.size() / n;
  const Tensor first({1, clip.gt_masks.dim(1), clip.gt_masks.dim(2), clip.gt_masks.dim(3)},
                     std::vector<std::uint8_t>(clip.gt_masks.u8().begin(), clip.gt_masks.u8().begin() + static_cast<long>(slot)));
  const std::vector<int> labels = argmax_labels(ground_truth_probs(first, grid, spatial_factor, patch));
  Matrix<float> out = Matrix<float>::Zero(grid.tokens(), static_cast<Eigen::Index>(n + 1));
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s] == 0) {
      out.row(static_cast<Eigen::Index>(s)).head(static_cast<Eigen::Index>(n)).setConstant(1.0f / static_cast<float>(n));
    } else {
      out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n)) = 1.0f;
    }
  }
  return out;
}

template Model<float> build_model(ModelConfig, std::uint64_t);
template Model<double> build_model(ModelConfig, std::uint64_t);
template void save_model(const Model<float>&, const std::filesystem::path&, int);
template void save_model(const Model<double>&, const std::filesystem::path&, int);
template DenoiserInputs<float> encode_conditions(Model<float>&, Tape<float>&, const ClipConditions&, const ConditionSet&, bool);
template DenoiserInputs<double> encode_conditions(Model<double>&, Tape<double>&, const ClipConditions&, const ConditionSet&, bool);
template LayerGates<float> gates_from_mask(const RoutingMask&, int, const AssignmentMatrix&, bool);
template LayerGates<double> gates_from_mask(const RoutingMask&, int, const AssignmentMatrix&, bool);

}  // namespace bya
