// SPDX-License-Identifier: Apache-2.0
//
// Full per-sample forward pass: embed -> masked encoder -> task-aware MoE
// per combination -> task-guided fusion -> task head.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/decorrel.hpp"
#include "flexcare/encoder.hpp"
#include "flexcare/fusion.hpp"
#include "flexcare/moe.hpp"
#include "flexcare/params.hpp"
#include "flexcare/seqlayout.hpp"
#include "flexcare/tasks.hpp"

namespace flexcare {

/// Invalid configuration value; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t d = 128;
  std::size_t layers = 4;
  std::size_t heads = 2;
  std::size_t ffn_hidden = 0;     // 0 -> 2d
  std::size_t experts = 10;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 0;  // 0 -> 2d

  std::size_t ts_features = 76;
  std::size_t ts_max_steps = 24;
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t image_channels = 1;
  std::size_t patch = 4;
  std::size_t note_features = 32;
  std::size_t note_max_tokens = 4;

  double epsilon = 1.0;
  CovarianceCentering centering = CovarianceCentering::mean;

  bool use_combination_tokens = true;
  bool use_decorrelation = true;
  bool use_moe = true;

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 2 * d; }
  std::size_t expert_width() const { return expert_hidden ? expert_hidden : 2 * d; }
  std::size_t image_tokens() const { return (image_height / patch) * (image_width / patch); }

  void validate() const {
    const auto need = [](bool ok, const char* field, const char* why) {
      if (!ok) throw ConfigError(std::string("model.") + field + ": " + why);
    };
    need(d > 0, "d", "must be positive");
    need(layers > 0, "layers", "must be positive");
    need(heads > 0 && d % heads == 0, "heads", "must divide d");
    need(experts > 0, "experts", "must be positive");
    need(top_k >= 1 && top_k <= experts, "top_k", "must lie in [1, experts]");
    need(ts_features > 0 && ts_max_steps > 0, "ts_features", "time-series dims must be positive");
    need(patch > 0 && image_height % patch == 0 && image_width % patch == 0, "patch",
         "must divide image height and width");
    need(image_channels > 0, "image_channels", "must be positive");
    need(note_features > 0 && note_max_tokens > 0, "note_features", "note dims must be positive");
    need(epsilon > 0.0, "epsilon", "must be positive");
    need(d >= 2 || !use_decorrelation, "d", "decorrelation needs d >= 2");
  }
};

/// Ablation presets: a- removes combination tokens, decorrelation and the
/// MoE; b- keeps tokens only; c- keeps tokens and decorrelation; d- keeps
/// tokens and the MoE.
inline void apply_ablation(ModelConfig& cfg, const std::string& code) {
  if (code == "a-") {
    cfg.use_combination_tokens = false, cfg.use_decorrelation = false, cfg.use_moe = false;
  } else if (code == "b-") {
    cfg.use_combination_tokens = true, cfg.use_decorrelation = false, cfg.use_moe = false;
  } else if (code == "c-") {
    cfg.use_combination_tokens = true, cfg.use_decorrelation = true, cfg.use_moe = false;
  } else if (code == "d-") {
    cfg.use_combination_tokens = true, cfg.use_decorrelation = false, cfg.use_moe = true;
  } else if (code == "full" || code.empty()) {
    cfg.use_combination_tokens = true, cfg.use_decorrelation = true, cfg.use_moe = true;
  } else {
    throw ConfigError("unknown ablation code: " + code);
  }
}

/// Per-modality raw inputs of one sample; absent modalities are nullopt.
/// Image layout is H x (W * channels).
template <typename T>
struct SampleInput {
  std::array<std::optional<Matrix<T>>, kNumModalities> modality;

  ModalitySet present() const {
    ModalitySet s;
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (modality[m]) s.insert(m);
    return s;
  }
};

struct ForwardOptions {
  double beta = 0.0;                   // weight of the decorrelation term in `objective`
  double router_noise_std = 0.0;
  std::mt19937_64* noise_rng = nullptr;
};

template <typename T>
struct ForwardResult {
  SequenceLayout layout;
  EncodedSample encoded;
  std::vector<ModalityCombination> combinations;  // row order of z_comb / refined
  std::optional<Var> z_comb;
  std::vector<MoEOutput> routing;                 // empty when the MoE is disabled
  std::vector<Var> refined;
  FusionOutput fusion;
  Var probs;
  std::optional<Var> pred_loss;
  Var cov_reg;
  std::optional<Var> objective;                   // pred_loss + beta * cov_reg
};

struct ParamShape {
  std::string name;
  std::size_t rows, cols;
};

inline std::vector<ParamShape> task_param_shapes(const ModelConfig& c, const TaskSpec& task) {
  return {{"tokens.task." + task.name, 1, c.d},
          {"head." + task.name + ".weight", 2 * c.d, task.label_dim},
          {"head." + task.name + ".bias", 1, task.label_dim}};
}

/// Every tensor of a model in canonical order.
inline std::vector<ParamShape> param_shapes(const ModelConfig& c, const TaskRegistry& tasks) {
  const std::size_t d = c.d;
  std::vector<ParamShape> s = {
      {"embed.ts.weight", c.ts_features, d},
      {"embed.ts.bias", 1, d},
      {"embed.ts.pos", c.ts_max_steps, d},
      {"embed.image.weight", c.patch * c.patch * c.image_channels, d},
      {"embed.image.bias", 1, d},
      {"embed.image.pos", c.image_tokens(), d},
      {"embed.note.weight", c.note_features, d},
      {"embed.note.bias", 1, d},
      {"embed.note.pos", c.note_max_tokens, d},
      {"tokens.comb", enumerate_combinations(ModalitySet::all(kNumModalities)).size(), d},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    s.push_back({p + "wq", d, d});
    s.push_back({p + "wk", d, d});
    s.push_back({p + "wv", d, d});
    s.push_back({p + "ffn.w1", d, c.ffn_width()});
    s.push_back({p + "ffn.b1", 1, c.ffn_width()});
    s.push_back({p + "ffn.w2", c.ffn_width(), d});
    s.push_back({p + "ffn.b2", 1, d});
    s.push_back({p + "ln1.gain", 1, d});
    s.push_back({p + "ln1.bias", 1, d});
    s.push_back({p + "ln2.gain", 1, d});
    s.push_back({p + "ln2.bias", 1, d});
  }
  s.push_back({"moe.router.w1", d, c.experts});
  s.push_back({"moe.router.w2", d, c.experts});
  for (std::size_t e = 0; e < c.experts; ++e) {
    const std::string p = "moe.expert." + std::to_string(e) + ".";
    s.push_back({p + "w1", d, c.expert_width()});
    s.push_back({p + "b1", 1, c.expert_width()});
    s.push_back({p + "w2", c.expert_width(), d});
    s.push_back({p + "b2", 1, d});
  }
  s.push_back({"fusion.w1", 2 * d, d});
  s.push_back({"fusion.w2", d, 1});
  s.push_back({"fusion.ln.gain", 1, d});
  s.push_back({"fusion.ln.bias", 1, d});
  for (const auto& t : tasks)
    for (auto& ps : task_param_shapes(c, t)) s.push_back(std::move(ps));
  return s;
}

namespace detail {
template <typename T, typename Rng>
Matrix<T> initial_value(const ParamShape& s, Rng& rng) {
  const auto ends_with = [&](const char* suffix) {
    const std::string suf(suffix);
    return s.name.size() >= suf.size() && s.name.compare(s.name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".gain")) return Matrix<T>(s.rows, s.cols, T(1));
  if (ends_with(".bias") || ends_with(".b1") || ends_with(".b2")) return Matrix<T>(s.rows, s.cols);
  if (ends_with(".pos") || s.name.rfind("tokens.", 0) == 0) return init::normal<T>(s.rows, s.cols, 0.02, rng);
  return init::xavier_uniform<T>(s.rows, s.cols, rng);
}
}  // namespace detail

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, TaskRegistry tasks, std::uint64_t seed) : cfg_(std::move(cfg)), tasks_(std::move(tasks)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    for (const auto& s : param_shapes(cfg_, tasks_)) params_.add(s.name, detail::initial_value<T>(s, rng));
  }

  /// Adopts existing tensors; names and shapes must match the configuration.
  Model(ModelConfig cfg, TaskRegistry tasks, ParamStore<T> params)
      : cfg_(std::move(cfg)), tasks_(std::move(tasks)), params_(std::move(params)) {
    cfg_.validate();
    const auto shapes = param_shapes(cfg_, tasks_);
    if (shapes.size() != params_.size()) throw std::invalid_argument("Model: tensor count mismatch");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const auto& v = params_.value(i);
      if (params_.name(i) != shapes[i].name || v.rows() != shapes[i].rows || v.cols() != shapes[i].cols)
        throw std::invalid_argument("Model: tensor " + params_.name(i) + " does not match expected " +
                                    shapes[i].name + " " + shape_str(shapes[i].rows, shapes[i].cols));
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ModelConfig& mutable_config() noexcept { return cfg_; }
  const TaskRegistry& tasks() const noexcept { return tasks_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  /// Adds a task token and head for a new task. Existing tensors are untouched.
  const TaskSpec& register_task(TaskSpec spec, std::uint64_t seed) {
    const TaskSpec& added = tasks_.add(std::move(spec));
    std::mt19937_64 rng(seed);
    for (const auto& s : task_param_shapes(cfg_, added)) params_.add(s.name, detail::initial_value<T>(s, rng));
    return added;
  }

  EmbedderVars embedder(ParamBinder<T>& b, const char* key) const {
    const std::string p = std::string("embed.") + key + ".";
    return {b(p + "weight"), b(p + "bias"), b(p + "pos")};
  }

  EncoderLayerVars layer(ParamBinder<T>& b, std::size_t l) const {
    const std::string p = "encoder." + std::to_string(l) + ".";
    return {b(p + "wq"),     b(p + "wk"),       b(p + "wv"),       b(p + "ffn.w1"),
            b(p + "ffn.b1"), b(p + "ffn.w2"),   b(p + "ffn.b2"),   b(p + "ln1.gain"),
            b(p + "ln1.bias"), b(p + "ln2.gain"), b(p + "ln2.bias")};
  }

  ExpertVars expert(ParamBinder<T>& b, std::size_t e) const {
    const std::string p = "moe.expert." + std::to_string(e) + ".";
    return {b(p + "w1"), b(p + "b1"), b(p + "w2"), b(p + "b2")};
  }

  MoEVars moe(ParamBinder<T>& b) const {
    MoEVars v;
    for (std::size_t e = 0; e < cfg_.experts; ++e) v.experts.push_back(expert(b, e));
    v.router_w1 = b("moe.router.w1");
    v.router_w2 = b("moe.router.w2");
    v.k = cfg_.top_k;
    return v;
  }

  FusionVars fusion(ParamBinder<T>& b) const {
    return {b("fusion.w1"), b("fusion.w2"), b("fusion.ln.gain"), b("fusion.ln.bias"), cfg_.epsilon};
  }

  HeadVars head(ParamBinder<T>& b, const TaskSpec& task) const {
    return {b("head." + task.name + ".weight"), b("head." + task.name + ".bias")};
  }

  /// Records one sample's forward pass on `tape`. With `grads`, parameter
  /// leaves accumulate into it on backward. With `label`, the prediction
  /// loss and objective are recorded too.
  ForwardResult<T> forward(Tape<T>& tape, Gradients<T>* grads, const SampleInput<T>& x, std::size_t task_id,
                           const Label* label = nullptr, const ForwardOptions& opt = {}) const {
    const TaskSpec& task = tasks_.at(task_id);
    ParamBinder<T> bind(tape, params_, grads);
    ForwardResult<T> r;

    std::vector<std::optional<Var>> tokens(kNumModalities);
    std::array<std::size_t, kNumModalities> counts{};
    if (const auto& ts = x.modality[index_of(Modality::timeseries)]) {
      tokens[0] = embed_timeseries(tape, *ts, embedder(bind, "ts"));
      counts[0] = ts->rows();
    }
    if (const auto& img = x.modality[index_of(Modality::image)]) {
      if (img->rows() != cfg_.image_height || img->cols() != cfg_.image_width * cfg_.image_channels)
        throw ShapeError("forward: image must be " + shape_str(cfg_.image_height, cfg_.image_width) + " x " +
                         std::to_string(cfg_.image_channels));
      tokens[1] = embed_image(tape, *img, cfg_.image_channels, cfg_.patch, embedder(bind, "image"));
      counts[1] = cfg_.image_tokens();
    }
    if (const auto& note = x.modality[index_of(Modality::note)]) {
      tokens[2] = embed_note(tape, *note, embedder(bind, "note"));
      counts[2] = note->rows();
    }

    const ModalitySet present = x.present();
    r.layout = build_layout(present, counts, kNumModalities, cfg_.use_combination_tokens);
    const Matrix<T> mask = build_mask<T>(r.layout);
    Var h0 = assemble_sequence(tape, r.layout, bind("tokens.task." + task.name), bind("tokens.comb"), tokens);
    std::vector<EncoderLayerVars> layers;
    for (std::size_t l = 0; l < cfg_.layers; ++l) layers.push_back(layer(bind, l));
    r.encoded = encode(tape, h0, mask, r.layout, layers, cfg_.heads);
    const Var z_task = r.encoded.z_task;

    if (cfg_.use_combination_tokens) {
      r.combinations = r.layout.combinations;
      r.z_comb = r.encoded.z_comb;
    } else {
      // Stand-in combination vectors: mean of the member modalities' outputs.
      r.combinations = enumerate_combinations(present);
      std::vector<Var> pooled;
      for (ModalityCombination c : r.combinations) {
        std::vector<Var> parts;
        for (std::size_t m : c.members()) parts.push_back(*r.encoded.modality_outputs[m]);
        Var stacked = parts.size() == 1 ? parts[0] : ad::vstack(tape, std::span<const Var>(parts));
        pooled.push_back(ad::mean_rows(tape, stacked));
      }
      r.z_comb = pooled.size() == 1 ? pooled[0] : ad::vstack(tape, std::span<const Var>(pooled));
    }

    const std::size_t n_comb = r.combinations.size();
    if (cfg_.use_moe) {
      const MoEVars moe_vars = moe(bind);
      std::normal_distribution<double> nd(0.0, opt.router_noise_std);
      for (std::size_t i = 0; i < n_comb; ++i) {
        Var z_c = ad::slice_rows(tape, *r.z_comb, i, 1);
        std::vector<T> noise;
        if (opt.router_noise_std > 0.0 && opt.noise_rng) {
          noise.resize(cfg_.experts);
          for (auto& v : noise) v = static_cast<T>(nd(*opt.noise_rng));
        }
        r.routing.push_back(moe_forward(tape, z_c, z_task, moe_vars, noise.empty() ? nullptr : &noise));
        r.refined.push_back(r.routing.back().refined);
      }
    } else {
      const ExpertVars shared = expert(bind, 0);
      for (std::size_t i = 0; i < n_comb; ++i)
        r.refined.push_back(expert_forward(tape, ad::slice_rows(tape, *r.z_comb, i, 1), shared));
    }

    r.fusion = fuse(tape, z_task, std::span<const Var>(r.refined), fusion(bind));
    r.probs = predict(tape, r.fusion.patient, task, head(bind, task));

    if (cfg_.use_decorrelation) r.cov_reg = comb_regularizer(tape, *r.z_comb, cfg_.centering);
    else r.cov_reg = tape.constant(Matrix<T>(1, 1));

    if (label) {
      r.pred_loss = task_loss(tape, r.probs, *label, task);
      r.objective = opt.beta != 0.0 && cfg_.use_decorrelation
                        ? ad::add(tape, *r.pred_loss, ad::scale(tape, r.cov_reg, static_cast<T>(opt.beta)))
                        : *r.pred_loss;
    }
    return r;
  }

  /// Probability vector for one sample without recording gradients.
  std::vector<T> infer(const SampleInput<T>& x, std::size_t task_id) const {
    Tape<T> tape;
    auto r = forward(tape, nullptr, x, task_id);
    const auto& p = tape.value(r.probs);
    return std::vector<T>(p.data(), p.data() + p.size());
  }

 private:
  ModelConfig cfg_;
  TaskRegistry tasks_;
  ParamStore<T> params_;
};

}  // namespace flexcare
