// SPDX-License-Identifier: Apache-2.0
//
// JSON configuration files. One document may carry "model", "train" and
// "gen" sections; every key is optional and defaults apply. Unknown keys
// are rejected so typos do not pass silently.
#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "flexcare/data.hpp"
#include "flexcare/model.hpp"
#include "flexcare/optim.hpp"

namespace flexcare {

struct TrainConfig {
  ModelConfig model{32, 2, 2, 0, 10, 2, 0};
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 40;
  double beta = 0.1;             // decorrelation weight
  double w_balance = 0.01;       // expert balance weight
  double task_weight_decay = 1.0;  // lambda_task *= decay^epoch
  double router_noise_std = 0.0;
  bool shuffle_task_order = false;
  bool per_task_optimizer = true;  // separate Adam moments per task
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  double lr_min = 1e-6;
  double lr_max = 1e-1;

  void validate() const {
    model.validate();
    const auto need = [](bool ok, const std::string& field, const char* why) {
      if (!ok) throw ConfigError("train." + field + ": " + why);
    };
    need(batch_size > 0, "batch_size", "must be positive");
    need(epochs > 0, "epochs", "must be positive");
    need(adam.lr >= lr_min && adam.lr <= lr_max, "learning_rate", "outside [lr_min, lr_max]");
    need(adam.beta1 >= 0.0 && adam.beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
    need(adam.beta2 >= 0.0 && adam.beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
    need(adam.eps > 0.0, "adam_eps", "must be positive");
    need(adam.weight_decay >= 0.0, "weight_decay", "must be nonnegative");
    need(beta >= 0.0, "beta", "must be nonnegative");
    need(w_balance >= 0.0, "w_balance", "must be nonnegative");
    need(task_weight_decay > 0.0 && task_weight_decay <= 1.0, "task_weight_decay", "must lie in (0, 1]");
    need(router_noise_std >= 0.0, "router_noise_std", "must be nonnegative");
    need(threads > 0, "threads", "must be positive");
  }
};

/// The hyperparameters reported for the full-scale model.
inline TrainConfig paper_train_config() {
  TrainConfig c;
  c.model = ModelConfig{};
  c.model.d = 128, c.model.layers = 4, c.model.heads = 2, c.model.experts = 10, c.model.top_k = 2;
  c.batch_size = 32;
  c.epochs = 40;
  c.adam.lr = 1e-3;
  return c;
}

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_ + ": must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
        const auto& v = j_.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("");
        out = v.get<V>();
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!j_.at(key).is_boolean()) throw ConfigError("");
        out = j_.at(key).get<bool>();
      } else if constexpr (std::is_arithmetic_v<V>) {
        if (!j_.at(key).is_number()) throw ConfigError("");
        out = j_.at(key).get<V>();
      } else {
        out = j_.at(key).get<V>();
      }
    } catch (const std::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }
  std::string field(const std::string& key) const { return prefix_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_hidden", c.ffn_hidden},
          {"experts", c.experts},
          {"top_k", c.top_k},
          {"expert_hidden", c.expert_hidden},
          {"ts_features", c.ts_features},
          {"ts_max_steps", c.ts_max_steps},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"image_channels", c.image_channels},
          {"patch", c.patch},
          {"note_features", c.note_features},
          {"note_max_tokens", c.note_max_tokens},
          {"epsilon", c.epsilon},
          {"centering", c.centering == CovarianceCentering::mean ? "mean" : "literal_sum"},
          {"use_combination_tokens", c.use_combination_tokens},
          {"use_decorrelation", c.use_decorrelation},
          {"use_moe", c.use_moe}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  detail::Reader r(j, "model");
  r.get("d", c.d);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  r.get("ffn_hidden", c.ffn_hidden);
  r.get("experts", c.experts);
  r.get("top_k", c.top_k);
  r.get("expert_hidden", c.expert_hidden);
  r.get("ts_features", c.ts_features);
  r.get("ts_max_steps", c.ts_max_steps);
  r.get("image_height", c.image_height);
  r.get("image_width", c.image_width);
  r.get("image_channels", c.image_channels);
  r.get("patch", c.patch);
  r.get("note_features", c.note_features);
  r.get("note_max_tokens", c.note_max_tokens);
  r.get("epsilon", c.epsilon);
  std::string centering = c.centering == CovarianceCentering::mean ? "mean" : "literal_sum";
  r.get("centering", centering);
  if (centering == "mean") c.centering = CovarianceCentering::mean;
  else if (centering == "literal_sum") c.centering = CovarianceCentering::literal_sum;
  else throw ConfigError("model.centering: expected mean or literal_sum");
  r.get("use_combination_tokens", c.use_combination_tokens);
  r.get("use_decorrelation", c.use_decorrelation);
  r.get("use_moe", c.use_moe);
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.adam.lr},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"weight_decay", c.adam.weight_decay},
          {"beta", c.beta},
          {"w_balance", c.w_balance},
          {"task_weight_decay", c.task_weight_decay},
          {"router_noise_std", c.router_noise_std},
          {"shuffle_task_order", c.shuffle_task_order},
          {"per_task_optimizer", c.per_task_optimizer},
          {"seed", c.seed},
          {"threads", c.threads},
          {"lr_min", c.lr_min},
          {"lr_max", c.lr_max}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  detail::Reader r(j, "train");
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("learning_rate", c.adam.lr);
  r.get("adam_beta1", c.adam.beta1);
  r.get("adam_beta2", c.adam.beta2);
  r.get("adam_eps", c.adam.eps);
  r.get("weight_decay", c.adam.weight_decay);
  r.get("beta", c.beta);
  r.get("w_balance", c.w_balance);
  r.get("task_weight_decay", c.task_weight_decay);
  r.get("router_noise_std", c.router_noise_std);
  r.get("shuffle_task_order", c.shuffle_task_order);
  r.get("per_task_optimizer", c.per_task_optimizer);
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.get("lr_min", c.lr_min);
  r.get("lr_max", c.lr_max);
  r.finish();
  return c;
}

inline nlohmann::json to_json(const TaskGenSpec& t) {
  return {{"name", t.name},
          {"kind", head_kind_name(t.kind)},
          {"label_dim", t.label_dim},
          {"loss_weight", t.loss_weight},
          {"missing", {{"t", t.missing[0]}, {"i", t.missing[1]}, {"n", t.missing[2]}}},
          {"signal", t.signal},
          {"share", t.share},
          {"threshold", t.threshold},
          {"n_samples", t.n_samples}};
}

inline TaskGenSpec task_gen_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string())
    throw ConfigError("gen.tasks: every task needs a string name");
  TaskGenSpec t;
  t.name = j["name"].get<std::string>();
  detail::Reader r(j, "gen.tasks." + t.name);
  r.get("name", t.name);
  std::string kind = head_kind_name(t.kind);
  r.get("kind", kind);
  try {
    t.kind = parse_head_kind(kind);
  } catch (const std::exception&) {
    throw ConfigError(r.field("kind") + ": unknown head kind " + kind);
  }
  r.get("label_dim", t.label_dim);
  r.get("loss_weight", t.loss_weight);
  if (r.has("missing")) {
    detail::Reader m(r.at("missing"), r.field("missing"));
    m.get("t", t.missing[0]);
    m.get("i", t.missing[1]);
    m.get("n", t.missing[2]);
    m.finish();
  }
  r.get("signal", t.signal);
  r.get("share", t.share);
  r.get("threshold", t.threshold);
  r.get("n_samples", t.n_samples);
  r.finish();
  return t;
}

inline nlohmann::json to_json(const GenConfig& g) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : g.tasks) tasks.push_back(to_json(t));
  return {{"seed", g.seed},
          {"n_samples", g.n_samples},
          {"latent_dim", g.latent_dim},
          {"shape", shape_to_json(g.shape)},
          {"ts_min_steps", g.ts_min_steps},
          {"ts_steps", g.ts_steps},
          {"note_min_tokens", g.note_min_tokens},
          {"note_tokens", g.note_tokens},
          {"noise", {{"t", g.noise[0]}, {"i", g.noise[1]}, {"n", g.noise[2]}}},
          {"train_fraction", g.train_fraction},
          {"valid_fraction", g.valid_fraction},
          {"tasks", tasks}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig g = default_gen_config()) {
  detail::Reader r(j, "gen");
  r.get("seed", g.seed);
  r.get("n_samples", g.n_samples);
  r.get("latent_dim", g.latent_dim);
  if (r.has("shape")) {
    detail::Reader s(r.at("shape"), "gen.shape");
    s.get("ts_features", g.shape.ts_features);
    s.get("ts_max_steps", g.shape.ts_max_steps);
    s.get("image_height", g.shape.image_height);
    s.get("image_width", g.shape.image_width);
    s.get("image_channels", g.shape.image_channels);
    s.get("note_features", g.shape.note_features);
    s.get("note_max_tokens", g.shape.note_max_tokens);
    s.finish();
  }
  r.get("ts_min_steps", g.ts_min_steps);
  r.get("ts_steps", g.ts_steps);
  r.get("note_min_tokens", g.note_min_tokens);
  r.get("note_tokens", g.note_tokens);
  if (r.has("noise")) {
    detail::Reader m(r.at("noise"), "gen.noise");
    m.get("t", g.noise[0]);
    m.get("i", g.noise[1]);
    m.get("n", g.noise[2]);
    m.finish();
  }
  r.get("train_fraction", g.train_fraction);
  r.get("valid_fraction", g.valid_fraction);
  if (r.has("tasks")) {
    const auto& a = r.at("tasks");
    if (!a.is_array()) throw ConfigError("gen.tasks: must be a list");
    g.tasks.clear();
    for (const auto& t : a) g.tasks.push_back(task_gen_from_json(t));
  }
  r.finish();
  g.validate();
  return g;
}

struct RunConfig {
  ModelConfig model{32, 2, 2, 0, 10, 2, 0};
  TrainConfig train;
  GenConfig gen = default_gen_config();
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "model" && it.key() != "train" && it.key() != "gen")
      throw ConfigError(it.key() + ": unknown section");
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j["model"], rc.model);
  if (j.contains("train")) rc.train = train_config_from_json(j["train"], rc.train);
  rc.train.model = rc.model;
  rc.train.validate();
  if (j.contains("gen")) rc.gen = gen_config_from_json(j["gen"]);
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json to_json(const RunConfig& rc) {
  return {{"model", to_json(rc.model)}, {"train", to_json(rc.train)}, {"gen", to_json(rc.gen)}};
}

}  // namespace flexcare
