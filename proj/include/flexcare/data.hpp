// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal multitask patient data. Every synthetic patient has a
// latent state vector; each modality is a noisy random-linear view of it and
// every task label is a deterministic function of it. Tasks that share a
// signal group share a latent direction, which plants cross-task structure.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexcare/model.hpp"
#include "flexcare/rng.hpp"
#include "flexcare/seqlayout.hpp"
#include "flexcare/tasks.hpp"
#include "flexcare/tensor.hpp"

namespace flexcare {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, valid, test };
inline constexpr std::array<Split, 3> kSplits = {Split::train, Split::valid, Split::test};

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct PatientSample {
  std::string id;
  std::size_t task_id = 0;
  Label label;
  std::optional<Matrix<double>> timeseries;  // steps x F_t
  std::optional<Matrix<double>> image;       // H x (W * C)
  std::optional<Matrix<double>> note;        // N_n x F_n

  ModalitySet present() const {
    ModalitySet s;
    if (timeseries) s.insert(Modality::timeseries);
    if (image) s.insert(Modality::image);
    if (note) s.insert(Modality::note);
    return s;
  }
  const std::optional<Matrix<double>>& modality(std::size_t m) const {
    return m == 0 ? timeseries : m == 1 ? image : note;
  }
};

template <typename T>
SampleInput<T> to_input(const PatientSample& s) {
  SampleInput<T> x;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (const auto& v = s.modality(m)) x.modality[m] = v->template cast<T>();
  return x;
}

/// Array geometry shared by every sample of a dataset.
struct DataShape {
  std::size_t ts_features = 76;
  std::size_t ts_max_steps = 24;
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t image_channels = 1;
  std::size_t note_features = 32;
  std::size_t note_max_tokens = 4;

  std::size_t width(std::size_t m) const {
    return m == 0 ? ts_features : m == 1 ? image_width * image_channels : note_features;
  }
};

/// Copies array geometry into a model configuration.
inline void apply_shape(ModelConfig& cfg, const DataShape& s) {
  cfg.ts_features = s.ts_features;
  cfg.ts_max_steps = s.ts_max_steps;
  cfg.image_height = s.image_height;
  cfg.image_width = s.image_width;
  cfg.image_channels = s.image_channels;
  cfg.note_features = s.note_features;
  cfg.note_max_tokens = s.note_max_tokens;
}

struct TaskData {
  TaskSpec spec;
  std::array<std::vector<PatientSample>, 3> splits;

  std::vector<PatientSample>& split(Split s) { return splits[static_cast<std::size_t>(s)]; }
  const std::vector<PatientSample>& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }
};

struct Dataset {
  DataShape shape;
  TaskRegistry tasks;
  std::vector<TaskData> per_task;  // indexed by task id

  const TaskData& task(std::size_t id) const {
    if (id >= per_task.size()) throw UnknownTaskError("dataset has no task id " + std::to_string(id));
    return per_task[id];
  }
  const TaskData& task(const std::string& name) const { return task(tasks.by_name(name).id); }
};

// ---------------------------------------------------------------------------
// Generator

struct TaskGenSpec {
  std::string name;
  HeadKind kind = HeadKind::binary;
  std::size_t label_dim = 1;
  double loss_weight = 1.0;
  std::array<double, 3> missing{0.0, 0.0, 0.0};  // per modality (t, i, n)
  std::string signal;                            // shared latent group
  double share = 0.5;                            // fraction of score variance from the group
  double threshold = 0.0;                        // binary / multilabel cut on the score
  std::size_t n_samples = 0;                     // 0 -> GenConfig::n_samples
};

struct GenConfig {
  std::uint64_t seed = 7;
  std::size_t n_samples = 2000;
  std::size_t latent_dim = 16;
  DataShape shape{76, 24, 16, 16, 1, 32, 4};
  std::size_t ts_min_steps = 8;
  std::size_t ts_steps = 12;      // upper bound of sampled steps, <= shape.ts_max_steps
  std::size_t note_min_tokens = 1;
  std::size_t note_tokens = 3;    // upper bound, <= shape.note_max_tokens
  std::array<double, 3> noise{3.0, 3.0, 3.0};
  double train_fraction = 0.7;
  double valid_fraction = 0.1;
  std::vector<TaskGenSpec> tasks;

  void validate() const {
    const auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("gen." + field + ": " + why);
    };
    if (n_samples == 0) fail("n_samples", "must be positive");
    if (latent_dim == 0) fail("latent_dim", "must be positive");
    if (ts_min_steps == 0 || ts_min_steps > ts_steps) fail("ts_min_steps", "must be in [1, ts_steps]");
    if (ts_steps > shape.ts_max_steps) fail("ts_steps", "exceeds ts_max_steps");
    if (note_min_tokens == 0 || note_min_tokens > note_tokens) fail("note_min_tokens", "must be in [1, note_tokens]");
    if (note_tokens > shape.note_max_tokens) fail("note_tokens", "exceeds note_max_tokens");
    for (std::size_t m = 0; m < 3; ++m)
      if (!(noise[m] >= 0.0)) fail("noise", "scales must be nonnegative");
    if (!(train_fraction > 0.0 && valid_fraction >= 0.0 && train_fraction + valid_fraction < 1.0))
      fail("train_fraction", "split fractions must leave a nonempty test share");
    if (tasks.empty()) fail("tasks", "at least one task required");
    for (const auto& t : tasks) {
      for (std::size_t m = 0; m < 3; ++m) {
        const double r = t.missing[m];
        if (!(r >= 0.0 && r <= 1.0))
          fail("tasks." + t.name + ".missing." + modality_code(kModalities[m]), "rate must lie in [0, 1]");
      }
      if (t.missing[0] >= 1.0 && t.missing[1] >= 1.0 && t.missing[2] >= 1.0)
        fail("tasks." + t.name + ".missing", "rates imply samples with no modality");
      if (!(t.share >= 0.0 && t.share <= 1.0)) fail("tasks." + t.name + ".share", "must lie in [0, 1]");
    }
  }
};

/// Six-task suite with the per-task missing rates of the source cohort
/// statistics. IHM and DEC share the mortality signal.
inline GenConfig default_gen_config() {
  GenConfig g;
  g.tasks = {
      {"IHM", HeadKind::binary, 1, 0.2, {0.0, 0.7640, 0.0749}, "mortality", 0.95, 0.9, 0},
      {"LOS", HeadKind::multiclass, 10, 0.5, {0.0, 0.8516, 0.0827}, "acuity", 0.6, 0.0, 0},
      {"DEC", HeadKind::binary, 1, 0.2, {0.0, 0.8515, 0.0824}, "mortality", 0.95, 1.0, 0},
      {"PHE", HeadKind::multilabel, 25, 1.0, {0.0, 0.8194, 0.0830}, "acuity", 0.4, 0.8, 0},
      {"REA", HeadKind::binary, 1, 0.2, {0.0, 0.8238, 0.0806}, "acuity", 0.5, 0.8, 0},
      {"DIA", HeadKind::multilabel, 14, 0.2, {0.7634, 0.0, 0.3256}, "imaging", 0.4, 0.8, 0},
  };
  return g;
}

/// A seventh binary task on the mortality signal, used to exercise
/// extending a trained model with a new head.
inline TaskGenSpec extension_task_spec() {
  return {"EXT", HeadKind::binary, 1, 0.2, {0.0, 0.7640, 0.0749}, "mortality", 0.7, 0.3, 0};
}

inline TaskRegistry registry_of(const GenConfig& g) {
  TaskRegistry r;
  for (const auto& t : g.tasks) r.add({0, t.name, t.kind, t.label_dim, t.loss_weight});
  return r;
}

namespace detail {

inline double quantize(double v) { return std::round(v * 1e4) / 1e4; }

inline std::vector<double> unit_direction(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(dim);
  double n2 = 0.0;
  for (auto& x : v) {
    x = nd(rng);
    n2 += x * x;
  }
  for (auto& x : v) x /= std::sqrt(n2);
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Latent-to-observation maps and label directions shared by all tasks.
struct World {
  Matrix<double> ts_base, ts_trend, image, note;  // latent_dim x width
  std::map<std::string, std::vector<double>> groups;
  std::vector<std::vector<std::vector<double>>> own;  // per task, per label
};

inline World make_world(const GenConfig& g) {
  World w;
  std::mt19937_64 rng(derive_seed(g.seed, {0x776f726c64ULL}));
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(double(g.latent_dim)));
  const auto fill = [&](std::size_t cols) {
    Matrix<double> m(g.latent_dim, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = nd(rng);
    return m;
  };
  w.ts_base = fill(g.shape.ts_features);
  w.ts_trend = fill(g.shape.ts_features);
  w.image = fill(g.shape.image_height * g.shape.image_width * g.shape.image_channels);
  w.note = fill(g.shape.note_features);
  // Directions are keyed by name so a task draws the same world whatever
  // suite it is generated in.
  for (const auto& t : g.tasks)
    if (!w.groups.count(t.signal)) {
      std::mt19937_64 grng(derive_seed(g.seed, {0x67726f7570ULL, name_key(t.signal)}));
      w.groups[t.signal] = unit_direction(g.latent_dim, grng);
    }
  for (const auto& t : g.tasks) {
    std::mt19937_64 trng(derive_seed(g.seed, {0x6f776eULL, name_key(t.name)}));
    const std::size_t n_dirs = t.kind == HeadKind::multilabel ? t.label_dim : 1;
    std::vector<std::vector<double>> dirs;
    for (std::size_t j = 0; j < n_dirs; ++j) dirs.push_back(unit_direction(g.latent_dim, trng));
    w.own.push_back(std::move(dirs));
  }
  return w;
}

inline Label label_from_latent(const GenConfig& g, const World& w, std::size_t task_idx,
                               const std::vector<double>& u) {
  const TaskGenSpec& t = g.tasks[task_idx];
  const double a = std::sqrt(t.share), b = std::sqrt(1.0 - t.share);
  const double group = dot(w.groups.at(t.signal), u);
  Label y;
  switch (t.kind) {
    case HeadKind::binary: {
      const double s = a * group + b * dot(w.own[task_idx][0], u);
      y.values = {s > t.threshold ? 1 : 0};
      break;
    }
    case HeadKind::multiclass: {
      const double s = a * group + b * dot(w.own[task_idx][0], u);
      const double cdf = 0.5 * std::erfc(-s / std::sqrt(2.0));
      y.values = {static_cast<int>(std::min<double>(double(t.label_dim) - 1, std::floor(cdf * double(t.label_dim))))};
      break;
    }
    case HeadKind::multilabel: {
      for (std::size_t j = 0; j < t.label_dim; ++j) {
        const double s = a * group + b * dot(w.own[task_idx][j], u);
        const double cut = t.threshold + 0.6 * (double(j) / double(t.label_dim) - 0.5);
        y.values.push_back(s > cut ? 1 : 0);
      }
      break;
    }
  }
  return y;
}

inline Matrix<double> linear_view(const std::vector<double>& u, const Matrix<double>& map, std::size_t rows,
                                  double noise, std::mt19937_64& rng, const Matrix<double>* trend = nullptr) {
  std::normal_distribution<double> nd;
  const std::size_t cols = map.cols();
  std::vector<double> base(cols, 0.0), slope(cols, 0.0);
  for (std::size_t k = 0; k < u.size(); ++k)
    for (std::size_t c = 0; c < cols; ++c) {
      base[c] += u[k] * map(k, c);
      if (trend) slope[c] += u[k] * (*trend)(k, c);
    }
  Matrix<double> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double frac = rows > 1 ? double(r) / double(rows - 1) : 0.0;
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = quantize(base[c] + frac * slope[c] + noise * nd(rng));
  }
  return out;
}

}  // namespace detail

/// Generates one patient per sample, with patient-level train/valid/test
/// assignment. Deterministic in the configuration.
inline Dataset generate(const GenConfig& g) {
  g.validate();
  Dataset ds;
  ds.shape = g.shape;
  ds.tasks = registry_of(g);
  const detail::World world = detail::make_world(g);
  for (std::size_t ti = 0; ti < g.tasks.size(); ++ti) {
    const TaskGenSpec& spec = g.tasks[ti];
    const std::size_t n = spec.n_samples ? spec.n_samples : g.n_samples;
    TaskData td;
    td.spec = ds.tasks.at(ti);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 split_rng(derive_seed(g.seed, {0x73706c6974ULL, name_key(spec.name)}));
    std::shuffle(perm.begin(), perm.end(), split_rng);
    const auto n_train = static_cast<std::size_t>(std::llround(g.train_fraction * double(n)));
    const auto n_valid = static_cast<std::size_t>(std::llround(g.valid_fraction * double(n)));
    std::vector<Split> split_of(n);
    for (std::size_t r = 0; r < n; ++r)
      split_of[perm[r]] = r < n_train ? Split::train : r < n_train + n_valid ? Split::valid : Split::test;

    for (std::size_t i = 0; i < n; ++i) {
      std::mt19937_64 rng(derive_seed(g.seed, {name_key(spec.name), i}));
      std::normal_distribution<double> nd;
      std::vector<double> u(g.latent_dim);
      for (auto& v : u) v = nd(rng);
      PatientSample s;
      s.id = spec.name + "-" + std::to_string(i);
      s.task_id = ti;
      s.label = detail::label_from_latent(g, world, ti, u);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      std::array<bool, 3> keep{};
      do {
        for (std::size_t m = 0; m < 3; ++m) keep[m] = unif(rng) >= spec.missing[m];
      } while (!keep[0] && !keep[1] && !keep[2]);
      std::uniform_int_distribution<std::size_t> steps(g.ts_min_steps, g.ts_steps);
      std::uniform_int_distribution<std::size_t> notes(g.note_min_tokens, g.note_tokens);
      const std::size_t n_steps = steps(rng), n_notes = notes(rng);
      if (keep[0]) s.timeseries = detail::linear_view(u, world.ts_base, n_steps, g.noise[0], rng, &world.ts_trend);
      if (keep[1]) {
        Matrix<double> flat = detail::linear_view(u, world.image, 1, g.noise[1], rng);
        s.image = Matrix<double>(g.shape.image_height, g.shape.image_width * g.shape.image_channels,
                                 std::move(flat.storage()));
      }
      if (keep[2]) s.note = detail::linear_view(u, world.note, n_notes, g.noise[2], rng);
      td.split(split_of[i]).push_back(std::move(s));
    }
    ds.per_task.push_back(std::move(td));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// File format: one JSON object per line, {id, task, label, t, i, n}; absent
// modalities are null; arrays are nested lists (image as H x W x C).

inline nlohmann::json sample_to_json(const PatientSample& s, const TaskSpec& task, const DataShape& shape) {
  using nlohmann::json;
  json j;
  j["id"] = s.id;
  j["task"] = task.name;
  if (task.kind == HeadKind::multilabel) j["label"] = s.label.values;
  else j["label"] = s.label.values.at(0);
  const auto rows = [](const Matrix<double>& m) {
    json a = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) a.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return a;
  };
  j["t"] = s.timeseries ? rows(*s.timeseries) : json(nullptr);
  if (s.image) {
    json img = json::array();
    const std::size_t c = shape.image_channels;
    for (std::size_t y = 0; y < s.image->rows(); ++y) {
      json line = json::array();
      for (std::size_t x = 0; x < shape.image_width; ++x) {
        std::vector<double> px(c);
        for (std::size_t k = 0; k < c; ++k) px[k] = (*s.image)(y, x * c + k);
        line.push_back(std::move(px));
      }
      img.push_back(std::move(line));
    }
    j["i"] = std::move(img);
  } else {
    j["i"] = nullptr;
  }
  j["n"] = s.note ? rows(*s.note) : json(nullptr);
  return j;
}

namespace detail {
inline Matrix<double> parse_rows(const nlohmann::json& a, std::size_t width, std::size_t max_rows, const char* what) {
  if (!a.is_array() || a.empty()) throw DataError(std::string(what) + " must be a nonempty list of rows");
  if (a.size() > max_rows)
    throw DataError(std::string(what) + " has " + std::to_string(a.size()) + " rows, limit " + std::to_string(max_rows));
  Matrix<double> m(a.size(), width);
  for (std::size_t r = 0; r < a.size(); ++r) {
    const auto& row = a[r];
    if (!row.is_array() || row.size() != width)
      throw DataError(std::string(what) + " row " + std::to_string(r) + " must have width " + std::to_string(width));
    for (std::size_t c = 0; c < width; ++c) {
      if (!row[c].is_number()) throw DataError(std::string(what) + " contains a non-numeric entry");
      m(r, c) = row[c].get<double>();
    }
  }
  return m;
}
}  // namespace detail

inline PatientSample sample_from_json(const nlohmann::json& j, const TaskRegistry& tasks, const DataShape& shape) {
  if (!j.is_object()) throw DataError("record must be an object");
  for (const char* key : {"id", "task", "label", "t", "i", "n"})
    if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
  PatientSample s;
  if (!j["id"].is_string()) throw DataError("field 'id' must be a string");
  s.id = j["id"].get<std::string>();
  if (!j["task"].is_string()) throw DataError("field 'task' must be a string");
  const TaskSpec* task = tasks.find(j["task"].get<std::string>());
  if (!task) throw DataError("unknown task '" + j["task"].get<std::string>() + "'");
  s.task_id = task->id;
  const auto& lab = j["label"];
  if (task->kind == HeadKind::multilabel) {
    if (!lab.is_array()) throw DataError("multilabel label must be a list");
    for (const auto& v : lab) {
      if (!v.is_number_integer()) throw DataError("label entries must be integers");
      s.label.values.push_back(v.get<int>());
    }
  } else {
    if (!lab.is_number_integer()) throw DataError("label must be an integer");
    s.label.values = {lab.get<int>()};
  }
  try {
    validate_label(s.label, *task);
  } catch (const LabelError& e) {
    throw DataError(e.what());
  }
  if (!j["t"].is_null()) s.timeseries = detail::parse_rows(j["t"], shape.ts_features, shape.ts_max_steps, "t");
  if (!j["i"].is_null()) {
    const auto& img = j["i"];
    if (!img.is_array() || img.size() != shape.image_height) throw DataError("image height mismatch");
    Matrix<double> m(shape.image_height, shape.image_width * shape.image_channels);
    for (std::size_t y = 0; y < shape.image_height; ++y) {
      const auto& line = img[y];
      if (!line.is_array() || line.size() != shape.image_width) throw DataError("image width mismatch");
      for (std::size_t x = 0; x < shape.image_width; ++x) {
        const auto& px = line[x];
        if (!px.is_array() || px.size() != shape.image_channels) throw DataError("image channel mismatch");
        for (std::size_t c = 0; c < shape.image_channels; ++c) {
          if (!px[c].is_number()) throw DataError("image contains a non-numeric entry");
          m(y, x * shape.image_channels + c) = px[c].get<double>();
        }
      }
    }
    s.image = std::move(m);
  }
  if (!j["n"].is_null()) s.note = detail::parse_rows(j["n"], shape.note_features, shape.note_max_tokens, "n");
  if (s.present().empty()) throw DataError("sample " + s.id + " has no modality present");
  return s;
}

inline void write_split(const std::filesystem::path& path, const std::vector<PatientSample>& samples,
                        const TaskRegistry& tasks, const DataShape& shape) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : samples) out << sample_to_json(s, tasks.at(s.task_id), shape).dump() << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

/// Reads one split file; errors carry the 1-based line number.
inline std::vector<PatientSample> load_split(const std::filesystem::path& path, const TaskRegistry& tasks,
                                             const DataShape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<PatientSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line), tasks, shape));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json shape_to_json(const DataShape& s) {
  return {{"ts_features", s.ts_features},       {"ts_max_steps", s.ts_max_steps},
          {"image_height", s.image_height},     {"image_width", s.image_width},
          {"image_channels", s.image_channels}, {"note_features", s.note_features},
          {"note_max_tokens", s.note_max_tokens}};
}

inline DataShape shape_from_json(const nlohmann::json& j) {
  DataShape s;
  s.ts_features = j.at("ts_features").get<std::size_t>();
  s.ts_max_steps = j.at("ts_max_steps").get<std::size_t>();
  s.image_height = j.at("image_height").get<std::size_t>();
  s.image_width = j.at("image_width").get<std::size_t>();
  s.image_channels = j.at("image_channels").get<std::size_t>();
  s.note_features = j.at("note_features").get<std::size_t>();
  s.note_max_tokens = j.at("note_max_tokens").get<std::size_t>();
  return s;
}

inline nlohmann::json task_to_json(const TaskSpec& t) {
  return {{"id", t.id}, {"name", t.name}, {"kind", head_kind_name(t.kind)},
          {"label_dim", t.label_dim}, {"loss_weight", t.loss_weight}};
}

inline nlohmann::json registry_to_json(const TaskRegistry& r) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& t : r) a.push_back(task_to_json(t));
  return a;
}

inline TaskRegistry registry_from_json(const nlohmann::json& a) {
  TaskRegistry r;
  for (const auto& t : a) {
    const auto& added = r.add({0, t.at("name").get<std::string>(), parse_head_kind(t.at("kind").get<std::string>()),
                               t.at("label_dim").get<std::size_t>(), t.at("loss_weight").get<double>()});
    if (t.contains("id") && t["id"].get<std::size_t>() != added.id)
      throw DataError("task registry ids must be dense and ordered");
  }
  return r;
}

/// Layout: <dir>/dataset.json (shape + registry), <dir>/<TASK>/<split>.jsonl.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta = {{"format", "flexcare-dataset"}, {"version", 1},
                         {"shape", shape_to_json(ds.shape)}, {"tasks", registry_to_json(ds.tasks)}};
  std::ofstream(dir / "dataset.json") << meta.dump(2) << '\n';
  for (const auto& td : ds.per_task) {
    std::filesystem::create_directories(dir / td.spec.name);
    for (Split s : kSplits)
      write_split(dir / td.spec.name / (std::string(split_name(s)) + ".jsonl"), td.split(s), ds.tasks, ds.shape);
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw DataError("no dataset.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset.json: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    ds.shape = shape_from_json(meta.at("shape"));
    ds.tasks = registry_from_json(meta.at("tasks"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset.json: " + std::string(e.what()));
  }
  for (const auto& spec : ds.tasks) {
    TaskData td;
    td.spec = spec;
    for (Split s : kSplits) {
      const auto path = dir / spec.name / (std::string(split_name(s)) + ".jsonl");
      if (std::filesystem::exists(path)) td.split(s) = load_split(path, ds.tasks, ds.shape);
    }
    for (Split s : kSplits)
      for (const auto& smp : td.split(s))
        if (smp.task_id != spec.id)
          throw DataError("sample " + smp.id + " stored under task " + spec.name + " belongs to another task");
    ds.per_task.push_back(std::move(td));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Single-task mini-batch with zero-padded per-modality arrays. Sample i of
/// modality m occupies rows [i * max_len[m], i * max_len[m] + valid_len[m][i]).
struct PatientBatch {
  std::size_t task_id = 0;
  std::vector<std::string> ids;
  std::vector<Label> labels;
  std::vector<ModalitySet> presence;
  std::array<std::size_t, 3> max_len{};
  std::array<Matrix<double>, 3> padded;
  std::array<std::vector<std::size_t>, 3> valid_len;

  std::size_t size() const noexcept { return ids.size(); }

  /// Unpadded model input of sample i; padding rows are never read.
  template <typename T>
  SampleInput<T> input(std::size_t i) const {
    SampleInput<T> x;
    for (std::size_t m = 0; m < 3; ++m) {
      if (!presence[i].contains(m)) continue;
      const std::size_t w = padded[m].cols(), n = valid_len[m][i];
      Matrix<T> v(n, w);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) v(r, c) = static_cast<T>(padded[m](i * max_len[m] + r, c));
      x.modality[m] = std::move(v);
    }
    return x;
  }
};

inline PatientBatch make_batch(const std::vector<PatientSample>& samples, std::span<const std::size_t> idx,
                               std::size_t task_id, const DataShape& shape) {
  PatientBatch b;
  b.task_id = task_id;
  for (std::size_t m = 0; m < 3; ++m) {
    std::size_t mx = 0;
    for (std::size_t i : idx)
      if (const auto& v = samples[i].modality(m)) mx = std::max(mx, v->rows());
    b.max_len[m] = mx;
    b.padded[m] = Matrix<double>(idx.size() * mx, shape.width(m));
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const PatientSample& s = samples[idx[k]];
    if (s.task_id != task_id) throw DataError("make_batch: sample " + s.id + " belongs to another task");
    b.ids.push_back(s.id);
    b.labels.push_back(s.label);
    b.presence.push_back(s.present());
    for (std::size_t m = 0; m < 3; ++m) {
      const auto& v = s.modality(m);
      b.valid_len[m].push_back(v ? v->rows() : 0);
      if (!v) continue;
      for (std::size_t r = 0; r < v->rows(); ++r)
        std::copy(v->row(r).begin(), v->row(r).end(), b.padded[m].row(k * b.max_len[m] + r).begin());
    }
  }
  return b;
}

/// Shuffled batch index plan, deterministic in (seed, epoch, task). The last
/// batch may be partial.
inline std::vector<std::vector<std::size_t>> batch_plan(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                        std::size_t epoch, std::size_t task_id) {
  if (batch_size == 0) throw std::invalid_argument("batch_plan: batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x6261746368ULL, epoch, task_id}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t i = 0; i < n; i += batch_size)
    plan.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  return plan;
}

inline std::vector<PatientBatch> batch_iter(const Dataset& ds, std::size_t task_id, Split split,
                                            std::size_t batch_size, std::uint64_t seed, std::size_t epoch = 0) {
  const TaskData& td = ds.task(task_id);
  const auto& samples = td.split(split);
  std::vector<PatientBatch> out;
  for (const auto& idx : batch_plan(samples.size(), batch_size, seed, epoch, task_id))
    out.push_back(make_batch(samples, idx, task_id, ds.shape));
  return out;
}

}  // namespace flexcare
