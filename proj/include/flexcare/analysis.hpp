// SPDX-License-Identifier: Apache-2.0
//
// Analysis exports: expert selection frequencies per (task, combination),
// patient-level representations and fusion weights. Tables are CSV with a
// header row.
#pragma once

#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "flexcare/data.hpp"
#include "flexcare/model.hpp"

namespace flexcare {

struct ExpertStat {
  std::string task;
  std::string combination;
  std::size_t expert = 0;
  double frequency = 0.0;
  std::size_t selections = 0;
};

/// Share of top-k selections each expert receives per (task, combination).
/// Each routed token contributes k selections, so every key sums to 1.
template <typename T>
std::vector<ExpertStat> export_expert_stats(const Model<T>& model, const Dataset& ds, Split split = Split::test) {
  std::vector<ExpertStat> out;
  const std::size_t ne = model.config().use_moe ? model.config().experts : 1;
  for (const auto& td : ds.per_task) {
    const TaskSpec* mt = model.tasks().find(td.spec.name);
    if (!mt) continue;
    std::map<std::size_t, std::vector<std::size_t>> counts;  // canonical combination index -> per expert
    std::map<std::size_t, std::string> names;
    for (const auto& s : td.split(split)) {
      ad::Tape<T> tape;
      const auto r = model.forward(tape, nullptr, to_input<T>(s), mt->id);
      for (std::size_t c = 0; c < r.combinations.size(); ++c) {
        const std::size_t key = canonical_index(r.combinations[c]);
        names[key] = combination_name(r.combinations[c]);
        auto& row = counts[key];
        row.resize(ne, 0);
        if (model.config().use_moe) {
          for (std::size_t e : r.routing[c].record.expert_ids) ++row[e];
        } else {
          ++row[0];
        }
      }
    }
    for (const auto& [key, row] : counts) {
      std::size_t total = 0;
      for (std::size_t v : row) total += v;
      for (std::size_t e = 0; e < ne; ++e)
        out.push_back({td.spec.name, names[key], e, total ? double(row[e]) / double(total) : 0.0, row[e]});
    }
  }
  return out;
}

struct EmbeddingRow {
  std::string task;
  std::string id;
  std::vector<double> values;  // width 2d
};

/// Patient-level representations of the first `n_per_task` samples of each task.
template <typename T>
std::vector<EmbeddingRow> export_embeddings(const Model<T>& model, const Dataset& ds, std::size_t n_per_task,
                                            Split split = Split::test) {
  std::vector<EmbeddingRow> out;
  for (const auto& td : ds.per_task) {
    const TaskSpec* mt = model.tasks().find(td.spec.name);
    if (!mt) continue;
    const auto& samples = td.split(split);
    for (std::size_t i = 0; i < std::min(n_per_task, samples.size()); ++i) {
      ad::Tape<T> tape;
      const auto r = model.forward(tape, nullptr, to_input<T>(samples[i]), mt->id);
      const auto& v = tape.value(r.fusion.patient);
      out.push_back({td.spec.name, samples[i].id, std::vector<double>(v.data(), v.data() + v.size())});
    }
  }
  return out;
}

struct AlphaRow {
  std::string task;
  std::string id;
  std::string combination;
  double alpha = 0.0;
};

template <typename T>
std::vector<AlphaRow> export_alphas(const Model<T>& model, const Dataset& ds, std::size_t n_per_task,
                                    Split split = Split::test) {
  std::vector<AlphaRow> out;
  for (const auto& td : ds.per_task) {
    const TaskSpec* mt = model.tasks().find(td.spec.name);
    if (!mt) continue;
    const auto& samples = td.split(split);
    for (std::size_t i = 0; i < std::min(n_per_task, samples.size()); ++i) {
      ad::Tape<T> tape;
      const auto r = model.forward(tape, nullptr, to_input<T>(samples[i]), mt->id);
      const auto& a = tape.value(r.fusion.alpha);
      for (std::size_t c = 0; c < r.combinations.size(); ++c)
        out.push_back({td.spec.name, samples[i].id, combination_name(r.combinations[c]), double(a[c])});
    }
  }
  return out;
}

namespace detail {
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace detail

inline void write_csv(std::ostream& os, const std::vector<ExpertStat>& rows) {
  os << "task,combination,expert,frequency,selections\n";
  for (const auto& r : rows)
    os << r.task << ',' << r.combination << ',' << r.expert << ',' << detail::fmt_double(r.frequency) << ','
       << r.selections << '\n';
}

inline void write_csv(std::ostream& os, const std::vector<EmbeddingRow>& rows) {
  const std::size_t w = rows.empty() ? 0 : rows[0].values.size();
  os << "task,id";
  for (std::size_t j = 0; j < w; ++j) os << ",s" << j;
  os << '\n';
  for (const auto& r : rows) {
    os << r.task << ',' << r.id;
    for (double v : r.values) os << ',' << detail::fmt_double(v);
    os << '\n';
  }
}

inline void write_csv(std::ostream& os, const std::vector<AlphaRow>& rows) {
  os << "task,id,combination,alpha\n";
  for (const auto& r : rows) os << r.task << ',' << r.id << ',' << r.combination << ',' << detail::fmt_double(r.alpha) << '\n';
}

}  // namespace flexcare
