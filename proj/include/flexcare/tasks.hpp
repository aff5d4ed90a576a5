// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/encoder.hpp"

namespace flexcare {

enum class HeadKind { binary, multiclass, multilabel };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::binary: return "binary";
    case HeadKind::multiclass: return "multiclass";
    case HeadKind::multilabel: return "multilabel";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "binary") return HeadKind::binary;
  if (s == "multiclass") return HeadKind::multiclass;
  if (s == "multilabel") return HeadKind::multilabel;
  throw std::invalid_argument("unknown head kind: " + std::string(s));
}

struct TaskSpec {
  std::size_t id = 0;
  std::string name;
  HeadKind kind = HeadKind::binary;
  std::size_t label_dim = 1;
  double loss_weight = 1.0;
};

class UnknownTaskError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Ordered set of tasks with dense ids starting at 0.
class TaskRegistry {
 public:
  TaskRegistry() = default;

  /// Registers `spec`, assigning the next dense id.
  const TaskSpec& add(TaskSpec spec) {
    if (spec.name.empty()) throw std::invalid_argument("task name must be nonempty");
    if (find(spec.name)) throw std::invalid_argument("task name already registered: " + spec.name);
    if (spec.label_dim == 0) throw std::invalid_argument("task " + spec.name + ": label_dim must be positive");
    if (spec.kind == HeadKind::binary && spec.label_dim != 1)
      throw std::invalid_argument("task " + spec.name + ": binary tasks have label_dim 1");
    if (spec.kind == HeadKind::multiclass && spec.label_dim < 2)
      throw std::invalid_argument("task " + spec.name + ": multiclass tasks need at least 2 classes");
    if (!(spec.loss_weight > 0.0) || !std::isfinite(spec.loss_weight))
      throw std::invalid_argument("task " + spec.name + ": loss_weight must be positive");
    spec.id = tasks_.size();
    tasks_.push_back(std::move(spec));
    return tasks_.back();
  }

  std::size_t size() const noexcept { return tasks_.size(); }
  bool empty() const noexcept { return tasks_.empty(); }
  const TaskSpec& at(std::size_t id) const {
    if (id >= tasks_.size()) throw UnknownTaskError("unregistered task id " + std::to_string(id));
    return tasks_[id];
  }
  const TaskSpec* find(std::string_view name) const {
    for (const auto& t : tasks_)
      if (t.name == name) return &t;
    return nullptr;
  }
  const TaskSpec& by_name(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw UnknownTaskError("unknown task " + std::string(name));
  }
  auto begin() const { return tasks_.begin(); }
  auto end() const { return tasks_.end(); }

 private:
  std::vector<TaskSpec> tasks_;
};

/// Six-task suite: in-hospital mortality, length of stay (10 classes),
/// decompensation, phenotyping (25 labels), readmission, diagnosis.
inline TaskRegistry default_task_suite() {
  TaskRegistry r;
  r.add({0, "IHM", HeadKind::binary, 1, 0.2});
  r.add({0, "LOS", HeadKind::multiclass, 10, 0.5});
  r.add({0, "DEC", HeadKind::binary, 1, 0.2});
  r.add({0, "PHE", HeadKind::multilabel, 25, 1.0});
  r.add({0, "REA", HeadKind::binary, 1, 0.2});
  r.add({0, "DIA", HeadKind::multilabel, 14, 0.2});
  return r;
}

/// Label payload: {0|1} for binary, {class} for multiclass, a 0/1 vector
/// for multilabel.
struct Label {
  std::vector<int> values;
};

class LabelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate_label(const Label& y, const TaskSpec& task) {
  const auto bad = [&](const std::string& why) {
    return LabelError("task " + task.name + ": " + why);
  };
  switch (task.kind) {
    case HeadKind::binary:
      if (y.values.size() != 1 || (y.values[0] != 0 && y.values[0] != 1)) throw bad("binary label must be 0 or 1");
      break;
    case HeadKind::multiclass:
      if (y.values.size() != 1 || y.values[0] < 0 || static_cast<std::size_t>(y.values[0]) >= task.label_dim)
        throw bad("class label out of range [0, " + std::to_string(task.label_dim) + ")");
      break;
    case HeadKind::multilabel:
      if (y.values.size() != task.label_dim) throw bad("multilabel width must be " + std::to_string(task.label_dim));
      for (int v : y.values)
        if (v != 0 && v != 1) throw bad("multilabel entries must be 0 or 1");
      break;
  }
}

struct HeadVars {
  Var weight;  // 2d x label_dim
  Var bias;    // 1 x label_dim
};

/// Linear head followed by sigmoid (binary, multilabel) or softmax (multiclass).
template <typename T>
Var predict(Tape<T>& t, Var patient, const TaskSpec& task, const HeadVars& head) {
  if (t.value(head.weight).cols() != task.label_dim) throw ShapeError("predict: head width does not match task");
  Var logits = ad::add_row(t, ad::matmul(t, patient, head.weight), head.bias);
  return task.kind == HeadKind::multiclass ? ad::softmax_rows(t, logits) : ad::sigmoid(t, logits);
}

inline constexpr double kProbClamp = 1e-7;

/// Mean BCE over label dims, or CE on the true class, on clamped probabilities.
template <typename T>
Var task_loss(Tape<T>& t, Var probs, const Label& y, const TaskSpec& task) {
  validate_label(y, task);
  if (task.kind == HeadKind::multiclass)
    return ad::cross_entropy(t, probs, static_cast<std::size_t>(y.values[0]), static_cast<T>(kProbClamp));
  std::vector<T> target(y.values.begin(), y.values.end());
  return ad::bce_mean(t, probs, std::move(target), static_cast<T>(kProbClamp));
}

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// lambda_task * (pred + beta * l_cov + balance).
inline double total_loss(double pred_loss, double l_cov, double balance, const TaskSpec& task, double beta) {
  if (!std::isfinite(pred_loss) || !std::isfinite(l_cov) || !std::isfinite(balance) || !std::isfinite(beta))
    throw NumericError("total_loss: non-finite input for task " + task.name);
  return task.loss_weight * (pred_loss + beta * l_cov + balance);
}

}  // namespace flexcare
