// SPDX-License-Identifier: Apache-2.0
//
// Asynchronous single-task training: every epoch visits each task in turn,
// and every mini-batch of a task's pass takes one optimizer step on that
// task's objective only. Also evaluation and finite-difference checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "flexcare/config.hpp"
#include "flexcare/data.hpp"
#include "flexcare/metrics.hpp"
#include "flexcare/model.hpp"
#include "flexcare/optim.hpp"
#include "flexcare/rng.hpp"

namespace flexcare {

class TaskMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Runs fn(i) for i in [0, n) over contiguous chunks, one per thread.
/// `fn(i, worker)` also receives the worker index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0});
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Evaluation

inline const char* primary_metric(HeadKind k) {
  switch (k) {
    case HeadKind::binary: return "auroc";
    case HeadKind::multiclass: return "ma_f1";
    case HeadKind::multilabel: return "ma_auroc";
  }
  return "";
}

/// Metric set of one head kind from stacked predictions: binary -> auroc,
/// auprc; multiclass -> ma_f1, mi_f1; multilabel -> ma_auroc, mi_auroc.
/// Metrics undefined on the given labels are left out of the bundle.
inline MetricBundle compute_metrics(const TaskSpec& task, const std::vector<std::vector<double>>& probs,
                                    const std::vector<Label>& labels) {
  MetricBundle b;
  b.count = probs.size();
  if (probs.empty()) return b;
  switch (task.kind) {
    case HeadKind::binary: {
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t i = 0; i < probs.size(); ++i) s.push_back(probs[i][0]), y.push_back(labels[i].values[0]);
      try {
        b.values["auroc"] = auroc(s, y);
      } catch (const UndefinedMetricError&) {
        ++b.skipped_labels;
      }
      try {
        b.values["auprc"] = auprc(s, y);
      } catch (const UndefinedMetricError&) {
      }
      break;
    }
    case HeadKind::multiclass: {
      std::vector<int> pred, truth;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        pred.push_back(int(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin()));
        truth.push_back(labels[i].values[0]);
      }
      const auto [ma, mi] = f1_scores(pred, truth, task.label_dim);
      b.values["ma_f1"] = ma;
      b.values["mi_f1"] = mi;
      break;
    }
    case HeadKind::multilabel: {
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        s.insert(s.end(), probs[i].begin(), probs[i].end());
        y.insert(y.end(), labels[i].values.begin(), labels[i].values.end());
      }
      try {
        const auto r = multilabel_auroc(s, y, task.label_dim);
        b.values["ma_auroc"] = r.macro;
        b.values["mi_auroc"] = r.micro;
        b.skipped_labels = r.skipped;
      } catch (const UndefinedMetricError&) {
        b.skipped_labels = task.label_dim;
      }
      break;
    }
  }
  return b;
}

/// Resolves a dataset task to the model's task id, checking head compatibility.
template <typename T>
std::size_t model_task_id(const Model<T>& model, const TaskSpec& data_task) {
  const TaskSpec* t = model.tasks().find(data_task.name);
  if (!t) throw UnknownTaskError("model has no head for task " + data_task.name);
  if (t->kind != data_task.kind || t->label_dim != data_task.label_dim)
    throw TaskMismatchError("task " + data_task.name + ": model head is " + head_kind_name(t->kind) + "/" +
                            std::to_string(t->label_dim) + " but dataset is " + head_kind_name(data_task.kind) +
                            "/" + std::to_string(data_task.label_dim));
  return t->id;
}

template <typename T>
std::vector<std::vector<double>> predict_split(const Model<T>& model, const std::vector<PatientSample>& samples,
                                               std::size_t task_id, std::size_t threads = 1) {
  std::vector<std::vector<double>> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i, std::size_t) {
    const auto p = model.infer(to_input<T>(samples[i]), task_id);
    out[i].assign(p.begin(), p.end());
  });
  return out;
}

template <typename T>
MetricBundle evaluate(const Model<T>& model, const Dataset& ds, const std::string& task, Split split = Split::test,
                      std::size_t threads = 1) {
  const TaskData& td = ds.task(task);
  const std::size_t id = model_task_id(model, td.spec);
  const auto& samples = td.split(split);
  std::vector<Label> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  return compute_metrics(td.spec, predict_split(model, samples, id, threads), labels);
}

// ---------------------------------------------------------------------------
// One optimizer step

struct StepStats {
  double loss = 0.0;       // lambda * (mean pred + beta * mean cov + balance)
  double pred_loss = 0.0;  // mean prediction loss
  double cov_reg = 0.0;
  double balance = 0.0;
};

/// Objective weights of one step.
struct StepWeights {
  double lambda = 1.0;
  double beta = 0.0;
  double w_balance = 0.0;
};

template <typename T>
struct SamplePass {
  ad::Tape<T> tape;
  ForwardResult<T> fwd;
};

/// Seeds every tape with the gradient of the batch objective
/// lambda * (mean_b (pred_b + beta cov_b) + w * CV^2(all gate rows)) and runs
/// backward. The balance term couples the samples through their gates.
template <typename T>
StepStats backprop_batch(std::vector<std::unique_ptr<SamplePass<T>>>& passes, const StepWeights& w,
                         std::size_t threads) {
  const std::size_t B = passes.size();
  StepStats st;
  std::size_t n_gate_rows = 0, n_experts = 0;
  for (const auto& p : passes) {
    st.pred_loss += double(p->tape.scalar(*p->fwd.pred_loss));
    st.cov_reg += double(p->tape.scalar(p->fwd.cov_reg));
    n_gate_rows += p->fwd.routing.size();
    if (!p->fwd.routing.empty()) n_experts = p->tape.value(p->fwd.routing[0].gates).cols();
  }
  st.pred_loss /= double(B);
  st.cov_reg /= double(B);

  Matrix<T> gate_grad;
  if (n_gate_rows > 0 && w.w_balance > 0.0) {
    Matrix<T> gates(n_gate_rows, n_experts);
    std::size_t r = 0;
    for (const auto& p : passes)
      for (const auto& route : p->fwd.routing) {
        const auto& g = p->tape.value(route.gates);
        std::copy(g.data(), g.data() + n_experts, gates.row(r++).begin());
      }
    st.balance = double(balance_loss(gates, static_cast<T>(w.w_balance)));
    gate_grad = balance_loss_grad(gates, static_cast<T>(w.w_balance));
  }
  st.loss = w.lambda * (st.pred_loss + w.beta * st.cov_reg + st.balance);

  std::vector<std::size_t> first_row(B, 0);
  for (std::size_t b = 1; b < B; ++b) first_row[b] = first_row[b - 1] + passes[b - 1]->fwd.routing.size();
  parallel_for(B, threads, [&](std::size_t b, std::size_t) {
    auto& p = *passes[b];
    p.tape.seed(*p.fwd.pred_loss, static_cast<T>(w.lambda / double(B)));
    if (w.beta != 0.0 && p.tape.needs_grad(p.fwd.cov_reg))
      p.tape.seed(p.fwd.cov_reg, static_cast<T>(w.lambda * w.beta / double(B)));
    if (!gate_grad.empty()) {
      for (std::size_t c = 0; c < p.fwd.routing.size(); ++c) {
        Matrix<T> g(1, n_experts);
        const auto src = gate_grad.row(first_row[b] + c);
        for (std::size_t e = 0; e < n_experts; ++e) g(0, e) = static_cast<T>(w.lambda) * src[e];
        p.tape.seed(p.fwd.routing[c].gates, g);
      }
    }
    p.tape.backward();
  });
  return st;
}

/// Reusable per-worker gradient buffers.
template <typename T>
class GradWorkspace {
 public:
  void prepare(const ParamStore<T>& store, std::size_t workers) {
    if (bufs_.size() != workers || (workers && bufs_[0].size() != store.size())) {
      bufs_.assign(workers, Gradients<T>{});
      for (auto& g : bufs_) g.reset(store);
    } else {
      for (auto& g : bufs_) g.zero();
    }
  }
  Gradients<T>& worker(std::size_t w) { return bufs_[w]; }

  /// Sums worker buffers into worker 0 in a fixed order.
  Gradients<T>& reduce() {
    for (std::size_t w = 1; w < bufs_.size(); ++w)
      for (std::size_t i = 0; i < bufs_[0].size(); ++i) {
        if (!bufs_[w].used(i)) continue;
        bufs_[0].mark_used(i);
        auto& dst = bufs_[0].grad(i);
        const auto& src = bufs_[w].grad(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    return bufs_[0];
  }

 private:
  std::vector<Gradients<T>> bufs_;
};

/// Forward, backward and one Adam update on a single-task batch.
template <typename T>
StepStats train_step(Model<T>& model, Adam<T>& opt, GradWorkspace<T>& ws, const std::vector<const PatientSample*>& batch,
                     std::size_t task_id, const StepWeights& w, std::size_t threads, double router_noise_std = 0.0,
                     std::uint64_t noise_seed = 0) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batch.size()));
  ws.prepare(model.params(), workers);
  std::vector<std::unique_ptr<SamplePass<T>>> passes(batch.size());
  parallel_for(batch.size(), workers, [&](std::size_t i, std::size_t wk) {
    auto p = std::make_unique<SamplePass<T>>();
    ForwardOptions fo;
    fo.beta = 0.0;
    std::mt19937_64 noise_rng(derive_seed(noise_seed, {i}));
    if (router_noise_std > 0.0) fo.router_noise_std = router_noise_std, fo.noise_rng = &noise_rng;
    p->fwd = model.forward(p->tape, &ws.worker(wk), to_input<T>(*batch[i]), task_id, &batch[i]->label, fo);
    passes[i] = std::move(p);
  });
  const StepStats st = backprop_batch(passes, w, workers);
  if (!std::isfinite(st.loss)) {
    std::ostringstream os;
    os << "non-finite loss on task " << model.tasks().at(task_id).name << " (pred " << st.pred_loss << ", cov "
       << st.cov_reg << ", balance " << st.balance << ")";
    throw NumericError(os.str());
  }
  opt.step(model.params(), ws.reduce());
  return st;
}

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  std::size_t epoch = 0;
  std::string task;       // task whose pass just finished
  std::string eval_task;  // task the value refers to
  std::string split;
  std::string metric;
  double value = 0.0;
};

inline nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"task", r.task}, {"eval_task", r.eval_task},
                      {"split", r.split}, {"metric", r.metric}};
  if (std::isfinite(r.value)) j["value"] = r.value;
  else j["value"] = nullptr;
  return j;
}

template <typename T>
struct TrainResult {
  std::vector<LogRecord> log;
  std::size_t steps = 0;
  std::map<std::string, ParamStore<T>> best_params;  // best validation snapshot per task
  std::map<std::string, double> best_score;
  std::map<std::string, std::size_t> best_epoch;
  std::map<std::string, std::vector<double>> epoch_loss;  // mean train loss per epoch per task
};

struct TrainOptions {
  std::vector<std::string> tasks{};  // dataset task names to train, empty = all in registry order
  bool eval_all_tasks = false;     // after each pass evaluate every trained task, not only the current one
  bool validate = true;
  bool keep_best = true;
  std::function<void(const LogRecord&)> on_record{};
};

/// Trains `model` on the dataset. Tasks are visited in registry order each
/// epoch (or a seeded shuffle of it); batches are reshuffled per epoch.
template <typename T>
TrainResult<T> train(Model<T>& model, const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  std::vector<std::string> names = opts.tasks;
  if (names.empty())
    for (const auto& t : ds.tasks) names.push_back(t.name);
  if (names.empty()) throw DataError("train: dataset has no tasks");
  std::vector<std::size_t> data_ids, model_ids;
  std::size_t total = 0;
  for (const auto& n : names) {
    const TaskData& td = ds.task(n);
    data_ids.push_back(td.spec.id);
    model_ids.push_back(model_task_id(model, td.spec));
    total += td.split(Split::train).size();
  }
  if (total == 0) throw DataError("train: no training samples");

  std::vector<Adam<T>> opts_by_task(cfg.per_task_optimizer ? names.size() : 1, Adam<T>(model.params(), cfg.adam));
  GradWorkspace<T> ws;
  TrainResult<T> res;
  const auto emit = [&](LogRecord r) {
    if (opts.on_record) opts.on_record(r);
    res.log.push_back(std::move(r));
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(names.size());
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle_task_order) {
      std::mt19937_64 rng(derive_seed(cfg.seed, {0x6f72646572ULL, epoch}));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t k : order) {
      const TaskData& td = ds.task(data_ids[k]);
      const auto& samples = td.split(Split::train);
      const double lambda = td.spec.loss_weight * std::pow(cfg.task_weight_decay, double(epoch));
      const StepWeights w{lambda, model.config().use_decorrelation ? cfg.beta : 0.0,
                          model.config().use_moe ? cfg.w_balance : 0.0};
      double loss_sum = 0.0, pred_sum = 0.0;
      std::size_t n_seen = 0;
      const auto plan = batch_plan(samples.size(), cfg.batch_size, cfg.seed, epoch, data_ids[k]);
      for (std::size_t bi = 0; bi < plan.size(); ++bi) {
        std::vector<const PatientSample*> batch;
        for (std::size_t i : plan[bi]) batch.push_back(&samples[i]);
        StepStats st;
        try {
          Adam<T>& opt = opts_by_task[cfg.per_task_optimizer ? k : 0];
          st = train_step(model, opt, ws, batch, model_ids[k], w, cfg.threads, cfg.router_noise_std,
                          derive_seed(cfg.seed, {0x6e6f697365ULL, epoch, data_ids[k], bi}));
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ": " + e.what());
        }
        ++res.steps;
        loss_sum += st.loss * double(batch.size());
        pred_sum += st.pred_loss * double(batch.size());
        n_seen += batch.size();
      }
      if (n_seen) {
        res.epoch_loss[td.spec.name].push_back(loss_sum / double(n_seen));
        emit({epoch, td.spec.name, td.spec.name, "train", "loss", loss_sum / double(n_seen)});
        emit({epoch, td.spec.name, td.spec.name, "train", "pred_loss", pred_sum / double(n_seen)});
      }
      if (!opts.validate) continue;
      for (std::size_t j = 0; j < names.size(); ++j) {
        if (!opts.eval_all_tasks && j != k) continue;
        const TaskData& ev = ds.task(data_ids[j]);
        if (ev.split(Split::valid).empty()) continue;
        const MetricBundle mb = evaluate(model, ds, ev.spec.name, Split::valid, cfg.threads);
        for (const auto& [metric, value] : mb.values) emit({epoch, td.spec.name, ev.spec.name, "valid", metric, value});
        if (j != k || !opts.keep_best) continue;
        const auto it = mb.values.find(primary_metric(ev.spec.kind));
        if (it == mb.values.end()) continue;
        const auto best = res.best_score.find(ev.spec.name);
        if (best == res.best_score.end() || it->second > best->second) {
          res.best_score[ev.spec.name] = it->second;
          res.best_epoch[ev.spec.name] = epoch;
          res.best_params.insert_or_assign(ev.spec.name, model.params());
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Entries whose analytic and numeric magnitudes sum below this are compared
  // in absolute terms, so exact zeros do not divide by zero.
  double floor = 1e-6;
  StepWeights weights{1.0, 0.1, 0.01};
};

/// Single-sample objective with the same seeding as a training step.
template <typename T>
double sample_objective(const Model<T>& model, const SampleInput<T>& x, const Label& y, std::size_t task_id,
                        const StepWeights& w, Gradients<T>* grads) {
  std::vector<std::unique_ptr<SamplePass<T>>> passes;
  passes.push_back(std::make_unique<SamplePass<T>>());
  auto& p = *passes.back();
  p.fwd = model.forward(p.tape, grads, x, task_id, &y);
  StepWeights ww = w;
  if (!model.config().use_moe) ww.w_balance = 0.0;
  if (!grads) {
    // Value only: reuse the step bookkeeping without a backward sweep.
    double pred = double(p.tape.scalar(*p.fwd.pred_loss)), cov = double(p.tape.scalar(p.fwd.cov_reg)), bal = 0.0;
    if (!p.fwd.routing.empty() && ww.w_balance > 0.0) {
      const std::size_t ne = p.tape.value(p.fwd.routing[0].gates).cols();
      Matrix<T> gates(p.fwd.routing.size(), ne);
      for (std::size_t r = 0; r < p.fwd.routing.size(); ++r) {
        const auto& g = p.tape.value(p.fwd.routing[r].gates);
        std::copy(g.data(), g.data() + ne, gates.row(r).begin());
      }
      bal = double(balance_loss(gates, static_cast<T>(ww.w_balance)));
    }
    return ww.lambda * (pred + ww.beta * cov + bal);
  }
  return backprop_batch(passes, ww, 1).loss;
}

/// Central differences against the analytic gradient for every tensor.
/// Tensors the sample does not reach have zero analytic and numeric
/// gradients and report 0.
inline GradCheckReport grad_check(Model<double>& model, const SampleInput<double>& x, const Label& y,
                                  std::size_t task_id, const GradCheckOptions& o = {}) {
  Gradients<double> grads(model.params());
  sample_objective(model, x, y, task_id, o.weights, &grads);
  GradCheckReport rep;
  rep.tolerance = o.tolerance;
  auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    GradCheckEntry e{store.name(i), 0.0, 0};
    Matrix<double>& v = store.value(i);
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double orig = v[k];
      v[k] = orig + o.step;
      const double fp = sample_objective<double>(model, x, y, task_id, o.weights, nullptr);
      v[k] = orig - o.step;
      const double fm = sample_objective<double>(model, x, y, task_id, o.weights, nullptr);
      v[k] = orig;
      const double num = (fp - fm) / (2.0 * o.step);
      const double ana = grads.grad(i)[k];
      const double err = std::abs(ana - num) / std::max(std::abs(ana) + std::abs(num), o.floor);
      e.max_rel_error = std::max(e.max_rel_error, err);
      ++e.checked;
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

}  // namespace flexcare
