// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criteria 10-12 share the trained runs of each seed.
//
//   acceptance [--workdir DIR] [--only 1,2,...] [--keep]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flexcare/cli.hpp"
#include "../oracles.hpp"
#include "../support.hpp"

using namespace flexcare;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> flat(const Matrix<double>& m) { return {m.data(), m.data() + m.size()}; }

// ---------------------------------------------------------------------------

Outcome mask_oracle() {
  std::size_t checked = 0, bad = 0, structural = 0;
  for (unsigned p = 1; p < 8; ++p)
    for (std::size_t a = 1; a <= 3; ++a)
      for (std::size_t b = 1; b <= 3; ++b)
        for (std::size_t n = 1; n <= 3; ++n) {
          const std::size_t c[] = {a, b, n};
          const auto l = build_layout(ModalitySet(p), c);
          const auto got = build_mask<double>(l);
          bad += !(got == oracle::mask(p, c, kMaskNegative));
          for (std::size_t j = 0; j < l.total_len; ++j) {
            structural += got(0, j) != 0.0;
            if (j > 0) structural += got(j, 0) != kMaskNegative;
          }
          ++checked;
        }
  return {bad == 0 && structural == 0,
          fmt("%zu layouts, %zu oracle mismatches, %zu task row/column violations", checked, bad, structural)};
}

Outcome task_agnosticism() {
  const auto cfg = fx::tiny_config(16, 2, 4, 2);
  Model<double> model(cfg, fx::two_tasks(), 101);
  std::mt19937_64 rng(102);
  double worst_shared = 0.0, least_task = INFINITY;
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = fx::random_input(cfg, 1 + unsigned(trial % 7), rng);
    Model<double> other = model;
    other.params().value("tokens.task.A") = oracle::random_matrix(1, cfg.d, rng);
    ad::Tape<double> ta, tb;
    const auto a = model.forward(ta, nullptr, x, 0);
    const auto b = other.forward(tb, nullptr, x, 0);
    worst_shared = std::max(worst_shared, oracle::max_abs_diff(ta.value(*a.encoded.z_comb), tb.value(*b.encoded.z_comb)));
    for (std::size_t m = 0; m < 3; ++m)
      if (a.encoded.modality_outputs[m])
        worst_shared = std::max(worst_shared, oracle::max_abs_diff(ta.value(*a.encoded.modality_outputs[m]),
                                                                   tb.value(*b.encoded.modality_outputs[m])));
    least_task = std::min(least_task, oracle::max_abs_diff(ta.value(a.encoded.z_task), tb.value(b.encoded.z_task)));
  }
  return {worst_shared < 1e-6 && least_task > 1e-3,
          fmt("max shared change %.3g (< 1e-6), min task-token change %.3g (> 1e-3)", worst_shared, least_task)};
}

Outcome combination_isolation() {
  const auto cfg = fx::tiny_config(16, 2, 4, 2);
  Model<double> model(cfg, fx::two_tasks(), 103);
  std::mt19937_64 rng(104);
  double worst_outside = 0.0, least_inside = INFINITY;
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = fx::random_input(cfg, 7, rng);
    ad::Tape<double> ta;
    const auto a = model.forward(ta, nullptr, x, 1);
    for (std::size_t m = 0; m < 3; ++m) {
      auto y = x;
      for (std::size_t i = 0; i < y.modality[m]->size(); ++i) (*y.modality[m])[i] += 0.5;
      ad::Tape<double> tb;
      const auto b = model.forward(tb, nullptr, y, 1);
      const auto& za = ta.value(*a.encoded.z_comb);
      const auto& zb = tb.value(*b.encoded.z_comb);
      for (std::size_t c = 0; c < a.combinations.size(); ++c) {
        double diff = 0.0;
        for (std::size_t j = 0; j < cfg.d; ++j) diff = std::max(diff, std::abs(za(c, j) - zb(c, j)));
        if (a.combinations[c].contains(m)) least_inside = std::min(least_inside, diff);
        else worst_outside = std::max(worst_outside, diff);
      }
    }
  }
  return {worst_outside < 1e-6 && least_inside > 1e-6,
          fmt("max change outside %.3g (< 1e-6), min change inside %.3g", worst_outside, least_inside)};
}

// Smallest gap at the k-th router logit over a sample's combinations.
double routing_margin(const Model<double>& m, const SampleInput<double>& x, std::size_t task) {
  ad::Tape<double> t;
  const auto r = m.forward(t, nullptr, x, task);
  const std::size_t k = m.config().top_k;
  const auto& zt = t.value(r.encoded.z_task);
  const auto& zc = t.value(*r.z_comb);
  const auto bias = oracle::mm(zt, m.params().value("moe.router.w2"));
  double margin = INFINITY;
  for (std::size_t c = 0; c < r.combinations.size(); ++c) {
    Matrix<double> row(1, zc.cols());
    std::copy(zc.row(c).begin(), zc.row(c).end(), row.data());
    auto l = flat(oracle::mm(row, m.params().value("moe.router.w1")));
    for (std::size_t e = 0; e < l.size(); ++e) l[e] += bias[e];
    std::sort(l.begin(), l.end(), std::greater<>());
    if (k < l.size()) margin = std::min(margin, l[k - 1] - l[k]);
  }
  return margin;
}

Label random_label(const TaskSpec& t, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 1);
  Label y;
  if (t.kind == HeadKind::multilabel) {
    for (std::size_t j = 0; j < t.label_dim; ++j) y.values.push_back(coin(rng));
  } else if (t.kind == HeadKind::multiclass) {
    y.values = {std::uniform_int_distribution<int>(0, int(t.label_dim) - 1)(rng)};
  } else {
    y.values = {coin(rng)};
  }
  return y;
}

Outcome gradient_suite() {
  // Six-task registry so every head kind and size is exercised.
  const TaskRegistry tasks = registry_of(default_gen_config());
  const auto cfg = fx::tiny_config(8, 1, 3, 2);
  Model<double> model(cfg, tasks, 105);
  std::mt19937_64 rng(106);
  std::map<std::string, double> worst;
  std::set<std::string> touched;
  std::size_t resampled = 0;
  for (const auto& t : tasks) {
    SampleInput<double> x;
    for (;;) {
      x = fx::random_input(cfg, 7, rng);
      if (routing_margin(model, x, t.id) > 1e-3) break;
      ++resampled;
    }
    const auto rep = grad_check(model, x, random_label(t, rng), t.id);
    for (const auto& e : rep.entries) worst[e.name] = std::max(worst[e.name], e.max_rel_error);
    // which tensors this task's objective actually depends on
    Gradients<double> g(model.params());
    sample_objective<double>(model, x, random_label(t, rng), t.id, GradCheckOptions{}.weights, &g);
    for (std::size_t i = 0; i < model.params().size(); ++i)
      if (g.used(i)) touched.insert(model.params().name(i));
  }
  double max_err = 0.0;
  std::string arg;
  for (const auto& [name, e] : worst)
    if (e > max_err) max_err = e, arg = name;
  const bool all_touched = touched.size() == model.params().size();
  return {max_err < 1e-4 && all_touched,
          fmt("%zu tensors, %zu exercised, max rel error %.3g (%s), %zu tie-adjacent draws skipped", worst.size(),
              touched.size(), max_err, arg.c_str(), resampled)};
}

Outcome covariance_oracle() {
  std::mt19937_64 rng(107);
  double worst = 0.0;
  for (std::size_t d : {4, 8, 128})
    for (int rep = 0; rep < 50; ++rep) {
      const auto z = oracle::random_matrix(7, d, rng);
      worst = std::max(worst, oracle::max_abs_diff(token_covariance(z), oracle::covariance(z)));
      worst = std::max(worst, std::abs(comb_regularizer(token_covariance(z), 7) -
                                       oracle::regularizer(oracle::covariance(z))));
    }
  Matrix<double> constant(7, 8);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 8; ++j) constant(i, j) = double(i) - 2.5;
  const double c_const = comb_regularizer(token_covariance(constant), 7);
  const double hand = comb_regularizer(token_covariance(Matrix<double>{{1, 2}, {3, 4}}), 2);
  return {worst < 1e-8 && c_const == 0.0 && std::abs(hand - 0.5) < 1e-15,
          fmt("max oracle diff %.3g, constant rows %.3g, hand case %.17g", worst, c_const, hand)};
}

struct MoEInstance {
  Matrix<double> zc, zt, r1, r2;
  std::vector<oracle::Expert> experts;
  MoEVars vars(ad::Tape<double>& t, std::size_t k) const {
    MoEVars v;
    for (const auto& e : experts)
      v.experts.push_back({t.constant(e.w1), t.constant(e.b1), t.constant(e.w2), t.constant(e.b2)});
    v.router_w1 = t.constant(r1);
    v.router_w2 = t.constant(r2);
    v.k = k;
    return v;
  }
};

Outcome moe_contracts() {
  std::mt19937_64 rng(108);
  std::size_t gate_bad = 0;
  for (std::size_t ne = 1; ne <= 10; ++ne)
    for (std::size_t k = 1; k <= ne; ++k)
      for (int rep = 0; rep < 50; ++rep) {
        const auto l = flat(oracle::random_matrix(1, ne, rng, 3.0));
        const auto g = gate<double>(l, k);
        double s = 0.0;
        for (double w : g.gate_weights) s += w;
        gate_bad += g.expert_ids.size() != k || std::abs(s - 1.0) > 1e-6;
      }
  double worst = 0.0;
  std::size_t instances = 0;
  for (std::size_t d : {2, 4, 8})
    for (std::size_t ne = 1; ne <= 6; ++ne)
      for (std::size_t k = 1; k <= ne; ++k)
        for (int rep = 0; rep < 5; ++rep) {
          MoEInstance in{oracle::random_matrix(1, d, rng), oracle::random_matrix(1, d, rng),
                         oracle::random_matrix(d, ne, rng), oracle::random_matrix(d, ne, rng), {}};
          for (std::size_t e = 0; e < ne; ++e)
            in.experts.push_back({oracle::random_matrix(d, 2 * d, rng, 0.5), oracle::random_matrix(1, 2 * d, rng, 0.5),
                                  oracle::random_matrix(2 * d, d, rng, 0.5), oracle::random_matrix(1, d, rng, 0.5)});
          ad::Tape<double> t;
          const auto out = moe_forward(t, t.constant(in.zc), t.constant(in.zt), in.vars(t, k));
          const auto want = oracle::dense_moe(flat(in.zc), flat(in.zt), in.r1, in.r2, in.experts, k);
          const auto& got = t.value(out.refined);
          for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
          ++instances;
        }
  const double uniform = balance_loss(Matrix<double>(5, 4, 0.25));
  return {gate_bad == 0 && worst < 1e-6 && uniform == 0.0,
          fmt("%zu gate violations, %zu dense instances max diff %.3g, uniform balance %.3g", gate_bad, instances, worst,
              uniform)};
}

// Fusion whose scores equal the given values: w1 reads the first feature of
// each combination vector into tanh's linear range and w2 scales it back.
std::vector<double> alphas_for(const std::vector<double>& scores, double eps) {
  ad::Tape<double> t;
  const std::size_t d = 2;
  Matrix<double> w1(2 * d, d);
  w1(d, 0) = 1e-3;
  FusionVars p{t.constant(w1), t.constant(Matrix<double>{{1e3}, {0.0}}), t.constant(Matrix<double>(1, d, 1.0)),
               t.constant(Matrix<double>(1, d)), eps};
  std::vector<ad::Var> refined;
  for (double s : scores) refined.push_back(t.constant(Matrix<double>{{s, 0.0}}));
  const auto out = fuse(t, t.constant(Matrix<double>(1, d)), std::span<const ad::Var>(refined), p);
  return flat(t.value(out.alpha));
}

Outcome fusion_contracts() {
  std::mt19937_64 rng(109);
  double sum_err = 0.0, shift_err = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t d = 2 + rep % 7, n = 1 + rep % 7;
    ad::Tape<double> t;
    FusionVars p{t.constant(oracle::random_matrix(2 * d, d, rng)), t.constant(oracle::random_matrix(d, 1, rng)),
                 t.constant(Matrix<double>(1, d, 1.0)), t.constant(Matrix<double>(1, d)), 1.0};
    std::vector<ad::Var> refined;
    for (std::size_t i = 0; i < n; ++i) refined.push_back(t.constant(oracle::random_matrix(1, d, rng)));
    const auto out = fuse(t, t.constant(oracle::random_matrix(1, d, rng)), std::span<const ad::Var>(refined), p);
    const auto a = flat(t.value(out.alpha));
    sum_err = std::max(sum_err, std::abs(std::accumulate(a.begin(), a.end(), 0.0) - 1.0));

    const auto s = oracle::random_matrix(1, 7, rng, 2.0);
    Matrix<double> shifted = s;
    for (std::size_t i = 0; i < 7; ++i) shifted[i] += 13.25;
    shift_err = std::max(shift_err, oracle::max_abs_diff(t.value(ad::softmax_rows(t, t.constant(s))),
                                                         t.value(ad::softmax_rows(t, t.constant(shifted)))));
  }
  const auto sharp = alphas_for({1.0, 0.0, -0.5}, 1e-3);
  const auto soft = alphas_for({1.0, 0.0, -0.5}, 1e3);
  const double sharp_err = std::max({std::abs(sharp[0] - 1.0), sharp[1], sharp[2]});
  double soft_err = 0.0;
  for (double x : soft) soft_err = std::max(soft_err, std::abs(x - 1.0 / 3.0));
  return {sum_err < 1e-6 && shift_err < 1e-9 && sharp_err < 1e-3 && soft_err < 1e-3,
          fmt("sum err %.3g, shift err %.3g, eps=1e-3 one-hot err %.3g, eps=1e3 uniform err %.3g", sum_err, shift_err,
              sharp_err, soft_err)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(110);
  std::uniform_int_distribution<std::size_t> size(2, 100);
  std::uniform_int_distribution<int> coin(0, 1), levels(1, 20);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int trials = 0;
  while (trials < 1000) {
    const std::size_t n = size(rng);
    const int q = levels(rng);  // coarse grids force ties
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (auto& v : s) v = std::round(u(rng) * q) / q;
    for (auto& v : y) v = coin(rng);
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == long(n)) continue;
    worst = std::max(worst, std::abs(auroc(s, y) - oracle::auroc(s, y)));
    worst = std::max(worst, std::abs(auprc(s, y) - oracle::auprc(s, y)));
    ++trials;
  }
  using L = std::vector<int>;
  const auto [ma1, mi1] = f1_scores(L{0, 0, 0, 0}, L{0, 0, 1, 1}, 2);
  const auto [ma2, mi2] = f1_scores(L{0, 1, 2, 1}, L{0, 1, 2, 1}, 3);
  const bool f1_ok = ma1 == 1.0 / 3.0 && mi1 == 0.5 && ma2 == 1.0 && mi2 == 1.0;
  return {worst < 1e-9 && f1_ok, fmt("%d trials max diff %.3g, F1 hand cases %s", trials, worst, f1_ok ? "exact" : "wrong")};
}

Outcome checkpoint_roundtrip(const fs::path& work) {
  const auto cfg = fx::tiny_config(16, 2, 4, 2);
  Model<float> model(cfg, fx::two_tasks(), 111);
  const fs::path dir = work / "c9_checkpoint";
  fs::remove_all(dir);
  save_checkpoint(model, dir);
  const Model<float> back = load_checkpoint<float>(dir);
  std::mt19937_64 rng(112);
  std::size_t differing = 0;
  for (int i = 0; i < 10; ++i) {
    const auto xd = fx::random_input(cfg, 1 + unsigned(i % 7), rng);
    SampleInput<float> x;
    for (std::size_t k = 0; k < 3; ++k)
      if (xd.modality[k]) x.modality[k] = xd.modality[k]->cast<float>();
    for (std::size_t t = 0; t < 2; ++t) differing += model.infer(x, t) != back.infer(x, t);
  }
  return {differing == 0, fmt("%zu of 20 outputs differ bitwise", differing)};
}

Outcome missingness() {
  GenConfig g = default_gen_config();
  g.n_samples = 10000;
  g.shape = {4, 4, 2, 2, 1, 2, 2};
  g.ts_min_steps = 1;
  g.ts_steps = 4;
  g.note_tokens = 2;
  const Dataset ds = generate(g);
  double worst = 0.0;
  std::string where;
  for (std::size_t ti = 0; ti < ds.per_task.size(); ++ti) {
    std::array<std::size_t, 3> missing{};
    std::size_t n = 0;
    for (Split s : kSplits)
      for (const auto& x : ds.per_task[ti].split(s)) {
        ++n;
        for (std::size_t m = 0; m < 3; ++m) missing[m] += !x.present().contains(m);
      }
    for (std::size_t m = 0; m < 3; ++m) {
      const double err = std::abs(double(missing[m]) / double(n) - g.tasks[ti].missing[m]);
      if (err > worst) worst = err, where = g.tasks[ti].name + "/" + modality_code(kModalities[m]);
    }
  }
  return {worst <= 0.02, fmt("max |observed - configured| %.4f (%s) over 6 tasks x 3 modalities", worst, where.c_str())};
}

// ---------------------------------------------------------------------------
// Trained-suite criteria

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr const char* kAblations[] = {"a-", "b-", "c-", "d-"};

using Scores = std::map<std::string, double>;  // task -> primary test metric

Scores primary_scores(const std::map<std::string, MetricBundle>& rows, const TaskRegistry& reg) {
  Scores s;
  for (const auto& [task, mb] : rows) {
    const auto it = mb.values.find(primary_metric(reg.by_name(task).kind));
    s[task] = it == mb.values.end() ? NAN : it->second;
  }
  return s;
}

class Suite {
 public:
  explicit Suite(fs::path work) : work_(std::move(work)) {}

  fs::path seed_dir(std::uint64_t seed) const { return work_ / ("suite_seed" + std::to_string(seed)); }

  fs::path config(std::uint64_t seed) {
    const fs::path p = seed_dir(seed) / "config.json";
    if (!fs::exists(p)) {
      fs::create_directories(seed_dir(seed));
      nlohmann::json j = {{"train", {{"epochs", 15}}}};
      std::ofstream(p) << j.dump(2);
    }
    return p;
  }

  fs::path data(std::uint64_t seed) {
    const fs::path d = seed_dir(seed) / "data";
    if (!fs::exists(d / cli::kRunManifest)) cli::cmd_gen({config(seed), d, seed});
    return d;
  }

  const TaskRegistry& registry(std::uint64_t seed) {
    if (!reg_.count(seed)) reg_[seed] = load_dataset(data(seed)).tasks;
    return reg_.at(seed);
  }

  // variant "" is the full model
  const Scores& multitask(std::uint64_t seed, const std::string& variant = "") {
    const auto key = std::make_pair(seed, variant);
    if (!multi_.count(key)) {
      const auto out = run_dir(seed, variant);
      auto o = cli::cmd_train({config(seed), data(seed), out, seed, {}, variant, true});
      multi_[key] = primary_scores(o.at(0).test_best, registry(seed));
    }
    return multi_.at(key);
  }

  fs::path multitask_checkpoint(std::uint64_t seed) {
    multitask(seed);
    return run_dir(seed, "") / "checkpoint";
  }

  const Scores& single(std::uint64_t seed) {
    if (!single_.count(seed)) {
      Scores s;
      for (const auto& o : cli::cmd_train({config(seed), data(seed), seed_dir(seed) / "single", seed, {"all"}, "", true}))
        for (const auto& [task, v] : primary_scores(o.test_best, registry(seed))) s[task] = v;
      single_[seed] = s;
    }
    return single_.at(seed);
  }

 private:
  fs::path run_dir(std::uint64_t seed, const std::string& variant) const {
    return seed_dir(seed) / (variant.empty() ? std::string("full") : "ablate_" + variant.substr(0, 1));
  }

  fs::path work_;
  std::map<std::uint64_t, TaskRegistry> reg_;
  std::map<std::pair<std::uint64_t, std::string>, Scores> multi_;
  std::map<std::uint64_t, Scores> single_;
};

Outcome synergy(Suite& suite) {
  std::map<std::string, std::vector<double>> multi, single;
  for (std::uint64_t seed : kSeeds) {
    for (const auto& [t, v] : suite.multitask(seed)) multi[t].push_back(v);
    for (const auto& [t, v] : suite.single(seed)) single[t].push_back(v);
  }
  bool ok = true;
  std::ostringstream os;
  for (const auto& [task, values] : multi) {
    const double diff = median(values) - median(single.at(task));
    const bool related = task == "IHM" || task == "DEC";
    const bool pass = related ? diff >= 0.01 : diff >= -0.03;
    ok &= pass && std::isfinite(diff);
    os << task << (related ? "*" : "") << ' ' << fmt("%+.4f", diff) << (pass ? "" : "!") << ' ';
  }
  os << "(median multitask - single-task; * related, needs >= +0.01; others >= -0.03)";
  return {ok, os.str()};
}

// Ranks (1 = best, ties averaged) of each variant on one task.
std::map<std::string, double> rank_variants(const std::map<std::string, double>& score) {
  std::map<std::string, double> rank;
  for (const auto& [v, s] : score) {
    double better = 0.0, tied = 0.0;
    for (const auto& [w, o] : score) {
      if (w == v) continue;
      if (o > s) better += 1.0;
      else if (o == s) tied += 1.0;
    }
    rank[v] = 1.0 + better + 0.5 * tied;
  }
  return rank;
}

Outcome ablation_order(Suite& suite) {
  std::map<std::string, std::vector<double>> mean_rank;  // variant -> per seed
  for (std::uint64_t seed : kSeeds) {
    std::map<std::string, Scores> by_variant;
    by_variant["full"] = suite.multitask(seed);
    for (const char* code : kAblations) by_variant[code] = suite.multitask(seed, code);
    std::map<std::string, double> sum;
    const Scores& tasks = by_variant["full"];
    for (const auto& [task, unused] : tasks) {
      (void)unused;
      std::map<std::string, double> s;
      for (const auto& [v, sc] : by_variant) s[v] = sc.at(task);
      for (const auto& [v, r] : rank_variants(s)) sum[v] += r;
    }
    for (const auto& [v, r] : sum) mean_rank[v].push_back(r / double(tasks.size()));
  }
  std::ostringstream os;
  os << "median mean rank:";
  for (const auto& [v, r] : mean_rank) os << ' ' << v << ' ' << fmt("%.2f", median(r));
  const double full = median(mean_rank["full"]), none = median(mean_rank["a-"]);
  return {full <= none, os.str()};
}

Outcome extension(Suite& suite, const fs::path& work) {
  std::size_t wins = 0;
  bool finite = true;
  std::ostringstream os;
  for (std::uint64_t seed : kSeeds) {
    const fs::path dir = work / ("ext_seed" + std::to_string(seed));
    fs::create_directories(dir);
    RunConfig rc = load_run_config(suite.config(seed));
    rc.gen.tasks = {extension_task_spec()};
    const fs::path cfg = dir / "config.json";
    std::ofstream(cfg) << to_json(rc).dump(2);
    const fs::path data = dir / "data";
    if (!fs::exists(data / cli::kRunManifest)) cli::cmd_gen({cfg, data, seed});

    const auto run = [&](bool scratch) {
      cli::AddTaskArgs a;
      a.checkpoint = suite.multitask_checkpoint(seed);
      a.data = data;
      a.out = dir / (scratch ? "scratch" : "pretrained");
      a.task = "EXT";
      a.config = cfg;
      a.seed = seed;
      a.fraction = 0.01;
      a.from_scratch = scratch;
      return cli::cmd_add_task(a);
    };
    const auto pre = run(false), scratch = run(true);
    for (const auto* o : {&pre, &scratch}) {
      finite &= o->epoch_loss.size() >= 5 && !o->test.values.empty();
      for (const auto& [m, v] : o->test.values) finite &= std::isfinite(v);
    }
    if (pre.epoch_loss.size() < 5 || scratch.epoch_loss.size() < 5) continue;
    const double lp = pre.epoch_loss[4], ls = scratch.epoch_loss[4];
    wins += lp <= ls;
    os << fmt("seed %llu: epoch-5 loss pretrained %.4f vs scratch %.4f; ", (unsigned long long)seed, lp, ls);
  }
  os << wins << "/3 seeds favour pretrained" << (finite ? "" : ", non-finite metrics");
  return {finite && wins >= 2, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory for generated data and runs");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const fs::path work = fs::absolute(workdir);
  fs::create_directories(work);
  Suite suite(work / "suite");

  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "mask oracle", 1, mask_oracle},
      {2, "task-agnostic extraction", 10, task_agnosticism},
      {3, "combination isolation", 10, combination_isolation},
      {4, "gradient suite", 60, gradient_suite},
      {5, "covariance oracle", 1, covariance_oracle},
      {6, "mixture-of-experts contracts", 5, moe_contracts},
      {7, "fusion contracts", 1, fusion_contracts},
      {8, "metric oracles", 30, metric_oracles},
      {9, "checkpoint round trip", 5, [&] { return checkpoint_roundtrip(work); }},
      {10, "multitask synergy", 600, [&] { return synergy(suite); }},
      {11, "ablation ordering", 1200, [&] { return ablation_order(suite); }},
      {12, "extension smoke", 300, [&] { return extension(suite, work); }},
      {13, "missingness fidelity", 30, missingness},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %2d %-30s %8.2fs (limit %.0fs%s)  %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs,
                c.limit_s, in_time ? "" : ", exceeded", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
