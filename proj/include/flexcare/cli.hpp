// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `flexcare` executable. Each command
// writes into its output directory and leaves one run_manifest.json there.
#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flexcare/analysis.hpp"
#include "flexcare/checkpoint.hpp"
#include "flexcare/config.hpp"
#include "flexcare/data.hpp"
#include "flexcare/digest.hpp"
#include "flexcare/training.hpp"

#ifndef FLEXCARE_VERSION
#define FLEXCARE_VERSION "0.0.0"
#endif

namespace flexcare::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4, kCheckpoint = 5 };

inline constexpr const char* kOutRootEnv = "FLEXCARE_OUT_ROOT";
inline constexpr const char* kRunManifest = "run_manifest.json";

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// sha256 of every regular file under `dir`, keyed by relative path.
inline nlohmann::json digest_tree(const fs::path& dir) {
  nlohmann::json out = nlohmann::json::object();
  if (fs::is_regular_file(dir)) {
    out[dir.filename().string()] = sha256_file(dir);
    return out;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != kRunManifest) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = sha256_file(f);
  return out;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  nlohmann::json inputs = nlohmann::json::object();  // role -> {path, digests}
  std::vector<std::string> outputs;
  std::string started;
  std::string finished;

  void add_input(const std::string& role, const fs::path& p) {
    inputs[role] = {{"path", p.string()}, {"sha256", digest_tree(p)}};
  }

  void write(const fs::path& out_dir) const {
    fs::create_directories(out_dir);
    nlohmann::json j = {{"command", command},     {"config", config},   {"seed", seed},
                        {"inputs", inputs},       {"outputs", outputs}, {"build_version", FLEXCARE_VERSION},
                        {"started", started},     {"finished", finished}};
    std::ofstream(out_dir / kRunManifest) << j.dump(2) << '\n';
  }
};

inline RunConfig resolve_config(const std::optional<fs::path>& path) {
  return path ? load_run_config(*path) : RunConfig{};
}

inline fs::path default_out(const std::string& command) {
  const char* root = std::getenv(kOutRootEnv);
  return fs::path(root && *root ? root : "runs") / command;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::optional<fs::path> config;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

inline Dataset cmd_gen(const GenArgs& a) {
  RunManifest man;
  man.command = "gen";
  man.started = utc_now();
  RunConfig rc = resolve_config(a.config);
  if (a.seed) rc.gen.seed = *a.seed;
  rc.gen.validate();
  Dataset ds = generate(rc.gen);
  save_dataset(a.out, ds);
  man.config = {{"gen", to_json(rc.gen)}};
  man.seed = rc.gen.seed;
  man.outputs = {a.out.string()};
  man.inputs = nlohmann::json::object();
  if (a.config) man.add_input("config", *a.config);
  man.inputs["generated"] = {{"path", a.out.string()}, {"sha256", digest_tree(a.out)}};
  man.finished = utc_now();
  man.write(a.out);
  return ds;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::optional<fs::path> config;
  fs::path data;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> single_task;  // "all" expands to every task
  std::string ablate;
  bool quiet = true;
};

struct TrainOutcome {
  std::string name;  // "multitask" or the single task's name
  fs::path checkpoint;
  std::map<std::string, MetricBundle> test;  // final model
  std::map<std::string, MetricBundle> test_best;  // per-task best-validation snapshot
  TrainResult<float> result;
};

inline void write_metrics_log(const fs::path& path, const std::vector<LogRecord>& log) {
  std::ofstream out(path);
  for (const auto& r : log) out << to_json(r).dump() << '\n';
}

inline void write_eval_table(std::ostream& os, const std::map<std::string, MetricBundle>& rows) {
  os << "task,metric,value,count,skipped_labels\n";
  for (const auto& [task, mb] : rows)
    for (const auto& [metric, value] : mb.values)
      os << task << ',' << metric << ',' << detail::fmt_double(value) << ',' << mb.count << ',' << mb.skipped_labels
         << '\n';
}

/// Trains one model on `task_names` of `ds` and evaluates it on the test split.
inline TrainOutcome train_and_save(const TrainConfig& tc, const Dataset& ds, const std::vector<std::string>& task_names,
                                   const fs::path& out_dir, const std::string& label) {
  TaskRegistry reg;
  for (const auto& n : task_names) {
    TaskSpec s = ds.task(n).spec;
    reg.add({0, s.name, s.kind, s.label_dim, s.loss_weight});
  }
  Model<float> model(tc.model, reg, derive_seed(tc.seed, {0x696e6974ULL}));
  TrainOptions opts;
  opts.tasks = task_names;
  TrainOutcome o;
  o.name = label;
  o.result = train(model, ds, tc, opts);
  fs::create_directories(out_dir);
  o.checkpoint = out_dir / "checkpoint";
  save_checkpoint(model, o.checkpoint, {{"train", to_json(tc)}});
  write_metrics_log(out_dir / "metrics.jsonl", o.result.log);
  for (const auto& n : task_names) {
    o.test[n] = evaluate(model, ds, n, Split::test, tc.threads);
    const auto it = o.result.best_params.find(n);
    if (it == o.result.best_params.end()) continue;
    Model<float> best(tc.model, reg, it->second);
    save_checkpoint(best, out_dir / "best" / n, {{"best_epoch", o.result.best_epoch.at(n)},
                                                 {"best_valid", o.result.best_score.at(n)}});
    o.test_best[n] = evaluate(best, ds, n, Split::test, tc.threads);
  }
  std::ofstream table(out_dir / "test_metrics.csv");
  write_eval_table(table, o.test);
  std::ofstream best_table(out_dir / "test_metrics_best.csv");
  write_eval_table(best_table, o.test_best);
  return o;
}

inline std::vector<TrainOutcome> cmd_train(const TrainArgs& a) {
  RunManifest man;
  man.command = "train";
  man.started = utc_now();
  RunConfig rc = resolve_config(a.config);
  TrainConfig tc = rc.train;
  tc.model = rc.model;
  if (a.seed) tc.seed = *a.seed;
  if (!a.ablate.empty()) apply_ablation(tc.model, a.ablate);
  const Dataset ds = load_dataset(a.data);
  apply_shape(tc.model, ds.shape);
  tc.validate();

  std::vector<std::string> all;
  for (const auto& t : ds.tasks) all.push_back(t.name);
  std::vector<TrainOutcome> outcomes;
  if (a.single_task.empty()) {
    outcomes.push_back(train_and_save(tc, ds, all, a.out, "multitask"));
    man.outputs.push_back(outcomes.back().checkpoint.string());
  } else {
    std::vector<std::string> names;
    for (const auto& n : a.single_task) {
      if (n == "all") names.insert(names.end(), all.begin(), all.end());
      else names.push_back(ds.task(n).spec.name);
    }
    for (const auto& n : names) {
      outcomes.push_back(train_and_save(tc, ds, {n}, a.out / "single" / n, n));
      man.outputs.push_back(outcomes.back().checkpoint.string());
    }
  }
  if (!a.quiet)
    for (const auto& o : outcomes) write_eval_table(std::cout, o.test);
  man.config = {{"model", to_json(tc.model)}, {"train", to_json(tc)}, {"ablate", a.ablate},
                {"single_task", a.single_task}};
  man.seed = tc.seed;
  if (a.config) man.add_input("config", *a.config);
  man.add_input("data", a.data);
  man.finished = utc_now();
  man.write(a.out);
  return outcomes;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::optional<std::string> task;
  std::string split = "test";
  bool quiet = false;
};

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ConfigError("split: expected train, valid or test, got " + s);
}

inline std::map<std::string, MetricBundle> cmd_eval(const EvalArgs& a) {
  RunManifest man;
  man.command = "eval";
  man.started = utc_now();
  const Split split = parse_split(a.split);
  const Model<float> model = load_checkpoint<float>(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  std::map<std::string, MetricBundle> rows;
  if (a.task) {
    rows[*a.task] = evaluate(model, ds, *a.task, split);
  } else {
    for (const auto& t : ds.tasks)
      if (model.tasks().find(t.name)) rows[t.name] = evaluate(model, ds, t.name, split);
  }
  fs::create_directories(a.out);
  std::ofstream table(a.out / "eval.csv");
  write_eval_table(table, rows);
  if (!a.quiet) write_eval_table(std::cout, rows);
  man.config = {{"task", a.task ? nlohmann::json(*a.task) : nlohmann::json(nullptr)}, {"split", a.split}};
  man.add_input("checkpoint", a.checkpoint);
  man.add_input("data", a.data);
  man.outputs = {(a.out / "eval.csv").string()};
  man.finished = utc_now();
  man.write(a.out);
  return rows;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::string kind;
  std::size_t n_per_task = 50;
  std::string split = "test";
};

inline fs::path cmd_analyze(const AnalyzeArgs& a) {
  if (a.kind != "experts" && a.kind != "embeddings" && a.kind != "alphas")
    throw ConfigError("kind: expected experts, embeddings or alphas, got " + a.kind);
  RunManifest man;
  man.command = "analyze";
  man.started = utc_now();
  const Split split = parse_split(a.split);
  const Model<float> model = load_checkpoint<float>(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  fs::create_directories(a.out);
  const fs::path file = a.out / (a.kind + ".csv");
  std::ofstream out(file);
  if (a.kind == "experts") write_csv(out, export_expert_stats(model, ds, split));
  else if (a.kind == "embeddings") write_csv(out, export_embeddings(model, ds, a.n_per_task, split));
  else write_csv(out, export_alphas(model, ds, a.n_per_task, split));
  man.config = {{"kind", a.kind}, {"n_per_task", a.n_per_task}, {"split", a.split}};
  man.add_input("checkpoint", a.checkpoint);
  man.add_input("data", a.data);
  man.outputs = {file.string()};
  man.finished = utc_now();
  man.write(a.out);
  return file;
}

// ---------------------------------------------------------------------------

struct AddTaskArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::string task;
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  double fraction = 1.0;
  bool from_scratch = false;
};

struct AddTaskOutcome {
  fs::path checkpoint;
  std::vector<double> epoch_loss;
  MetricBundle test;
};

/// Deterministic subsample of round(fraction * n) training samples (at least one), original order kept.
inline std::vector<PatientSample> subsample(const std::vector<PatientSample>& v, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction: must lie in (0, 1]");
  if (v.empty()) return {};
  const std::size_t keep = std::max<std::size_t>(1, std::size_t(std::llround(fraction * double(v.size()))));
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x6672616374ULL}));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  std::vector<PatientSample> out;
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

/// Registers a new task head on a trained model (or on a fresh model with
/// --from-scratch) and fine-tunes on that task's data.
inline AddTaskOutcome cmd_add_task(const AddTaskArgs& a) {
  RunManifest man;
  man.command = "add-task";
  man.started = utc_now();
  Model<float> base = load_checkpoint<float>(a.checkpoint);
  RunConfig rc = resolve_config(a.config);
  TrainConfig tc = rc.train;
  if (a.seed) tc.seed = *a.seed;
  tc.model = base.config();
  tc.validate();

  Dataset ds = load_dataset(a.data);
  const TaskSpec spec = ds.task(a.task).spec;
  if (base.tasks().find(spec.name)) throw ConfigError("task: name collision, model already has task " + spec.name);
  TaskData& td = ds.per_task[spec.id];
  td.split(Split::train) = subsample(td.split(Split::train), a.fraction, tc.seed);

  const std::uint64_t head_seed = derive_seed(tc.seed, {0x68656164ULL, name_key(spec.name)});
  std::optional<Model<float>> model;
  if (a.from_scratch) {
    model.emplace(base.config(), base.tasks(), derive_seed(tc.seed, {0x696e6974ULL}));
  } else {
    model.emplace(std::move(base));
  }
  model->register_task({0, spec.name, spec.kind, spec.label_dim, spec.loss_weight}, head_seed);

  TrainOptions opts;
  opts.tasks = {spec.name};
  const TrainResult<float> res = train(*model, ds, tc, opts);
  AddTaskOutcome o;
  o.epoch_loss = res.epoch_loss.count(spec.name) ? res.epoch_loss.at(spec.name) : std::vector<double>{};
  o.test = evaluate(*model, ds, spec.name, Split::test, tc.threads);
  fs::create_directories(a.out);
  o.checkpoint = a.out / "checkpoint";
  save_checkpoint(*model, o.checkpoint, {{"added_task", spec.name}, {"from_scratch", a.from_scratch},
                                         {"fraction", a.fraction}});
  write_metrics_log(a.out / "metrics.jsonl", res.log);
  std::ofstream table(a.out / "test_metrics.csv");
  write_eval_table(table, {{spec.name, o.test}});

  man.config = {{"train", to_json(tc)}, {"task", spec.name}, {"fraction", a.fraction},
                {"from_scratch", a.from_scratch}, {"train_samples", td.split(Split::train).size()}};
  man.seed = tc.seed;
  man.add_input("checkpoint", a.checkpoint);
  man.add_input("data", a.data);
  if (a.config) man.add_input("config", *a.config);
  man.outputs = {o.checkpoint.string()};
  man.finished = utc_now();
  man.write(a.out);
  return o;
}

// ---------------------------------------------------------------------------

/// Parses arguments and dispatches; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"flexcare: multimodal multitask prediction with synthetic data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FLEXCARE_VERSION);

  GenArgs gen;
  std::string gen_out, gen_cfg;
  std::optional<std::uint64_t> seed;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
  g->add_option("--config", gen_cfg, "JSON config file");
  g->add_option("--out", gen_out, "output dataset directory");
  g->add_option("--seed", seed, "generator seed override");

  TrainArgs tr;
  std::string tr_cfg, tr_out;
  std::optional<std::uint64_t> tr_seed;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr_cfg, "JSON config file");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr_out, "run directory");
  t->add_option("--seed", tr_seed, "training seed override");
  t->add_option("--single-task", tr.single_task, "train one fresh model per named task (or 'all')")->delimiter(',');
  t->add_option("--ablate", tr.ablate, "ablation code: a-, b-, c-, d-");

  EvalArgs ev;
  std::string ev_out, ev_task;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--out", ev_out, "output directory");
  e->add_option("--task", ev_task, "task name (default: all)");
  e->add_option("--split", ev.split, "train, valid or test");

  AnalyzeArgs an;
  std::string an_out;
  auto* z = app.add_subcommand("analyze", "export analysis tables");
  z->add_option("--checkpoint", an.checkpoint, "checkpoint directory")->required();
  z->add_option("--data", an.data, "dataset directory")->required();
  z->add_option("--out", an_out, "output directory");
  z->add_option("--kind", an.kind, "experts, embeddings or alphas")->required();
  z->add_option("--n-per-task", an.n_per_task, "rows per task for embeddings and alphas");
  z->add_option("--split", an.split, "train, valid or test");

  AddTaskArgs ad;
  std::string ad_out, ad_cfg;
  std::optional<std::uint64_t> ad_seed;
  auto* x = app.add_subcommand("add-task", "add and fine-tune a new task head");
  x->add_option("--checkpoint", ad.checkpoint, "pretrained checkpoint directory")->required();
  x->add_option("--data", ad.data, "dataset directory containing the new task")->required();
  x->add_option("--task", ad.task, "name of the new task")->required();
  x->add_option("--out", ad_out, "output directory");
  x->add_option("--config", ad_cfg, "JSON config file (train section)");
  x->add_option("--seed", ad_seed, "seed override");
  x->add_option("--fraction", ad.fraction, "fraction of training samples to use");
  x->add_flag("--from-scratch", ad.from_scratch, "ignore pretrained weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int rc = app.exit(pe, std::cout, err);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (g->parsed()) {
      gen.out = gen_out.empty() ? default_out("gen") : fs::path(gen_out);
      if (!gen_cfg.empty()) gen.config = gen_cfg;
      gen.seed = seed;
      cmd_gen(gen);
    } else if (t->parsed()) {
      tr.out = tr_out.empty() ? default_out("train") : fs::path(tr_out);
      if (!tr_cfg.empty()) tr.config = tr_cfg;
      tr.seed = tr_seed;
      tr.quiet = false;
      cmd_train(tr);
    } else if (e->parsed()) {
      ev.out = ev_out.empty() ? default_out("eval") : fs::path(ev_out);
      if (!ev_task.empty()) ev.task = ev_task;
      cmd_eval(ev);
    } else if (z->parsed()) {
      an.out = an_out.empty() ? default_out("analyze") : fs::path(an_out);
      cmd_analyze(an);
    } else if (x->parsed()) {
      ad.out = ad_out.empty() ? default_out("add-task") : fs::path(ad_out);
      if (!ad_cfg.empty()) ad.config = ad_cfg;
      ad.seed = ad_seed;
      const auto o = cmd_add_task(ad);
      write_eval_table(std::cout, {{ad.task, o.test}});
    }
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kConfig;
  } catch (const NumericError& ex) {
    err << "numeric failure: " << ex.what() << '\n';
    return kNumeric;
  } catch (const CheckpointError& ex) {
    err << "checkpoint error: " << ex.what() << '\n';
    return kCheckpoint;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const UnknownTaskError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const TaskMismatchError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kOther;
  }
  return kOk;
}

}  // namespace flexcare::cli
