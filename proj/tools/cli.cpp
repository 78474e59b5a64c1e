#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "lwf/binary_io.hpp"
#include "lwf/checkpoint.hpp"
#include "lwf/config.hpp"
#include "lwf/errors.hpp"
#include "lwf/experiments.hpp"
#include "lwf/metrics.hpp"
#include "lwf/report.hpp"

namespace lwf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string order;
  std::vector<double> temperature;
  double lambda = 1.0;
  std::string strategy;
  std::string out;
  bool paper_scale = false;
  std::string data;
  std::string checkpoint;
  int task = 0;
  std::string kind;
  std::string in;
  bool full_schedule = false;
  bool task_from_manifest = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* task_opt = nullptr;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "experiment config JSON (or a run manifest)");
  sub->add_option("--seed", f.seed, "run seed (corpus seed for generate-data)");
  sub->add_option("--order", f.order, "task order, e.g. 1-2-3-4");
  sub->add_option("--temperature", f.temperature, "distillation temperature (repeatable for sweep-temp)");
  sub->add_option("--lambda", f.lambda, "weight of the distillation loss");
  sub->add_option("--strategy", f.strategy, "feature-extraction, fine-tuning, duplicate, joint or cldrm");
  sub->add_option("--out", f.out, "output directory");
  sub->add_flag("--paper-scale", f.paper_scale, "40+60 epochs and full per-task image counts");
  sub->add_option("--data", f.data, "read this corpus file instead of generating one");
}

ExperimentConfig effective_config(const Flags& f, const std::string& command) {
  ExperimentConfig cfg;
  if (!f.config.empty()) cfg = load_config(f.config);
  if (f.paper_scale) cfg.apply_paper_scale();
  if (f.seed_opt && f.seed_opt->count()) {
    if (command == "generate-data") {
      cfg.corpus.seed = f.seed;
    } else {
      cfg.seed = f.seed;
      cfg.seeds = {f.seed};
    }
  }
  if (!f.order.empty()) cfg.order = parse_order(f.order);
  if (command == "sweep-temp" && !f.temperature.empty()) {
    cfg.temperatures = f.temperature;
  } else if (f.temperature.size() == 1) {
    cfg.train.distill.temperature = f.temperature.front();
  } else if (f.temperature.size() > 1) {
    throw ConfigError("--temperature takes a single value for " + command);
  }
  if (f.lambda_opt && f.lambda_opt->count()) cfg.train.distill.lambda = f.lambda;
  if (!f.strategy.empty()) cfg.strategy = parse_strategy(f.strategy);
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.data.empty()) cfg.corpus.path = f.data;
  cfg.validate();
  return cfg;
}

DatasetSplit load_data(const ExperimentConfig& cfg) {
  DatasetSplit corpus = materialize_corpus(cfg.corpus);
  const TrunkConfig& t = cfg.train.trunk;
  if (corpus.channels != t.in_channels || corpus.height != t.in_height || corpus.width != t.in_width) {
    throw ConfigError("corpus images are " + std::to_string(corpus.channels) + "×" + std::to_string(corpus.height) +
                      "×" + std::to_string(corpus.width) + " but the trunk expects " + std::to_string(t.in_channels) +
                      "×" + std::to_string(t.in_height) + "×" + std::to_string(t.in_width));
  }
  return corpus;
}

// Writes text artifacts plus manifest.json (config echo, seed, artifact hashes).
class Outputs {
 public:
  Outputs(const ExperimentConfig& cfg, std::string command) : cfg_(cfg), command_(std::move(command)) {}

  void text(const std::string& rel, const std::string& content) {
    write_file_atomic(fs::path(cfg_.out) / rel, content);
    hashes_[rel] = hex64(fnv1a64(content));
  }
  void bytes(const std::string& rel, const std::vector<std::uint8_t>& content) {
    write_file_atomic(fs::path(cfg_.out) / rel, content);
    hashes_[rel] = hex64(fnv1a64(content));
  }
  // Command-line inputs that are not part of the config (task id, checkpoint).
  void arg(const std::string& key, json value) { args_[key] = std::move(value); }
  void finish(std::ostream& out) {
    json artifacts = json::object();
    for (const auto& [k, v] : hashes_) artifacts[k] = v;
    const json manifest{{"manifest_version", kManifestVersion},
                        {"command", command_},
                        {"seed", cfg_.seed},
                        {"config", config_to_json(cfg_)},
                        {"config_hash", hex64(config_hash(cfg_))},
                        {"args", args_},
                        {"artifacts", artifacts}};
    write_file_atomic(fs::path(cfg_.out) / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << hashes_.size() << " artifact(s) and manifest.json to " << cfg_.out << "\n";
  }

 private:
  const ExperimentConfig& cfg_;
  std::string command_;
  std::map<std::string, std::string> hashes_;
  json args_ = json::object();
};

// A manifest given as --config supplies the task and checkpoint of the run it records.
void inherit_manifest_args(Flags& f, const std::string& command) {
  if (f.config.empty()) return;
  std::ifstream in(f.config);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("args") || j.value("command", "") != command) return;
  const json& a = j.at("args");
  if (f.task_opt && !f.task_opt->count() && a.contains("task")) {
    f.task = a.at("task").get<int>();
    f.task_from_manifest = true;
  }
  if (f.checkpoint.empty() && a.contains("checkpoint")) f.checkpoint = a.at("checkpoint").get<std::string>();
}

json table_json(const AccuracyTable& t) {
  json rows = json::array();
  for (const AccuracyRow& r : t.rows) {
    rows.push_back({{"task", r.task_id}, {"initial", r.initial_pct}, {"final", r.final_pct}});
  }
  return {{"strategy", t.strategy}, {"order", t.order}, {"seed", t.seed}, {"rows", rows},
          {"average_of_final", t.average_final_pct}};
}

void print_table(std::ostream& out, const AccuracyTable& t) {
  out << t.strategy << " (order " << t.order << ", seed " << t.seed << ")\n";
  for (const AccuracyRow& r : t.rows) {
    out << "  task " << r.task_id << " " << task_spec(r.task_id).name << ": initial " << format_pct(r.initial_pct)
        << "%  final " << format_pct(r.final_pct) << "%\n";
  }
  out << "  average of final: " << format_pct(t.average_final_pct) << "%\n";
}

StrategyRun single_task_run(const ExperimentConfig& cfg, int task, AddTaskResult&& r, const TaskSequence& order) {
  StrategyRun run;
  run.kind = cfg.strategy;
  run.order = order;
  run.seed = cfg.seed;
  run.temperature = cfg.train.distill.temperature;
  run.lambda = cfg.train.distill.lambda;
  run.trace = std::move(r.trace);
  run.tasks.push_back(TaskOutcome{task, r.initial, r.initial, r.initial});
  run.stored_samples.push_back(r.stored_samples);
  return run;
}

int cmd_generate(const ExperimentConfig& cfg, std::ostream& out) {
  if (!cfg.corpus.path.empty()) throw ConfigError("generate-data writes a corpus; --data is not accepted");
  const DatasetSplit corpus = materialize_corpus(cfg.corpus);
  const fs::path tmp = fs::path(cfg.out) / "corpus.clds";
  save_corpus(corpus, tmp);
  Outputs o(cfg, "generate-data");
  o.bytes("corpus.clds", read_file_bytes(tmp));
  for (const TaskData& t : corpus.tasks) {
    out << "task " << t.task_id << " " << task_spec(t.task_id).name << ": " << t.train.size() << " train, "
        << t.test.size() << " test\n";
  }
  o.finish(out);
  return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, const Flags& f, std::ostream& out) {
  const int task = f.task_opt->count() || f.task_from_manifest ? f.task : cfg.order.front();
  const DatasetSplit corpus = load_data(cfg);
  MultiHeadNet net = initial_network(cfg.train.trunk, cfg.seed);
  TaskContext ctx{corpus, cfg.train, addition_rng(cfg.seed, 0), nullptr, 0};
  AddTaskResult r = train_first_task(net, task, ctx);
  out << "task " << task << " " << task_spec(task).name << ": initial " << format_pct(100 * r.initial) << "%\n";
  const StrategyRun run = single_task_run(cfg, task, std::move(r), {task});
  Outputs o(cfg, "train");
  o.arg("task", task);
  o.bytes("model.clwf", encode_checkpoint(net, addition_rng(cfg.seed, 1), config_hash(cfg)));
  o.text("metrics.csv", metrics_csv({run}));
  o.finish(out);
  return kExitOk;
}

int cmd_add_task(const ExperimentConfig& cfg, const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw ConfigError("add-task needs --checkpoint PATH");
  if (!f.task_opt->count() && !f.task_from_manifest) throw ConfigError("add-task needs --task N");
  task_spec(f.task);
  const DatasetSplit corpus = load_data(cfg);
  Checkpoint ck = load_checkpoint(f.checkpoint);
  if (!(ck.net.trunk().config() == cfg.train.trunk)) {
    throw ConfigError("checkpoint trunk geometry differs from the configured trunk");
  }
  const std::size_t position = ck.net.heads().size();
  TaskContext ctx{corpus, cfg.train, addition_rng(cfg.seed, position), nullptr, 0};
  AddTaskResult r;
  switch (cfg.strategy) {
    case StrategyKind::Cldrm:
      r = cldrm_add_task(ck.net, f.task, ctx);
      break;
    case StrategyKind::FineTuning:
      r = fine_tuning_add_task(ck.net, f.task, ctx);
      break;
    case StrategyKind::FeatureExtraction:
      r = feature_extraction_add_task(ck.net, f.task, ctx);
      break;
    default:
      throw ConfigError("add-task supports cldrm, fine-tuning and feature-extraction; use compare for " +
                        strategy_name(cfg.strategy));
  }
  TaskSequence order;
  for (const Head& h : ck.net.heads()) order.push_back(h.task_id);
  out << "task " << f.task << " " << task_spec(f.task).name << " added with " << strategy_name(cfg.strategy)
      << ": initial " << format_pct(100 * r.initial) << "%\n";
  for (const Head& h : ck.net.heads()) {
    if (h.task_id == f.task) continue;
    const double acc = evaluate(ck.net, h.task_id, corpus.task(h.task_id).test, cfg.train.batch_size).accuracy;
    out << "  task " << h.task_id << " " << task_spec(h.task_id).name << " now " << format_pct(100 * acc) << "%\n";
  }
  const StrategyRun run = single_task_run(cfg, f.task, std::move(r), order);
  Outputs o(cfg, "add-task");
  o.arg("task", f.task);
  o.arg("checkpoint", fs::absolute(f.checkpoint).string());
  o.bytes("model.clwf", encode_checkpoint(ck.net, addition_rng(cfg.seed, position + 1), config_hash(cfg)));
  o.text("metrics.csv", metrics_csv({run}));
  o.finish(out);
  return kExitOk;
}

int cmd_compare(const ExperimentConfig& cfg, std::ostream& out) {
  const DatasetSplit corpus = load_data(cfg);
  const auto& kinds = all_strategies();
  std::vector<std::optional<StrategyRun>> slots(kinds.size());
  parallel_for(kinds.size(), cfg.threads,
               [&](std::size_t i) { slots[i] = run_sequence(kinds[i], cfg.order, corpus, cfg.train, cfg.seed); });
  std::vector<StrategyRun> runs;
  for (auto& s : slots) runs.push_back(std::move(*s));

  Outputs o(cfg, "compare");
  std::vector<AccuracyTable> tables;
  json summary = json::array();
  for (StrategyRun& run : runs) {
    const AccuracyTable t = initial_final_table(run);
    o.text("tables/" + t.strategy + ".csv", table_csv(t));
    for (int task : run.order) {
      const Evaluation ev = evaluate(run.models, task, corpus.task(task).test, cfg.train.batch_size);
      o.text("confusion/" + t.strategy + "_task" + std::to_string(task) + ".csv", confusion_csv(ev.confusion, task));
    }
    print_table(out, t);
    summary.push_back(table_json(t));
    tables.push_back(t);
  }
  o.text("summary.csv", tables_csv(tables));
  o.text("summary.json", summary.dump(2) + "\n");
  o.text("metrics.csv", metrics_csv(runs));
  o.finish(out);
  return kExitOk;
}

int cmd_sweep_temp(const ExperimentConfig& cfg, std::ostream& out) {
  const DatasetSplit corpus = load_data(cfg);
  const auto pair = pair_tasks(cfg.pair);
  const SweepResult sweep = temperature_sweep(corpus, pair, cfg.temperatures, cfg.seeds, cfg.train, cfg.threads);
  Outputs o(cfg, "sweep-temp");
  o.text("metrics.csv", metrics_csv(sweep.runs));
  std::string ranking = "rank,T,mean_final_task" + std::to_string(pair.first) + "\n";
  json rank_json = json::array();
  int rank = 1;
  out << "task " << pair.first << " accuracy after adding task " << pair.second << ", by T:\n";
  for (const auto& [t, acc] : sweep.ranking()) {
    char line[96];
    std::snprintf(line, sizeof line, "%d,%g,%s\n", rank, t, format_pct(100 * acc).c_str());
    ranking += line;
    rank_json.push_back({{"rank", rank}, {"T", t}, {"mean_final", 100 * acc}});
    out << "  " << rank++ << ". T=" << t << ": " << format_pct(100 * acc) << "%\n";
  }
  o.text("ranking.csv", ranking);
  std::vector<AccuracyTable> tables;
  for (const StrategyRun& r : sweep.runs) tables.push_back(initial_final_table(r));
  o.text("tables.csv", tables_csv(tables));
  o.text("summary.json", json{{"pair", {pair.first, pair.second}}, {"ranking", rank_json}}.dump(2) + "\n");
  o.finish(out);
  return kExitOk;
}

int cmd_sweep_order(const ExperimentConfig& cfg, std::ostream& out) {
  const DatasetSplit corpus = load_data(cfg);
  const auto runs = order_sweep(corpus, cfg.seeds, cfg.include_fine_tuning, cfg.train, cfg.threads);
  Outputs o(cfg, "sweep-order");
  std::vector<AccuracyTable> tables;
  json summary = json::array();
  for (const StrategyRun& r : runs) {
    tables.push_back(initial_final_table(r));
    summary.push_back(table_json(tables.back()));
    print_table(out, tables.back());
  }
  o.text("tables.csv", tables_csv(tables));
  o.text("metrics.csv", metrics_csv(runs));
  o.text("summary.json", summary.dump(2) + "\n");
  o.finish(out);
  return kExitOk;
}

int cmd_pair(const ExperimentConfig& cfg, const Flags& f, std::ostream& out) {
  const PairKind kind = f.kind.empty() ? cfg.pair : parse_pair_kind(f.kind);
  const DatasetSplit corpus = load_data(cfg);
  std::vector<StrategyKind> kinds = all_strategies();
  if (!f.strategy.empty()) kinds = {cfg.strategy};
  const auto runs = pair_experiment(corpus, kind, kinds, cfg.seeds, cfg.train, cfg.threads);
  const auto [a, b] = pair_tasks(kind);
  Outputs o(cfg, "pair");
  std::vector<AccuracyTable> tables;
  for (const StrategyRun& r : runs) {
    tables.push_back(initial_final_table(r));
    const TaskOutcome& first = r.outcome(a);
    out << strategy_name(r.kind) << " seed " << r.seed << ": task " << a << " " << format_pct(100 * first.initial)
        << "% -> " << format_pct(100 * first.final_measured) << "%, task " << b << " "
        << format_pct(100 * r.outcome(b).initial) << "%\n";
  }
  o.text("tables.csv", tables_csv(tables));
  o.text("metrics.csv", metrics_csv(runs));
  o.finish(out);
  return kExitOk;
}

int cmd_cost(ExperimentConfig cfg, const Flags& f, std::ostream& out) {
  if (!f.full_schedule) {
    // Counters do not depend on epoch counts.
    for (Phase& p : cfg.train.schedule.phases) p.epochs = 1;
  }
  const DatasetSplit corpus = load_data(cfg);
  const CostReport report = cost_report(all_strategies(), cfg.order, corpus, cfg.train, cfg.seed, cfg.threads);
  Outputs o(cfg, "cost");
  o.text("cost.csv", cost_csv(report));
  out << cost_csv(report);
  o.finish(out);
  return kExitOk;
}

int cmd_report(const Flags& f, std::ostream& out) {
  if (f.in.empty()) throw ConfigError("report needs --in DIR");
  const fs::path dest = f.out.empty() ? fs::path(f.in) / "report" : fs::path(f.out);
  for (const fs::path& p : render_report(f.in, dest)) out << "wrote " << p.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continual-learning damage recognition: training strategies and experiments", "lwf"};
  app.require_subcommand(1);
  Flags f;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"generate-data", "write the synthetic corpus"},
      {"train", "train the first task and save a checkpoint"},
      {"add-task", "add a task to a checkpoint (cldrm, fine-tuning, feature-extraction)"},
      {"compare", "run all five strategies on one order"},
      {"sweep-temp", "distillation temperature sweep"},
      {"sweep-order", "the six learning orders with task 4 last"},
      {"pair", "similar / dissimilar task pair experiment"},
      {"cost", "parameter, storage and prediction-pass accounting"},
      {"report", "render metric CSVs into tables and SVG charts"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, f);
    subs[name] = sub;
  }
  for (const char* name : {"train", "add-task"}) subs[name]->add_option("--task", f.task, "task id (1-4)");
  subs["add-task"]->add_option("--checkpoint", f.checkpoint, "checkpoint to extend");
  subs["pair"]->add_option("--kind", f.kind, "similar or dissimilar");
  subs["report"]->add_option("--in", f.in, "directory with metric CSVs");
  subs["cost"]->add_flag("--full-schedule", f.full_schedule, "train with the configured epochs instead of one per phase");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (app.get_subcommands().empty()) err << app.help();
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  // Every subcommand registered its own options; keep the ones that were parsed.
  CLI::App* parsed = subs[command];
  f.seed_opt = parsed->get_option_no_throw("--seed");
  f.lambda_opt = parsed->get_option_no_throw("--lambda");
  f.task_opt = parsed->get_option_no_throw("--task");
  inherit_manifest_args(f, command);
  try {
    if (command == "report") return cmd_report(f, out);
    const ExperimentConfig cfg = effective_config(f, command);
    if (command == "generate-data") return cmd_generate(cfg, out);
    if (command == "train") return cmd_train(cfg, f, out);
    if (command == "add-task") return cmd_add_task(cfg, f, out);
    if (command == "compare") return cmd_compare(cfg, out);
    if (command == "sweep-temp") return cmd_sweep_temp(cfg, out);
    if (command == "sweep-order") return cmd_sweep_order(cfg, out);
    if (command == "pair") return cmd_pair(cfg, f, out);
    if (command == "cost") return cmd_cost(cfg, f, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return kExitRun;
  }
  return kExitUsage;
}

}  // namespace lwf::cli
