#include "lwf/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>

#include "lwf/errors.hpp"

namespace lwf {

double average_of(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

AccuracyTable initial_final_table(const StrategyRun& run) {
  AccuracyTable table;
  table.strategy = strategy_name(run.kind);
  table.order = order_string(run.order);
  table.seed = run.seed;
  std::vector<double> finals;
  for (int task : run.order) {
    const TaskOutcome& o = run.outcome(task);
    table.rows.push_back(AccuracyRow{task, 100.0 * o.initial, 100.0 * o.final_reported});
    finals.push_back(100.0 * o.final_reported);
  }
  table.average_final_pct = average_of(finals);
  return table;
}

const std::vector<double>& default_temperatures() {
  static const std::vector<double> values{1.0, 2.0, 5.0, 10.0};
  return values;
}

const StrategyRun& SweepResult::run(std::size_t value_index, std::size_t seed_index) const {
  return runs.at(value_index * seeds.size() + seed_index);
}

std::vector<std::pair<double, double>> SweepResult::ranking() const {
  std::vector<std::pair<double, double>> out;
  for (std::size_t v = 0; v < values.size(); ++v) {
    std::vector<double> ends;
    for (std::size_t s = 0; s < seeds.size(); ++s) ends.push_back(run(v, s).outcome(pair.first).final_measured);
    out.emplace_back(values[v], average_of(ends));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

namespace {

void require_seeds(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
}

}  // namespace

SweepResult temperature_sweep(const DatasetSplit& corpus, std::pair<int, int> pair,
                              const std::vector<double>& temperatures, const std::vector<std::uint64_t>& seeds,
                              const TrainSettings& settings, unsigned threads) {
  if (temperatures.empty()) throw ConfigError("temperature sweep needs at least one value");
  for (double t : temperatures) {
    if (!(t > 0.0)) throw ConfigError("temperature values must be positive (got " + std::to_string(t) + ")");
  }
  if (pair.first == pair.second) throw ConfigError("temperature sweep needs two distinct tasks");
  require_seeds(seeds);
  validate_order({pair.first, pair.second});

  SweepResult result;
  result.variable = "T";
  result.values = temperatures;
  result.seeds = seeds;
  result.pair = pair;
  std::vector<std::optional<StrategyRun>> slots(temperatures.size() * seeds.size());
  parallel_for(slots.size(), threads, [&](std::size_t i) {
    TrainSettings s = settings;
    s.distill.temperature = temperatures[i / seeds.size()];
    slots[i] = run_sequence(StrategyKind::Cldrm, {pair.first, pair.second}, corpus, s, seeds[i % seeds.size()]);
  });
  for (auto& slot : slots) result.runs.push_back(std::move(*slot));
  return result;
}

PairKind parse_pair_kind(std::string_view text) {
  if (text == "similar") return PairKind::Similar;
  if (text == "dissimilar") return PairKind::Dissimilar;
  throw ConfigError("unknown pair kind '" + std::string(text) + "' (expected similar or dissimilar)");
}

std::string pair_kind_name(PairKind kind) { return kind == PairKind::Similar ? "similar" : "dissimilar"; }

std::pair<int, int> pair_tasks(PairKind kind) { return kind == PairKind::Similar ? std::pair{1, 2} : std::pair{3, 2}; }

std::vector<StrategyRun> pair_experiment(const DatasetSplit& corpus, PairKind kind,
                                         const std::vector<StrategyKind>& strategies,
                                         const std::vector<std::uint64_t>& seeds, const TrainSettings& settings,
                                         unsigned threads) {
  require_seeds(seeds);
  if (strategies.empty()) throw ConfigError("pair experiment needs at least one strategy");
  const auto [a, b] = pair_tasks(kind);
  std::vector<std::optional<StrategyRun>> slots(strategies.size() * seeds.size());
  parallel_for(slots.size(), threads, [&](std::size_t i) {
    slots[i] = run_sequence(strategies[i / seeds.size()], {a, b}, corpus, settings, seeds[i % seeds.size()]);
  });
  std::vector<StrategyRun> runs;
  for (auto& slot : slots) runs.push_back(std::move(*slot));
  return runs;
}

const std::vector<TaskSequence>& table4_orders() {
  static const std::vector<TaskSequence> orders{{1, 2, 3, 4}, {1, 3, 2, 4}, {2, 1, 3, 4},
                                                {2, 3, 1, 4}, {3, 1, 2, 4}, {3, 2, 1, 4}};
  return orders;
}

std::vector<StrategyRun> order_sweep(const DatasetSplit& corpus, const std::vector<std::uint64_t>& seeds,
                                     bool include_fine_tuning, const TrainSettings& settings, unsigned threads) {
  require_seeds(seeds);
  std::vector<StrategyKind> kinds{StrategyKind::Cldrm};
  if (include_fine_tuning) kinds.push_back(StrategyKind::FineTuning);
  const auto& orders = table4_orders();
  const std::size_t per_kind = orders.size() * seeds.size();
  std::vector<std::optional<StrategyRun>> slots(kinds.size() * per_kind);
  parallel_for(slots.size(), threads, [&](std::size_t i) {
    const StrategyKind kind = kinds[i / per_kind];
    const std::size_t rest = i % per_kind;
    slots[i] = run_sequence(kind, orders[rest / seeds.size()], corpus, settings, seeds[rest % seeds.size()]);
  });
  std::vector<StrategyRun> runs;
  for (auto& slot : slots) runs.push_back(std::move(*slot));
  return runs;
}

const CostRow& CostReport::row(StrategyKind kind) const {
  for (const CostRow& r : rows) {
    if (r.kind == kind) return r;
  }
  throw DataError("cost report has no row for " + strategy_name(kind));
}

std::size_t count_prediction_passes(StrategyRun& run, const Tensor& image) {
  Shape shape{1};
  shape.insert(shape.end(), image.shape().begin(), image.shape().end());
  const Tensor batch = image.reshaped(shape);
  std::size_t passes = 0;
  for (MultiHeadNet& m : run.models) {
    const bool needed = std::any_of(run.order.begin(), run.order.end(), [&](int t) { return m.has_head(t); });
    if (!needed) continue;
    m.reset_trunk_evaluations();
    Graph g;
    m.forward_all_heads(g, batch, Mode::Eval);
    passes += m.trunk_evaluations();
    m.reset_trunk_evaluations();
  }
  return passes;
}

CostRow measure_cost(StrategyRun& run) {
  CostRow row;
  row.kind = run.kind;
  for (const MultiHeadNet& m : run.models) {
    row.total_parameters += m.parameter_count();
    row.trunk_parameters += m.trunk().parameter_count();
    row.head_parameters += m.head_parameter_count();
  }
  row.stored_samples = run.stored_samples;
  return row;
}

namespace {

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

void fill_ratios(CostReport& report) {
  const CostRow base = report.row(StrategyKind::Cldrm);
  for (CostRow& r : report.rows) {
    r.total_parameter_ratio = ratio(r.total_parameters, base.total_parameters);
    r.trunk_parameter_ratio = ratio(r.trunk_parameters, base.trunk_parameters);
    r.storage_ratio = ratio(r.stored_samples.empty() ? 0 : r.stored_samples.back(),
                            base.stored_samples.empty() ? 0 : base.stored_samples.back());
    r.pass_ratio = ratio(r.prediction_passes, base.prediction_passes);
  }
}

}  // namespace

CostReport cost_from_runs(std::vector<StrategyRun>& runs, const Tensor& probe) {
  const auto ref = std::find_if(runs.begin(), runs.end(), [](const StrategyRun& r) { return r.kind == StrategyKind::Cldrm; });
  if (ref == runs.end()) throw ConfigError("cost report needs a CLDRM run as the reference");
  CostReport report;
  report.task_count = ref->order.size();
  for (StrategyRun& r : runs) {
    CostRow row = measure_cost(r);
    row.prediction_passes = count_prediction_passes(r, probe);
    report.rows.push_back(std::move(row));
  }
  fill_ratios(report);
  return report;
}

CostReport cost_report(const std::vector<StrategyKind>& strategies, const TaskSequence& order,
                       const DatasetSplit& corpus, const TrainSettings& settings, std::uint64_t seed,
                       unsigned threads) {
  validate_order(order);
  std::vector<StrategyKind> kinds = strategies;
  if (std::find(kinds.begin(), kinds.end(), StrategyKind::Cldrm) == kinds.end()) kinds.push_back(StrategyKind::Cldrm);
  std::vector<std::optional<StrategyRun>> slots(kinds.size());
  parallel_for(slots.size(), threads,
               [&](std::size_t i) { slots[i] = run_sequence(kinds[i], order, corpus, settings, seed); });
  std::vector<StrategyRun> runs;
  for (auto& slot : slots) runs.push_back(std::move(*slot));

  return cost_from_runs(runs, corpus.task(order.front()).test.front().image);
}

unsigned sweep_threads() {
  if (const char* env = std::getenv("LWF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = sweep_threads();
  const std::size_t workers = std::min<std::size_t>(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string format_pct(double pct) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", pct);
  return buf;
}

namespace {

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string format_acc(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", 100.0 * fraction);
  return buf;
}

}  // namespace

std::string run_id(const StrategyRun& run) {
  std::string id = strategy_name(run.kind) + "_" + order_string(run.order);
  if (run.kind == StrategyKind::Cldrm) id += "_T" + format_g(run.temperature);
  return id + "_s" + std::to_string(run.seed);
}

std::string metrics_csv(const std::vector<StrategyRun>& runs) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const StrategyRun& run : runs) {
    const std::string prefix = run_id(run) + "," + strategy_name(run.kind) + "," + order_string(run.order) + "," +
                               format_g(run.temperature) + "," + std::to_string(run.seed) + ",";
    for (const EpochRecord& rec : run.trace) {
      for (const auto& [task, acc] : rec.accuracy) {
        out += prefix + std::to_string(rec.epoch) + "," + std::to_string(task) + ",test," + format_acc(acc) + "\n";
      }
    }
  }
  return out;
}

std::string table_csv(const AccuracyTable& table) {
  std::string out = "task,name,initial,final\n";
  for (const AccuracyRow& r : table.rows) {
    out += std::to_string(r.task_id) + "," + task_spec(r.task_id).name + "," + format_pct(r.initial_pct) + "," +
           format_pct(r.final_pct) + "\n";
  }
  out += "average_of_final,,," + format_pct(table.average_final_pct) + "\n";
  return out;
}

std::string tables_csv(const std::vector<AccuracyTable>& tables) {
  std::string out = "strategy,order,seed,task,initial,final\n";
  for (const AccuracyTable& t : tables) {
    const std::string prefix = t.strategy + "," + t.order + "," + std::to_string(t.seed) + ",";
    for (const AccuracyRow& r : t.rows) {
      out += prefix + std::to_string(r.task_id) + "," + format_pct(r.initial_pct) + "," + format_pct(r.final_pct) + "\n";
    }
    out += prefix + "avg,," + format_pct(t.average_final_pct) + "\n";
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& m, int task_id) {
  const TaskSpec& spec = task_spec(task_id);
  std::string out = "true\\predicted";
  for (const std::string& c : spec.class_names) out += "," + c;
  out += "\n";
  for (std::size_t i = 0; i < m.classes(); ++i) {
    out += spec.class_names.at(i);
    for (std::size_t j = 0; j < m.classes(); ++j) out += "," + std::to_string(m.at(i, j));
    out += "\n";
  }
  return out;
}

std::string cost_csv(const CostReport& report) {
  std::string out =
      "strategy,total_parameters,trunk_parameters,head_parameters,stored_samples,prediction_passes,"
      "total_parameter_ratio,trunk_parameter_ratio,storage_ratio,pass_ratio\n";
  for (const CostRow& r : report.rows) {
    std::string stored;
    for (std::size_t i = 0; i < r.stored_samples.size(); ++i) {
      if (i) stored += ' ';
      stored += std::to_string(r.stored_samples[i]);
    }
    char ratios[128];
    std::snprintf(ratios, sizeof ratios, "%.4f,%.4f,%.4f,%.4f", r.total_parameter_ratio, r.trunk_parameter_ratio,
                  r.storage_ratio, r.pass_ratio);
    out += strategy_name(r.kind) + "," + std::to_string(r.total_parameters) + "," +
           std::to_string(r.trunk_parameters) + "," + std::to_string(r.head_parameters) + "," + stored + "," +
           std::to_string(r.prediction_passes) + "," + ratios + "\n";
  }
  return out;
}

}  // namespace lwf
