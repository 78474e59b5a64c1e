#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lwf/metrics.hpp"
#include "lwf/strategies.hpp"

namespace lwf {

// Percentages; formatted with two decimals on output.
struct AccuracyRow {
  int task_id = 0;
  double initial_pct = 0.0;
  double final_pct = 0.0;
};

struct AccuracyTable {
  std::string strategy;
  std::string order;
  std::uint64_t seed = 0;
  std::vector<AccuracyRow> rows;  // training order
  double average_final_pct = 0.0;
};

// DataError if the run lacks a record for any task of its order.
AccuracyTable initial_final_table(const StrategyRun& run);
double average_of(const std::vector<double>& values);

const std::vector<double>& default_temperatures();

struct SweepResult {
  std::string variable;  // "T"
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::pair<int, int> pair;
  std::vector<StrategyRun> runs;  // values-major: runs[v * seeds.size() + s]

  const StrategyRun& run(std::size_t value_index, std::size_t seed_index) const;
  // (value, mean end-of-run accuracy of the first task), best first.
  std::vector<std::pair<double, double>> ranking() const;
};

// For each T: train task A, then add task B with CLDRM at temperature T.
// ConfigError on T <= 0 or A == B.
SweepResult temperature_sweep(const DatasetSplit& corpus, std::pair<int, int> pair, const std::vector<double>& temperatures,
                              const std::vector<std::uint64_t>& seeds, const TrainSettings& settings,
                              unsigned threads = 0);

enum class PairKind { Similar, Dissimilar };
PairKind parse_pair_kind(std::string_view text);
std::string pair_kind_name(PairKind kind);
// Similar: damage level then spalling (1,2). Dissimilar: component then spalling (3,2).
std::pair<int, int> pair_tasks(PairKind kind);

std::vector<StrategyRun> pair_experiment(const DatasetSplit& corpus, PairKind kind,
                                         const std::vector<StrategyKind>& strategies,
                                         const std::vector<std::uint64_t>& seeds, const TrainSettings& settings,
                                         unsigned threads = 0);

// The six orders with damage type (task 4) last.
const std::vector<TaskSequence>& table4_orders();

std::vector<StrategyRun> order_sweep(const DatasetSplit& corpus, const std::vector<std::uint64_t>& seeds,
                                     bool include_fine_tuning, const TrainSettings& settings, unsigned threads = 0);

struct CostRow {
  StrategyKind kind = StrategyKind::Cldrm;
  std::size_t total_parameters = 0;
  std::size_t trunk_parameters = 0;
  std::size_t head_parameters = 0;
  std::vector<std::size_t> stored_samples;  // per task addition
  std::size_t prediction_passes = 0;         // trunk passes to label one image for every task
  // Relative to CLDRM (= 1).
  double total_parameter_ratio = 0.0;
  double trunk_parameter_ratio = 0.0;
  double storage_ratio = 0.0;  // at the last addition
  double pass_ratio = 0.0;
};

struct CostReport {
  std::size_t task_count = 0;
  std::vector<CostRow> rows;

  const CostRow& row(StrategyKind kind) const;
};

// Trunk evaluations needed to predict every trained task for `image`.
std::size_t count_prediction_passes(StrategyRun& run, const Tensor& image);
CostRow measure_cost(StrategyRun& run);
// Ratios need a CLDRM run among `runs`. `probe` is one C×H×W image.
CostReport cost_from_runs(std::vector<StrategyRun>& runs, const Tensor& probe);
// Runs every strategy over `order` and reads the instrumented counters.
CostReport cost_report(const std::vector<StrategyKind>& strategies, const TaskSequence& order,
                       const DatasetSplit& corpus, const TrainSettings& settings, std::uint64_t seed,
                       unsigned threads = 0);

// Worker count: LWF_THREADS if set to a positive integer, else the hardware count.
unsigned sweep_threads();
// Calls fn(i) for i in [0, n) on up to `threads` workers (0 = sweep_threads()).
// The first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

std::string run_id(const StrategyRun& run);
inline constexpr std::string_view kMetricsHeader = "run_id,strategy,order,T,seed,epoch,task,split,accuracy";
// One row per epoch per traced task; accuracy in percent.
std::string metrics_csv(const std::vector<StrategyRun>& runs);
std::string table_csv(const AccuracyTable& table);
// All tables stacked: strategy,order,seed,task,initial,final (task "avg" holds Average-of-Final).
std::string tables_csv(const std::vector<AccuracyTable>& tables);
std::string confusion_csv(const ConfusionMatrix& m, int task_id);
std::string cost_csv(const CostReport& report);
std::string format_pct(double pct);

}  // namespace lwf
