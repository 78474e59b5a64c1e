#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lwf/data.hpp"
#include "lwf/losses.hpp"
#include "lwf/nn.hpp"
#include "lwf/optim.hpp"

namespace lwf {

enum class StrategyKind { FeatureExtraction, FineTuning, DuplicateFineTuning, JointTraining, Cldrm };

const std::vector<StrategyKind>& all_strategies();
// Short CLI names: feature-extraction, fine-tuning, duplicate, joint, cldrm.
std::string strategy_name(StrategyKind kind);
StrategyKind parse_strategy(std::string_view name);

using TaskSequence = std::vector<int>;

// "1-2-3-4" -> {1,2,3,4}; ConfigError on unknown or repeated ids.
TaskSequence parse_order(std::string_view text);
std::string order_string(const TaskSequence& order);
void validate_order(const TaskSequence& order);

enum class InitialMode { BestEpoch, LastEpoch };

struct TrainSettings {
  Schedule schedule = make_schedule(SchedulePreset::Desk);
  double momentum = 0.9;
  double weight_decay = 4e-5;
  std::size_t batch_size = 64;
  DistillConfig distill;
  bool augment = true;
  InitialMode initial_mode = InitialMode::BestEpoch;
  // Evaluate every task with a head after each epoch, not only the one in training.
  bool trace_all_tasks = true;
  TrunkConfig trunk = TrunkConfig::desk();

  void validate() const;
};

// Test accuracies after one epoch.
struct EpochRecord {
  std::size_t epoch = 0;  // global index within the run
  int trained_task = 0;
  std::string phase;
  double train_loss = 0.0;  // mean total loss over the epoch's steps
  std::map<int, double> accuracy;  // task id -> fraction correct
};

struct StepInfo {
  int task_id;
  std::string_view phase;
  std::size_t epoch;
  std::size_t step;
  const Batch& batch;  // the new task's batch (first task of the round for joint training)
  // Every batch of the step with its task; a single entry except in joint training.
  std::vector<std::pair<int, const Batch*>> batches;
  const LossReport& report;
  MultiHeadNet& net;
  const MultiHeadNet* teacher;
};

struct PhaseEvent {
  int task_id;
  std::string_view phase;
  bool begin;
  MultiHeadNet& net;
  const MultiHeadNet* teacher;
};

// Observation points for tests and instrumentation. on_step runs after
// backward() and before the optimizer update.
struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const PhaseEvent&)> on_phase;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Everything one task addition needs besides the model.
struct TaskContext {
  const DatasetSplit& corpus;
  const TrainSettings& settings;
  Rng rng;  // stream owned by this addition
  const TrainHooks* hooks = nullptr;
  std::size_t epoch_offset = 0;
};

struct AddTaskResult {
  double initial = 0.0;  // best (or last) test accuracy of the added task
  std::vector<EpochRecord> trace;
  std::size_t stored_samples = 0;  // distinct training samples the addition read
};

// Step 1: append the head and train every parameter over all schedule phases.
AddTaskResult train_first_task(MultiHeadNet& net, int task_id, TaskContext& ctx);

// Steps 2-6: teacher snapshot, θn warm-up with θs/θo frozen, then joint
// training on L_new + λ·L_old with the teacher fed the same augmented batch.
AddTaskResult cldrm_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx);

// Trunk and old heads fixed; only θn trains (trunk in eval mode) over all phases.
AddTaskResult feature_extraction_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx);

// θn warm-up, then θs+θn at the joint-phase learning rate; θo stays frozen.
AddTaskResult fine_tuning_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx);

// Clones the newest model, drops its heads and fine-tunes it on the task.
AddTaskResult duplicate_fine_tune_add_task(std::vector<MultiHeadNet>& bank, int task_id, TaskContext& ctx);

// Trains all parameters on every listed task; each step takes one batch per
// task in round-robin and minimises the summed cross entropy. Heads are
// appended for tasks that lack one. DataError if any dataset is missing.
// `initial` reports the last listed task.
AddTaskResult joint_train(MultiHeadNet& net, const std::vector<int>& tasks, TaskContext& ctx);

// Step plan of one joint epoch: entry s lists (task, batch index) pairs taken
// at step s. Every task appears once per step; shorter tasks wrap around.
std::vector<std::vector<std::pair<int, std::size_t>>> joint_round_schedule(
    const std::vector<int>& tasks, const std::vector<std::size_t>& batches_per_task);

struct TaskOutcome {
  int task_id = 0;
  double initial = 0.0;
  double final_measured = 0.0;  // evaluated after the whole sequence
  double final_reported = 0.0;  // reporting convention (see run_sequence)
};

struct StrategyRun {
  StrategyKind kind = StrategyKind::Cldrm;
  TaskSequence order;
  std::uint64_t seed = 0;
  double temperature = 0.0;
  double lambda = 0.0;
  std::vector<EpochRecord> trace;
  std::vector<TaskOutcome> tasks;  // in training order
  std::vector<MultiHeadNet> models;  // one, or one per task for the duplicate bank
  std::vector<std::size_t> stored_samples;  // per addition

  const TaskOutcome& outcome(int task_id) const;
};

// Runs the strategy over `order`. Final is the measured post-sequence accuracy
// for fine-tuning and CLDRM; feature extraction, duplicate and joint report
// Final := Initial. The last task always reports Final == Initial.
StrategyRun run_sequence(StrategyKind kind, const TaskSequence& order, const DatasetSplit& corpus,
                         const TrainSettings& settings, std::uint64_t seed, const TrainHooks* hooks = nullptr);

// RNG stream used for addition `position` of a run with `seed`.
Rng addition_rng(std::uint64_t seed, std::size_t position);
MultiHeadNet initial_network(const TrunkConfig& trunk, std::uint64_t seed);

}  // namespace lwf
