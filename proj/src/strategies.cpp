#include "lwf/strategies.hpp"

#include <algorithm>
#include <charconv>
#include <set>

#include "lwf/errors.hpp"
#include "lwf/metrics.hpp"

namespace lwf {

const std::vector<StrategyKind>& all_strategies() {
  static const std::vector<StrategyKind> kinds{StrategyKind::FeatureExtraction, StrategyKind::FineTuning,
                                               StrategyKind::DuplicateFineTuning, StrategyKind::JointTraining,
                                               StrategyKind::Cldrm};
  return kinds;
}

std::string strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FeatureExtraction:
      return "feature-extraction";
    case StrategyKind::FineTuning:
      return "fine-tuning";
    case StrategyKind::DuplicateFineTuning:
      return "duplicate";
    case StrategyKind::JointTraining:
      return "joint";
    case StrategyKind::Cldrm:
      return "cldrm";
  }
  return "?";
}

StrategyKind parse_strategy(std::string_view name) {
  for (StrategyKind k : all_strategies()) {
    if (strategy_name(k) == name) return k;
  }
  if (name == "lwf") return StrategyKind::Cldrm;
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected feature-extraction, fine-tuning, duplicate, joint or cldrm)");
}

TaskSequence parse_order(std::string_view text) {
  TaskSequence order;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t dash = std::min(text.find('-', start), text.size());
    const std::string_view part = text.substr(start, dash - start);
    int id = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), id);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size()) {
      throw ConfigError("bad task order '" + std::string(text) + "' (expected ids like 1-2-3-4)");
    }
    order.push_back(id);
    start = dash + 1;
  }
  validate_order(order);
  return order;
}

std::string order_string(const TaskSequence& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(order[i]);
  }
  return s;
}

void validate_order(const TaskSequence& order) {
  if (order.empty()) throw ConfigError("task order is empty");
  std::set<int> seen;
  for (int id : order) {
    task_spec(id);
    if (!seen.insert(id).second) {
      throw ConfigError("task " + std::to_string(id) + " appears twice in order " + order_string(order));
    }
  }
}

void TrainSettings::validate() const {
  schedule.validate();
  SgdConfig{schedule.warmup().lr, momentum, weight_decay}.validate();
  distill.validate();
  trunk.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
}

const TaskOutcome& StrategyRun::outcome(int task_id) const {
  for (const TaskOutcome& t : tasks) {
    if (t.task_id == task_id) return t;
  }
  throw DataError("run has no record for task " + std::to_string(task_id));
}

Rng addition_rng(std::uint64_t seed, std::size_t position) { return Rng(seed).derive(0x100 + position); }

MultiHeadNet initial_network(const TrunkConfig& trunk, std::uint64_t seed) {
  Rng rng = Rng(seed).derive(0x1417);
  return build_micro_resnet(trunk, rng);
}

namespace {

// Streams within one addition's rng.
constexpr std::uint64_t kHeadStream = 1;
constexpr std::uint64_t kEpochStreamBase = 16;

std::uint64_t epoch_seed(const TaskContext& ctx, std::size_t phase_index, std::size_t epoch, std::uint64_t stream) {
  return ctx.rng.derive(kEpochStreamBase + phase_index).derive(epoch).derive(stream).next_u64();
}

struct PhasePlan {
  std::string name;
  double lr;
  std::size_t epochs;
  bool train_shared;
  bool train_old;
  bool distill;
};

void emit_phase(const TaskContext& ctx, int task_id, const std::string& phase, bool begin, MultiHeadNet& net,
                const MultiHeadNet* teacher) {
  if (ctx.hooks && ctx.hooks->on_phase) ctx.hooks->on_phase(PhaseEvent{task_id, phase, begin, net, teacher});
}

void apply_trainable(MultiHeadNet& net, bool shared, bool old_heads) {
  ParamPartition part = partition_params(net);
  set_trainable(part.shared, shared);
  set_trainable(part.old_heads, old_heads);
  set_trainable(part.new_heads, true);
}

FreezeMask mask_from_flags(const std::vector<Tensor*>& params) {
  FreezeMask mask = FreezeMask::none(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) mask.frozen[i] = !params[i]->requires_grad();
  return mask;
}

std::map<int, double> evaluate_tasks(MultiHeadNet& net, const std::vector<int>& tasks, const DatasetSplit& corpus,
                                     std::size_t batch_size) {
  std::map<int, double> acc;
  for (int t : tasks) acc[t] = evaluate(net, t, corpus.task(t).test, batch_size).accuracy;
  return acc;
}

std::vector<int> tasks_to_trace(const MultiHeadNet& net, const std::vector<int>& training, const TrainSettings& s) {
  if (!s.trace_all_tasks) return training;
  std::vector<int> out;
  for (const Head& h : net.heads()) out.push_back(h.task_id);
  return out;
}

class SampleCounter {
 public:
  void touch(int task, const std::vector<std::size_t>& indices, std::size_t split_size) {
    auto& seen = seen_[task];
    seen.resize(split_size, false);
    for (std::size_t i : indices) seen.at(i) = true;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [task, seen] : seen_) n += static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
    return n;
  }

 private:
  std::map<int, std::vector<bool>> seen_;
};

void finish_epoch(TaskContext& ctx, AddTaskResult& result, EpochRecord record, int task_id) {
  const double acc = record.accuracy.at(task_id);
  if (ctx.settings.initial_mode == InitialMode::LastEpoch || result.trace.empty()) {
    result.initial = acc;
  } else {
    result.initial = std::max(result.initial, acc);
  }
  if (ctx.hooks && ctx.hooks->on_epoch) ctx.hooks->on_epoch(record);
  result.trace.push_back(std::move(record));
}

// Trains `task_id`'s head (already appended) through the given phases.
AddTaskResult train_phases(MultiHeadNet& net, int task_id, TaskContext& ctx, const std::vector<PhasePlan>& phases,
                           const MultiHeadNet* teacher) {
  const TrainSettings& s = ctx.settings;
  const TaskData& data = ctx.corpus.task(task_id);
  const AugmentConfig aug = AugmentConfig::for_task(task_spec(task_id));
  const std::size_t new_index = net.head_index(task_id);
  AddTaskResult result;
  SampleCounter counter;
  std::size_t epoch = ctx.epoch_offset;

  for (std::size_t pi = 0; pi < phases.size(); ++pi) {
    const PhasePlan& phase = phases[pi];
    apply_trainable(net, phase.train_shared, phase.train_old);
    const Mode trunk_mode = phase.train_shared ? Mode::Train : Mode::Eval;
    std::vector<Tensor*> params = net.parameters();
    const FreezeMask mask = mask_from_flags(params);
    SgdState opt{SgdConfig{phase.lr, s.momentum, s.weight_decay}, {}};

    std::vector<std::size_t> old_indices;
    if (phase.distill) {
      if (teacher == nullptr) throw ContractError("distillation phase without a teacher");
      for (const Head& h : teacher->heads()) old_indices.push_back(net.head_index(h.task_id));
    }

    emit_phase(ctx, task_id, phase.name, true, net, teacher);
    for (std::size_t e = 0; e < phase.epochs; ++e, ++epoch) {
      const auto batches = batch_iter(data.train, task_id, s.batch_size, epoch_seed(ctx, pi, e, 0),
                                      s.augment ? &aug : nullptr);
      double loss_sum = 0.0;
      for (std::size_t step = 0; step < batches.size(); ++step) {
        const Batch& batch = batches[step];
        counter.touch(task_id, batch.indices, data.train.size());
        Graph g;
        const std::vector<Var> logits = net.forward_all_heads(g, batch.images, trunk_mode);
        const Var l_new = cross_entropy_new(softmax_rows(logits[new_index]), batch.onehot);
        LossReport report;
        report.l_new = l_new.value().item();
        Var total = l_new;
        if (phase.distill) {
          const std::vector<Tensor> teacher_probs =
              predict_probabilities(const_cast<MultiHeadNet&>(*teacher), batch.images, Mode::Eval);
          std::vector<Var> student;
          for (std::size_t idx : old_indices) student.push_back(softmax_rows(logits[idx]));
          const DistillationTerms terms = distillation_loss(g, teacher_probs, student, s.distill.temperature);
          for (const Var& v : terms.per_task) report.l_old.push_back(v.value().item());
          total = total_loss(l_new, terms.total, s.distill.lambda);
        }
        report.l_total = total.value().item();
        g.backward(total);
        if (ctx.hooks && ctx.hooks->on_step) {
          ctx.hooks->on_step(StepInfo{task_id, phase.name, epoch, step, batch, {{task_id, &batch}}, report, net,
                                      teacher});
        }
        sgd_momentum_step(params, opt, mask);
        for (Tensor* p : params) p->clear_grad();
        loss_sum += report.l_total;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.trained_task = task_id;
      rec.phase = phase.name;
      rec.train_loss = loss_sum / static_cast<double>(batches.size());
      rec.accuracy = evaluate_tasks(net, tasks_to_trace(net, {task_id}, s), ctx.corpus, s.batch_size);
      finish_epoch(ctx, result, std::move(rec), task_id);
    }
    emit_phase(ctx, task_id, phase.name, false, net, teacher);
  }
  set_trainable(net.parameters(), true);
  result.stored_samples = counter.count();
  return result;
}

void require_trained(const MultiHeadNet& net, int task_id, const char* who) {
  if (net.heads().empty()) {
    throw ContractError(std::string(who) + ": network has no trained head");
  }
  if (net.has_head(task_id)) {
    throw ContractError(std::string(who) + ": task " + std::to_string(task_id) + " already has a head");
  }
}

std::vector<PhasePlan> fine_tuning_phases(const Schedule& sch) {
  return {
      {sch.warmup().name, sch.warmup().lr, sch.warmup().epochs, false, false, false},
      {sch.joint().name, sch.joint().lr, sch.joint().epochs, true, false, false},
  };
}

Head& append_task_head(MultiHeadNet& net, int task_id, TaskContext& ctx) {
  Rng head_rng = ctx.rng.derive(kHeadStream);
  return net.append_head(task_id, task_spec(task_id).class_count(), head_rng);
}

}  // namespace

AddTaskResult train_first_task(MultiHeadNet& net, int task_id, TaskContext& ctx) {
  ctx.settings.validate();
  if (net.has_head(task_id)) {
    throw ContractError("train_first_task: task " + std::to_string(task_id) + " already has a head");
  }
  ctx.corpus.task(task_id);
  append_task_head(net, task_id, ctx);
  std::vector<PhasePlan> phases;
  for (const Phase& p : ctx.settings.schedule.phases) phases.push_back({p.name, p.lr, p.epochs, true, true, false});
  return train_phases(net, task_id, ctx, phases, nullptr);
}

AddTaskResult cldrm_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx) {
  ctx.settings.validate();
  require_trained(net, task_id, "cldrm_add_task");
  ctx.corpus.task(task_id);
  // Step 2: the teacher is the model as it stood before the new head.
  MultiHeadNet teacher = net;
  set_trainable(teacher.parameters(), false);
  append_task_head(net, task_id, ctx);
  const Schedule& sch = ctx.settings.schedule;
  const std::vector<PhasePlan> phases{
      {sch.warmup().name, sch.warmup().lr, sch.warmup().epochs, false, false, false},
      {sch.joint().name, sch.joint().lr, sch.joint().epochs, true, true, true},
  };
  return train_phases(net, task_id, ctx, phases, &teacher);
}

AddTaskResult feature_extraction_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx) {
  ctx.settings.validate();
  require_trained(net, task_id, "feature_extraction_add_task");
  ctx.corpus.task(task_id);
  append_task_head(net, task_id, ctx);
  std::vector<PhasePlan> phases;
  for (const Phase& p : ctx.settings.schedule.phases) phases.push_back({p.name, p.lr, p.epochs, false, false, false});
  return train_phases(net, task_id, ctx, phases, nullptr);
}

AddTaskResult fine_tuning_add_task(MultiHeadNet& net, int task_id, TaskContext& ctx) {
  ctx.settings.validate();
  require_trained(net, task_id, "fine_tuning_add_task");
  ctx.corpus.task(task_id);
  append_task_head(net, task_id, ctx);
  return train_phases(net, task_id, ctx, fine_tuning_phases(ctx.settings.schedule), nullptr);
}

AddTaskResult duplicate_fine_tune_add_task(std::vector<MultiHeadNet>& bank, int task_id, TaskContext& ctx) {
  if (bank.empty()) {
    throw ContractError("duplicate_fine_tune_add_task: model bank is empty");
  }
  for (const MultiHeadNet& m : bank) {
    if (m.has_head(task_id)) {
      throw ContractError("duplicate_fine_tune_add_task: task " + std::to_string(task_id) + " already in the bank");
    }
  }
  ctx.settings.validate();
  ctx.corpus.task(task_id);
  MultiHeadNet clone = bank.back();
  while (!clone.heads().empty()) clone.remove_head(clone.heads().front().task_id);
  append_task_head(clone, task_id, ctx);
  AddTaskResult result = train_phases(clone, task_id, ctx, fine_tuning_phases(ctx.settings.schedule), nullptr);
  bank.push_back(std::move(clone));
  return result;
}

std::vector<std::vector<std::pair<int, std::size_t>>> joint_round_schedule(
    const std::vector<int>& tasks, const std::vector<std::size_t>& batches_per_task) {
  if (tasks.size() != batches_per_task.size()) {
    throw ContractError("joint_round_schedule: task and batch-count lists differ in length");
  }
  std::size_t steps = 0;
  for (std::size_t n : batches_per_task) {
    if (n == 0) throw ContractError("joint_round_schedule: a task has no batches");
    steps = std::max(steps, n);
  }
  std::vector<std::vector<std::pair<int, std::size_t>>> plan(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t t = 0; t < tasks.size(); ++t) plan[s].emplace_back(tasks[t], s % batches_per_task[t]);
  }
  return plan;
}

AddTaskResult joint_train(MultiHeadNet& net, const std::vector<int>& tasks, TaskContext& ctx) {
  const TrainSettings& s = ctx.settings;
  s.validate();
  validate_order(tasks);
  for (int t : tasks) {
    if (!ctx.corpus.has_task(t)) {
      throw DataError("joint training needs every task's data; task " + std::to_string(t) + " (" +
                      task_spec(t).name + ") is missing");
    }
  }
  for (int t : tasks) {
    if (!net.has_head(t)) append_task_head(net, t, ctx);
  }
  set_trainable(net.parameters(), true);
  std::vector<Tensor*> params = net.parameters();
  const FreezeMask mask = FreezeMask::none(params.size());
  const int reported = tasks.back();
  AddTaskResult result;
  SampleCounter counter;
  std::size_t epoch = ctx.epoch_offset;

  for (std::size_t pi = 0; pi < s.schedule.phases.size(); ++pi) {
    const Phase& phase = s.schedule.phases[pi];
    SgdState opt{SgdConfig{phase.lr, s.momentum, s.weight_decay}, {}};
    emit_phase(ctx, reported, phase.name, true, net, nullptr);
    for (std::size_t e = 0; e < phase.epochs; ++e, ++epoch) {
      std::map<int, std::vector<Batch>> batches;
      std::vector<std::size_t> counts;
      for (int t : tasks) {
        const AugmentConfig aug = AugmentConfig::for_task(task_spec(t));
        batches[t] = batch_iter(ctx.corpus.task(t).train, t, s.batch_size,
                                epoch_seed(ctx, pi, e, static_cast<std::uint64_t>(t)), s.augment ? &aug : nullptr);
        counts.push_back(batches[t].size());
      }
      const auto plan = joint_round_schedule(tasks, counts);
      double loss_sum = 0.0;
      for (std::size_t step = 0; step < plan.size(); ++step) {
        Graph g;
        Var total;
        std::vector<std::pair<int, const Batch*>> used;
        for (const auto& [t, bi] : plan[step]) {
          const Batch& batch = batches[t][bi];
          counter.touch(t, batch.indices, ctx.corpus.task(t).train.size());
          used.emplace_back(t, &batch);
          const Var features = net.forward_features(g, batch.images, Mode::Train);
          const Var logits = net.head_logits(g, features, net.head_index(t));
          const Var ce = cross_entropy_new(softmax_rows(logits), batch.onehot);
          total = total.valid() ? add(total, ce) : ce;
        }
        LossReport report;
        report.l_new = total.value().item();
        report.l_total = report.l_new;
        g.backward(total);
        if (ctx.hooks && ctx.hooks->on_step) {
          ctx.hooks->on_step(
              StepInfo{reported, phase.name, epoch, step, *used.front().second, used, report, net, nullptr});
        }
        sgd_momentum_step(params, opt, mask);
        for (Tensor* p : params) p->clear_grad();
        loss_sum += report.l_total;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.trained_task = reported;
      rec.phase = phase.name;
      rec.train_loss = loss_sum / static_cast<double>(plan.size());
      rec.accuracy = evaluate_tasks(net, tasks_to_trace(net, tasks, s), ctx.corpus, s.batch_size);
      finish_epoch(ctx, result, std::move(rec), reported);
    }
    emit_phase(ctx, reported, phase.name, false, net, nullptr);
  }
  result.stored_samples = counter.count();
  return result;
}

StrategyRun run_sequence(StrategyKind kind, const TaskSequence& order, const DatasetSplit& corpus,
                         const TrainSettings& settings, std::uint64_t seed, const TrainHooks* hooks) {
  validate_order(order);
  settings.validate();
  StrategyRun run;
  run.kind = kind;
  run.order = order;
  run.seed = seed;
  run.temperature = settings.distill.temperature;
  run.lambda = settings.distill.lambda;

  std::vector<MultiHeadNet> bank;
  bank.push_back(initial_network(settings.trunk, seed));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const int task = order[pos];
    TaskContext ctx{corpus, settings, addition_rng(seed, pos), hooks, run.trace.size()};
    AddTaskResult r;
    if (kind == StrategyKind::JointTraining) {
      r = joint_train(bank.front(), TaskSequence(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pos) + 1),
                      ctx);
    } else if (pos == 0) {
      r = train_first_task(bank.front(), task, ctx);
    } else {
      switch (kind) {
        case StrategyKind::FeatureExtraction:
          r = feature_extraction_add_task(bank.front(), task, ctx);
          break;
        case StrategyKind::FineTuning:
          r = fine_tuning_add_task(bank.front(), task, ctx);
          break;
        case StrategyKind::DuplicateFineTuning:
          r = duplicate_fine_tune_add_task(bank, task, ctx);
          break;
        case StrategyKind::Cldrm:
          r = cldrm_add_task(bank.front(), task, ctx);
          break;
        case StrategyKind::JointTraining:
          break;
      }
    }
    run.trace.insert(run.trace.end(), std::make_move_iterator(r.trace.begin()), std::make_move_iterator(r.trace.end()));
    run.stored_samples.push_back(r.stored_samples);
    run.tasks.push_back(TaskOutcome{task, r.initial, 0.0, 0.0});
  }

  const bool measured_final = kind == StrategyKind::FineTuning || kind == StrategyKind::Cldrm;
  for (std::size_t pos = 0; pos < run.tasks.size(); ++pos) {
    TaskOutcome& t = run.tasks[pos];
    t.final_measured = evaluate(bank, t.task_id, corpus.task(t.task_id).test, settings.batch_size).accuracy;
    const bool last = pos + 1 == run.tasks.size();
    t.final_reported = measured_final && !last ? t.final_measured : t.initial;
  }
  run.models = std::move(bank);
  return run;
}

}  // namespace lwf
