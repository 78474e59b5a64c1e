#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lwf/errors.hpp"
#include "lwf/experiments.hpp"
#include "lwf/metrics.hpp"
#include "lwf/strategies.hpp"

using namespace lwf;

namespace {

const DatasetSplit& corpus() {
  static const DatasetSplit c = generate_corpus(7, CorpusSizes::uniform(48, 24));
  return c;
}

TrainSettings quick() {
  TrainSettings s;
  s.schedule.phases = {{"warm-up", 1e-2, 2}, {"joint", 1e-3, 2}};
  s.batch_size = 16;
  return s;
}

std::vector<Tensor> copy_values(const std::vector<Tensor*>& ts) {
  std::vector<Tensor> out;
  for (const Tensor* t : ts) out.push_back(*t);
  return out;
}

bool unchanged(const std::vector<Tensor*>& ts, const std::vector<Tensor>& saved) {
  if (ts.size() != saved.size()) return false;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!ts[i]->same_values(saved[i])) return false;
  }
  return true;
}

struct Trained {
  MultiHeadNet net;
  AddTaskResult first;
};

Trained first_task(const TrainSettings& s, int task = 1, std::uint64_t seed = 7) {
  Trained t{initial_network(s.trunk, seed), {}};
  TaskContext ctx{corpus(), s, addition_rng(seed, 0)};
  t.first = train_first_task(t.net, task, ctx);
  return t;
}

Tensor probe_batch() { return make_batch(corpus().task(2).test, 2, 0, 8).images; }

}  // namespace

TEST_SUITE("strategies") {

TEST_CASE("names, orders and validation") {
  CHECK(all_strategies().size() == 5);
  std::set<std::string> names;
  for (StrategyKind k : all_strategies()) {
    names.insert(strategy_name(k));
    CHECK(parse_strategy(strategy_name(k)) == k);
  }
  CHECK(names.size() == 5);
  CHECK(parse_strategy("lwf") == StrategyKind::Cldrm);
  CHECK_THROWS_AS(parse_strategy("bogus"), ConfigError);
  CHECK(parse_order("3-1-2-4") == TaskSequence{3, 1, 2, 4});
  CHECK(order_string({2, 3, 1, 4}) == "2-3-1-4");
  CHECK_THROWS_AS(parse_order("1-1-2"), ConfigError);
  CHECK_THROWS_AS(parse_order("1-5"), ConfigError);
  CHECK_THROWS_AS(parse_order("1-x"), ConfigError);
  CHECK_THROWS_AS(validate_order({}), ConfigError);
  CHECK_THROWS_AS(run_sequence(StrategyKind::Cldrm, {1, 7}, corpus(), quick(), 1), ConfigError);
}

TEST_CASE("train_first_task") {
  TrainSettings s = quick();
  s.schedule.phases = {{"warm-up", 1e-2, 3}, {"joint", 1e-3, 3}};
  Trained t = first_task(s, 3);
  CHECK(t.net.heads().size() == 1);
  CHECK(t.net.head(3).class_count == 3);
  REQUIRE(t.first.trace.size() == 6);
  double best = 0;
  for (const EpochRecord& r : t.first.trace) best = std::max(best, r.accuracy.at(3));
  CHECK(t.first.initial == best);
  CHECK(t.first.trace.back().train_loss < t.first.trace.front().train_loss);
  CHECK(t.first.stored_samples == corpus().task(3).train.size());

  TaskContext ctx{corpus(), s, addition_rng(7, 1)};
  CHECK_THROWS_AS(train_first_task(t.net, 3, ctx), ContractError);

  TrainSettings last = s;
  last.initial_mode = InitialMode::LastEpoch;
  Trained l = first_task(last, 3);
  CHECK(l.first.initial == l.first.trace.back().accuracy.at(3));
}

TEST_CASE("cldrm: warm-up freeze, immutable teacher, recomputed loss") {
  const TrainSettings s = quick();
  Trained t = first_task(s);
  std::vector<Tensor> frozen, buffers, teacher_out_begin;
  std::size_t warmup_checks = 0, steps_checked = 0;
  MultiHeadNet* teacher_at_begin = nullptr;
  std::vector<MultiHeadNet> keep;
  keep.reserve(1);
  TrainHooks hooks;
  hooks.on_phase = [&](const PhaseEvent& e) {
    std::vector<Tensor*> shared_old;
    ParamPartition part = partition_params(e.net);
    shared_old = part.shared;
    shared_old.insert(shared_old.end(), part.old_heads.begin(), part.old_heads.end());
    if (e.phase == "warm-up" && e.begin) {
      frozen = copy_values(shared_old);
      buffers = copy_values(e.net.buffers());
    }
    if (e.phase == "warm-up" && !e.begin) {
      CHECK(unchanged(shared_old, frozen));
      CHECK(unchanged(e.net.buffers(), buffers));
      ++warmup_checks;
    }
    if (e.phase == "joint") {
      REQUIRE(e.teacher != nullptr);
      MultiHeadNet copy = *e.teacher;
      const auto out = predict_probabilities(copy, probe_batch());
      if (e.begin) {
        keep.push_back(copy);
        teacher_at_begin = &keep.back();
        teacher_out_begin = out;
      } else {
        REQUIRE(teacher_at_begin != nullptr);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].same_values(teacher_out_begin[i]));
        CHECK(unchanged(copy.parameters(), copy_values(teacher_at_begin->parameters())));
      }
    }
  };
  hooks.on_step = [&](const StepInfo& info) {
    if (info.phase != "joint") {
      CHECK(info.report.l_old.empty());
      return;
    }
    REQUIRE(info.teacher != nullptr);
    MultiHeadNet student = info.net;
    MultiHeadNet teacher = *info.teacher;
    Graph g;
    const auto logits = student.forward_all_heads(g, info.batch.images, Mode::Train);
    const Var l_new = cross_entropy_new(softmax_rows(logits[student.head_index(2)]), info.batch.onehot);
    const auto teacher_probs = predict_probabilities(teacher, info.batch.images, Mode::Eval);
    std::vector<Var> old{softmax_rows(logits[student.head_index(1)])};
    const Var l_old = distillation_loss(g, teacher_probs, old, s.distill.temperature).total;
    const double expected = total_loss(l_new, l_old, s.distill.lambda).value().item();
    CHECK(std::abs(info.report.l_total - expected) <= 1e-12);
    CHECK(std::abs(info.report.l_total - (info.report.l_new + s.distill.lambda * info.report.l_old_sum())) <= 1e-12);
    CHECK(info.report.l_old.size() == 1);
    CHECK(info.report.l_new >= 0.0);
    CHECK(info.report.l_old[0] >= 0.0);
    ++steps_checked;
  };
  TaskContext ctx{corpus(), s, addition_rng(7, 1), &hooks};
  const AddTaskResult r = cldrm_add_task(t.net, 2, ctx);
  CHECK(warmup_checks == 1);
  CHECK(steps_checked == 2 * 3);
  CHECK(r.trace.size() == 4);
  CHECK(r.stored_samples == corpus().task(2).train.size());
  CHECK(t.net.heads().size() == 2);
  for (Tensor* p : t.net.parameters()) CHECK(p->requires_grad());

  MultiHeadNet empty = initial_network(s.trunk, 1);
  TaskContext ctx2{corpus(), s, addition_rng(7, 1)};
  CHECK_THROWS_AS(cldrm_add_task(empty, 2, ctx2), ContractError);
  CHECK_THROWS_AS(cldrm_add_task(t.net, 2, ctx2), ContractError);
}

TEST_CASE("feature extraction never touches the trunk or old heads") {
  const TrainSettings s = quick();
  Trained t = first_task(s);
  const ParamPartition before = partition_params(t.net);
  const auto trunk = copy_values(before.shared);
  const auto old = copy_values(before.old_heads.empty() ? before.new_heads : before.old_heads);
  const auto buffers = copy_values(t.net.buffers());
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) { losses.push_back(r.train_loss); };
  TaskContext ctx{corpus(), s, addition_rng(7, 1), &hooks};
  feature_extraction_add_task(t.net, 2, ctx);
  const ParamPartition after = partition_params(t.net);
  CHECK(unchanged(after.shared, trunk));
  CHECK(unchanged(after.old_heads, old));
  CHECK(unchanged(t.net.buffers(), buffers));
  REQUIRE(losses.size() == 4);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("fine-tuning keeps old heads and moves the trunk") {
  const TrainSettings s = quick();
  Trained t = first_task(s);
  const auto trunk = copy_values(partition_params(t.net).shared);
  const auto head1 = copy_values({&t.net.heads()[0].weight, &t.net.heads()[0].bias});
  TaskContext ctx{corpus(), s, addition_rng(7, 1)};
  fine_tuning_add_task(t.net, 2, ctx);
  CHECK(unchanged({&t.net.heads()[0].weight, &t.net.heads()[0].bias}, head1));
  CHECK_FALSE(unchanged(partition_params(t.net).shared, trunk));
}

TEST_CASE("fine-tuning and cldrm share task-1 training and the warm-up") {
  const TrainSettings s = quick();
  const StrategyRun ft = run_sequence(StrategyKind::FineTuning, {1, 2}, corpus(), s, 7);
  const StrategyRun lwf = run_sequence(StrategyKind::Cldrm, {1, 2}, corpus(), s, 7);
  REQUIRE(ft.trace.size() == lwf.trace.size());
  for (std::size_t i = 0; i < ft.trace.size(); ++i) {
    if (ft.trace[i].trained_task == 2 && ft.trace[i].phase == "joint") break;
    CHECK(ft.trace[i].accuracy == lwf.trace[i].accuracy);
    CHECK(ft.trace[i].train_loss == lwf.trace[i].train_loss);
  }
  CHECK(ft.outcome(1).initial == lwf.outcome(1).initial);
}

TEST_CASE("duplicate bank isolation and linear trunk growth") {
  const TrainSettings s = quick();
  Trained t = first_task(s);
  std::vector<MultiHeadNet> bank{t.net};
  const std::size_t trunk = t.net.trunk().parameter_count();
  const auto before = predict_probabilities(bank[0], probe_batch());
  TaskContext ctx{corpus(), s, addition_rng(7, 1)};
  duplicate_fine_tune_add_task(bank, 2, ctx);
  REQUIRE(bank.size() == 2);
  const auto after = predict_probabilities(bank[0], probe_batch());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i].same_values(before[i]));
  CHECK(bank[0].trunk().parameter_count() + bank[1].trunk().parameter_count() == 2 * trunk);
  CHECK(bank[1].heads().size() == 1);
  CHECK(bank[1].has_head(2));
  std::vector<MultiHeadNet> empty;
  CHECK_THROWS_AS(duplicate_fine_tune_add_task(empty, 3, ctx), ContractError);
}

TEST_CASE("joint training: data requirement, round-robin, summed loss") {
  const TrainSettings s = quick();
  DatasetSplit missing = corpus();
  missing.tasks.erase(missing.tasks.begin() + 2);
  MultiHeadNet net = initial_network(s.trunk, 7);
  TaskContext bad{missing, s, addition_rng(7, 0)};
  CHECK_THROWS_AS(joint_train(net, {1, 2, 3, 4}, bad), DataError);

  const auto plan = joint_round_schedule({1, 2, 3}, {3, 1, 2});
  REQUIRE(plan.size() == 3);
  for (const auto& step : plan) {
    std::multiset<int> tasks;
    for (const auto& [task, batch] : step) tasks.insert(task);
    CHECK(tasks == std::multiset<int>{1, 2, 3});
  }
  CHECK(plan[2][1].second == 0);
  CHECK(plan[2][2].second == 0);

  std::size_t checked = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& info) {
    REQUIRE(info.batches.size() == 2);
    MultiHeadNet copy = info.net;
    double expected = 0;
    for (const auto& [task, batch] : info.batches) {
      Graph g;
      const auto logits = copy.forward_all_heads(g, batch->images, Mode::Train);
      expected += cross_entropy_new(softmax_rows(logits[copy.head_index(task)]), batch->onehot).value().item();
    }
    CHECK(std::abs(info.report.l_total - expected) <= 1e-12);
    ++checked;
  };
  MultiHeadNet jnet = initial_network(s.trunk, 7);
  TaskContext ctx{corpus(), s, addition_rng(7, 0), &hooks};
  const AddTaskResult r = joint_train(jnet, {1, 2}, ctx);
  CHECK(checked == 4 * 3);
  CHECK(jnet.heads().size() == 2);
  CHECK(r.stored_samples == corpus().task(1).train.size() + corpus().task(2).train.size());
}

TEST_CASE("run_sequence reporting conventions and determinism") {
  const TrainSettings s = quick();
  for (StrategyKind k : all_strategies()) {
    CAPTURE(strategy_name(k));
    const StrategyRun run = run_sequence(k, {2, 1, 3}, corpus(), s, 11);
    REQUIRE(run.tasks.size() == 3);
    CHECK(run.tasks.back().initial == run.tasks.back().final_reported);
    CHECK(run.tasks.back().final_measured == run.tasks.back().final_reported);
    const bool measured = k == StrategyKind::FineTuning || k == StrategyKind::Cldrm;
    for (const TaskOutcome& o : run.tasks) {
      CHECK(o.final_reported == (measured ? o.final_measured : o.initial));
    }
    if (k == StrategyKind::FeatureExtraction || k == StrategyKind::DuplicateFineTuning) {
      // Later training never changes an earlier task's predictions.
      for (const TaskOutcome& o : run.tasks) {
        double own_last = -1;
        for (const EpochRecord& r : run.trace)
          if (r.trained_task == o.task_id) own_last = r.accuracy.at(o.task_id);
        CHECK(o.final_measured == own_last);
      }
    }
    CHECK(run.models.size() == (k == StrategyKind::DuplicateFineTuning ? 3u : 1u));
    REQUIRE(run.stored_samples.size() == 3);
    if (k == StrategyKind::JointTraining) {
      CHECK(run.stored_samples[2] == 3 * 48);
    } else {
      CHECK(run.stored_samples[2] == 48);
    }
    const StrategyRun again = run_sequence(k, {2, 1, 3}, corpus(), s, 11);
    CHECK(metrics_csv({run}) == metrics_csv({again}));
    CHECK(tables_csv({initial_final_table(run)}) == tables_csv({initial_final_table(again)}));
  }
}

TEST_CASE("every head's softmax is normalised on its own") {
  const TrainSettings s = quick();
  StrategyRun run = run_sequence(StrategyKind::Cldrm, {1, 2, 3}, corpus(), s, 5);
  const auto probs = predict_probabilities(run.models[0], probe_batch());
  REQUIRE(probs.size() == 3);
  for (const Tensor& p : probs) {
    const std::size_t k = p.dim(1);
    for (std::size_t r = 0; r < p.dim(0); ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < k; ++j) sum += p[r * k + j];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

}  // TEST_SUITE
