#include "lwf/config.hpp"

#include <set>

#include "lwf/binary_io.hpp"
#include "lwf/errors.hpp"

namespace lwf {

using nlohmann::json;

void ExperimentConfig::validate() const {
  train.validate();
  validate_order(order);
  if (temperatures.empty()) throw ConfigError("temperatures: list is empty");
  for (double t : temperatures) {
    if (!(t > 0.0)) throw ConfigError("temperatures: values must be positive");
  }
  if (seeds.empty()) throw ConfigError("seeds: list is empty");
  if (corpus.path.empty()) {
    for (int t = 0; t < kTaskCount; ++t) {
      if (corpus.sizes.train[t] == 0 || corpus.sizes.test[t] == 0) {
        throw ConfigError("corpus sizes must be positive (task " + std::to_string(t + 1) + ")");
      }
    }
    if (corpus.height < 8 || corpus.width < 8) throw ConfigError("corpus images must be at least 8×8");
    if (!(corpus.sizes.imbalance >= 1.0)) throw ConfigError("corpus.imbalance must be >= 1");
    if (train.trunk.in_height != corpus.height || train.trunk.in_width != corpus.width ||
        train.trunk.in_channels != 3) {
      throw ConfigError("trunk input " + std::to_string(train.trunk.in_channels) + "×" +
                        std::to_string(train.trunk.in_height) + "×" + std::to_string(train.trunk.in_width) +
                        " does not match corpus images 3×" + std::to_string(corpus.height) + "×" +
                        std::to_string(corpus.width));
    }
  }
}

void ExperimentConfig::apply_paper_scale() {
  train.schedule = make_schedule(SchedulePreset::Paper);
  corpus.sizes = CorpusSizes::paper();
}

namespace {

json trunk_to_json(const TrunkConfig& c) {
  return json{{"in_channels", c.in_channels},     {"in_height", c.in_height},
              {"in_width", c.in_width},           {"stem_kernel", c.stem_kernel},
              {"stem_stride", c.stem_stride},     {"stem_channels", c.stem_channels},
              {"stage_blocks", c.stage_blocks},   {"stage_channels", c.stage_channels}};
}

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items()) {
    if (!ok.count(item.key())) {
      throw ConfigError(std::string(where) + ": unknown key '" + item.key() + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  json schedule = json::array();
  for (const Phase& p : c.train.schedule.phases) schedule.push_back({{"name", p.name}, {"lr", p.lr}, {"epochs", p.epochs}});
  return json{
      {"seed", c.seed},
      {"corpus",
       {{"seed", c.corpus.seed},
        {"train", c.corpus.sizes.train},
        {"test", c.corpus.sizes.test},
        {"height", c.corpus.height},
        {"width", c.corpus.width},
        {"path", c.corpus.path},
        {"imbalance", c.corpus.sizes.imbalance}}},
      {"trunk", trunk_to_json(c.train.trunk)},
      {"schedule", schedule},
      {"optimizer",
       {{"momentum", c.train.momentum}, {"weight_decay", c.train.weight_decay}, {"batch_size", c.train.batch_size}}},
      {"distill", {{"temperature", c.train.distill.temperature}, {"lambda", c.train.distill.lambda}}},
      {"augment", c.train.augment},
      {"initial", c.train.initial_mode == InitialMode::BestEpoch ? "best" : "last"},
      {"trace_all_tasks", c.train.trace_all_tasks},
      {"strategy", strategy_name(c.strategy)},
      {"order", order_string(c.order)},
      {"temperatures", c.temperatures},
      {"seeds", c.seeds},
      {"pair", pair_kind_name(c.pair)},
      {"include_fine_tuning", c.include_fine_tuning},
      {"out", c.out},
      {"threads", c.threads},
  };
}

ExperimentConfig config_from_json(const json& j, ExperimentConfig c) {
  try {
    check_keys(j, "config",
               {"seed", "corpus", "trunk", "schedule", "optimizer", "distill", "augment", "initial", "trace_all_tasks",
                "strategy", "order", "temperatures", "seeds", "pair", "include_fine_tuning", "out", "threads"});
    read(j, "seed", c.seed);
    if (j.contains("corpus")) {
      const json& cj = j.at("corpus");
      check_keys(cj, "corpus", {"seed", "train", "test", "height", "width", "path", "imbalance"});
      read(cj, "seed", c.corpus.seed);
      read(cj, "train", c.corpus.sizes.train);
      read(cj, "test", c.corpus.sizes.test);
      read(cj, "height", c.corpus.height);
      read(cj, "width", c.corpus.width);
      read(cj, "path", c.corpus.path);
      read(cj, "imbalance", c.corpus.sizes.imbalance);
    }
    if (j.contains("trunk")) {
      const json& tj = j.at("trunk");
      check_keys(tj, "trunk",
                 {"in_channels", "in_height", "in_width", "stem_kernel", "stem_stride", "stem_channels",
                  "stage_blocks", "stage_channels"});
      TrunkConfig& t = c.train.trunk;
      read(tj, "in_channels", t.in_channels);
      read(tj, "in_height", t.in_height);
      read(tj, "in_width", t.in_width);
      read(tj, "stem_kernel", t.stem_kernel);
      read(tj, "stem_stride", t.stem_stride);
      read(tj, "stem_channels", t.stem_channels);
      read(tj, "stage_blocks", t.stage_blocks);
      read(tj, "stage_channels", t.stage_channels);
    }
    if (j.contains("schedule")) {
      const json& sj = j.at("schedule");
      if (sj.is_string()) {
        const std::string preset = sj.get<std::string>();
        if (preset == "paper") {
          c.train.schedule = make_schedule(SchedulePreset::Paper);
        } else if (preset == "desk") {
          c.train.schedule = make_schedule(SchedulePreset::Desk);
        } else {
          throw ConfigError("schedule: unknown preset '" + preset + "' (expected paper or desk)");
        }
      } else {
        if (!sj.is_array() || sj.empty()) throw ConfigError("schedule: expected a preset name or a list of phases");
        c.train.schedule.phases.clear();
        for (const json& pj : sj) {
          check_keys(pj, "schedule phase", {"name", "lr", "epochs"});
          Phase p;
          p.name = pj.value("name", "phase" + std::to_string(c.train.schedule.phases.size() + 1));
          p.lr = pj.at("lr").get<double>();
          p.epochs = pj.at("epochs").get<std::size_t>();
          c.train.schedule.phases.push_back(p);
        }
      }
    }
    if (j.contains("optimizer")) {
      const json& oj = j.at("optimizer");
      check_keys(oj, "optimizer", {"momentum", "weight_decay", "batch_size"});
      read(oj, "momentum", c.train.momentum);
      read(oj, "weight_decay", c.train.weight_decay);
      read(oj, "batch_size", c.train.batch_size);
    }
    if (j.contains("distill")) {
      const json& dj = j.at("distill");
      check_keys(dj, "distill", {"temperature", "lambda"});
      read(dj, "temperature", c.train.distill.temperature);
      read(dj, "lambda", c.train.distill.lambda);
    }
    read(j, "augment", c.train.augment);
    if (j.contains("initial")) {
      const std::string mode = j.at("initial").get<std::string>();
      if (mode == "best") {
        c.train.initial_mode = InitialMode::BestEpoch;
      } else if (mode == "last") {
        c.train.initial_mode = InitialMode::LastEpoch;
      } else {
        throw ConfigError("initial: expected best or last, got '" + mode + "'");
      }
    }
    read(j, "trace_all_tasks", c.train.trace_all_tasks);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("order")) c.order = parse_order(j.at("order").get<std::string>());
    read(j, "temperatures", c.temperatures);
    read(j, "seeds", c.seeds);
    if (j.contains("pair")) c.pair = parse_pair_kind(j.at("pair").get<std::string>());
    read(j, "include_fine_tuning", c.include_fine_tuning);
    read(j, "out", c.out);
    read(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file_text(path);
  } catch (const DataError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("config") && j.contains("artifacts")) j = j.at("config");
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  json j = config_to_json(config);
  // Where results go and how many workers produce them does not change them.
  j.erase("out");
  j.erase("threads");
  return fnv1a64(j.dump());
}

DatasetSplit materialize_corpus(const CorpusConfig& corpus) {
  if (!corpus.path.empty()) return load_corpus(corpus.path);
  return generate_corpus(corpus.seed, corpus.sizes, corpus.height, corpus.width);
}

}  // namespace lwf
