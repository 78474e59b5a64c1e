#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lwf/data.hpp"
#include "lwf/experiments.hpp"
#include "lwf/strategies.hpp"

namespace lwf {

struct CorpusConfig {
  std::uint64_t seed = 7;
  CorpusSizes sizes = CorpusSizes::desk();
  std::size_t height = 32;
  std::size_t width = 32;
  std::string path;  // load this CLDS file instead of generating
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  CorpusConfig corpus;
  TrainSettings train;
  StrategyKind strategy = StrategyKind::Cldrm;
  TaskSequence order{1, 2, 3, 4};
  std::vector<double> temperatures = default_temperatures();
  std::vector<std::uint64_t> seeds{7, 11, 13};
  PairKind pair = PairKind::Similar;
  bool include_fine_tuning = true;  // order sweep also runs fine-tuning
  std::string out = "runs";
  unsigned threads = 0;  // 0 = LWF_THREADS or hardware count

  // Fail-fast check of every module precondition; throws ConfigError.
  void validate() const;
  // Paper epochs (40 + 60) and per-task image counts.
  void apply_paper_scale();
};

nlohmann::json config_to_json(const ExperimentConfig& config);
// Overlays the keys present in `j` onto `base`. Unknown keys are errors.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
// Accepts a config document or a run manifest (uses its "config" member).
// A missing or unreadable file is a ConfigError naming the path.
ExperimentConfig load_config(const std::filesystem::path& path);
// Ignores `out` and `threads`.
std::uint64_t config_hash(const ExperimentConfig& config);

DatasetSplit materialize_corpus(const CorpusConfig& corpus);

}  // namespace lwf
