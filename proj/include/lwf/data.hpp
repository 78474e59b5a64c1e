#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lwf/rng.hpp"
#include "lwf/tensor.hpp"

namespace lwf {

inline constexpr int kTaskCount = 4;

// Task ids: 1 damage level, 2 spalling, 3 component, 4 damage type.
struct TaskSpec {
  int id = 0;
  std::string name;
  std::vector<std::string> class_names;
  bool rotation_allowed = true;

  std::size_t class_count() const { return class_names.size(); }
};

const std::vector<TaskSpec>& task_catalog();
// Throws ConfigError for ids outside 1..4.
const TaskSpec& task_spec(int task_id);

enum DamageLevel : std::uint8_t { kUndamaged = 0, kMinor = 1, kHeavy = 2 };
enum Spalling : std::uint8_t { kSpallingYes = 0, kSpallingNo = 1 };
enum Component : std::uint8_t { kColumn = 0, kWall = 1, kBeam = 2 };
enum DamageType : std::uint8_t { kShear = 0, kFlexural = 1, kAsr = 2, kCorrosion = 3 };

// Every image carries one label per task (index task_id - 1).
using AttributeLabels = std::array<std::uint8_t, kTaskCount>;

struct LabeledSample {
  Tensor image;  // 3×H×W in [0,1]
  AttributeLabels labels{};

  std::size_t label(int task_id) const { return labels.at(static_cast<std::size_t>(task_id - 1)); }
};

struct CrackStroke {
  double cx, cy, angle_deg, length, width;
};

struct Blob {
  double cx, cy, radius, phase;
};

// The ground-truth drawing parameters behind one sample.
struct SampleRecipe {
  AttributeLabels labels{};
  double member_center = 0.0;     // column x / beam y
  double member_half_width = 0.0;
  std::vector<CrackStroke> cracks;
  std::vector<Blob> spall_blobs;
  std::vector<Blob> rust_stains;
  double noise_std = 0.0;
};

SampleRecipe draw_recipe(const AttributeLabels& labels, std::size_t height, std::size_t width, Rng& rng);
Tensor render_recipe(const SampleRecipe& recipe, std::size_t height, std::size_t width, Rng& rng);

struct TaskData {
  int task_id = 0;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

struct CorpusSizes {
  std::array<std::size_t, kTaskCount> train{512, 512, 512, 512};
  std::array<std::size_t, kTaskCount> test{128, 128, 128, 128};
  // Frequency of a task's most common class over its rarest. 1 = balanced.
  double imbalance = 1.0;

  static CorpusSizes desk() { return {}; }
  // Training/test image counts per task of the original dataset.
  static CorpusSizes paper() { return {{3776, 4864, 3968, 1728}, {663, 820, 693, 328}}; }
  static CorpusSizes uniform(std::size_t train, std::size_t test);
};

struct DatasetSplit {
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<TaskData> tasks;

  bool has_task(int task_id) const;
  const TaskData& task(int task_id) const;
};

// Attribute labels of the index-th sample of a task's split. With imbalance 1
// the task's own attribute cycles through its classes so every split is
// class-balanced; otherwise class c has weight imbalance^(-c/(k-1)).
AttributeLabels sample_labels(int task_id, std::size_t index, Rng& rng, double imbalance = 1.0);

DatasetSplit generate_corpus(std::uint64_t seed, const CorpusSizes& sizes, std::size_t height = 32,
                             std::size_t width = 32);

struct AugmentConfig {
  bool horizontal_flip = true;
  bool vertical_flip = true;
  bool rotation = true;
  double max_rotation_deg = 30.0;
  double color_jitter = 0.1;

  // Rotation is disabled when the task forbids it.
  static AugmentConfig for_task(const TaskSpec& task);
  static AugmentConfig none();
};

struct AugmentStats {
  std::size_t calls = 0;
  std::size_t horizontal_flips = 0;
  std::size_t vertical_flips = 0;
  std::size_t rotations = 0;
};

Tensor flip_horizontal(const Tensor& image);
Tensor flip_vertical(const Tensor& image);
// Bilinear rotation about the image centre, edge pixels replicated.
Tensor rotate(const Tensor& image, double degrees);

LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, Rng& rng,
                      AugmentStats* stats = nullptr);

struct Batch {
  Tensor images;                     // B×3×H×W
  Tensor onehot;                     // B×k
  std::vector<std::size_t> labels;   // class index per row
  std::vector<std::size_t> indices;  // positions in the source split
};

// One epoch of shuffled batches over `samples`. The order depends only on
// epoch_seed; the final short batch is kept.
std::vector<Batch> batch_iter(const std::vector<LabeledSample>& samples, int task_id,
                              std::size_t batch_size, std::uint64_t epoch_seed,
                              const AugmentConfig* augment_config = nullptr,
                              AugmentStats* stats = nullptr);

// Stacks samples[first, first+count) into one B×3×H×W batch (no shuffling).
Batch make_batch(const std::vector<LabeledSample>& samples, int task_id, std::size_t first, std::size_t count);

// Corpus file: see docs/formats.md ("CLDS").
void save_corpus(const DatasetSplit& corpus, const std::filesystem::path& path);
DatasetSplit load_corpus(const std::filesystem::path& path);

}  // namespace lwf
