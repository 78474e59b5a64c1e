#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "lwf/rng.hpp"
#include "lwf/tensor.hpp"

namespace lwf {

// Geometry of the shared trunk: stem conv -> residual stages -> global average pool.
struct TrunkConfig {
  std::size_t in_channels = 3;
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::size_t stem_channels = 8;
  std::vector<std::size_t> stage_blocks{1, 1};
  std::vector<std::size_t> stage_channels{8, 16};

  std::size_t feature_dim() const { return stage_channels.back(); }
  // Throws ConfigError on an unusable geometry.
  void validate() const;

  static TrunkConfig desk();
  // 34-layer template: 7x7/2 stem with 64 channels, stages [3,4,6,3] of
  // [64,128,256,512] on a 223×223 input so every stride divides exactly.
  static TrunkConfig paper();

  friend bool operator==(const TrunkConfig&, const TrunkConfig&) = default;
};

// Samples a fan_in×fan_out matrix with i.i.d. N(0, 2/fan_in) entries.
Tensor kaiming_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);
double kaiming_std(std::size_t fan_in);

enum class Mode { Train, Eval };

struct ConvLayer {
  Tensor weight;  // out×in×k×k, no bias (a batch norm always follows)
  std::size_t stride = 1;
  std::size_t pad = 0;

  ConvLayer() = default;
  ConvLayer(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng);
  Var forward(Graph& g, Var x);
};

struct ResidualBlock {
  // Blocks that open a downsampling stage max-pool their input 2×2 first;
  // both the residual path and the shortcut then run at the reduced size.
  bool downsample = false;
  ConvLayer conv1;
  BatchNormParams bn1;
  ConvLayer conv2;
  BatchNormParams bn2;
  // 1×1 projection (+ batch norm) when the block changes channels.
  std::optional<ConvLayer> projection;
  std::optional<BatchNormParams> projection_bn;

  ResidualBlock(std::size_t in, std::size_t out, bool downsample, Rng& rng);
  // relu(F(x) + shortcut(x))
  Var forward(Graph& g, Var x, Mode mode);
};

enum class HeadRole { Old, New };

struct Head {
  int task_id = 0;
  std::size_t class_count = 0;
  Tensor weight;  // D×k
  Tensor bias;    // k
  HeadRole role = HeadRole::New;

  std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
};

class Trunk {
 public:
  explicit Trunk(TrunkConfig config, Rng& rng);

  const TrunkConfig& config() const { return config_; }
  // N×C×H×W -> N×D
  Var forward(Graph& g, const Tensor& batch, Mode mode);

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  // Running means/variances in a fixed order.
  std::vector<Tensor*> buffers();
  std::vector<const Tensor*> buffers() const;
  std::size_t parameter_count() const;
  std::size_t block_count() const { return blocks_.size(); }
  ResidualBlock& block(std::size_t i) { return blocks_.at(i); }

 private:
  TrunkConfig config_;
  ConvLayer stem_;
  BatchNormParams stem_bn_;
  std::vector<ResidualBlock> blocks_;
};

// Disjoint views over the trainable parameters of a MultiHeadNet.
struct ParamPartition {
  std::vector<Tensor*> shared;
  std::vector<Tensor*> old_heads;
  std::vector<Tensor*> new_heads;

  std::size_t count(const std::vector<Tensor*>& group) const;
};

// Shared trunk plus ordered task heads. Copying yields an independent deep copy.
class MultiHeadNet {
 public:
  explicit MultiHeadNet(Trunk trunk) : trunk_(std::move(trunk)) {}

  Trunk& trunk() { return trunk_; }
  const Trunk& trunk() const { return trunk_; }
  const std::vector<Head>& heads() const { return heads_; }
  std::vector<Head>& heads() { return heads_; }
  std::size_t feature_dim() const { return trunk_.config().feature_dim(); }

  bool has_head(int task_id) const;
  std::size_t head_index(int task_id) const;
  const Head& head(int task_id) const { return heads_[head_index(task_id)]; }

  // Appends a Kaiming-initialised head tagged New; existing heads become Old.
  Head& append_head(int task_id, std::size_t class_count, Rng& rng);
  void remove_head(int task_id);

  // One trunk pass feeding every head. Returns B×k_i logits per head in head order.
  std::vector<Var> forward_all_heads(Graph& g, const Tensor& batch, Mode mode);
  Var forward_features(Graph& g, const Tensor& batch, Mode mode);
  Var head_logits(Graph& g, Var features, std::size_t head_index);

  std::vector<Tensor*> parameters();
  std::vector<Tensor*> buffers() { return trunk_.buffers(); }
  std::size_t parameter_count() const;
  std::size_t head_parameter_count() const;

  std::size_t trunk_evaluations() const { return trunk_evals_; }
  void reset_trunk_evaluations() { trunk_evals_ = 0; }

 private:
  Trunk trunk_;
  std::vector<Head> heads_;
  std::size_t trunk_evals_ = 0;
};

MultiHeadNet build_micro_resnet(const TrunkConfig& config, Rng& rng);

ParamPartition partition_params(MultiHeadNet& net);

// Sets requires_grad on a group of parameters (clearing gradients when disabling).
void set_trainable(const std::vector<Tensor*>& params, bool trainable);

// Softmax probabilities per head for a batch, evaluated without gradients.
std::vector<Tensor> predict_probabilities(MultiHeadNet& net, const Tensor& batch, Mode mode = Mode::Eval);

}  // namespace lwf
