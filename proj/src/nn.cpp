#include "lwf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lwf/errors.hpp"

namespace lwf {

void TrunkConfig::validate() const {
  if (stage_blocks.empty() || stage_channels.empty()) {
    throw ConfigError("trunk config: stage list is empty");
  }
  if (stage_blocks.size() != stage_channels.size()) {
    throw ConfigError("trunk config: stage_blocks and stage_channels differ in length");
  }
  if (in_channels == 0 || in_height == 0 || in_width == 0 || stem_kernel == 0 ||
      stem_stride == 0 || stem_channels == 0) {
    throw ConfigError("trunk config: dimensions must be positive");
  }
  if (stem_kernel % 2 == 0) {
    throw ConfigError("trunk config: stem kernel must be odd");
  }
  for (std::size_t i = 0; i < stage_blocks.size(); ++i) {
    if (stage_blocks[i] == 0 || stage_channels[i] == 0) {
      throw ConfigError("trunk config: stage " + std::to_string(i) + " has zero blocks or channels");
    }
  }
  std::size_t h = 0, w = 0;
  try {
    h = conv_output_size(in_height, stem_kernel, stem_stride, stem_kernel / 2);
    w = conv_output_size(in_width, stem_kernel, stem_stride, stem_kernel / 2);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("trunk config: stem geometry: ") + e.what());
  }
  for (std::size_t s = 1; s < stage_blocks.size(); ++s) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("trunk config: stage " + std::to_string(s) + " cannot halve a " +
                        std::to_string(h) + "×" + std::to_string(w) + " map");
    }
    h /= 2;
    w /= 2;
  }
}

TrunkConfig TrunkConfig::desk() { return TrunkConfig{}; }

TrunkConfig TrunkConfig::paper() {
  TrunkConfig c;
  c.in_channels = 3;
  c.in_height = 223;
  c.in_width = 223;
  c.stem_kernel = 7;
  c.stem_stride = 2;
  c.stem_channels = 64;
  c.stage_blocks = {3, 4, 6, 3};
  c.stage_channels = {64, 128, 256, 512};
  return c;
}

double kaiming_std(std::size_t fan_in) {
  if (fan_in == 0) {
    throw ContractError("kaiming_init: fan_in must be positive");
  }
  return std::sqrt(2.0 / static_cast<double>(fan_in));
}

Tensor kaiming_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double sd = kaiming_std(fan_in);
  if (fan_out == 0) {
    throw ContractError("kaiming_init: fan_out must be positive");
  }
  Tensor out({fan_in, fan_out});
  for (double& v : out.data()) v = sd * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------

ConvLayer::ConvLayer(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
                     Rng& rng)
    : stride(stride_), pad(kernel / 2) {
  const std::size_t fan_in = in * kernel * kernel;
  weight = kaiming_init(fan_in, out, rng);
  // kaiming_init yields fan_in×out; lay it out as out×in×k×k.
  Tensor w({out, in, kernel, kernel});
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t f = 0; f < fan_in; ++f) w[o * fan_in + f] = weight[f * out + o];
  weight = std::move(w);
  weight.set_requires_grad(true);
}

Var ConvLayer::forward(Graph& g, Var x) { return conv2d(x, g.parameter(weight), stride, pad); }

namespace {
Var bn_forward(Graph& g, Var x, BatchNormParams& bn, Mode mode) {
  return batch_norm(x, g.parameter(bn.gamma), g.parameter(bn.beta), bn,
                    mode == Mode::Train ? BnMode::Train : BnMode::Eval);
}
}  // namespace

ResidualBlock::ResidualBlock(std::size_t in, std::size_t out, bool downsample_, Rng& rng)
    : downsample(downsample_),
      conv1(in, out, 3, 1, rng),
      bn1(out),
      conv2(out, out, 3, 1, rng),
      bn2(out) {
  if (in != out) {
    projection.emplace(in, out, 1, 1, rng);
    projection_bn.emplace(out);
  }
}

Var ResidualBlock::forward(Graph& g, Var x, Mode mode) {
  if (downsample) {
    x = max_pool2x2(x);
  }
  Var h = relu(bn_forward(g, conv1.forward(g, x), bn1, mode));
  h = bn_forward(g, conv2.forward(g, h), bn2, mode);
  Var shortcut = x;
  if (projection) {
    shortcut = bn_forward(g, projection->forward(g, x), *projection_bn, mode);
  }
  return relu(add(h, shortcut));
}

// ---------------------------------------------------------------------------

Trunk::Trunk(TrunkConfig config, Rng& rng)
    : config_(std::move(config)),
      stem_(),
      stem_bn_() {
  config_.validate();
  stem_ = ConvLayer(config_.in_channels, config_.stem_channels, config_.stem_kernel,
                    config_.stem_stride, rng);
  stem_bn_ = BatchNormParams(config_.stem_channels);
  std::size_t in = config_.stem_channels;
  for (std::size_t s = 0; s < config_.stage_blocks.size(); ++s) {
    const std::size_t out = config_.stage_channels[s];
    for (std::size_t b = 0; b < config_.stage_blocks[s]; ++b) {
      blocks_.emplace_back(in, out, s > 0 && b == 0, rng);
      in = out;
    }
  }
}

Var Trunk::forward(Graph& g, const Tensor& batch, Mode mode) {
  const Shape expected{config_.in_channels, config_.in_height, config_.in_width};
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expected) {
    throw ShapeError("trunk: batch shape " + shape_str(batch.shape()) + " does not match N×" +
                     shape_str(expected));
  }
  Var x = g.constant(batch);
  x = relu(bn_forward(g, stem_.forward(g, x), stem_bn_, mode));
  for (ResidualBlock& block : blocks_) {
    x = block.forward(g, x, mode);
  }
  return global_avg_pool(x);
}

std::vector<Tensor*> Trunk::parameters() {
  std::vector<Tensor*> out{&stem_.weight, &stem_bn_.gamma, &stem_bn_.beta};
  for (ResidualBlock& b : blocks_) {
    out.insert(out.end(), {&b.conv1.weight, &b.bn1.gamma, &b.bn1.beta, &b.conv2.weight,
                           &b.bn2.gamma, &b.bn2.beta});
    if (b.projection) {
      out.insert(out.end(), {&b.projection->weight, &b.projection_bn->gamma, &b.projection_bn->beta});
    }
  }
  return out;
}

std::vector<const Tensor*> Trunk::parameters() const {
  auto mut = const_cast<Trunk*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Tensor*> Trunk::buffers() {
  std::vector<Tensor*> out{&stem_bn_.running_mean, &stem_bn_.running_var};
  for (ResidualBlock& b : blocks_) {
    out.insert(out.end(), {&b.bn1.running_mean, &b.bn1.running_var, &b.bn2.running_mean,
                           &b.bn2.running_var});
    if (b.projection_bn) {
      out.insert(out.end(), {&b.projection_bn->running_mean, &b.projection_bn->running_var});
    }
  }
  return out;
}

std::vector<const Tensor*> Trunk::buffers() const {
  auto mut = const_cast<Trunk*>(this)->buffers();
  return {mut.begin(), mut.end()};
}

std::size_t Trunk::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->numel();
  return n;
}

// ---------------------------------------------------------------------------

std::size_t ParamPartition::count(const std::vector<Tensor*>& group) const {
  std::size_t n = 0;
  for (const Tensor* p : group) n += p->numel();
  return n;
}

bool MultiHeadNet::has_head(int task_id) const {
  return std::any_of(heads_.begin(), heads_.end(), [&](const Head& h) { return h.task_id == task_id; });
}

std::size_t MultiHeadNet::head_index(int task_id) const {
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    if (heads_[i].task_id == task_id) return i;
  }
  throw ContractError("no head for task " + std::to_string(task_id));
}

Head& MultiHeadNet::append_head(int task_id, std::size_t class_count, Rng& rng) {
  if (class_count < 2) {
    throw ContractError("append_head: class_count must be at least 2");
  }
  if (has_head(task_id)) {
    throw ContractError("append_head: task " + std::to_string(task_id) + " already has a head");
  }
  for (Head& h : heads_) h.role = HeadRole::Old;
  Head head;
  head.task_id = task_id;
  head.class_count = class_count;
  head.weight = kaiming_init(feature_dim(), class_count, rng);
  head.bias = Tensor({class_count}, 0.0);
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  head.role = HeadRole::New;
  heads_.push_back(std::move(head));
  return heads_.back();
}

void MultiHeadNet::remove_head(int task_id) { heads_.erase(heads_.begin() + head_index(task_id)); }

Var MultiHeadNet::forward_features(Graph& g, const Tensor& batch, Mode mode) {
  ++trunk_evals_;
  return trunk_.forward(g, batch, mode);
}

Var MultiHeadNet::head_logits(Graph& g, Var features, std::size_t index) {
  Head& h = heads_.at(index);
  return add_row_bias(matmul(features, g.parameter(h.weight)), g.parameter(h.bias));
}

std::vector<Var> MultiHeadNet::forward_all_heads(Graph& g, const Tensor& batch, Mode mode) {
  Var features = forward_features(g, batch, mode);
  std::vector<Var> logits;
  logits.reserve(heads_.size());
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    logits.push_back(head_logits(g, features, i));
  }
  return logits;
}

std::vector<Tensor*> MultiHeadNet::parameters() {
  std::vector<Tensor*> out = trunk_.parameters();
  for (Head& h : heads_) {
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

std::size_t MultiHeadNet::head_parameter_count() const {
  std::size_t n = 0;
  for (const Head& h : heads_) n += h.parameter_count();
  return n;
}

std::size_t MultiHeadNet::parameter_count() const {
  return trunk_.parameter_count() + head_parameter_count();
}

MultiHeadNet build_micro_resnet(const TrunkConfig& config, Rng& rng) {
  return MultiHeadNet(Trunk(config, rng));
}

ParamPartition partition_params(MultiHeadNet& net) {
  if (net.heads().empty()) {
    throw ContractError("partition_params: network has no heads");
  }
  ParamPartition part;
  part.shared = net.trunk().parameters();
  for (Head& h : net.heads()) {
    auto& group = h.role == HeadRole::New ? part.new_heads : part.old_heads;
    group.push_back(&h.weight);
    group.push_back(&h.bias);
  }
  return part;
}

void set_trainable(const std::vector<Tensor*>& params, bool trainable) {
  for (Tensor* p : params) p->set_requires_grad(trainable);
}

std::vector<Tensor> predict_probabilities(MultiHeadNet& net, const Tensor& batch, Mode mode) {
  Graph g;
  std::vector<Tensor> out;
  for (Var logits : net.forward_all_heads(g, batch, mode)) {
    out.push_back(softmax_rows(logits.value()));
  }
  return out;
}

}  // namespace lwf
