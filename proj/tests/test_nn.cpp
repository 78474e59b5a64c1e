#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lwf/errors.hpp"
#include "lwf/nn.hpp"
#include "support/gradcheck.hpp"

using namespace lwf;
using lwf::testing::random_tensor;

namespace {

std::vector<Tensor> snapshot(const std::vector<Tensor*>& params) {
  std::vector<Tensor> out;
  for (const Tensor* p : params) out.push_back(*p);
  return out;
}

bool bitwise_equal(const std::vector<Tensor*>& params, const std::vector<Tensor>& saved) {
  if (params.size() != saved.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_values(saved[i])) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("nn_blocks") {

TEST_CASE("kaiming init") {
  CHECK(kaiming_std(512) == 0.0625);
  Rng a(1), b(1);
  const Tensor w1 = kaiming_init(64, 10, a), w2 = kaiming_init(64, 10, b);
  CHECK(w1.same_values(w2));
  CHECK(w1.shape() == Shape{64, 10});
  Rng bad(2);
  CHECK_THROWS_AS(kaiming_init(0, 3, bad), ContractError);

  Rng rng(7);
  const Tensor big = kaiming_init(1000, 1000, rng);
  double s = 0, ss = 0;
  for (double v : big.data()) s += v;
  const double n = static_cast<double>(big.numel());
  const double mu = s / n;
  for (double v : big.data()) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / (n - 1));
  const double target = kaiming_std(1000);
  CHECK(std::abs(sd - target) <= 0.01 * target);
  CHECK(std::abs(mu) <= 3 * target / std::sqrt(n));
}

TEST_CASE("desk trunk shapes and parameter count") {
  Rng rng(3);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  CHECK(net.heads().empty());
  CHECK(net.feature_dim() == 16);
  Graph g;
  const Tensor batch = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  CHECK(net.forward_features(g, batch, Mode::Eval).shape() == Shape{2, 16});

  // stem conv 3->8 3x3 + bn; block 8->8 (two 3x3 convs + bn);
  // block 8->16 (two 3x3 convs + bn, 1x1 projection + bn). No conv biases.
  const std::size_t stem = 8 * 3 * 9 + 2 * 8;
  const std::size_t block1 = 2 * (8 * 8 * 9 + 2 * 8);
  const std::size_t block2 = 16 * 8 * 9 + 2 * 16 + 16 * 16 * 9 + 2 * 16 + 16 * 8 + 2 * 16;
  CHECK(net.trunk().parameter_count() == stem + block1 + block2);
  CHECK(net.trunk().parameter_count() == 5096);

  BatchNormParams fresh(4);
  for (double v : fresh.gamma.data()) CHECK(v == 1.0);
  for (double v : fresh.beta.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(net.forward_features(g, random_tensor({2, 3, 16, 16}, rng), Mode::Eval), ShapeError);
}

TEST_CASE("34-layer trunk geometry") {
  const TrunkConfig paper = TrunkConfig::paper();
  CHECK(paper.stage_blocks == std::vector<std::size_t>{3, 4, 6, 3});
  CHECK(paper.stage_channels == std::vector<std::size_t>{64, 128, 256, 512});
  CHECK(paper.feature_dim() == 512);
  CHECK(paper.stem_kernel == 7);
  CHECK(paper.stem_stride == 2);
  CHECK(paper.in_height == 223);
  CHECK(conv_output_size(paper.in_height, paper.stem_kernel, paper.stem_stride, 3) == 112);
  CHECK_NOTHROW(paper.validate());
  Rng rng(1);
  Trunk trunk(paper, rng);
  CHECK(trunk.block_count() == 16);
}

TEST_CASE("invalid trunk configs") {
  Rng rng(1);
  TrunkConfig c = TrunkConfig::desk();
  c.stage_blocks = {};
  c.stage_channels = {};
  CHECK_THROWS_AS(build_micro_resnet(c, rng), ConfigError);
  c = TrunkConfig::desk();
  c.stage_blocks = {1, 1, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrunkConfig::desk();
  c.in_height = 30;
  c.stage_blocks = {1, 1, 1, 1};
  c.stage_channels = {8, 8, 8, 8};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("residual block with zero convs is relu") {
  Rng rng(5);
  ResidualBlock block(8, 8, false, rng);
  CHECK_FALSE(block.projection.has_value());
  for (double& v : block.conv1.weight.data()) v = 0.0;
  for (double& v : block.conv2.weight.data()) v = 0.0;
  const Tensor x = random_tensor({2, 8, 6, 6}, rng);
  for (Mode mode : {Mode::Eval, Mode::Train}) {
    Graph g;
    const Tensor y = block.forward(g, g.constant(x), mode).value();
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == std::max(0.0, x[i]));
  }
}

TEST_CASE("append_head and the head-growth rule") {
  Rng rng(9);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  Head& first = net.append_head(1, 3, rng);
  CHECK(first.role == HeadRole::New);
  CHECK(first.weight.shape() == Shape{16, 3});
  for (double v : net.head(1).bias.data()) CHECK(v == 0.0);

  const auto before = snapshot(net.parameters());
  const std::size_t count = net.parameter_count();
  net.append_head(2, 2, rng);
  CHECK(net.parameter_count() - count == 16 * 2 + 2);
  std::vector<Tensor*> old_params = net.parameters();
  old_params.resize(before.size());
  CHECK(bitwise_equal(old_params, before));
  CHECK(net.head(1).role == HeadRole::Old);
  CHECK(net.head(2).role == HeadRole::New);
  CHECK_THROWS_AS(net.append_head(3, 1, rng), ContractError);
  CHECK_THROWS_AS(net.append_head(2, 3, rng), ContractError);
  CHECK_THROWS_AS(net.head(4), ContractError);
}

TEST_CASE("combined head matrix is D x (m + n) for D = 512") {
  TrunkConfig c;
  c.in_height = c.in_width = 8;
  c.stem_channels = 4;
  c.stage_blocks = {1};
  c.stage_channels = {512};
  Rng rng(2);
  MultiHeadNet net = build_micro_resnet(c, rng);
  net.append_head(1, 3, rng);
  const std::size_t before = net.parameter_count();
  net.append_head(2, 2, rng);
  CHECK(net.parameter_count() - before == 512 * 2 + 2);
  std::size_t cols = 0;
  for (const Head& h : net.heads()) {
    CHECK(h.weight.dim(0) == 512);
    cols += h.weight.dim(1);
  }
  CHECK(cols == 5);
  CHECK(net.head_parameter_count() == 512 * 5 + 5);
}

TEST_CASE("forward_all_heads: shapes, one trunk pass, per-head softmax") {
  Rng rng(4);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  const std::vector<std::size_t> widths{3, 2, 3, 4};
  for (std::size_t i = 0; i < widths.size(); ++i) net.append_head(static_cast<int>(i + 1), widths[i], rng);
  const Tensor batch = random_tensor({4, 3, 32, 32}, rng, 0, 1);
  net.reset_trunk_evaluations();
  Graph g;
  const auto logits = net.forward_all_heads(g, batch, Mode::Eval);
  CHECK(net.trunk_evaluations() == 1);
  REQUIRE(logits.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(logits[i].shape() == Shape{4, widths[i]});

  const auto p1 = predict_probabilities(net, batch);
  const auto p2 = predict_probabilities(net, batch);
  for (std::size_t h = 0; h < 4; ++h) {
    CHECK(p1[h].same_values(p2[h]));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < widths[h]; ++j) s += p1[h][r * widths[h] + j];
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("parameter partition is disjoint and exhaustive after every append") {
  Rng rng(6);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  CHECK_THROWS_AS(partition_params(net), ContractError);
  for (int t = 1; t <= 4; ++t) {
    Head& h = net.append_head(t, static_cast<std::size_t>(t + 1), rng);
    const ParamPartition part = partition_params(net);
    CHECK(part.new_heads == std::vector<Tensor*>{&h.weight, &h.bias});
    std::set<Tensor*> seen;
    for (auto* group : {&part.shared, &part.old_heads, &part.new_heads})
      for (Tensor* p : *group) CHECK(seen.insert(p).second);
    const auto all = net.parameters();
    CHECK(seen == std::set<Tensor*>(all.begin(), all.end()));
    CHECK(part.count(part.shared) + part.count(part.old_heads) + part.count(part.new_heads) == net.parameter_count());
    CHECK(part.count(part.shared) == net.trunk().parameter_count());
  }
}

TEST_CASE("set_trainable toggles requires_grad and clears gradients") {
  Rng rng(8);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  net.append_head(1, 3, rng);
  auto params = net.parameters();
  set_trainable(params, true);
  for (Tensor* p : params) CHECK(p->requires_grad());
  Graph g;
  const auto logits = net.forward_all_heads(g, random_tensor({2, 3, 32, 32}, rng, 0, 1), Mode::Train);
  g.backward(sum(logits[0]));
  CHECK(params.front()->has_grad());
  set_trainable(params, false);
  for (Tensor* p : params) {
    CHECK_FALSE(p->requires_grad());
    CHECK_FALSE(p->has_grad());
  }
}

TEST_CASE("copies are deep") {
  Rng rng(10);
  MultiHeadNet a = build_micro_resnet(TrunkConfig::desk(), rng);
  a.append_head(1, 3, rng);
  MultiHeadNet b = a;
  b.parameters().front()->data()[0] += 1.0;
  b.heads()[0].bias[0] = 5.0;
  CHECK(a.parameters().front()->data()[0] != b.parameters().front()->data()[0]);
  CHECK(a.head(1).bias[0] == 0.0);
}

}  // TEST_SUITE
