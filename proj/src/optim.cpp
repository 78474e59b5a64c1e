#include "lwf/optim.hpp"

#include <algorithm>
#include <cmath>

#include "lwf/errors.hpp"

namespace lwf {

namespace {

void check_alignment(std::span<Tensor* const> params, const FreezeMask& mask,
                     std::vector<std::vector<double>>& buffers, const char* who) {
  if (mask.frozen.size() != params.size()) {
    throw ContractError(std::string(who) + ": freeze mask has " + std::to_string(mask.frozen.size()) +
                        " entries for " + std::to_string(params.size()) + " parameters");
  }
  if (buffers.empty()) {
    buffers.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) buffers[i].assign(params[i]->numel(), 0.0);
    return;
  }
  if (buffers.size() != params.size()) {
    throw ContractError(std::string(who) + ": optimizer state tracks a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].size() != params[i]->numel()) {
      throw ContractError(std::string(who) + ": state shape mismatch for parameter " + std::to_string(i));
    }
  }
}

}  // namespace

FreezeMask FreezeMask::from_group(std::span<Tensor* const> params, std::span<Tensor* const> frozen_group) {
  FreezeMask mask = none(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    mask.frozen[i] = std::find(frozen_group.begin(), frozen_group.end(), params[i]) != frozen_group.end();
  }
  return mask;
}

void SgdConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("sgd: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("sgd: weight_decay must be nonnegative");
}

void sgd_momentum_step(std::span<Tensor* const> params, SgdState& state, const FreezeMask& mask) {
  state.config.validate();
  check_alignment(params, mask, state.velocity, "sgd_momentum_step");
  const double lr = state.config.lr, mu = state.config.momentum, wd = state.config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask.frozen[i]) continue;
    Tensor& p = *params[i];
    auto data = p.data();
    auto grad = p.grad();
    const bool has_grad = !grad.empty();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = (has_grad ? grad[j] : 0.0) + wd * data[j];
      v[j] = mu * v[j] + g;
      data[j] -= lr * v[j];
    }
  }
}

void adam_step(std::span<Tensor* const> params, AdamState& state, const FreezeMask& mask) {
  const AdamConfig& c = state.config;
  if (!(c.lr > 0.0)) throw ConfigError("adam: lr must be positive");
  check_alignment(params, mask, state.m, "adam_step");
  check_alignment(params, mask, state.v, "adam_step");
  if (state.steps.empty()) state.steps.assign(params.size(), 0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask.frozen[i]) continue;
    Tensor& p = *params[i];
    auto data = p.data();
    auto grad = p.grad();
    const bool has_grad = !grad.empty();
    const std::size_t t = ++state.steps[i];
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = (has_grad ? grad[j] : 0.0) + c.weight_decay * data[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

std::size_t Schedule::total_epochs() const {
  std::size_t n = 0;
  for (const Phase& p : phases) n += p.epochs;
  return n;
}

void Schedule::validate() const {
  if (phases.empty()) throw ConfigError("schedule has no phases");
  for (const Phase& p : phases) {
    if (p.epochs == 0) throw ConfigError("schedule phase '" + p.name + "' has zero epochs");
    if (!(p.lr > 0.0)) throw ConfigError("schedule phase '" + p.name + "' needs a positive lr");
  }
}

Schedule make_schedule(const ScheduleOverrides& o) {
  Schedule s;
  if (o.preset == SchedulePreset::Paper) {
    s.phases = {{"warm-up", 1e-3, 40}, {"joint", 1e-4, 60}};
  } else {
    s.phases = {{"warm-up", 1e-3, 10}, {"joint", 1e-4, 20}};
  }
  if (o.warmup_lr) s.phases[0].lr = *o.warmup_lr;
  if (o.warmup_epochs) s.phases[0].epochs = *o.warmup_epochs;
  if (o.joint_lr) s.phases[1].lr = *o.joint_lr;
  if (o.joint_epochs) s.phases[1].epochs = *o.joint_epochs;
  s.validate();
  return s;
}

Schedule make_schedule(SchedulePreset preset) {
  ScheduleOverrides o;
  o.preset = preset;
  return make_schedule(o);
}

}  // namespace lwf
