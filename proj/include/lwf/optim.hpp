#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lwf/tensor.hpp"

namespace lwf {

// Per-parameter frozen flags, aligned with the parameter list passed to a step.
struct FreezeMask {
  std::vector<bool> frozen;

  static FreezeMask none(std::size_t count) { return FreezeMask{std::vector<bool>(count, false)}; }
  // Freezes every parameter of `params` that also appears in `frozen_group`.
  static FreezeMask from_group(std::span<Tensor* const> params, std::span<Tensor* const> frozen_group);
};

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 4e-5;

  void validate() const;
};

// Heavy-ball SGD: g = grad + wd*p; v = mu*v + g; p -= lr*v.
struct SgdState {
  SgdConfig config;
  std::vector<std::vector<double>> velocity;
};

void sgd_momentum_step(std::span<Tensor* const> params, SgdState& state, const FreezeMask& mask);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::vector<std::size_t> steps;  // per parameter, so frozen ones keep their bias correction
};

void adam_step(std::span<Tensor* const> params, AdamState& state, const FreezeMask& mask);

struct Phase {
  std::string name;
  double lr = 0.0;
  std::size_t epochs = 0;

  friend bool operator==(const Phase&, const Phase&) = default;
};

struct Schedule {
  std::vector<Phase> phases;

  std::size_t total_epochs() const;
  const Phase& warmup() const { return phases.at(0); }
  const Phase& joint() const { return phases.at(phases.size() > 1 ? 1 : 0); }
  void validate() const;

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

enum class SchedulePreset { Paper, Desk };

struct ScheduleOverrides {
  SchedulePreset preset = SchedulePreset::Paper;
  std::optional<double> warmup_lr;
  std::optional<std::size_t> warmup_epochs;
  std::optional<double> joint_lr;
  std::optional<std::size_t> joint_epochs;
};

// Paper preset: warm-up 1e-3 × 40 epochs, joint 1e-4 × 60 epochs.
// Desk preset: warm-up 1e-3 × 10 epochs, joint 1e-4 × 20 epochs.
Schedule make_schedule(const ScheduleOverrides& overrides = {});
Schedule make_schedule(SchedulePreset preset);

}  // namespace lwf
