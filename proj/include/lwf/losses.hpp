#pragma once

#include <span>
#include <vector>

#include "lwf/tensor.hpp"

namespace lwf {

// Clamp added inside every log so saturated softmax rows stay finite.
inline constexpr double kProbabilityClamp = 1e-12;

struct DistillConfig {
  double temperature = 2.0;
  double lambda = 1.0;

  void validate() const;
};

struct LossReport {
  double l_new = 0.0;
  std::vector<double> l_old;  // one entry per old task
  double l_total = 0.0;

  double l_old_sum() const;
};

// Batch-mean cross entropy -sum_j y log(p + clamp) against one-hot labels.
Var cross_entropy_new(Var student_probs, const Tensor& onehot_labels);
// Same reduction against arbitrary target distributions (no one-hot check).
Var soft_cross_entropy(Var student_probs, const Tensor& target_probs);

// Raises each probability to 1/T and renormalises the row.
Tensor temperature_transform(const Tensor& probs, double temperature);
Var temperature_transform(Var probs, double temperature);

struct DistillationTerms {
  Var total;                 // sum over old tasks
  std::vector<Var> per_task; // H(y'_o, ŷ'_o) per old task
};

// teacher_probs[i] / student_probs[i] are the softmax outputs of old task i.
// Both sides are temperature-transformed; teacher rows are constants.
DistillationTerms distillation_loss(Graph& g, std::span<const Tensor> teacher_probs,
                                    std::span<const Var> student_probs, double temperature);

// l_new + lambda * l_old
Var total_loss(Var l_new, Var l_old, double lambda = 1.0);

}  // namespace lwf
