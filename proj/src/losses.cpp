#include "lwf/losses.hpp"

#include <cmath>
#include <string>

#include "lwf/errors.hpp"

namespace lwf {

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("distillation temperature must be positive, got " + std::to_string(temperature));
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("lambda must be nonnegative, got " + std::to_string(lambda));
  }
}

double LossReport::l_old_sum() const {
  double s = 0.0;
  for (double v : l_old) s += v;
  return s;
}

Var soft_cross_entropy(Var student_probs, const Tensor& target_probs) {
  const Tensor& p = student_probs.value();
  if (p.rank() != 2 || p.shape() != target_probs.shape()) {
    throw ShapeError("cross entropy: probabilities " + shape_str(p.shape()) + " vs targets " +
                     shape_str(target_probs.shape()));
  }
  Graph& g = student_probs.graph();
  const double batch = static_cast<double>(p.dim(0));
  Var logp = log(add_scalar(student_probs, kProbabilityClamp));
  return scale(sum(mul(g.constant(target_probs), logp)), -1.0 / batch);
}

Var cross_entropy_new(Var student_probs, const Tensor& onehot_labels) {
  if (onehot_labels.rank() != 2) {
    throw ShapeError("cross_entropy_new: labels must be B×m");
  }
  const std::size_t rows = onehot_labels.dim(0), cols = onehot_labels.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = onehot_labels[r * cols + c];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw ContractError("cross_entropy_new: label row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (ones != 1) {
      throw ContractError("cross_entropy_new: label row " + std::to_string(r) + " is not one-hot");
    }
  }
  return soft_cross_entropy(student_probs, onehot_labels);
}

Tensor temperature_transform(const Tensor& probs, double temperature) {
  return temperature_rows(probs, temperature);
}

Var temperature_transform(Var probs, double temperature) {
  return temperature_rows(probs, temperature);
}

DistillationTerms distillation_loss(Graph& g, std::span<const Tensor> teacher_probs,
                                    std::span<const Var> student_probs, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("distillation_loss: temperature must be positive");
  }
  if (teacher_probs.size() != student_probs.size()) {
    throw ContractError("distillation_loss: " + std::to_string(teacher_probs.size()) +
                        " teacher tasks vs " + std::to_string(student_probs.size()) + " student tasks");
  }
  DistillationTerms terms;
  for (std::size_t i = 0; i < teacher_probs.size(); ++i) {
    if (teacher_probs[i].shape() != student_probs[i].shape()) {
      throw ContractError("distillation_loss: task " + std::to_string(i) + " shapes differ");
    }
    const Tensor target = temperature_transform(teacher_probs[i], temperature);
    Var student = temperature_transform(student_probs[i], temperature);
    terms.per_task.push_back(soft_cross_entropy(student, target));
  }
  if (terms.per_task.empty()) {
    terms.total = g.constant(Tensor::scalar(0.0));
  } else {
    terms.total = terms.per_task.front();
    for (std::size_t i = 1; i < terms.per_task.size(); ++i) {
      terms.total = add(terms.total, terms.per_task[i]);
    }
  }
  return terms;
}

Var total_loss(Var l_new, Var l_old, double lambda) {
  if (!(lambda >= 0.0)) {
    throw ContractError("total_loss: lambda must be nonnegative");
  }
  return add(l_new, scale(l_old, lambda));
}

}  // namespace lwf
