#pragma once

#include <cstddef>
#include <vector>

#include "lwf/data.hpp"
#include "lwf/nn.hpp"

namespace lwf {

// k×k counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * k_ + predicted); }
  void add(std::size_t truth, std::size_t predicted);

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
  // trace / total; 0 for an empty matrix.
  double accuracy() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion_from_predictions(std::size_t classes, const std::vector<std::size_t>& truth,
                                           const std::vector<std::size_t>& predicted);

struct Evaluation {
  double accuracy = 0.0;  // fraction in [0,1]
  ConfusionMatrix confusion;
};

// Argmax of the task's head over the split, trunk in eval mode.
// Throws ContractError if the net has no head for the task.
Evaluation evaluate(MultiHeadNet& net, int task_id, const std::vector<LabeledSample>& samples,
                    std::size_t batch_size = 64);

// Model bank: evaluates the (unique) model that owns the task's head.
Evaluation evaluate(std::vector<MultiHeadNet>& bank, int task_id, const std::vector<LabeledSample>& samples,
                    std::size_t batch_size = 64);

}  // namespace lwf
