#include "lwf/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "lwf/errors.hpp"

namespace lwf {

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= k_ || predicted >= k_) {
    throw ContractError("confusion matrix index out of range");
  }
  ++counts_[truth * k_ + predicted];
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < k_; ++i) t += counts_[i * k_ + i];
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

double ConfusionMatrix::accuracy() const {
  const std::size_t n = total();
  return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
}

ConfusionMatrix confusion_from_predictions(std::size_t classes, const std::vector<std::size_t>& truth,
                                           const std::vector<std::size_t>& predicted) {
  if (truth.size() != predicted.size()) {
    throw ContractError("confusion_from_predictions: length mismatch");
  }
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) m.add(truth[i], predicted[i]);
  return m;
}

Evaluation evaluate(MultiHeadNet& net, int task_id, const std::vector<LabeledSample>& samples,
                    std::size_t batch_size) {
  const std::size_t index = net.head_index(task_id);
  const std::size_t k = net.heads()[index].class_count;
  if (samples.empty()) {
    throw DataError("evaluate: empty split for task " + std::to_string(task_id));
  }
  Evaluation out{0.0, ConfusionMatrix(k)};
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, samples.size() - first);
    const Batch batch = make_batch(samples, task_id, first, count);
    Graph g;
    const Var features = net.forward_features(g, batch.images, Mode::Eval);
    const Tensor& logits = net.head_logits(g, features, index).value();
    for (std::size_t r = 0; r < count; ++r) {
      const double* row = logits.data().data() + r * k;
      const auto predicted = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      out.confusion.add(batch.labels[r], predicted);
    }
  }
  out.accuracy = out.confusion.accuracy();
  return out;
}

Evaluation evaluate(std::vector<MultiHeadNet>& bank, int task_id, const std::vector<LabeledSample>& samples,
                    std::size_t batch_size) {
  for (MultiHeadNet& net : bank) {
    if (net.has_head(task_id)) return evaluate(net, task_id, samples, batch_size);
  }
  throw ContractError("no model in the bank has a head for task " + std::to_string(task_id));
}

}  // namespace lwf
