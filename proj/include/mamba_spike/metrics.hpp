#pragma once

#include <cstddef>
#include <vector>

#include "mamba_spike/error.hpp"

namespace mamba_spike {

/// Class-by-class confusion counts; rows are truth, columns predictions.
class Confusion {
 public:
  explicit Confusion(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= classes_ || predicted >= classes_) {
      throw ContractError("Confusion: class index out of range");
    }
    ++counts_[truth * classes_ + predicted];
    ++total_;
  }

  std::size_t total() const { return total_; }
  std::size_t classes() const { return classes_; }
  std::size_t count(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }

  double accuracy() const {
    if (total_ == 0) return 0.0;
    std::size_t hit = 0;
    for (std::size_t c = 0; c < classes_; ++c) hit += counts_[c * classes_ + c];
    return static_cast<double>(hit) / static_cast<double>(total_);
  }

  /// Macro F1: unweighted mean of per-class F1; a class with no predictions
  /// and no support contributes 0.
  double macro_f1() const {
    double acc = 0.0;
    for (std::size_t c = 0; c < classes_; ++c) {
      const double tp = static_cast<double>(counts_[c * classes_ + c]);
      double fp = 0.0, fn = 0.0;
      for (std::size_t o = 0; o < classes_; ++o) {
        if (o == c) continue;
        fp += static_cast<double>(counts_[o * classes_ + c]);
        fn += static_cast<double>(counts_[c * classes_ + o]);
      }
      const double denom = 2.0 * tp + fp + fn;
      acc += denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    return acc / static_cast<double>(classes_);
  }

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

}  // namespace mamba_spike
