#pragma once

#include "trapnet/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace trapnet {

/// Labelled inputs with pixel values in [0,1]; inputs are [N, ...].
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return Index(labels.size()); }
  bool empty() const { return labels.empty(); }
  Shape sample_shape() const { return inputs.sample_shape(); }

  /// Checks label range, pixel range and input/label count agreement.
  void validate() const;

  Dataset subset(std::span<const Index> indices) const;
  Dataset slice(Index begin, Index count) const;
  /// Indices of samples whose label differs from `label`.
  std::vector<Index> indices_without_label(int label) const;
};

Dataset concat(const Dataset& a, const Dataset& b);

/// Gaussian clusters in [0,1]^dim, n_per_class rows per class in class
/// order. Class means sit `separation` standard deviations apart along
/// seeded random directions; sigma is 0.05.
Dataset synth_blobs(int num_classes, Index dim, Index n_per_class, std::uint64_t seed, double separation = 5.0);

}  // namespace trapnet
