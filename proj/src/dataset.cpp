#include "trapnet/dataset.hpp"

#include "trapnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace trapnet {

void Dataset::validate() const {
  if (num_classes <= 0) throw PreconditionError("dataset: num_classes must be positive");
  if (inputs.is_null() ? !labels.empty() : inputs.dim(0) != size())
    throw ShapeError("dataset: " + std::to_string(labels.size()) + " labels for inputs " + to_string(inputs.shape()));
  for (int l : labels)
    if (l < 0 || l >= num_classes)
      throw PreconditionError("dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
  if (!inputs.is_null() && (inputs.array().minCoeff() < 0.f || inputs.array().maxCoeff() > 1.f))
    throw PreconditionError("dataset: pixel values outside [0,1]");
}

Dataset Dataset::subset(std::span<const Index> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  if (indices.empty()) return out;
  out.inputs = inputs.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (Index i : indices) out.labels.push_back(labels.at(std::size_t(i)));
  return out;
}

Dataset Dataset::slice(Index begin, Index count) const {
  Dataset out;
  out.num_classes = num_classes;
  if (count == 0) return out;
  out.inputs = inputs.rows(begin, count);
  out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
  return out;
}

std::vector<Index> Dataset::indices_without_label(int label) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (labels[std::size_t(i)] != label) out.push_back(i);
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (!a.empty() && !b.empty() && a.num_classes != b.num_classes)
    throw PreconditionError("concat: datasets disagree on num_classes");
  Dataset out;
  out.num_classes = a.empty() ? b.num_classes : a.num_classes;
  out.inputs = concat_rows(a.inputs, b.inputs);
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace trapnet

namespace trapnet {

Dataset synth_blobs(int num_classes, Index dim, Index n_per_class, std::uint64_t seed, double separation) {
  if (dim < 2) throw PreconditionError("synth_blobs: dim must be >= 2");
  if (num_classes < 1 || Index(num_classes) > 2 * dim)
    throw PreconditionError("synth_blobs: need 1 <= num_classes <= 2 * dim");
  if (n_per_class < 1) throw PreconditionError("synth_blobs: n_per_class must be positive");
  constexpr double sigma = 0.05;
  Rng rng(seed);

  // Means on signed, distinct axes: any two are at least separation * sigma apart.
  std::vector<Index> axes(static_cast<std::size_t>(dim));
  std::iota(axes.begin(), axes.end(), Index(0));
  std::shuffle(axes.begin(), axes.end(), rng);
  const double radius = separation * sigma / std::sqrt(2.0);

  Dataset out;
  out.num_classes = num_classes;
  out.inputs = Tensor(Shape{Index(num_classes) * n_per_class, dim}, 0.5f);
  std::normal_distribution<double> noise(0.0, sigma);
  auto m = out.inputs.matrix();
  for (int c = 0; c < num_classes; ++c) {
    Index axis = axes[std::size_t(c) % axes.size()];
    double sign = std::size_t(c) < axes.size() ? 1.0 : -1.0;
    for (Index k = 0; k < n_per_class; ++k) {
      Index row = Index(c) * n_per_class + k;
      for (Index j = 0; j < dim; ++j) {
        double v = 0.5 + (j == axis ? sign * radius : 0.0) + noise(rng);
        m(row, j) = float(std::clamp(v, 0.0, 1.0));
      }
      out.labels.push_back(c);
    }
  }
  return out;
}

}  // namespace trapnet
