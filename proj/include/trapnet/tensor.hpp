#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace trapnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major n-dimensional array. A default-constructed tensor is
/// "null" (rank 0, no storage) and is used where a value is optional.
template <typename Scalar_>
class BasicTensor {
 public:
  using Scalar = Scalar_;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_extents();
    data_ = Array::Constant(numel(shape_), fill);
  }

  BasicTensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (numel(shape_) != data_.size())
      throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape), Array(Eigen::Map<const Array>(values.begin(), Index(values.size())))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), Scalar(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), Scalar(1)); }
  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, v); }

  template <typename Rng>
  static BasicTensor uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng) {
    BasicTensor t(std::move(shape));
    std::uniform_real_distribution<double> dist{double(lo), double(hi)};
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = Scalar(dist(rng));
    return t;
  }

  bool is_null() const { return shape_.empty(); }
  const Shape& shape() const { return shape_; }
  Index rank() const { return Index(shape_.size()); }
  Index dim(Index i) const { return shape_.at(std::size_t(i)); }
  Index size() const { return data_.size(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), std::size_t(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), std::size_t(data_.size())}; }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  const Scalar& at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item: tensor " + to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  /// Elements per leading-dimension slice ("per sample" for batched tensors).
  Index row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }

  /// View as a row-major matrix with the leading dimension as rows.
  MatrixMap matrix() { return MatrixMap(data(), dim(0), row_size()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data(), dim(0), row_size()); }
  MatrixMap matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap(data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap(data(), rows, cols);
  }

  BasicTensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
    return BasicTensor(std::move(shape), data_);
  }

  /// Shape of one leading-dimension slice.
  Shape sample_shape() const { return Shape(shape_.begin() + 1, shape_.end()); }

  /// Rows [begin, begin + count) along the leading dimension.
  BasicTensor rows(Index begin, Index count) const {
    if (begin < 0 || count < 0 || begin + count > dim(0))
      throw ShapeError("rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                       ") outside leading dim " + std::to_string(dim(0)));
    Shape s = shape_;
    s[0] = count;
    const Index rs = row_size();
    return BasicTensor(std::move(s), Array(data_.segment(begin * rs, count * rs)));
  }

  BasicTensor row(Index i) const { return rows(i, 1).reshaped(sample_shape()); }

  BasicTensor gather_rows(std::span<const Index> indices) const {
    Shape s = shape_;
    s[0] = Index(indices.size());
    const Index rs = row_size();
    Array out(Index(indices.size()) * rs);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (indices[k] < 0 || indices[k] >= dim(0)) throw ShapeError("gather_rows: index out of range");
      out.segment(Index(k) * rs, rs) = data_.segment(indices[k] * rs, rs);
    }
    return BasicTensor(std::move(s), std::move(out));
  }

  template <typename To>
  BasicTensor<To> cast() const {
    return BasicTensor<To>(shape_, data_.template cast<To>().eval());
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  void check_extents() const {
    for (Index d : shape_)
      if (d <= 0) throw ShapeError("tensor: non-positive extent in shape " + to_string(shape_));
  }

  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      throw ShapeError("matrix: " + to_string(shape_) + " is not " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (Index(idx.size()) != rank()) throw ShapeError("at: rank mismatch for " + to_string(shape_));
    Index off = 0;
    std::size_t d = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[d]) throw ShapeError("at: index out of range for " + to_string(shape_));
      off = off * shape_[d++] + i;
    }
    return off;
  }

  Shape shape_;
  Array data_;
};

using Tensor = BasicTensor<float>;

/// Stacks same-shaped samples along a new leading dimension.
template <typename S>
BasicTensor<S> stack(std::span<const BasicTensor<S>> samples) {
  if (samples.empty()) throw ShapeError("stack: no samples");
  const Shape& s0 = samples[0].shape();
  Shape shape{Index(samples.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  typename BasicTensor<S>::Array out(numel(shape));
  const Index n = samples[0].size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape() != s0) throw ShapeError("stack: sample shapes differ");
    out.segment(Index(i) * n, n) = samples[i].array();
  }
  return BasicTensor<S>(std::move(shape), std::move(out));
}

/// Concatenates along the leading dimension.
template <typename S>
BasicTensor<S> concat_rows(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.is_null()) return b;
  if (b.is_null()) return a;
  if (a.sample_shape() != b.sample_shape())
    throw ShapeError("concat_rows: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  typename BasicTensor<S>::Array out(a.size() + b.size());
  out << a.array(), b.array();
  return BasicTensor<S>(std::move(shape), std::move(out));
}

}  // namespace trapnet
