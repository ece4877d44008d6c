#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "attnkit/common.hpp"

namespace attnkit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major n-dimensional array over a single scalar type.
// Rank-2 tensors expose Eigen matrix views; higher ranks are flat storage
// with shape bookkeeping (images, masks). Immutable by convention once
// handed to another component: every op below returns a fresh tensor.
template <class Scalar>
class Tensor {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using ConstMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (Index d : shape_)
      if (d < 0) throw dimension_error(msg("negative dimension in shape ", shape_str(shape_)));
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), Scalar(0));
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<Index>(data_.size()))
      throw dimension_error(msg("shape ", shape_str(shape_), " does not match data length ", data_.size()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor identity(Index n) {
    Tensor t({n, n});
    for (Index i = 0; i < n; ++i) t.data_[static_cast<std::size_t>(i * n + i)] = Scalar(1);
    return t;
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  // 2-D convenience constructor from nested initializer lists.
  static Tensor from_rows(std::initializer_list<std::initializer_list<Scalar>> rows) {
    Index m = static_cast<Index>(rows.size());
    Index n = m ? static_cast<Index>(rows.begin()->size()) : 0;
    Tensor t({m, n});
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != n) throw dimension_error("ragged initializer rows");
      Index j = 0;
      for (Scalar v : row) t(i, j++) = v;
      ++i;
    }
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index numel() const { return static_cast<Index>(data_.size()); }
  static constexpr DType dtype() { return dtype_of<Scalar>(); }

  Index rows() const {
    require_rank2("rows()");
    return shape_[0];
  }
  Index cols() const {
    require_rank2("cols()");
    return shape_[1];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& operator()(Index i, Index j) {
    require_rank2("operator()");
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  Scalar operator()(Index i, Index j) const {
    require_rank2("operator()");
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }

  Map mat() {
    require_rank2("mat()");
    return Map(data_.data(), shape_[0], shape_[1]);
  }
  ConstMap mat() const {
    require_rank2("mat()");
    return ConstMap(data_.data(), shape_[0], shape_[1]);
  }
  VecMap vec() { return VecMap(data_.data(), numel()); }
  ConstVecMap vec() const { return ConstVecMap(data_.data(), numel()); }

  // Reinterpret as m x n without copying; numel must match.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw dimension_error(msg("reshape ", shape_str(shape_), " -> ", shape_str(shape), " changes element count"));
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (Scalar v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (Index i = 0; i < numel(); ++i) out[i] = static_cast<Other>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  void require_rank2(const char* who) const {
    if (shape_.size() != 2) throw dimension_error(msg(who, " requires rank-2 tensor, got ", shape_str(shape_)));
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

namespace detail {
template <class Scalar>
void require_rank2(const Tensor<Scalar>& t, const char* op) {
  if (t.rank() != 2) throw dimension_error(msg(op, ": expected rank-2 tensor, got ", shape_str(t.shape())));
}
}  // namespace detail

// Matrix product with a pinned accumulation order: every output element
// accumulates its k-terms left to right, exactly like the definitional
// triple loop. The (i,k,j) loop nest keeps that order while staying
// cache-friendly on row-major storage.
template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw dimension_error(msg("matmul: inner dimensions disagree, ", shape_str(a.shape()), " x ", shape_str(b.shape())));
  const Index m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<Scalar> c({m, n});
  const Scalar* pa = a.data();
  const Scalar* pb = b.data();
  Scalar* pc = c.data();
  for (Index i = 0; i < m; ++i) {
    Scalar* crow = pc + i * n;
    for (Index kk = 0; kk < k; ++kk) {
      const Scalar aik = pa[i * k + kk];
      const Scalar* brow = pb + kk * n;
      for (Index j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <class Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  detail::require_rank2(x, "transpose");
  Tensor<Scalar> out({x.cols(), x.rows()});
  out.mat() = x.mat().transpose();
  return out;
}

template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b))
    throw dimension_error(msg("add: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor<Scalar> out(a.shape());
  out.vec() = a.vec() + b.vec();
  return out;
}

template <class Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b))
    throw dimension_error(msg("sub: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor<Scalar> out(a.shape());
  out.vec() = a.vec() - b.vec();
  return out;
}

template <class Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar c) {
  Tensor<Scalar> out(x.shape());
  out.vec() = x.vec() * c;
  return out;
}

template <class Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b))
    throw dimension_error(msg("hadamard: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor<Scalar> out(a.shape());
  out.vec() = a.vec().cwiseProduct(b.vec());
  return out;
}

// Row-stabilized softmax: subtract each row's max before exponentiating.
template <class Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  detail::require_rank2(x, "softmax_rows");
  Tensor<Scalar> out(x.shape());
  const Index m = x.rows(), n = x.cols();
  for (Index i = 0; i < m; ++i) {
    const Scalar* in = x.data() + i * n;
    Scalar* o = out.data() + i * n;
    Scalar mx = in[0];
    for (Index j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    Scalar sum = Scalar(0);
    for (Index j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (Index j = 0; j < n; ++j) o[j] /= sum;
  }
  return out;
}

// Exact erf-based GELU: x * Phi(x).
template <class Scalar>
Scalar gelu_scalar(Scalar x) {
  const Scalar phi = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  return x * phi;
}

template <class Scalar>
Scalar gelu_grad_scalar(Scalar x) {
  const Scalar phi = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014327);
  return phi + x * pdf;
}

template <class Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < x.numel(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

// Per-row layer normalization with learned gain/bias. Population variance.
template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  detail::require_rank2(x, "layer_norm");
  const Index m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n)
    throw dimension_error(msg("layer_norm: gain/bias length must be ", n));
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < m; ++i) {
    const Scalar* in = x.data() + i * n;
    Scalar* o = out.data() + i * n;
    Scalar mean = Scalar(0);
    for (Index j = 0; j < n; ++j) mean += in[j];
    mean /= Scalar(n);
    Scalar var = Scalar(0);
    for (Index j = 0; j < n; ++j) {
      const Scalar d = in[j] - mean;
      var += d * d;
    }
    var /= Scalar(n);
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    for (Index j = 0; j < n; ++j) o[j] = (in[j] - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

template <class Scalar>
Scalar mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b))
    throw dimension_error(msg("mse: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Scalar acc = Scalar(0);
  for (Index i = 0; i < a.numel(); ++i) {
    const Scalar d = a[i] - b[i];
    acc += d * d;
  }
  return acc / Scalar(a.numel());
}

// Rows start, start+stride, ... (count of them) copied out of x.
template <class Scalar>
Tensor<Scalar> slice_rows_strided(const Tensor<Scalar>& x, Index start, Index stride, Index count) {
  detail::require_rank2(x, "slice_rows_strided");
  if (start < 0 || stride < 1 || count < 0)
    throw dimension_error(msg("slice_rows_strided: bad start/stride/count ", start, "/", stride, "/", count));
  if (count > 0 && start + (count - 1) * stride >= x.rows())
    throw dimension_error(msg("slice_rows_strided: last row ", start + (count - 1) * stride, " out of range for ",
                              x.rows(), " rows"));
  Tensor<Scalar> out({count, x.cols()});
  for (Index i = 0; i < count; ++i) out.mat().row(i) = x.mat().row(start + i * stride);
  return out;
}

// Accumulates src's rows into a copy of dest at the given row indices.
// With pairwise distinct indices this is a pure placement.
template <class Scalar>
Tensor<Scalar> scatter_rows(const Tensor<Scalar>& dest, const Tensor<Scalar>& src,
                            const std::vector<Index>& row_indices) {
  detail::require_rank2(dest, "scatter_rows");
  detail::require_rank2(src, "scatter_rows");
  if (src.rows() != static_cast<Index>(row_indices.size()))
    throw dimension_error(msg("scatter_rows: ", row_indices.size(), " indices for ", src.rows(), " source rows"));
  if (src.cols() != dest.cols())
    throw dimension_error(msg("scatter_rows: column mismatch ", src.cols(), " vs ", dest.cols()));
  Tensor<Scalar> out = dest;
  for (Index i = 0; i < src.rows(); ++i) {
    const Index r = row_indices[static_cast<std::size_t>(i)];
    if (r < 0 || r >= dest.rows()) throw dimension_error(msg("scatter_rows: row index ", r, " out of range"));
    out.mat().row(r) += src.mat().row(i);
  }
  return out;
}

template <class Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b))
    throw dimension_error(msg("max_abs_diff: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Scalar m = Scalar(0);
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.numel())) == 0;
}

// Deterministic fills driven by a caller-owned engine.
template <class Scalar>
Tensor<Scalar> randn(Shape shape, Rng& rng, Scalar stddev = Scalar(1)) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(dist(rng)) * stddev;
  return t;
}

template <class Scalar>
Tensor<Scalar> rand_uniform(Shape shape, Rng& rng, Scalar lo = Scalar(0), Scalar hi = Scalar(1)) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

// Truncated normal (resample outside two standard deviations).
template <class Scalar>
Tensor<Scalar> trunc_normal(Shape shape, Rng& rng, Scalar stddev) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0) v = dist(rng);
    t[i] = static_cast<Scalar>(v) * stddev;
  }
  return t;
}

}  // namespace attnkit
