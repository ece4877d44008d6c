#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "attnkit/attention.hpp"
#include "attnkit/tensor.hpp"

// Definitional reference implementations, written as the plainest possible
// loops so the production kernels have something independent to disagree
// with. Shared by the unit tests and the self-check command.

namespace attnkit::oracle {

// Three nested loops, one local accumulator, no tiling, no reordering.
template <class Scalar>
Tensor<Scalar> matmul_loops(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank2(a, "oracle matmul");
  detail::require_rank2(b, "oracle matmul");
  if (a.cols() != b.rows()) throw dimension_error("oracle matmul: inner dimensions disagree");
  Tensor<Scalar> out({a.rows(), b.cols()});
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      Scalar acc = Scalar(0);
      for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

// Attention written directly from its definition: per query row, exponentiate
// shifted scores against every key, normalize, take the weighted value sum.
template <class Scalar>
Tensor<Scalar> attention_loops(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                               bool scale_scores = true) {
  const Index n_q = q.rows(), n_k = k.rows(), d = q.cols(), d_v = v.cols();
  const Scalar sc = scale_scores ? Scalar(1) / std::sqrt(static_cast<Scalar>(d)) : Scalar(1);
  Tensor<Scalar> out({n_q, d_v});
  for (Index i = 0; i < n_q; ++i) {
    std::vector<Scalar> s(static_cast<std::size_t>(n_k));
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < n_k; ++j) {
      Scalar acc = Scalar(0);
      for (Index c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = acc * sc;
      m = std::max(m, s[static_cast<std::size_t>(j)]);
    }
    Scalar z = Scalar(0);
    for (Index j = 0; j < n_k; ++j) {
      s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - m);
      z += s[static_cast<std::size_t>(j)];
    }
    for (Index c = 0; c < d_v; ++c) {
      Scalar acc = Scalar(0);
      for (Index j = 0; j < n_k; ++j) acc += s[static_cast<std::size_t>(j)] * v(j, c);
      out(i, c) = acc / z;
    }
  }
  return out;
}

// The segmented-sparsified pipeline expressed as dense masked attention:
// scores between rows of different segment views are forced to -inf, rows
// kept by no view produce zero output. Exercises none of the slice/scatter
// machinery, so agreement with the pipeline checks the index bookkeeping.
template <class Scalar>
Tensor<Scalar> masked_dense_dilated(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    const AttentionConfig& cfg, Index head_offset) {
  cfg.validate();
  const Index n = cfg.seq_len, d = q.cols(), d_v = v.cols();
  // group id per row: segment index if the row lands on the offset grid, else -1
  std::vector<Index> group(static_cast<std::size_t>(n), -1);
  for (Index i = 0; i < cfg.num_segments(); ++i) {
    const auto view = make_segment_view(n, cfg.segment_len, cfg.interval, i, head_offset);
    for (Index r : view.row_indices) group[static_cast<std::size_t>(r)] = i;
  }
  const Scalar sc = cfg.scale_scores ? Scalar(1) / std::sqrt(static_cast<Scalar>(d)) : Scalar(1);
  Tensor<Scalar> out({n, d_v});
  for (Index i = 0; i < n; ++i) {
    if (group[static_cast<std::size_t>(i)] < 0) continue;
    std::vector<Scalar> s(static_cast<std::size_t>(n), -std::numeric_limits<Scalar>::infinity());
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (group[static_cast<std::size_t>(j)] != group[static_cast<std::size_t>(i)]) continue;
      Scalar acc = Scalar(0);
      for (Index c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = acc * sc;
      m = std::max(m, s[static_cast<std::size_t>(j)]);
    }
    Scalar z = Scalar(0);
    for (Index j = 0; j < n; ++j) {
      if (s[static_cast<std::size_t>(j)] == -std::numeric_limits<Scalar>::infinity()) {
        s[static_cast<std::size_t>(j)] = Scalar(0);
        continue;
      }
      s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - m);
      z += s[static_cast<std::size_t>(j)];
    }
    for (Index c = 0; c < d_v; ++c) {
      Scalar acc = Scalar(0);
      for (Index j = 0; j < n; ++j) acc += s[static_cast<std::size_t>(j)] * v(j, c);
      out(i, c) = acc / z;
    }
  }
  return out;
}

}  // namespace attnkit::oracle
