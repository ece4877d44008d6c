#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "attnkit/tensor.hpp"
#include "attnkit/thread_pool.hpp"

namespace attnkit {

enum class Kernel { naive, tiled };

inline const char* kernel_name(Kernel k) { return k == Kernel::naive ? "naive" : "tiled"; }

// Geometry and kernel selection for segmented-sparsified attention.
// seq_len N is split into ceil(N/w) segments of segment_len w; within a
// segment, rows offset, offset+r, ... are kept (interval r). Per-head
// offsets distribute the r offset classes across heads so that the head
// ensemble covers every output row.
struct AttentionConfig {
  Index seq_len = 0;      // N
  Index segment_len = 0;  // w
  Index interval = 1;     // r
  int num_heads = 1;      // h
  Index head_dim = 0;     // d
  std::vector<Index> head_offsets;
  Kernel kernel = Kernel::naive;
  Index tile_size = 1;       // tiled kernel only
  bool scale_scores = true;  // 1/sqrt(d); the unscaled form exists for unit tests

  Index num_segments() const { return (seq_len + segment_len - 1) / segment_len; }
  Index model_dim() const { return static_cast<Index>(num_heads) * head_dim; }

  static std::vector<Index> spread_offsets(int heads, Index interval) {
    std::vector<Index> out(static_cast<std::size_t>(heads));
    for (int j = 0; j < heads; ++j) out[static_cast<std::size_t>(j)] = static_cast<Index>(j) % interval;
    return out;
  }

  void validate(bool require_full_coverage = false) const {
    if (seq_len < 1) throw config_error("attention: seq_len must be positive");
    if (segment_len < 1 || segment_len > seq_len)
      throw config_error(msg("attention: need 1 <= w <= N, got w=", segment_len, " N=", seq_len));
    if (interval < 1 || interval > segment_len)
      throw config_error(msg("attention: need 1 <= r <= w, got r=", interval, " w=", segment_len));
    if (num_heads < 1) throw config_error("attention: num_heads must be positive");
    if (head_dim < 1) throw config_error("attention: head_dim must be positive");
    if (head_offsets.size() != static_cast<std::size_t>(num_heads))
      throw config_error(msg("attention: ", head_offsets.size(), " offsets for ", num_heads, " heads"));
    for (Index g : head_offsets)
      if (g < 0 || g >= interval) throw config_error(msg("attention: offset ", g, " outside [0, ", interval, ")"));
    if (kernel == Kernel::tiled && tile_size < 1) throw config_error("attention: tile_size must be >= 1");
    if (require_full_coverage) {
      std::vector<bool> hit(static_cast<std::size_t>(interval), false);
      for (Index g : head_offsets) hit[static_cast<std::size_t>(g % interval)] = true;
      for (Index c = 0; c < interval; ++c)
        if (!hit[static_cast<std::size_t>(c)])
          throw config_error(msg("attention: offset class ", c, " of interval ", interval,
                                 " is covered by no head; full coverage needs h >= r"));
    }
  }
};

// The strided row selection of one segment: global rows
// {i*w + offset, i*w + offset + r, ...} clipped to the segment.
struct SegmentView {
  Index segment_index = 0;
  Index offset = 0;
  std::vector<Index> row_indices;

  bool operator==(const SegmentView&) const = default;
};

template <class Scalar>
struct SegmentSlice {
  Tensor<Scalar> rows;
  SegmentView view;
};

inline SegmentView make_segment_view(Index seq_len, Index segment_len, Index interval, Index segment_index,
                                     Index offset) {
  const Index n_segments = (seq_len + segment_len - 1) / segment_len;
  if (segment_index < 0 || segment_index >= n_segments)
    throw std::out_of_range(msg("segment index ", segment_index, " outside [0, ", n_segments, ")"));
  if (offset < 0 || offset >= interval)
    throw std::out_of_range(msg("segment offset ", offset, " outside [0, ", interval, ")"));
  SegmentView view;
  view.segment_index = segment_index;
  view.offset = offset;
  const Index seg_begin = segment_index * segment_len;
  const Index seg_end = std::min(seg_begin + segment_len, seq_len);
  for (Index row = seg_begin + offset; row < seg_end; row += interval) view.row_indices.push_back(row);
  return view;
}

namespace detail {
template <class Scalar>
void require_qkv(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v, const char* op) {
  require_rank2(q, op);
  require_rank2(k, op);
  require_rank2(v, op);
  if (q.cols() != k.cols())
    throw dimension_error(msg(op, ": query/key width mismatch ", shape_str(q.shape()), " vs ", shape_str(k.shape())));
  if (k.rows() != v.rows())
    throw dimension_error(msg(op, ": key/value row mismatch ", shape_str(k.shape()), " vs ", shape_str(v.shape())));
}

template <class Scalar>
Scalar score_scale(Index d, bool enabled) {
  return enabled ? Scalar(1) / std::sqrt(static_cast<Scalar>(d)) : Scalar(1);
}
}  // namespace detail

// Dense reference kernel: softmax(q k^T / sqrt d) v over the whole input.
template <class Scalar>
Tensor<Scalar> naive_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                               bool scale_scores = true) {
  detail::require_qkv(q, k, v, "naive_attention");
  Tensor<Scalar> scores = matmul(q, transpose(k));
  const Scalar sc = detail::score_scale<Scalar>(q.cols(), scale_scores);
  if (scale_scores) scores.vec() *= sc;
  return matmul(softmax_rows(scores), v);
}

// Instrumentation for the tiled kernel's transient score buffers. The peak
// is asserted against the N x tile_size bound by the benchmark suite.
struct TiledKernelStats {
  std::size_t live_score_scalars = 0;
  std::size_t peak_score_scalars = 0;
  std::size_t score_allocs = 0;

  void on_alloc(std::size_t scalars) {
    live_score_scalars += scalars;
    peak_score_scalars = std::max(peak_score_scalars, live_score_scalars);
    ++score_allocs;
  }
  void on_free(std::size_t scalars) { live_score_scalars -= scalars; }
};

// Streaming attention over key tiles with a running row max and
// normalizer. Never materializes more than one (n_q x tile) score block.
// tile_size >= n_k collapses to the one-shot softmax code path.
template <class Scalar>
Tensor<Scalar> tiled_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                               Index tile_size, TiledKernelStats* stats = nullptr, bool scale_scores = true) {
  detail::require_qkv(q, k, v, "tiled_attention");
  if (tile_size < 1) throw dimension_error(msg("tiled_attention: tile_size must be >= 1, got ", tile_size));
  const Index n_q = q.rows(), n_k = k.rows(), d = q.cols(), d_v = v.cols();

  if (tile_size >= n_k) {
    if (stats) {
      stats->on_alloc(static_cast<std::size_t>(n_q * n_k));
      stats->on_free(static_cast<std::size_t>(n_q * n_k));
    }
    return naive_attention(q, k, v, scale_scores);
  }

  const Scalar sc = detail::score_scale<Scalar>(d, scale_scores);
  Tensor<Scalar> out({n_q, d_v});
  std::vector<Scalar> row_max(static_cast<std::size_t>(n_q), -std::numeric_limits<Scalar>::infinity());
  std::vector<Scalar> row_norm(static_cast<std::size_t>(n_q), Scalar(0));

  Tensor<Scalar> scores({n_q, tile_size});
  if (stats) stats->on_alloc(static_cast<std::size_t>(n_q * tile_size));

  for (Index t0 = 0; t0 < n_k; t0 += tile_size) {
    const Index tw = std::min(tile_size, n_k - t0);
    for (Index i = 0; i < n_q; ++i) {
      const Scalar* qi = q.data() + i * d;
      for (Index j = 0; j < tw; ++j) {
        const Scalar* kj = k.data() + (t0 + j) * d;
        Scalar acc = Scalar(0);
        for (Index c = 0; c < d; ++c) acc += qi[c] * kj[c];
        scores(i, j) = acc * sc;
      }
    }
    for (Index i = 0; i < n_q; ++i) {
      Scalar tile_max = scores(i, 0);
      for (Index j = 1; j < tw; ++j) tile_max = std::max(tile_max, scores(i, j));
      const Scalar new_max = std::max(row_max[static_cast<std::size_t>(i)], tile_max);
      const Scalar corr = std::exp(row_max[static_cast<std::size_t>(i)] - new_max);
      Scalar* oi = out.data() + i * d_v;
      for (Index c = 0; c < d_v; ++c) oi[c] *= corr;
      Scalar tile_sum = Scalar(0);
      for (Index j = 0; j < tw; ++j) {
        const Scalar p = std::exp(scores(i, j) - new_max);
        tile_sum += p;
        const Scalar* vj = v.data() + (t0 + j) * d_v;
        for (Index c = 0; c < d_v; ++c) oi[c] += p * vj[c];
      }
      row_norm[static_cast<std::size_t>(i)] = row_norm[static_cast<std::size_t>(i)] * corr + tile_sum;
      row_max[static_cast<std::size_t>(i)] = new_max;
    }
  }
  if (stats) stats->on_free(static_cast<std::size_t>(n_q * tile_size));

  for (Index i = 0; i < n_q; ++i) {
    const Scalar inv = Scalar(1) / row_norm[static_cast<std::size_t>(i)];
    Scalar* oi = out.data() + i * d_v;
    for (Index c = 0; c < d_v; ++c) oi[c] *= inv;
  }
  return out;
}

// Rows of segment i at stride r starting from the segment-local offset.
template <class Scalar>
SegmentSlice<Scalar> sparsify_segment(const Tensor<Scalar>& x, const AttentionConfig& cfg, Index segment_index,
                                      Index offset) {
  detail::require_rank2(x, "sparsify_segment");
  if (x.rows() != cfg.seq_len)
    throw dimension_error(msg("sparsify_segment: input has ", x.rows(), " rows, config says ", cfg.seq_len));
  SegmentView view = make_segment_view(cfg.seq_len, cfg.segment_len, cfg.interval, segment_index, offset);
  const Index count = static_cast<Index>(view.row_indices.size());
  Tensor<Scalar> rows = count > 0
                            ? slice_rows_strided(x, view.row_indices.front(), cfg.interval, count)
                            : Tensor<Scalar>({0, x.cols()});
  return {std::move(rows), std::move(view)};
}

// Attention among the sparsified rows of one segment.
template <class Scalar>
Tensor<Scalar> segment_attention(const SegmentSlice<Scalar>& q, const SegmentSlice<Scalar>& k,
                                 const SegmentSlice<Scalar>& v, Kernel kernel, Index tile_size = 1,
                                 bool scale_scores = true, TiledKernelStats* stats = nullptr) {
  if (!(q.view == k.view) || !(q.view == v.view))
    throw contract_error(msg("segment_attention: q/k/v sliced from different segment views (segments ",
                             q.view.segment_index, "/", k.view.segment_index, "/", v.view.segment_index, ")"));
  if (q.rows.rows() == 0) return Tensor<Scalar>({0, v.rows.cols()});
  if (kernel == Kernel::tiled) return tiled_attention(q.rows, k.rows, v.rows, tile_size, stats, scale_scores);
  return naive_attention(q.rows, k.rows, v.rows, scale_scores);
}

namespace fault {
// Verification-harness hook: perturbs recompose output so the oracle suite
// demonstrably catches a broken placement.
inline std::atomic<bool> recompose_perturb{false};
}  // namespace fault

// Places each segment output at its global row indices in a zero matrix.
// Disjointness across views makes the sum a pure placement; rows selected
// by no view stay zero.
template <class Scalar>
Tensor<Scalar> recompose(const std::vector<std::pair<Tensor<Scalar>, SegmentView>>& outputs, Index seq_len) {
  Index width = -1;
  for (const auto& [t, view] : outputs) {
    if (t.rank() != 2 || t.rows() != static_cast<Index>(view.row_indices.size()))
      throw dimension_error(msg("recompose: segment ", view.segment_index, " output rows ", t.rows(),
                                " do not match its ", view.row_indices.size(), " indices"));
    if (t.rows() > 0) {
      if (width >= 0 && t.cols() != width) throw dimension_error("recompose: segment outputs differ in width");
      width = t.cols();
    }
  }
  if (width < 0) throw dimension_error("recompose: no segment output carries any rows");

  std::vector<bool> written(static_cast<std::size_t>(seq_len), false);
  for (const auto& [t, view] : outputs) {
    for (Index r : view.row_indices) {
      if (r < 0 || r >= seq_len) throw dimension_error(msg("recompose: row index ", r, " outside [0, ", seq_len, ")"));
      if (written[static_cast<std::size_t>(r)])
        throw contract_error(msg("recompose: row ", r, " written by two segment views; the sum would double-count"));
      written[static_cast<std::size_t>(r)] = true;
    }
  }

  Tensor<Scalar> out({seq_len, width});
  for (const auto& [t, view] : outputs) out = scatter_rows(out, t, view.row_indices);
  if (fault::recompose_perturb.load(std::memory_order_relaxed) && out.numel() > 0) out[0] += Scalar(1e-3);
  return out;
}

// Full single-head pipeline: per segment, sparsify q/k/v with (w, r,
// offset), attend among the kept rows, then place every segment output
// back at its global positions. Segments are independent and may run on a
// worker pool; the result is bitwise identical to the serial execution.
template <class Scalar>
Tensor<Scalar> dilated_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                 const AttentionConfig& cfg, Index head_offset, int workers = 1) {
  cfg.validate();
  detail::require_qkv(q, k, v, "dilated_attention");
  if (q.rows() != cfg.seq_len || k.rows() != cfg.seq_len)
    throw dimension_error(msg("dilated_attention: expected ", cfg.seq_len, " rows, got ", q.rows()));
  if (head_offset < 0 || head_offset >= cfg.interval)
    throw std::out_of_range(msg("dilated_attention: head offset ", head_offset, " outside [0, ", cfg.interval, ")"));

  const Index n_segments = cfg.num_segments();
  std::vector<std::pair<Tensor<Scalar>, SegmentView>> outputs(static_cast<std::size_t>(n_segments));
  parallel_for(n_segments, workers, [&](std::int64_t i) {
    auto qs = sparsify_segment(q, cfg, i, head_offset);
    auto ks = sparsify_segment(k, cfg, i, head_offset);
    auto vs = sparsify_segment(v, cfg, i, head_offset);
    TiledKernelStats stats;
    Tensor<Scalar> o = segment_attention(qs, ks, vs, cfg.kernel, cfg.tile_size, cfg.scale_scores, &stats);
    outputs[static_cast<std::size_t>(i)] = {std::move(o), std::move(qs.view)};
  });
  return recompose(outputs, cfg.seq_len);
}

// Per-head input/output projections for the multi-head pipeline.
template <class Scalar>
struct MultiHeadWeights {
  std::vector<Tensor<Scalar>> wq, wk, wv;  // h tensors of D x d
  Tensor<Scalar> wo;                       // D x D

  void validate(const AttentionConfig& cfg) const {
    const auto heads = static_cast<std::size_t>(cfg.num_heads);
    if (wq.size() != heads || wk.size() != heads || wv.size() != heads)
      throw config_error(msg("multi_head_dilated: expected ", cfg.num_heads, " per-head projections"));
    const Index model = cfg.model_dim();
    for (std::size_t j = 0; j < heads; ++j)
      for (const auto* t : {&wq[j], &wk[j], &wv[j]})
        if (t->rank() != 2 || t->rows() != model || t->cols() != cfg.head_dim)
          throw dimension_error(msg("multi_head_dilated: head ", j, " projection is ", shape_str(t->shape()),
                                    ", expected [", model, "x", cfg.head_dim, "]"));
    if (wo.rank() != 2 || wo.rows() != model || wo.cols() != model)
      throw dimension_error(msg("multi_head_dilated: output projection is ", shape_str(wo.shape()), ", expected [",
                                model, "x", model, "]"));
  }

  static MultiHeadWeights random(const AttentionConfig& cfg, Rng& rng, Scalar stddev = Scalar(0.02)) {
    MultiHeadWeights w;
    const Index model = cfg.model_dim();
    for (int j = 0; j < cfg.num_heads; ++j) {
      w.wq.push_back(trunc_normal<Scalar>({model, cfg.head_dim}, rng, stddev));
      w.wk.push_back(trunc_normal<Scalar>({model, cfg.head_dim}, rng, stddev));
      w.wv.push_back(trunc_normal<Scalar>({model, cfg.head_dim}, rng, stddev));
    }
    w.wo = trunc_normal<Scalar>({model, model}, rng, stddev);
    return w;
  }
};

// Head j runs the dilated pipeline at its own offset class; concatenated
// head outputs are mixed by the output projection. Full coverage is
// enforced so no output row is left unwritten by every head.
template <class Scalar>
Tensor<Scalar> multi_head_dilated(const Tensor<Scalar>& x, const MultiHeadWeights<Scalar>& weights,
                                  const AttentionConfig& cfg, int workers = 1) {
  cfg.validate(/*require_full_coverage=*/true);
  weights.validate(cfg);
  detail::require_rank2(x, "multi_head_dilated");
  if (x.rows() != cfg.seq_len || x.cols() != cfg.model_dim())
    throw dimension_error(msg("multi_head_dilated: input ", shape_str(x.shape()), ", expected [", cfg.seq_len, "x",
                              cfg.model_dim(), "]"));

  Tensor<Scalar> concat({cfg.seq_len, cfg.model_dim()});
  for (int j = 0; j < cfg.num_heads; ++j) {
    const auto js = static_cast<std::size_t>(j);
    Tensor<Scalar> q = matmul(x, weights.wq[js]);
    Tensor<Scalar> k = matmul(x, weights.wk[js]);
    Tensor<Scalar> v = matmul(x, weights.wv[js]);
    Tensor<Scalar> head = dilated_attention(q, k, v, cfg, cfg.head_offsets[js], workers);
    concat.mat().block(0, static_cast<Index>(j) * cfg.head_dim, cfg.seq_len, cfg.head_dim) = head.mat();
  }
  return matmul(concat, weights.wo);
}

// Analytic multiplication counts for the score and value products.
// Convention: multiplications only, additions excluded.
struct FlopCount {
  std::uint64_t dense_mults = 0;
  std::uint64_t dilated_mults = 0;
  double ratio = 0.0;  // dense / dilated
};

inline FlopCount flop_count(const AttentionConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::uint64_t>(cfg.seq_len);
  const auto d = static_cast<std::uint64_t>(cfg.head_dim);
  const auto h = static_cast<std::uint64_t>(cfg.num_heads);
  FlopCount fc;
  fc.dense_mults = h * 2 * n * n * d;
  for (int j = 0; j < cfg.num_heads; ++j) {
    for (Index i = 0; i < cfg.num_segments(); ++i) {
      const auto view =
          make_segment_view(cfg.seq_len, cfg.segment_len, cfg.interval, i, cfg.head_offsets[static_cast<std::size_t>(j)]);
      const auto m = static_cast<std::uint64_t>(view.row_indices.size());
      fc.dilated_mults += 2 * m * m * d;
    }
  }
  fc.ratio = static_cast<double>(fc.dense_mults) / static_cast<double>(fc.dilated_mults);
  return fc;
}

inline std::string flop_csv_header() { return "N,w,r,h,d,dense_mults,dilated_mults,ratio"; }

inline std::string flop_csv_row(const AttentionConfig& cfg, const FlopCount& fc) {
  return msg(cfg.seq_len, ",", cfg.segment_len, ",", cfg.interval, ",", cfg.num_heads, ",", cfg.head_dim, ",",
             fc.dense_mults, ",", fc.dilated_mults, ",", fc.ratio);
}

}  // namespace attnkit
