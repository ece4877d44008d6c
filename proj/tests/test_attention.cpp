#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "attnkit/attention.hpp"
#include "attnkit/oracles.hpp"
#include "attnkit/tensor.hpp"

using namespace attnkit;

namespace {

AttentionConfig basic_cfg(Index n, Index w, Index r, int h = 1, Index d = 4) {
  AttentionConfig cfg;
  cfg.seq_len = n;
  cfg.segment_len = w;
  cfg.interval = r;
  cfg.num_heads = h;
  cfg.head_dim = d;
  cfg.head_offsets = AttentionConfig::spread_offsets(h, r);
  return cfg;
}

std::vector<Index> divisors(Index n) {
  std::vector<Index> out;
  for (Index k = 1; k <= n; ++k)
    if (n % k == 0) out.push_back(k);
  return out;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent geometry") {
  CHECK_THROWS_AS(basic_cfg(8, 9, 1).validate(), config_error);   // w > N
  CHECK_THROWS_AS(basic_cfg(8, 4, 5).validate(), config_error);   // r > w
  CHECK_THROWS_AS(basic_cfg(0, 4, 2).validate(), config_error);   // empty sequence
  auto cfg = basic_cfg(8, 4, 2);
  cfg.head_offsets = {2};  // outside [0, r)
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.head_offsets = {0, 0};  // count mismatch with h=1
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("full coverage needs every offset class represented") {
  auto cfg = basic_cfg(8, 4, 2, /*h=*/2);
  cfg.head_offsets = {0, 0};
  CHECK_NOTHROW(cfg.validate(false));
  CHECK_THROWS_AS(cfg.validate(true), config_error);
  cfg.head_offsets = {0, 1};
  CHECK_NOTHROW(cfg.validate(true));
}

TEST_CASE("single query attends to nothing but itself") {
  Rng rng(11);
  auto q = randn<double>({1, 4}, rng);
  auto k = randn<double>({1, 4}, rng);
  auto v = randn<double>({1, 4}, rng);
  auto out = naive_attention(q, k, v);
  CHECK(bitwise_equal(out, v));
}

TEST_CASE("equal scores average the value rows") {
  Tensor<double> q = Tensor<double>::from_rows({{1, 0, 0, 0}});
  Tensor<double> k = Tensor<double>::from_rows({{0, 1, 0, 0}, {0, 0, 1, 0}});
  Tensor<double> v = Tensor<double>::from_rows({{2, 4, 6, 8}, {4, 8, 10, 12}});
  auto out = naive_attention(q, k, v);
  CHECK(out(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(out(0, 1) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(out(0, 2) == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(out(0, 3) == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("dense kernel matches the definitional loop reference") {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    auto q = randn<double>({8, 4}, rng);
    auto k = randn<double>({8, 4}, rng);
    auto v = randn<double>({8, 4}, rng);
    CHECK(max_abs_diff(naive_attention(q, k, v), oracle::attention_loops(q, k, v)) <= 1e-12);
  }
}

TEST_CASE("tiled kernel streams to the same answer as the dense one") {
  Rng rng(202);
  auto q = randn<double>({8, 4}, rng);
  auto k = randn<double>({8, 4}, rng);
  auto v = randn<double>({8, 4}, rng);
  auto dense = naive_attention(q, k, v);
  CHECK(max_abs_diff(tiled_attention(q, k, v, 1), dense) <= 1e-12);
  CHECK(max_abs_diff(tiled_attention(q, k, v, 3), dense) <= 1e-12);
}

TEST_CASE("tile covering all keys is the one-shot path, bit for bit") {
  Rng rng(203);
  auto q = randn<float>({16, 8}, rng);
  auto k = randn<float>({16, 8}, rng);
  auto v = randn<float>({16, 8}, rng);
  CHECK(bitwise_equal(tiled_attention(q, k, v, Index{16}), naive_attention(q, k, v)));
  CHECK(bitwise_equal(tiled_attention(q, k, v, Index{100}), naive_attention(q, k, v)));
}

TEST_CASE("tiled kernel equals dense across seeds, tile sizes, and lengths") {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 1);
    const Index n = 8 + static_cast<Index>(rng() % 121);  // up to 128
    auto q = randn<float>({n, 8}, rng);
    auto k = randn<float>({n, 8}, rng);
    auto v = randn<float>({n, 8}, rng);
    auto dense = naive_attention(q, k, v);
    for (Index tile : {Index{1}, Index{2}, Index{8}, n}) {
      CAPTURE(seed);
      CAPTURE(n);
      CAPTURE(tile);
      CHECK(max_abs_diff(tiled_attention(q, k, v, tile), dense) <= 1e-5f);
    }
  }
}

TEST_CASE("score outliers stay finite in the streaming kernel") {
  Rng rng(204);
  auto q = randn<float>({4, 4}, rng, 0.1f);
  auto k = randn<float>({6, 4}, rng, 0.1f);
  auto v = randn<float>({6, 4}, rng);
  q(0, 0) = 100.0f;
  k(3, 0) = 100.0f;  // score q0.k3 = 1e4 before scaling
  auto out = tiled_attention(q, k, v, Index{2}, nullptr, /*scale_scores=*/false);
  CHECK(out.all_finite());
  auto ref64 = naive_attention(q.cast<double>(), k.cast<double>(), v.cast<double>(), false);
  CHECK(max_abs_diff(out.cast<double>(), ref64) <= 1e-5);
}

TEST_CASE("tiled kernel never holds more than one score block") {
  Rng rng(205);
  const Index n = 32, tile = 4;
  auto q = randn<float>({n, 8}, rng);
  auto k = randn<float>({n, 8}, rng);
  auto v = randn<float>({n, 8}, rng);
  TiledKernelStats stats;
  tiled_attention(q, k, v, tile, &stats);
  CHECK(stats.peak_score_scalars == static_cast<std::size_t>(n * tile));
  CHECK(stats.score_allocs == 1);
  CHECK(stats.live_score_scalars == 0);
}

TEST_CASE("segment slicing keeps every r-th row from the offset") {
  Rng rng(301);
  auto x = randn<double>({8, 4}, rng);
  auto cfg = basic_cfg(8, 4, 2);
  auto slice = sparsify_segment(x, cfg, 1, 0);
  CHECK(slice.view.row_indices == std::vector<Index>{4, 6});
  CHECK(slice.rows.rows() == 2);
  for (Index c = 0; c < 4; ++c) {
    CHECK(slice.rows(0, c) == x(4, c));
    CHECK(slice.rows(1, c) == x(6, c));
  }
}

TEST_CASE("interval one keeps the whole segment unchanged") {
  Rng rng(302);
  auto x = randn<double>({8, 4}, rng);
  auto cfg = basic_cfg(8, 4, 1);
  auto slice = sparsify_segment(x, cfg, 0, 0);
  CHECK(slice.view.row_indices == std::vector<Index>{0, 1, 2, 3});
  for (Index i = 0; i < 4; ++i)
    for (Index c = 0; c < 4; ++c) CHECK(slice.rows(i, c) == x(i, c));
}

TEST_CASE("short tail segment clips the stride walk") {
  Rng rng(303);
  auto x = randn<double>({10, 4}, rng);
  auto cfg = basic_cfg(10, 4, 2);
  auto slice = sparsify_segment(x, cfg, 2, 1);
  CHECK(slice.view.row_indices == std::vector<Index>{9});
  CHECK(slice.rows.rows() == 1);
  CHECK(slice.rows(0, 2) == x(9, 2));
}

TEST_CASE("segment view walk stays inside its segment at stride r") {
  Rng rng(304);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 4 + static_cast<Index>(rng() % 61);
    const Index w = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(n));
    const Index r = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(w));
    const Index n_seg = (n + w - 1) / w;
    const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(n_seg));
    const Index g = static_cast<Index>(rng() % static_cast<std::uint64_t>(r));
    auto view = make_segment_view(n, w, r, i, g);
    const Index lo = i * w, hi = std::min(lo + w, n);
    for (std::size_t t = 0; t < view.row_indices.size(); ++t) {
      CHECK(view.row_indices[t] >= lo);
      CHECK(view.row_indices[t] < hi);
      if (t > 0) CHECK(view.row_indices[t] - view.row_indices[t - 1] == r);
    }
    const Index seg_rows = hi - lo;
    const Index expect_m = g >= seg_rows ? 0 : (seg_rows - g + r - 1) / r;
    CHECK(static_cast<Index>(view.row_indices.size()) == expect_m);
  }
}

TEST_CASE("segment index and offset are bounds-checked") {
  Rng rng(305);
  auto x = randn<double>({8, 4}, rng);
  auto cfg = basic_cfg(8, 4, 2);
  CHECK_THROWS_AS(sparsify_segment(x, cfg, 2, 0), std::out_of_range);
  CHECK_THROWS_AS(sparsify_segment(x, cfg, -1, 0), std::out_of_range);
  CHECK_THROWS_AS(sparsify_segment(x, cfg, 0, 2), std::out_of_range);
}

TEST_CASE("one kept row passes its value straight through") {
  Rng rng(401);
  auto x = randn<double>({4, 4}, rng);
  auto cfg = basic_cfg(4, 4, 4);
  auto q = sparsify_segment(x, cfg, 0, 1);
  auto k = q, v = q;
  auto out = segment_attention(q, k, v, Kernel::naive);
  CHECK(out.rows() == 1);
  CHECK(bitwise_equal(out, q.rows));
}

TEST_CASE("segment attention is dense attention on the kept rows") {
  Rng rng(402);
  auto cfg = basic_cfg(16, 8, 2);
  auto qx = randn<double>({16, 4}, rng);
  auto kx = randn<double>({16, 4}, rng);
  auto vx = randn<double>({16, 4}, rng);
  auto qs = sparsify_segment(qx, cfg, 1, 0);
  auto ks = sparsify_segment(kx, cfg, 1, 0);
  auto vs = sparsify_segment(vx, cfg, 1, 0);
  auto out = segment_attention(qs, ks, vs, Kernel::naive);
  CHECK(bitwise_equal(out, naive_attention(qs.rows, ks.rows, vs.rows)));
  CHECK(max_abs_diff(out, oracle::attention_loops(qs.rows, ks.rows, vs.rows)) <= 1e-12);
}

TEST_CASE("slices from different views refuse to attend") {
  Rng rng(403);
  auto x = randn<double>({16, 4}, rng);
  auto cfg = basic_cfg(16, 8, 2);
  auto a = sparsify_segment(x, cfg, 0, 0);
  auto b = sparsify_segment(x, cfg, 1, 0);
  CHECK_THROWS_AS(segment_attention(a, b, a, Kernel::naive), contract_error);
}

TEST_CASE("permuting kept key and value rows together changes nothing") {
  Rng rng(404);
  auto cfg = basic_cfg(16, 16, 2);
  auto qx = randn<double>({16, 4}, rng);
  auto kx = randn<double>({16, 4}, rng);
  auto vx = randn<double>({16, 4}, rng);
  auto qs = sparsify_segment(qx, cfg, 0, 0);
  auto ks = sparsify_segment(kx, cfg, 0, 0);
  auto vs = sparsify_segment(vx, cfg, 0, 0);
  auto base = segment_attention(qs, ks, vs, Kernel::naive);

  std::vector<Index> perm(static_cast<std::size_t>(ks.rows.rows()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  SegmentSlice<double> kp{Tensor<double>({ks.rows.rows(), 4}), ks.view};
  SegmentSlice<double> vp{Tensor<double>({vs.rows.rows(), 4}), vs.view};
  for (std::size_t t = 0; t < perm.size(); ++t) {
    kp.rows.mat().row(static_cast<Index>(t)) = ks.rows.mat().row(perm[t]);
    vp.rows.mat().row(static_cast<Index>(t)) = vs.rows.mat().row(perm[t]);
  }
  auto permuted = segment_attention(qs, kp, vp, Kernel::naive);
  CHECK(max_abs_diff(base, permuted) <= 1e-12);
}

TEST_CASE("one all-covering segment recomposes to itself") {
  Rng rng(501);
  auto x = randn<double>({6, 3}, rng);
  auto view = make_segment_view(6, 6, 1, 0, 0);
  std::vector<std::pair<Tensor<double>, SegmentView>> parts;
  parts.emplace_back(x, view);
  CHECK(bitwise_equal(recompose(parts, 6), x));
}

TEST_CASE("disjoint segments recompose by position") {
  Rng rng(502);
  auto a = randn<double>({4, 3}, rng);
  auto b = randn<double>({4, 3}, rng);
  std::vector<std::pair<Tensor<double>, SegmentView>> parts;
  parts.emplace_back(a, make_segment_view(8, 4, 1, 0, 0));
  parts.emplace_back(b, make_segment_view(8, 4, 1, 1, 0));
  auto out = recompose(parts, 8);
  for (Index i = 0; i < 4; ++i)
    for (Index c = 0; c < 3; ++c) {
      CHECK(out(i, c) == a(i, c));
      CHECK(out(i + 4, c) == b(i, c));
    }
}

TEST_CASE("rows kept by no view stay zero after recomposition") {
  Rng rng(503);
  auto x = randn<double>({8, 4}, rng);
  auto cfg = basic_cfg(8, 4, 2);
  std::vector<std::pair<Tensor<double>, SegmentView>> parts;
  for (Index i = 0; i < cfg.num_segments(); ++i) {
    auto s = sparsify_segment(x, cfg, i, 0);
    parts.emplace_back(s.rows, s.view);
  }
  auto out = recompose(parts, 8);
  for (Index row : {1, 3, 5, 7})
    for (Index c = 0; c < 4; ++c) CHECK(out(row, c) == 0.0);
  for (Index row : {0, 2, 4, 6})
    for (Index c = 0; c < 4; ++c) CHECK(out(row, c) == x(row, c));
}

TEST_CASE("overlapping views would double-count and are rejected") {
  Rng rng(504);
  auto a = randn<double>({4, 3}, rng);
  std::vector<std::pair<Tensor<double>, SegmentView>> parts;
  parts.emplace_back(a, make_segment_view(8, 4, 1, 0, 0));
  parts.emplace_back(a, make_segment_view(8, 4, 1, 0, 0));
  CHECK_THROWS_AS(recompose(parts, 8), contract_error);
}

TEST_CASE("whole-sequence segment with no sparsification is dense attention") {
  Rng rng(601);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = randn<float>({12, 4}, rng);
    auto k = randn<float>({12, 4}, rng);
    auto v = randn<float>({12, 4}, rng);
    auto cfg = basic_cfg(12, 12, 1);
    CHECK(max_abs_diff(dilated_attention(q, k, v, cfg, 0), naive_attention(q, k, v)) <= 1e-6f);
  }
}

TEST_CASE("pipeline agrees with the masked dense reference") {
  Rng rng(602);
  auto cfg = basic_cfg(16, 4, 2);
  auto q = randn<double>({16, 4}, rng);
  auto k = randn<double>({16, 4}, rng);
  auto v = randn<double>({16, 4}, rng);
  for (Index g : {Index{0}, Index{1}}) {
    CHECK(max_abs_diff(dilated_attention(q, k, v, cfg, g), oracle::masked_dense_dilated(q, k, v, cfg, g)) <= 1e-10);
  }
}

TEST_CASE("pipeline agrees with the masked reference across geometries") {
  Rng rng(603);
  for (Index n : {Index{8}, Index{16}, Index{32}}) {
    auto q = randn<double>({n, 4}, rng);
    auto k = randn<double>({n, 4}, rng);
    auto v = randn<double>({n, 4}, rng);
    for (Index w : divisors(n))
      for (Index r : divisors(w)) {
        auto cfg = basic_cfg(n, w, r);
        const Index g = r > 1 ? r - 1 : 0;
        CAPTURE(n);
        CAPTURE(w);
        CAPTURE(r);
        CHECK(max_abs_diff(dilated_attention(q, k, v, cfg, g), oracle::masked_dense_dilated(q, k, v, cfg, g)) <=
              1e-10);
      }
  }
}

TEST_CASE("worker pool output is bitwise identical to serial") {
  Rng rng(604);
  auto cfg = basic_cfg(64, 16, 2);
  auto q = randn<double>({64, 8}, rng);
  auto k = randn<double>({64, 8}, rng);
  auto v = randn<double>({64, 8}, rng);
  auto serial = dilated_attention(q, k, v, cfg, 1, /*workers=*/1);
  auto pooled = dilated_attention(q, k, v, cfg, 1, /*workers=*/4);
  CHECK(bitwise_equal(serial, pooled));
}

TEST_CASE("tiled kernel inside the pipeline matches the naive kernel") {
  Rng rng(605);
  auto cfg = basic_cfg(32, 16, 2);
  auto q = randn<double>({32, 8}, rng);
  auto k = randn<double>({32, 8}, rng);
  auto v = randn<double>({32, 8}, rng);
  auto naive_out = dilated_attention(q, k, v, cfg, 0);
  cfg.kernel = Kernel::tiled;
  cfg.tile_size = 2;
  CHECK(max_abs_diff(dilated_attention(q, k, v, cfg, 0), naive_out) <= 1e-12);
}

TEST_CASE("offset classes partition the output rows across heads") {
  Rng rng(701);
  auto cfg = basic_cfg(8, 4, 2, /*h=*/2, /*d=*/4);
  auto q = randn<double>({8, 4}, rng);
  auto k = randn<double>({8, 4}, rng);
  auto v = randn<double>({8, 4}, rng);
  auto head0 = dilated_attention(q, k, v, cfg, cfg.head_offsets[0]);
  auto head1 = dilated_attention(q, k, v, cfg, cfg.head_offsets[1]);
  for (Index row = 0; row < 8; ++row) {
    const double n0 = head0.mat().row(row).cwiseAbs().maxCoeff();
    const double n1 = head1.mat().row(row).cwiseAbs().maxCoeff();
    if (row % 2 == 0) {
      CHECK(n0 > 0.0);
      CHECK(n1 == 0.0);
    } else {
      CHECK(n0 == 0.0);
      CHECK(n1 > 0.0);
    }
  }
}

TEST_CASE("full head coverage leaves no output row zero") {
  Rng rng(702);
  for (Index r : {Index{1}, Index{2}, Index{4}}) {
    auto cfg = basic_cfg(16, 8, r, /*h=*/static_cast<int>(r), /*d=*/4);
    auto x = randn<double>({16, cfg.model_dim()}, rng);
    auto w = MultiHeadWeights<double>::random(cfg, rng, 0.5);
    auto out = multi_head_dilated(x, w, cfg);
    for (Index row = 0; row < 16; ++row) CHECK(out.mat().row(row).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("coverage violation in the head ensemble is rejected") {
  Rng rng(703);
  auto cfg = basic_cfg(16, 8, 2, /*h=*/2, /*d=*/4);
  cfg.head_offsets = {0, 0};
  auto x = randn<double>({16, cfg.model_dim()}, rng);
  auto w = MultiHeadWeights<double>::random(cfg, rng);
  CHECK_THROWS_AS(multi_head_dilated(x, w, cfg), config_error);
}

TEST_CASE("interval one makes every head a segment-dense head") {
  Rng rng(704);
  auto cfg = basic_cfg(12, 4, 1, /*h=*/2, /*d=*/4);
  auto q = randn<double>({12, 4}, rng);
  auto k = randn<double>({12, 4}, rng);
  auto v = randn<double>({12, 4}, rng);
  auto out = dilated_attention(q, k, v, cfg, 0);
  // reference: dense attention inside each whole segment
  for (Index i = 0; i < 3; ++i) {
    Tensor<double> qseg({4, 4}), kseg({4, 4}), vseg({4, 4});
    qseg.mat() = q.mat().block(i * 4, 0, 4, 4);
    kseg.mat() = k.mat().block(i * 4, 0, 4, 4);
    vseg.mat() = v.mat().block(i * 4, 0, 4, 4);
    auto ref = naive_attention(qseg, kseg, vseg);
    Tensor<double> got({4, 4});
    got.mat() = out.mat().block(i * 4, 0, 4, 4);
    CHECK(max_abs_diff(got, ref) <= 1e-12);
  }
}

TEST_CASE("degenerate geometry counts dense and sparse work the same") {
  auto cfg = basic_cfg(64, 64, 1);
  auto fc = flop_count(cfg);
  CHECK(fc.dense_mults == fc.dilated_mults);
  CHECK(fc.ratio == 1.0);
}

TEST_CASE("multiplication counts follow the segment geometry") {
  auto cfg = basic_cfg(4096, 512, 2, /*h=*/1, /*d=*/64);
  auto fc = flop_count(cfg);
  CHECK(fc.dense_mults == 2ull * 4096 * 4096 * 64);
  CHECK(fc.dilated_mults == 8ull * 2 * 256 * 256 * 64);
  CHECK(fc.ratio == 32.0);

  auto cfg2 = basic_cfg(4096, 2048, 2, /*h=*/1, /*d=*/64);
  CHECK(flop_count(cfg2).ratio == 8.0);
}

TEST_CASE("cost ratio rises with interval and falls with segment length") {
  double prev = 0.0;
  for (Index r : {Index{1}, Index{2}, Index{4}, Index{8}, Index{16}}) {
    auto fc = flop_count(basic_cfg(64, 16, r));
    CHECK(fc.ratio > prev);
    prev = fc.ratio;
  }
  prev = std::numeric_limits<double>::infinity();
  for (Index w : {Index{4}, Index{8}, Index{16}, Index{32}, Index{64}}) {
    auto fc = flop_count(basic_cfg(64, w, 2));
    CHECK(fc.ratio < prev);
    prev = fc.ratio;
  }
}

TEST_CASE("flop rows serialize with the documented columns") {
  auto cfg = basic_cfg(4096, 512, 2, 1, 64);
  auto fc = flop_count(cfg);
  CHECK(flop_csv_header() == "N,w,r,h,d,dense_mults,dilated_mults,ratio");
  CHECK(flop_csv_row(cfg, fc) == "4096,512,2,1,64,2147483648,67108864,32");
}

TEST_CASE("recompose fault hook perturbs the output when armed") {
  Rng rng(801);
  auto x = randn<double>({6, 3}, rng);
  auto view = make_segment_view(6, 6, 1, 0, 0);
  std::vector<std::pair<Tensor<double>, SegmentView>> parts;
  parts.emplace_back(x, view);
  fault::recompose_perturb.store(true);
  auto perturbed = recompose(parts, 6);
  fault::recompose_perturb.store(false);
  CHECK_FALSE(bitwise_equal(perturbed, x));
  CHECK(bitwise_equal(recompose(parts, 6), x));
}
