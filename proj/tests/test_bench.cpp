#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "attnkit/bench.hpp"

using namespace attnkit;

namespace {

BenchConfigEntry entry_of(const char* id, Index n, Index w, Index r, int h, Index d) {
  BenchConfigEntry e;
  e.id = id;
  e.attn.seq_len = n;
  e.attn.segment_len = w;
  e.attn.interval = r;
  e.attn.num_heads = h;
  e.attn.head_dim = d;
  e.attn.head_offsets = AttentionConfig::spread_offsets(h, r);
  return e;
}

}  // namespace

TEST_CASE("fewer than three repeats cannot be summarized") {
  auto e = entry_of("tiny", 32, 16, 2, 1, 8);
  CHECK_THROWS_AS(bench_attention<float>(e, {1}, 2), benchmark_error);
}

TEST_CASE("a clock coarser than the workload is reported, not averaged") {
  auto e = entry_of("tiny", 32, 16, 2, 1, 8);
  try {
    bench_attention<float>(e, {1}, 5, 1, 0, /*quantize_ns=*/3'600'000'000'000LL);
    FAIL("expected benchmark_error");
  } catch (const benchmark_error& ex) {
    CHECK(std::string(ex.what()).find("resolution") != std::string::npos);
  }
}

TEST_CASE("identical work measures near parity") {
  auto e = entry_of("parity", 256, 256, 1, 1, 16);
  auto report = bench_attention<float>(e, {1}, 7);
  REQUIRE(report.rows.size() == 1);
  const auto& row = report.rows.front();
  CHECK(row.measured_speedup > 0.8);
  CHECK(row.measured_speedup < 1.25);
  CHECK(row.dense_mults == row.dilated_mults);
}

TEST_CASE("rows carry the analytic multiplication counts verbatim") {
  auto e = entry_of("counts", 128, 32, 2, 2, 8);
  auto report = bench_attention<float>(e, {1, 2}, 3);
  const auto fc = flop_count(e.attn);
  for (const auto& row : report.rows) {
    CHECK(row.dense_mults == fc.dense_mults);
    CHECK(row.dilated_mults == fc.dilated_mults);
  }
}

TEST_CASE("median sits inside its own percentile band") {
  auto e = entry_of("band", 128, 32, 2, 1, 8);
  auto report = bench_attention<float>(e, {1}, 9);
  for (const auto& row : report.rows) {
    CHECK(row.p10_ms <= row.median_ms);
    CHECK(row.median_ms <= row.p90_ms);
    CHECK(row.p10_ms > 0.0);
  }
}

TEST_CASE("an empty sweep still writes a parsable header") {
  SweepConfig sweep;
  sweep.configs.clear();
  auto report = run_sweep<float>(sweep);
  std::ostringstream out;
  write_bench_csv(out, report);
  const auto text = out.str();
  CHECK(text.find(bench_csv_header()) == 0);
  CHECK(text.find("# workers=1") != std::string::npos);
  CHECK(text.find("# dtype=f32") != std::string::npos);
  CHECK(text.find("# flop_convention=multiplications_only") != std::string::npos);
}

TEST_CASE("sweep rows come out in config-major batch-minor order") {
  SweepConfig sweep;
  sweep.configs = {entry_of("alpha", 64, 16, 2, 1, 8), entry_of("beta", 64, 32, 2, 1, 8)};
  sweep.batch_sizes = {1, 2};
  sweep.repeats = 3;
  auto report = run_sweep<float>(sweep);
  REQUIRE(report.rows.size() == 4);
  CHECK(report.rows[0].id == "alpha");
  CHECK(report.rows[0].batch == 1);
  CHECK(report.rows[1].id == "alpha");
  CHECK(report.rows[1].batch == 2);
  CHECK(report.rows[2].id == "beta");
  CHECK(report.rows[3].id == "beta");
}

TEST_CASE("the same seed reproduces every non-timing column") {
  SweepConfig sweep;
  sweep.configs = {entry_of("alpha", 64, 16, 2, 1, 8), entry_of("beta", 64, 32, 4, 2, 8)};
  sweep.batch_sizes = {1};
  sweep.repeats = 3;
  sweep.seed = 42;
  auto a = run_sweep<float>(sweep);
  auto b = run_sweep<float>(sweep);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].id == b.rows[i].id);
    CHECK(a.rows[i].n == b.rows[i].n);
    CHECK(a.rows[i].dense_mults == b.rows[i].dense_mults);
    CHECK(a.rows[i].dilated_mults == b.rows[i].dilated_mults);
    CHECK(a.rows[i].kernel == b.rows[i].kernel);
  }
}

TEST_CASE("sweep configs parse from structured text") {
  auto j = nlohmann::json::parse(R"({
    "repeats": 4,
    "workers": 2,
    "seed": 7,
    "batch_sizes": [1, 8],
    "configs": [
      {"id": "big", "N": 4096, "w": 512, "r": 2, "h": 1, "d": 64},
      {"id": "flash", "N": 256, "w": 64, "r": 2, "d": 16, "kernel": "tiled", "tile_size": 16}
    ]
  })");
  auto sweep = sweep_config_from_json(j);
  CHECK(sweep.repeats == 4);
  CHECK(sweep.workers == 2);
  CHECK(sweep.seed == 7);
  CHECK(sweep.batch_sizes == std::vector<int>{1, 8});
  REQUIRE(sweep.configs.size() == 2);
  CHECK(sweep.configs[0].attn.seq_len == 4096);
  CHECK(sweep.configs[1].attn.kernel == Kernel::tiled);
  CHECK(sweep.configs[1].attn.tile_size == 16);

  CHECK_THROWS_AS(sweep_config_from_json(nlohmann::json::parse(R"({"configs":[{"N":64}]})")), config_error);
  CHECK_THROWS_AS(
      sweep_config_from_json(nlohmann::json::parse(
          R"({"configs":[{"N":64,"w":16,"r":2,"d":8,"kernel":"warp"}]})")),
      config_error);
}

TEST_CASE("rank correlation matches hand results") {
  std::vector<double> up{1, 2, 3, 4, 5};
  std::vector<double> also_up{2, 8, 9, 20, 50};
  std::vector<double> down{10, 8, 6, 4, 2};
  CHECK(spearman_rank_correlation(up, also_up) == doctest::Approx(1.0));
  CHECK(spearman_rank_correlation(up, down) == doctest::Approx(-1.0));
  std::vector<double> noisy{1, 3, 2, 4, 5};
  CHECK(spearman_rank_correlation(up, noisy) == doctest::Approx(0.9));
  CHECK_THROWS_AS(spearman_rank_correlation(up, {1, 1, 1, 1, 1}), contract_error);
}
