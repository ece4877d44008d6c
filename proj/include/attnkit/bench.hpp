#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnkit/attention.hpp"
#include "attnkit/tensor.hpp"

namespace attnkit {

// One geometry under test. The kernel field picks the per-segment kernel
// for the dilated side; the dense baseline is always the one-shot kernel.
struct BenchConfigEntry {
  std::string id;
  AttentionConfig attn;
};

struct BenchRow {
  std::string id;
  Index n = 0, w = 0, r = 0;
  int h = 0;
  Index d = 0;
  std::string kernel;
  int batch = 0;
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
  std::uint64_t dense_mults = 0, dilated_mults = 0;
  double measured_speedup = 0;  // dense median / dilated median
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int workers = 1;
  std::string dtype;
};

struct SweepConfig {
  std::vector<BenchConfigEntry> configs;
  std::vector<int> batch_sizes{1};
  int repeats = 5;
  int workers = 1;
  std::uint64_t seed = 0;
  std::int64_t quantize_ns = 0;  // test hook: fake a coarse clock, 0 = real resolution
};

namespace detail {

// Times fn over `repeats` samples after `warmup` unrecorded runs. The
// quantize hook floors each sample to a multiple of quantize_ns so tests
// can simulate a clock too coarse for the workload; samples landing on
// fewer than 3 distinct tick values abort the measurement.
inline std::vector<double> time_samples_ms(const std::function<void()>& fn, int repeats, std::int64_t quantize_ns,
                                           int warmup = 3) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<std::int64_t> ns(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    auto dt = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    if (quantize_ns > 0) dt -= dt % quantize_ns;
    ns[static_cast<std::size_t>(i)] = dt;
  }
  auto distinct = ns;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 3)
    throw benchmark_error(msg("timer resolution too coarse: ", repeats, " repeats landed on only ", distinct.size(),
                              " distinct tick values; lengthen the workload or use a finer clock"));
  std::vector<double> ms(ns.size());
  for (std::size_t i = 0; i < ns.size(); ++i) ms[i] = static_cast<double>(ns[i]) / 1e6;
  return ms;
}

inline double percentile(std::vector<double> sorted_samples, double pct) {
  const auto k = static_cast<double>(sorted_samples.size() - 1);
  const auto idx = static_cast<std::size_t>(std::llround(pct / 100.0 * k));
  return sorted_samples[idx];
}

}  // namespace detail

// Times the dense baseline against the full dilated pipeline on identical
// random inputs, one pass per batch element per head. repeats must be at
// least 3 so the percentile spread means something.
template <class Scalar>
BenchReport bench_attention(const BenchConfigEntry& entry, const std::vector<int>& batch_sizes, int repeats,
                            int workers = 1, std::uint64_t seed = 0, std::int64_t quantize_ns = 0) {
  if (repeats < 3) throw benchmark_error(msg("need at least 3 repeats, got ", repeats));
  const AttentionConfig& cfg = entry.attn;
  cfg.validate();
  const auto fc = flop_count(cfg);

  BenchReport report;
  report.workers = workers;
  report.dtype = dtype_name(dtype_of<Scalar>());

  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Tensor<Scalar>> q, k, v;
  for (int j = 0; j < cfg.num_heads; ++j) {
    q.push_back(randn<Scalar>({cfg.seq_len, cfg.head_dim}, rng));
    k.push_back(randn<Scalar>({cfg.seq_len, cfg.head_dim}, rng));
    v.push_back(randn<Scalar>({cfg.seq_len, cfg.head_dim}, rng));
  }

  for (int batch : batch_sizes) {
    if (batch < 1) throw config_error(msg("bench: batch size must be positive, got ", batch));
    volatile Scalar sink = Scalar(0);
    auto dense_pass = [&]() {
      for (int b = 0; b < batch; ++b)
        for (int j = 0; j < cfg.num_heads; ++j) {
          auto o = naive_attention(q[static_cast<std::size_t>(j)], k[static_cast<std::size_t>(j)],
                                   v[static_cast<std::size_t>(j)]);
          sink = sink + o[0];
        }
    };
    auto dilated_pass = [&]() {
      for (int b = 0; b < batch; ++b)
        for (int j = 0; j < cfg.num_heads; ++j) {
          auto o = dilated_attention(q[static_cast<std::size_t>(j)], k[static_cast<std::size_t>(j)],
                                     v[static_cast<std::size_t>(j)], cfg,
                                     cfg.head_offsets[static_cast<std::size_t>(j)], workers);
          sink = sink + o[0];
        }
    };
    auto dense_ms = detail::time_samples_ms(dense_pass, repeats, quantize_ns);
    auto dilated_ms = detail::time_samples_ms(dilated_pass, repeats, quantize_ns);
    std::sort(dense_ms.begin(), dense_ms.end());
    std::sort(dilated_ms.begin(), dilated_ms.end());

    BenchRow row;
    row.id = entry.id;
    row.n = cfg.seq_len;
    row.w = cfg.segment_len;
    row.r = cfg.interval;
    row.h = cfg.num_heads;
    row.d = cfg.head_dim;
    row.kernel = kernel_name(cfg.kernel);
    row.batch = batch;
    row.median_ms = detail::percentile(dilated_ms, 50);
    row.p10_ms = detail::percentile(dilated_ms, 10);
    row.p90_ms = detail::percentile(dilated_ms, 90);
    row.dense_mults = fc.dense_mults;
    row.dilated_mults = fc.dilated_mults;
    row.measured_speedup = detail::percentile(dense_ms, 50) / row.median_ms;
    report.rows.push_back(row);
  }
  return report;
}

// Deterministic row order: configs in file order, batch sizes within each.
template <class Scalar>
BenchReport run_sweep(const SweepConfig& sweep) {
  BenchReport report;
  report.workers = sweep.workers;
  report.dtype = dtype_name(dtype_of<Scalar>());
  std::uint64_t salt = 0;
  for (const auto& entry : sweep.configs) {
    auto part = bench_attention<Scalar>(entry, sweep.batch_sizes, sweep.repeats, sweep.workers, sweep.seed + salt++,
                                        sweep.quantize_ns);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
  }
  return report;
}

inline std::string bench_csv_header() {
  return "id,N,w,r,h,d,kernel,batch,median_ms,p10_ms,p90_ms,dense_mults,dilated_mults,measured_speedup";
}

inline std::string bench_csv_row(const BenchRow& row) {
  return msg(row.id, ",", row.n, ",", row.w, ",", row.r, ",", row.h, ",", row.d, ",", row.kernel, ",", row.batch,
             ",", row.median_ms, ",", row.p10_ms, ",", row.p90_ms, ",", row.dense_mults, ",", row.dilated_mults, ",",
             row.measured_speedup);
}

// Trailing comment lines carry the environment; parsers that honor '#'
// comments read the table unchanged.
inline void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << bench_csv_header() << "\n";
  for (const auto& row : report.rows) out << bench_csv_row(row) << "\n";
  out << "# workers=" << report.workers << "\n";
  out << "# dtype=" << report.dtype << "\n";
  out << "# flop_convention=multiplications_only\n";
}

inline void write_bench_csv(const std::string& path, const BenchReport& report) {
  std::ofstream out(path);
  if (!out) throw io_error(msg("cannot write ", path));
  write_bench_csv(out, report);
}

inline SweepConfig sweep_config_from_json(const nlohmann::json& j) {
  SweepConfig sweep;
  try {
    sweep.repeats = j.value("repeats", sweep.repeats);
    sweep.workers = j.value("workers", sweep.workers);
    sweep.seed = j.value("seed", sweep.seed);
    sweep.quantize_ns = j.value("quantize_ns", sweep.quantize_ns);
    if (j.contains("batch_sizes")) sweep.batch_sizes = j.at("batch_sizes").get<std::vector<int>>();
    for (const auto& e : j.value("configs", nlohmann::json::array())) {
      BenchConfigEntry entry;
      entry.id = e.value("id", msg("config", sweep.configs.size()));
      entry.attn.seq_len = e.at("N").get<Index>();
      entry.attn.segment_len = e.at("w").get<Index>();
      entry.attn.interval = e.at("r").get<Index>();
      entry.attn.num_heads = e.value("h", 1);
      entry.attn.head_dim = e.at("d").get<Index>();
      entry.attn.head_offsets = AttentionConfig::spread_offsets(entry.attn.num_heads, entry.attn.interval);
      const std::string kernel = e.value("kernel", "naive");
      if (kernel == "naive")
        entry.attn.kernel = Kernel::naive;
      else if (kernel == "tiled")
        entry.attn.kernel = Kernel::tiled;
      else
        throw config_error(msg("bench: unknown kernel ", kernel));
      entry.attn.tile_size = e.value("tile_size", Index{8});
      entry.attn.validate();
      sweep.configs.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw config_error(msg("bench config: ", ex.what()));
  }
  return sweep;
}

// Spearman rank correlation with tie-averaged ranks; the sweep property
// tests rank measured speedups against analytic mult ratios.
inline double spearman_rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw contract_error("spearman: need two equal-length series of at least 2 points");
  auto ranks = [](const std::vector<double>& x) {
    const auto n = x.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return x[l] < x[r]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
      const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mean_rank;
      i = j + 1;
    }
    return rank;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0 || vb == 0) throw contract_error("spearman: a series is constant, correlation undefined");
  return cov / std::sqrt(va * vb);
}

}  // namespace attnkit
