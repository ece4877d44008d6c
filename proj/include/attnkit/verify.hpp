#pragma once

// Self-check suites behind the `verify` subcommand. Each suite re-derives a
// slice of the library's behavior from first principles (loop oracles,
// finite differences, hand-evaluated constants) and compares. Suites are
// cheap enough to run on every checkout.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "attnkit/attention.hpp"
#include "attnkit/common.hpp"
#include "attnkit/distill.hpp"
#include "attnkit/oracles.hpp"
#include "attnkit/segloss.hpp"
#include "attnkit/tensor.hpp"
#include "attnkit/tensor_io.hpp"

namespace attnkit {

struct SuiteResult {
  std::string name;
  int checks = 0;
  int failures = 0;
  std::string first_failure;

  bool passed() const { return failures == 0; }
};

namespace verify_detail {

class Checker {
 public:
  explicit Checker(std::string name) { result_.name = std::move(name); }

  void expect(bool ok, const std::string& what) {
    ++result_.checks;
    if (ok) return;
    ++result_.failures;
    if (result_.first_failure.empty()) result_.first_failure = what;
  }

  void expect_near(double got, double want, double tol, const std::string& what) {
    const bool ok = std::isfinite(got) && std::abs(got - want) <= tol;
    expect(ok, msg(what, ": got ", got, ", want ", want, " (tol ", tol, ")"));
  }

  SuiteResult result() const { return result_; }

 private:
  SuiteResult result_;
};

// Central finite differences over every element of every input, against the
// tape gradient. Inputs stay tiny so full coverage is affordable.
template <class Build>
void fd_check(Checker& c, std::vector<Tensor<double>> inputs, Build build, const std::string& what,
              double h = 1e-5, double tol = 1e-4) {
  auto eval = [&](const std::vector<Tensor<double>>& vals, std::vector<ag::Var<double>>* leaves_out) {
    std::vector<ag::Var<double>> leaves;
    leaves.reserve(vals.size());
    for (const auto& v : vals) leaves.push_back(ag::leaf(v));
    ag::Var<double> loss = build(leaves);
    if (leaves_out) *leaves_out = leaves;
    return loss;
  };

  std::vector<ag::Var<double>> leaves;
  ag::Var<double> loss = eval(inputs, &leaves);
  ag::backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index i = 0; i < inputs[k].numel(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = eval(inputs, nullptr).value()[0];
      inputs[k][i] = saved - h;
      const double dn = eval(inputs, nullptr).value()[0];
      inputs[k][i] = saved;
      const double fd = (up - dn) / (2 * h);
      const double an = leaves[k].grad()[i];
      const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  c.expect(worst < tol, msg(what, ": worst relative gradient error ", worst, " >= ", tol));
}

inline SuiteResult suite_tensor(std::uint64_t seed) {
  Checker c("tensor");
  Rng rng(seed);

  for (int trial = 0; trial < 5; ++trial) {
    const auto a = randn<double>({7, 3}, rng);
    const auto b = randn<double>({3, 5}, rng);
    c.expect(bitwise_equal(matmul(a, b), oracle::matmul_loops(a, b)),
             "matmul differs from the triple-loop oracle");
  }

  const auto x = randn<double>({6, 9}, rng);
  c.expect(bitwise_equal(transpose(transpose(x)), x), "double transpose is not the identity");

  const auto sm = softmax_rows(x);
  double worst_row = 0.0;
  for (Index i = 0; i < sm.dim(0); ++i) {
    double s = 0.0;
    for (Index j = 0; j < sm.dim(1); ++j) s += sm(i, j);
    worst_row = std::max(worst_row, std::abs(s - 1.0));
  }
  c.expect(worst_row < 1e-12, msg("softmax rows sum to 1 off by ", worst_row));

  const auto gamma = Tensor<double>::full({x.dim(1)}, 1.0);
  const Tensor<double> beta({x.dim(1)});
  const auto ln = layer_norm(x, gamma, beta);
  for (Index i = 0; i < ln.dim(0); ++i) {
    double mean = 0.0, var = 0.0;
    for (Index j = 0; j < ln.dim(1); ++j) mean += ln(i, j);
    mean /= static_cast<double>(ln.dim(1));
    for (Index j = 0; j < ln.dim(1); ++j) var += (ln(i, j) - mean) * (ln(i, j) - mean);
    var /= static_cast<double>(ln.dim(1));
    c.expect(std::abs(mean) < 1e-12 && std::abs(var - 1.0) < 1e-3,
             msg("layer_norm row ", i, " has mean ", mean, " var ", var));
  }

  {
    std::stringstream ss;
    write_tensor(ss, x);
    const auto back = read_tensor<double>(ss);
    c.expect(bitwise_equal(back, x), "f64 stream round trip is not bitwise");
  }
  {
    const auto xf = randn<float>({4, 3}, rng);
    std::stringstream ss;
    write_tensor(ss, xf);
    const auto back = read_tensor<float>(ss);
    c.expect(bitwise_equal(back, xf), "f32 stream round trip is not bitwise");
  }

  {
    const Index rows = 12, stride = 3;
    const auto src = randn<double>({rows, 4}, rng);
    Tensor<double> rebuilt({rows, 4});
    for (Index off = 0; off < stride; ++off) {
      const Index count = (rows - off + stride - 1) / stride;
      const auto part = slice_rows_strided(src, off, stride, count);
      std::vector<Index> idx;
      for (Index i = 0; i < count; ++i) idx.push_back(off + i * stride);
      rebuilt = add(rebuilt, scatter_rows(Tensor<double>({rows, 4}), part, idx));
    }
    c.expect(bitwise_equal(rebuilt, src), "strided slice/scatter does not reassemble the input");
  }

  return c.result();
}

inline SuiteResult suite_gradcheck(std::uint64_t seed) {
  Checker c("gradcheck");
  Rng rng(seed);

  fd_check(c, {randn<double>({3, 4}, rng), randn<double>({4, 2}, rng), randn<double>({3, 2}, rng)},
           [](std::vector<ag::Var<double>>& v) { return ag::mse(ag::matmul(v[0], v[1]), v[2]); },
           "matmul+mse");

  fd_check(c, {randn<double>({3, 5}, rng), randn<double>({3, 5}, rng)},
           [](std::vector<ag::Var<double>>& v) {
             return ag::sum(ag::hadamard(ag::softmax_rows(v[0]), v[1]));
           },
           "softmax_rows");

  fd_check(c, {randn<double>({2, 6}, rng), randn<double>({2, 6}, rng)},
           [](std::vector<ag::Var<double>>& v) { return ag::mse(ag::gelu(v[0]), v[1]); }, "gelu");

  fd_check(c, {randn<double>({3, 4}, rng), randn<double>({4}, rng, 0.3), randn<double>({4}, rng, 0.3),
               randn<double>({3, 4}, rng)},
           [](std::vector<ag::Var<double>>& v) {
             auto g = ag::add(v[1], ag::leaf(Tensor<double>::full({4}, 1.0)));
             return ag::mse(ag::layer_norm(v[0], g, v[2]), v[3]);
           },
           "layer_norm");

  fd_check(c, {randn<double>({6, 3}, rng), randn<double>({3, 3}, rng)},
           [](std::vector<ag::Var<double>>& v) {
             auto part = ag::slice_rows_strided(v[0], 1, 2, 3);
             auto back = ag::scatter_rows(part, {0, 2, 4}, 6);
             return ag::sum(ag::hadamard(back, ag::scatter_rows(ag::matmul(part, v[1]), {1, 3, 5}, 6)));
           },
           "slice/scatter");

  {
    auto p = rand_uniform<double>({3, 3}, rng, 0.1, 0.9);
    Tensor<double> t({3, 3});
    for (Index i = 0; i < t.numel(); ++i) t[i] = (i % 2 == 0) ? 1.0 : 0.0;
    fd_check(c, {p},
             [&t](std::vector<ag::Var<double>>& v) { return ag::fine_tune_loss(v[0], t); },
             "fine_tune_loss");
  }

  return c.result();
}

inline SuiteResult suite_attention(std::uint64_t seed, int workers) {
  Checker c("attention");
  Rng rng(seed);

  for (Index n : {Index(8), Index(16)}) {
    for (Index w : {Index(4), Index(8)}) {
      for (Index r : {Index(1), Index(2)}) {
        for (Index gamma = 0; gamma < r; ++gamma) {
          AttentionConfig cfg;
          cfg.seq_len = n;
          cfg.segment_len = w;
          cfg.interval = r;
          cfg.num_heads = 1;
          cfg.head_dim = 6;
          cfg.head_offsets = {gamma};
          cfg.validate();
          const auto q = randn<double>({n, 6}, rng);
          const auto k = randn<double>({n, 6}, rng);
          const auto v = randn<double>({n, 6}, rng);
          const auto got = dilated_attention(q, k, v, cfg, gamma);
          const auto want = oracle::masked_dense_dilated(q, k, v, cfg, gamma);
          const double err = max_abs_diff(got, want);
          c.expect(err <= 1e-10,
                   msg("dilated vs masked oracle err ", err, " at N=", n, " w=", w, " r=", r, " offset=", gamma));
        }
      }
    }
  }

  {
    const Index n = 24, d = 8;
    const auto q = randn<double>({n, d}, rng);
    const auto k = randn<double>({n, d}, rng);
    const auto v = randn<double>({n, d}, rng);
    const auto want = naive_attention(q, k, v);
    for (Index tile : {Index(1), Index(3), n}) {
      const double err = max_abs_diff(tiled_attention(q, k, v, tile), want);
      c.expect(err <= 1e-12, msg("tiled kernel err ", err, " at tile ", tile));
    }
  }

  {
    const Index n = 16, d = 4;
    AttentionConfig cfg;
    cfg.seq_len = n;
    cfg.segment_len = n;
    cfg.interval = 1;
    cfg.num_heads = 1;
    cfg.head_dim = d;
    cfg.head_offsets = {0};
    const auto q = randn<double>({n, d}, rng);
    const auto k = randn<double>({n, d}, rng);
    const auto v = randn<double>({n, d}, rng);
    const double err = max_abs_diff(dilated_attention(q, k, v, cfg, 0), naive_attention(q, k, v));
    c.expect(err <= 1e-12, msg("w=N, r=1 collapse err ", err));
  }

  {
    const Index n = 32, d = 8;
    AttentionConfig cfg;
    cfg.seq_len = n;
    cfg.segment_len = 8;
    cfg.interval = 2;
    cfg.num_heads = 1;
    cfg.head_dim = d;
    cfg.head_offsets = {1};
    const auto q = randn<double>({n, d}, rng);
    const auto k = randn<double>({n, d}, rng);
    const auto v = randn<double>({n, d}, rng);
    const auto serial = dilated_attention(q, k, v, cfg, 1, 1);
    const auto parallel = dilated_attention(q, k, v, cfg, 1, std::max(workers, 2));
    c.expect(bitwise_equal(serial, parallel), "worker count changes dilated output bits");
  }

  return c.result();
}

inline SuiteResult suite_schedule(std::uint64_t /*seed*/) {
  Checker c("schedule");

  const ScheduleParams grids[] = {{2.0, 0.0, 6}, {10.0, 0.0, 6}, {10.0, 5.0, 6}};
  for (const auto& s : grids) {
    for (double t : {0.0, 1.0, 7.0, 100.0})
      c.expect(layer_weight(1, t, s) == 1.0, msg("alpha_1 not pinned to 1 at t=", t));
    for (int i = 2; i <= s.num_focus_layers; ++i) {
      const double ti = s.t1 + (i - 1) * s.delta_t;
      c.expect(layer_weight(i, ti, s) == 0.0, msg("alpha_", i, " nonzero at its start epoch"));
      c.expect(layer_weight(i, ti + s.delta_t / 2, s) == 0.5, msg("alpha_", i, " midpoint is not exactly 1/2"));
      c.expect(layer_weight(i, ti + s.delta_t, s) == 1.0, msg("alpha_", i, " not saturated after delta_t"));
      c.expect(layer_weight(i, ti + 3 * s.delta_t, s) == 1.0, msg("alpha_", i, " decays after saturation"));
      if (ti > 0) c.expect(layer_weight(i, ti - 1, s) == 0.0, msg("alpha_", i, " active before its start"));
    }
    for (int i = 2; i <= s.num_focus_layers; ++i) {
      double prev = -1.0;
      for (double t = 0; t <= s.t1 + s.delta_t * (s.num_focus_layers + 2); t += 0.5) {
        const double a = layer_weight(i, t, s);
        c.expect(a >= prev, msg("alpha_", i, " decreases in t near ", t));
        c.expect(a >= 0.0 && a <= 1.0, msg("alpha_", i, " leaves [0,1] at t=", t));
        prev = a;
      }
    }
    for (double t : {3.0, 11.0, 26.0}) {
      for (int i = 2; i <= s.num_focus_layers; ++i)
        c.expect(layer_weight(i, t, s) <= layer_weight(i - 1, t, s),
                 msg("alpha increases with layer ordinal at t=", t));
    }
  }

  ScheduleParams ten{10.0, 0.0, 6};
  c.expect(layer_weight(2, 15.0, ten) == 0.5, "alpha_2 at t=15 under delta_t=10");
  c.expect(layer_weight(3, 19.0, ten) == 0.0, "alpha_3 at t=19 under delta_t=10");
  c.expect(layer_weight(3, 25.0, ten) == 0.5, "alpha_3 at t=25 under delta_t=10");
  c.expect(layer_weight(3, 30.0, ten) == 1.0, "alpha_3 at t=30 under delta_t=10");

  return c.result();
}

inline SuiteResult suite_segloss(std::uint64_t seed) {
  Checker c("segloss");
  Rng rng(seed);

  {
    MaskPair<double> half;
    half.predicted = Tensor<double>::full({2, 2}, 0.5);
    half.target = Tensor<double>::full({2, 2}, 1.0);
    c.expect_near(iou_loss(half), 0.5, 1e-6, "IoU loss, p=0.5 vs ones");
    c.expect_near(dice_loss(half), 1.0 / 3.0, 1e-6, "Dice loss, p=0.5 vs ones");
  }

  {
    MaskPair<double> one;
    one.predicted = Tensor<double>::full({1, 1}, 0.5);
    one.target = Tensor<double>::full({1, 1}, 1.0);
    c.expect_near(focal_loss(one), 0.25 * 0.25 * std::log(2.0), 1e-12, "focal single-pixel value");
  }

  {
    MaskPair<double> perfect;
    perfect.predicted = Tensor<double>({3, 3});
    perfect.target = Tensor<double>({3, 3});
    for (Index i = 0; i < 9; ++i) perfect.predicted[i] = perfect.target[i] = (i % 3 == 0) ? 1.0 : 0.0;
    c.expect(iou_loss(perfect) < 1e-5 && dice_loss(perfect) < 1e-5 && focal_loss(perfect) < 1e-5,
             "perfect binary match does not zero the component losses");
    c.expect(fine_tune_loss(perfect) < 1e-3, "perfect binary match does not zero the fine-tune loss");
  }

  for (int trial = 0; trial < 10; ++trial) {
    MaskPair<double> pair;
    pair.predicted = rand_uniform<double>({4, 4}, rng);
    pair.target = Tensor<double>({4, 4});
    for (Index i = 0; i < 16; ++i) pair.target[i] = rand_uniform<double>({1}, rng)[0] < 0.5 ? 0.0 : 1.0;
    const double a = iou_loss(pair), b = dice_loss(pair), f = focal_loss(pair);
    c.expect_near(fine_tune_loss(pair), kIouWeight * a + b + f, 1e-12, "fine-tune composition");
    const double focal_cap = -kFocalAlpha * std::log(kFocalClip);
    c.expect(a >= 0 && a <= 1 + 1e-6 && b >= 0 && b <= 1 + 1e-6 && f >= 0 && f <= focal_cap,
             "a component loss leaves its documented bounds");
  }

  return c.result();
}

inline SuiteResult suite_flops(std::uint64_t /*seed*/) {
  Checker c("flops");

  {
    AttentionConfig cfg;
    cfg.seq_len = 4096;
    cfg.segment_len = 512;
    cfg.interval = 2;
    cfg.num_heads = 1;
    cfg.head_dim = 64;
    cfg.head_offsets = {0};
    const auto f = flop_count(cfg);
    c.expect(f.dense_mults == 2ull * 4096 * 4096 * 64, "dense mult count at N=4096");
    c.expect_near(f.ratio, 32.0, 0.0, "mult ratio at N=4096, w=512, r=2");
  }

  for (Index n : {Index(8), Index(16), Index(32)}) {
    for (Index w : {Index(2), Index(4), Index(8)}) {
      if (w > n || n % w != 0) continue;
      for (Index r : {Index(1), Index(2), Index(4)}) {
        if (r > w || w % r != 0) continue;
        AttentionConfig cfg;
        cfg.seq_len = n;
        cfg.segment_len = w;
        cfg.interval = r;
        cfg.num_heads = 1;
        cfg.head_dim = 4;
        cfg.head_offsets = {0};
        const auto f = flop_count(cfg);
        const double want = static_cast<double>(n) * r * r / static_cast<double>(w);
        c.expect(f.ratio == want, msg("mult ratio at N=", n, " w=", w, " r=", r, ": got ", f.ratio,
                                      ", want exactly ", want));
      }
    }
  }

  {
    AttentionConfig cfg;
    cfg.seq_len = 64;
    cfg.segment_len = 64;
    cfg.interval = 1;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.head_offsets = {0, 0};
    const auto f = flop_count(cfg);
    c.expect(f.ratio == 1.0 && f.dense_mults == f.dilated_mults, "w=N, r=1 is not mult-neutral");
  }

  return c.result();
}

}  // namespace verify_detail

inline const std::vector<std::string>& verification_suite_names() {
  static const std::vector<std::string> names = {"tensor", "gradcheck", "attention",
                                                 "schedule", "segloss", "flops"};
  return names;
}

// Runs the named suites (all when the filter is empty). Unknown names are a
// config error so typos fail loudly rather than silently passing.
inline std::vector<SuiteResult> run_verification(const std::vector<std::string>& filter, std::uint64_t seed,
                                                 int workers) {
  const auto& known = verification_suite_names();
  std::vector<std::string> todo = filter.empty() ? known : filter;
  for (const auto& name : todo) {
    if (std::find(known.begin(), known.end(), name) == known.end())
      throw config_error(msg("unknown verification suite '", name, "'"));
  }

  std::vector<SuiteResult> out;
  for (const auto& name : todo) {
    if (name == "tensor")
      out.push_back(verify_detail::suite_tensor(seed));
    else if (name == "gradcheck")
      out.push_back(verify_detail::suite_gradcheck(seed));
    else if (name == "attention")
      out.push_back(verify_detail::suite_attention(seed, workers));
    else if (name == "schedule")
      out.push_back(verify_detail::suite_schedule(seed));
    else if (name == "segloss")
      out.push_back(verify_detail::suite_segloss(seed));
    else
      out.push_back(verify_detail::suite_flops(seed));
  }
  return out;
}

}  // namespace attnkit
