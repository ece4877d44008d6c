#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "attnkit/autodiff.hpp"
#include "attnkit/encoder.hpp"
#include "attnkit/tensor.hpp"
#include "attnkit/thread_pool.hpp"

namespace attnkit {

// Ramp timing for per-layer loss weights. Layer ordinal i (1-based,
// shallow to deep within the focus set) starts its ramp at
// T_i = T_1 + (i-1) * delta_t and saturates delta_t epochs later.
struct ScheduleParams {
  double delta_t = 2.0;
  double t1 = 0.0;
  int num_focus_layers = 1;

  void validate() const {
    if (!(delta_t > 0)) throw config_error(msg("schedule: delta_t must be positive, got ", delta_t));
    if (t1 < 0) throw config_error(msg("schedule: start epoch must be non-negative, got ", t1));
    if (num_focus_layers < 1) throw config_error("schedule: need at least one focus layer");
  }
};

// Weight of focus layer i at epoch t. Layer 1 is always fully weighted;
// deeper layers fade in linearly once their predecessor has saturated.
inline double layer_weight(int i, double t, const ScheduleParams& s) {
  s.validate();
  if (i < 1) throw contract_error(msg("layer_weight: ordinal ", i, " must be >= 1"));
  if (t < 0) throw contract_error(msg("layer_weight: negative epoch ", t));
  if (i == 1) return 1.0;
  const double ti = s.t1 + static_cast<double>(i - 1) * s.delta_t;
  if (t < ti) return 0.0;
  if (t < ti + s.delta_t) return (t - ti) / s.delta_t;
  return 1.0;
}

inline std::vector<double> layer_weights(int count, double t, const ScheduleParams& s, bool uniform = false) {
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 1; i <= count; ++i) out[static_cast<std::size_t>(i - 1)] = uniform ? 1.0 : layer_weight(i, t, s);
  return out;
}

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw config_error(msg("optimizer: learning rate must be positive, got ", lr));
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw config_error("optimizer: moment decays must lie in [0, 1)");
    if (!(eps > 0)) throw config_error("optimizer: eps must be positive");
  }
};

// Student layer -> teacher layer pairs at uniform stride, one per student
// block: block i (1-based) aligns with teacher block ceil(i * Lt / Ls).
inline std::vector<std::pair<int, int>> uniform_layer_map(int student_layers, int teacher_layers) {
  if (student_layers < 1 || teacher_layers < student_layers)
    throw config_error(msg("layer map: need 1 <= student depth <= teacher depth, got ", student_layers, " and ",
                           teacher_layers));
  std::vector<std::pair<int, int>> map;
  for (int i = 1; i <= student_layers; ++i)
    map.emplace_back(i - 1, (i * teacher_layers + student_layers - 1) / student_layers - 1);
  return map;
}

struct DistillConfig {
  ScheduleParams schedule;
  double lambda = 1.0;
  std::vector<std::pair<int, int>> layer_map;  // (student block, teacher block), both ascending
  OptimizerConfig optimizer;
  int epochs = 10;
  int batch_size = 32;
  int grad_accum = 1;
  bool uniform_weights = false;  // ablation: every layer weight pinned to 1
  int workers = 1;               // teacher feature precomputation only

  void validate(int student_layers, int teacher_layers) const {
    schedule.validate();
    optimizer.validate();
    if (lambda < 0) throw config_error(msg("distillation: lambda must be non-negative, got ", lambda));
    if (epochs < 1 || batch_size < 1 || grad_accum < 1 || workers < 1)
      throw config_error("distillation: epochs, batch_size, grad_accum, workers must be positive");
    if (layer_map.empty()) throw config_error("distillation: empty layer map");
    if (static_cast<int>(layer_map.size()) != schedule.num_focus_layers)
      throw config_error(msg("distillation: schedule names ", schedule.num_focus_layers,
                             " focus layers but the map has ", layer_map.size()));
    if (schedule.num_focus_layers > student_layers)
      throw config_error(msg("distillation: ", schedule.num_focus_layers, " focus layers exceed student depth ",
                             student_layers));
    for (std::size_t k = 0; k < layer_map.size(); ++k) {
      const auto [si, ti] = layer_map[k];
      if (si < 0 || si >= student_layers || ti < 0 || ti >= teacher_layers)
        throw config_error(msg("distillation: map pair (", si, ", ", ti, ") outside depths (", student_layers, ", ",
                               teacher_layers, ")"));
      if (k > 0 && (si <= layer_map[k - 1].first || ti <= layer_map[k - 1].second))
        throw config_error("distillation: layer map must be strictly increasing in both depths");
    }
  }
};

namespace detail {
template <class Scalar>
Scalar sum_squares(const Tensor<Scalar>& t) {
  Scalar acc = Scalar(0);
  for (Index i = 0; i < t.numel(); ++i) acc += t[i] * t[i];
  return acc;
}
}  // namespace detail

// Weighted per-layer feature distance, summed over the batch and divided
// by the batch size. Feature pairs must already share shapes; width
// adapters are the training loop's concern.
template <class Scalar>
Scalar focus_loss(const std::vector<std::vector<Tensor<Scalar>>>& student_feats,
                  const std::vector<std::vector<Tensor<Scalar>>>& teacher_feats,
                  const std::vector<std::pair<int, int>>& layer_map, double t, const ScheduleParams& schedule,
                  bool uniform_weights = false) {
  if (student_feats.empty() || student_feats.size() != teacher_feats.size())
    throw dimension_error(msg("focus_loss: batch sizes ", student_feats.size(), " vs ", teacher_feats.size()));
  Scalar total = Scalar(0);
  for (std::size_t k = 0; k < layer_map.size(); ++k) {
    const double alpha = uniform_weights ? 1.0 : layer_weight(static_cast<int>(k) + 1, t, schedule);
    if (alpha == 0.0) continue;
    const auto [si, ti] = layer_map[k];
    Scalar layer_acc = Scalar(0);
    for (std::size_t j = 0; j < student_feats.size(); ++j) {
      const auto& fs = student_feats[j].at(static_cast<std::size_t>(si));
      const auto& ft = teacher_feats[j].at(static_cast<std::size_t>(ti));
      layer_acc += detail::sum_squares(sub(ft, fs));
    }
    total += static_cast<Scalar>(alpha) * layer_acc;
  }
  return total / static_cast<Scalar>(student_feats.size());
}

// Tape counterpart used by the training loop; adapters (one per focus
// pair, student width x teacher width) bridge unequal embeddings and are
// trained jointly. Zero-weight layers never enter the graph.
template <class Scalar>
ag::Var<Scalar> focus_loss_tape(const std::vector<std::vector<ag::Var<Scalar>>>& student_feats,
                                const std::vector<std::vector<Tensor<Scalar>>>& teacher_feats,
                                const std::vector<ag::Var<Scalar>>& adapters,
                                const std::vector<std::pair<int, int>>& layer_map, double t,
                                const ScheduleParams& schedule, bool uniform_weights = false) {
  if (student_feats.empty() || student_feats.size() != teacher_feats.size())
    throw dimension_error(msg("focus_loss: batch sizes ", student_feats.size(), " vs ", teacher_feats.size()));
  if (!adapters.empty() && adapters.size() != layer_map.size())
    throw dimension_error(msg("focus_loss: ", adapters.size(), " adapters for ", layer_map.size(), " focus pairs"));
  ag::Var<Scalar> total;
  bool first = true;
  for (std::size_t k = 0; k < layer_map.size(); ++k) {
    const double alpha = uniform_weights ? 1.0 : layer_weight(static_cast<int>(k) + 1, t, schedule);
    if (alpha == 0.0) continue;
    const auto [si, ti] = layer_map[k];
    ag::Var<Scalar> layer_acc;
    bool layer_first = true;
    for (std::size_t j = 0; j < student_feats.size(); ++j) {
      auto fs = student_feats[j].at(static_cast<std::size_t>(si));
      if (!adapters.empty()) fs = ag::matmul(fs, adapters[k]);
      auto d = ag::sub(ag::leaf(teacher_feats[j].at(static_cast<std::size_t>(ti))), fs);
      auto ssq = ag::sum(ag::hadamard(d, d));
      layer_acc = layer_first ? ssq : ag::add(layer_acc, ssq);
      layer_first = false;
    }
    auto weighted = ag::scale(layer_acc, static_cast<Scalar>(alpha));
    total = first ? weighted : ag::add(total, weighted);
    first = false;
  }
  return ag::scale(total, Scalar(1) / static_cast<Scalar>(student_feats.size()));
}

template <class Scalar>
Scalar integrated_loss(Scalar focus, Scalar output_loss, double lambda) {
  return focus + static_cast<Scalar>(lambda) * output_loss;
}

template <class Scalar>
ag::Var<Scalar> integrated_loss_tape(const ag::Var<Scalar>& focus, const ag::Var<Scalar>& output_loss,
                                     double lambda) {
  return ag::add(focus, ag::scale(output_loss, static_cast<Scalar>(lambda)));
}

// First-order updates over a fixed set of leaf variables. grad_scale folds
// gradient-accumulation averaging into the step.
template <class Scalar>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<ag::Var<Scalar>> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    if (cfg_.kind == OptimizerKind::adam) {
      for (const auto& p : params_) {
        m_.push_back(Tensor<Scalar>::zeros(p.value().shape()));
        v_.push_back(Tensor<Scalar>::zeros(p.value().shape()));
      }
    }
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(Scalar grad_scale = Scalar(1)) {
    ++t_;
    const auto lr = static_cast<Scalar>(cfg_.lr);
    if (cfg_.kind == OptimizerKind::sgd) {
      for (auto& p : params_)
        for (Index i = 0; i < p.value().numel(); ++i) p.value_mut()[i] -= lr * grad_scale * p.grad()[i];
      return;
    }
    const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const Scalar bc1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(t_));
    const Scalar bc2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& value = params_[p].value_mut();
      const auto& grad = params_[p].grad();
      for (Index i = 0; i < value.numel(); ++i) {
        const Scalar g = grad[i] * grad_scale;
        m_[p][i] = b1 * m_[p][i] + (Scalar(1) - b1) * g;
        v_[p][i] = b2 * v_[p][i] + (Scalar(1) - b2) * g * g;
        value[i] -= lr * (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<ag::Var<Scalar>> params_;
  std::vector<Tensor<Scalar>> m_, v_;
  long t_ = 0;
};

// One row per optimizer step; losses are means over the accumulated
// micro-batches of that step.
struct StepLog {
  int epoch = 0;
  int step = 0;  // global optimizer step index
  double lp = 0;
  double lout = 0;
  double lint = 0;
  std::vector<double> alphas;
};

inline std::string loss_csv_header(int num_focus_layers) {
  std::string h = "epoch,step,L_P,L_output,L_integrated";
  for (int i = 1; i <= num_focus_layers; ++i) h += msg(",alpha_", i);
  return h;
}

inline std::string loss_csv_row(const StepLog& row) {
  std::string s = msg(row.epoch, ",", row.step, ",", row.lp, ",", row.lout, ",", row.lint);
  for (double a : row.alphas) s += msg(",", a);
  return s;
}

inline void write_loss_csv(std::ostream& out, const std::vector<StepLog>& history) {
  if (history.empty()) return;
  out << loss_csv_header(static_cast<int>(history.front().alphas.size())) << "\n";
  for (const auto& row : history) out << loss_csv_row(row) << "\n";
}

inline void write_loss_csv(const std::string& path, const std::vector<StepLog>& history) {
  std::ofstream out(path);
  if (!out) throw io_error(msg("cannot write ", path));
  write_loss_csv(out, history);
}

inline std::vector<std::pair<int, double>> epoch_mean_integrated(const std::vector<StepLog>& history) {
  std::vector<std::pair<int, double>> out;
  std::size_t i = 0;
  while (i < history.size()) {
    std::size_t j = i;
    double acc = 0;
    while (j < history.size() && history[j].epoch == history[i].epoch) acc += history[j++].lint;
    out.emplace_back(history[i].epoch, acc / static_cast<double>(j - i));
    i = j;
  }
  return out;
}

template <class Scalar>
struct DistillRun {
  std::vector<StepLog> history;
  ParamSet<Scalar> adapters;  // empty when the widths already match
};

// Distills cached teacher features into the student. Teacher forward
// passes happen exactly once per dataset item, before the loop; the
// teacher is never stepped. Student params update in place.
template <class Scalar>
DistillRun<Scalar> run_distillation(ParamSet<Scalar>& teacher_params, const EncoderConfig& teacher_cfg,
                                    ParamSet<Scalar>& student_params, const EncoderConfig& student_cfg,
                                    const std::vector<Tensor<Scalar>>& dataset, const DistillConfig& cfg, Rng& rng) {
  teacher_cfg.validate();
  student_cfg.validate();
  cfg.validate(student_cfg.num_layers, teacher_cfg.num_layers);
  if (dataset.empty()) throw config_error("distillation: empty dataset");
  if (teacher_cfg.image_size != student_cfg.image_size || teacher_cfg.channels != student_cfg.channels ||
      teacher_cfg.num_tokens() != student_cfg.num_tokens())
    throw dimension_error("distillation: teacher and student must share image geometry and token count");

  const auto n = static_cast<std::int64_t>(dataset.size());
  std::vector<std::vector<Tensor<Scalar>>> teacher_feats(dataset.size());
  std::vector<Tensor<Scalar>> teacher_out(dataset.size());
  parallel_for(n, cfg.workers, [&](std::int64_t j) {
    auto vals = encoder_infer(dataset[static_cast<std::size_t>(j)], teacher_params, teacher_cfg);
    teacher_feats[static_cast<std::size_t>(j)] = std::move(vals.features);
    teacher_out[static_cast<std::size_t>(j)] = std::move(vals.output);
  });

  DistillRun<Scalar> run;
  std::vector<ag::Var<Scalar>> adapters;
  ag::Var<Scalar> out_adapter;
  if (student_cfg.embed_dim != teacher_cfg.embed_dim) {
    for (std::size_t k = 0; k < cfg.layer_map.size(); ++k) {
      auto& var = run.adapters.add(msg("adapter.", k),
                                   trunc_normal<Scalar>({student_cfg.embed_dim, teacher_cfg.embed_dim}, rng,
                                                        Scalar(0.02)));
      adapters.push_back(var);
    }
    // the final-output distance needs the same width bridge as the features
    out_adapter = run.adapters.add("adapter.out",
                                   trunc_normal<Scalar>({student_cfg.embed_dim, teacher_cfg.embed_dim}, rng,
                                                        Scalar(0.02)));
  }

  std::vector<ag::Var<Scalar>> trainable;
  for (const auto& name : student_params.names()) trainable.push_back(student_params.at(name));
  for (const auto& name : run.adapters.names()) trainable.push_back(run.adapters.at(name));
  Optimizer<Scalar> opt(cfg.optimizer, trainable);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  int global_step = 0;
  const auto k_focus = static_cast<int>(cfg.layer_map.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t = static_cast<double>(epoch);
    const auto alphas = layer_weights(k_focus, t, cfg.schedule, cfg.uniform_weights);
    std::shuffle(order.begin(), order.end(), rng);

    opt.zero_grads();
    int micro = 0;
    double acc_lp = 0, acc_lout = 0, acc_lint = 0;
    auto flush = [&]() {
      if (micro == 0) return;
      opt.step(Scalar(1) / static_cast<Scalar>(micro));
      opt.zero_grads();
      StepLog row;
      row.epoch = epoch;
      row.step = global_step++;
      row.lp = acc_lp / micro;
      row.lout = acc_lout / micro;
      row.lint = acc_lint / micro;
      row.alphas = alphas;
      run.history.push_back(row);
      micro = 0;
      acc_lp = acc_lout = acc_lint = 0;
    };

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto batch = static_cast<Scalar>(stop - start);

      std::vector<std::vector<ag::Var<Scalar>>> student_feats;
      std::vector<std::vector<Tensor<Scalar>>> batch_teacher_feats;
      ag::Var<Scalar> out_acc;
      bool first = true;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t j = order[b];
        auto tape = encoder_forward(dataset[j], student_params, student_cfg);
        student_feats.push_back(std::move(tape.features));
        batch_teacher_feats.push_back(teacher_feats[j]);
        auto out = out_adapter.valid() ? ag::matmul(tape.output, out_adapter) : tape.output;
        auto l = ag::mse(out, ag::leaf(teacher_out[j]));
        out_acc = first ? l : ag::add(out_acc, l);
        first = false;
      }
      auto out_loss = ag::scale(out_acc, Scalar(1) / batch);
      auto focus = focus_loss_tape(student_feats, batch_teacher_feats, adapters, cfg.layer_map, t, cfg.schedule,
                                   cfg.uniform_weights);
      auto loss = integrated_loss_tape(focus, out_loss, cfg.lambda);

      const double lint = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lint))
        throw training_error(msg("loss diverged at optimizer step ", global_step, " (epoch ", epoch, ")"));
      ag::backward(loss);
      acc_lp += static_cast<double>(focus.value()[0]);
      acc_lout += static_cast<double>(out_loss.value()[0]);
      acc_lint += lint;
      ++micro;
      if (micro == cfg.grad_accum) flush();
    }
    flush();  // partial accumulation at the epoch boundary still steps
  }
  return run;
}

}  // namespace attnkit
