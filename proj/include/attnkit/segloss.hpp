#pragma once

#include <cmath>

#include "attnkit/autodiff.hpp"
#include "attnkit/tensor.hpp"

namespace attnkit {

inline constexpr double kSegEps = 1e-6;        // ratio smoothing against empty masks
inline constexpr double kFocalClip = 1e-7;     // probability clip for the log
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kIouWeight = 20.0;

// Predicted probabilities against a binary target of the same shape.
// validate() is the single gate; the losses assume it has passed.
template <class Scalar>
struct MaskPair {
  Tensor<Scalar> predicted;
  Tensor<Scalar> target;

  void validate() const {
    if (!predicted.same_shape(target))
      throw dimension_error(msg("mask pair: shapes ", shape_str(predicted.shape()), " vs ",
                                shape_str(target.shape())));
    if (predicted.numel() == 0) throw dimension_error("mask pair: empty masks");
    for (Index i = 0; i < predicted.numel(); ++i) {
      const Scalar p = predicted[i];
      if (!(p >= Scalar(0) && p <= Scalar(1)))
        throw contract_error(msg("mask pair: predicted[", i, "] = ", p, " outside [0, 1]"));
      const Scalar t = target[i];
      if (t != Scalar(0) && t != Scalar(1))
        throw contract_error(msg("mask pair: target[", i, "] = ", t, " is not binary"));
    }
  }
};

namespace detail {
template <class Scalar>
void mask_sums(const MaskPair<Scalar>& pair, Scalar& sum_p, Scalar& sum_t, Scalar& sum_pt) {
  sum_p = sum_t = sum_pt = Scalar(0);
  for (Index i = 0; i < pair.predicted.numel(); ++i) {
    sum_p += pair.predicted[i];
    sum_t += pair.target[i];
    sum_pt += pair.predicted[i] * pair.target[i];
  }
}
}  // namespace detail

// Soft IoU complement: 1 - (sum pt + eps) / (sum p + sum t - sum pt + eps).
// In [0, 1) for valid inputs; the eps keeps empty-vs-empty at 0.
template <class Scalar>
Scalar iou_loss(const MaskPair<Scalar>& pair) {
  pair.validate();
  Scalar sp, st, spt;
  detail::mask_sums(pair, sp, st, spt);
  const auto eps = static_cast<Scalar>(kSegEps);
  return Scalar(1) - (spt + eps) / (sp + st - spt + eps);
}

// Soft Dice complement: 1 - (2 sum pt + eps) / (sum p + sum t + eps).
template <class Scalar>
Scalar dice_loss(const MaskPair<Scalar>& pair) {
  pair.validate();
  Scalar sp, st, spt;
  detail::mask_sums(pair, sp, st, spt);
  const auto eps = static_cast<Scalar>(kSegEps);
  return Scalar(1) - (Scalar(2) * spt + eps) / (sp + st + eps);
}

// Pixel mean of -alpha (1 - p_t)^gamma ln(p_t) with p_t the probability
// assigned to the true class, clipped to [1e-7, 1 - 1e-7]. Per-pixel
// ceiling is -alpha ln(1e-7), about 4.03 at the default alpha = 0.25.
template <class Scalar>
Scalar focal_loss(const MaskPair<Scalar>& pair, Scalar gamma = static_cast<Scalar>(kFocalGamma),
                  Scalar alpha = static_cast<Scalar>(kFocalAlpha)) {
  pair.validate();
  const auto lo = static_cast<Scalar>(kFocalClip), hi = Scalar(1) - static_cast<Scalar>(kFocalClip);
  Scalar acc = Scalar(0);
  for (Index i = 0; i < pair.predicted.numel(); ++i) {
    const Scalar p = std::min(hi, std::max(lo, pair.predicted[i]));
    const Scalar pt = pair.target[i] == Scalar(1) ? p : Scalar(1) - p;
    acc += -alpha * std::pow(Scalar(1) - pt, gamma) * std::log(pt);
  }
  return acc / static_cast<Scalar>(pair.predicted.numel());
}

// The decoder fine-tune objective: 20 * IoU + Dice + Focal.
template <class Scalar>
Scalar fine_tune_loss(const MaskPair<Scalar>& pair) {
  return static_cast<Scalar>(kIouWeight) * iou_loss(pair) + dice_loss(pair) + focal_loss(pair);
}

namespace ag {

// Tape variants, gradients w.r.t. the predicted mask only; the binary
// target is a constant. The same formulas as the plain versions, assembled
// from sum/hadamard so the values agree to rounding.
namespace seg_detail {
// scalar reciprocal of a 1-element var: y = c / x
template <class Scalar>
Var<Scalar> scalar_ratio(Scalar numer_const, const Var<Scalar>& denom) {
  if (denom.value().numel() != 1) throw contract_error("scalar_ratio: denominator must be scalar");
  Tensor<Scalar> out({1});
  out[0] = numer_const / denom.value()[0];
  return make_op<Scalar>(std::move(out), {denom}, [numer_const](Node<Scalar>& n) {
    const Scalar x = n.parents[0]->value[0];
    n.parents[0]->grad[0] += n.grad[0] * (-numer_const / (x * x));
  });
}

// elementwise y = x / (scalar var): needed for ratio-of-sums losses
template <class Scalar>
Var<Scalar> div_scalar(const Var<Scalar>& numer, const Var<Scalar>& denom) {
  if (denom.value().numel() != 1) throw contract_error("div_scalar: denominator must be scalar");
  const Scalar d = denom.value()[0];
  Tensor<Scalar> out = numer.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] /= d;
  return make_op<Scalar>(std::move(out), {numer, denom}, [](Node<Scalar>& n) {
    const Scalar dv = n.parents[1]->value[0];
    for (Index i = 0; i < n.grad.numel(); ++i) {
      n.parents[0]->grad[i] += n.grad[i] / dv;
      n.parents[1]->grad[0] += n.grad[i] * (-n.parents[0]->value[i] / (dv * dv));
    }
  });
}

template <class Scalar>
Var<Scalar> add_const(const Var<Scalar>& x, Scalar c) {
  Tensor<Scalar> out = x.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] += c;
  return make_op<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) { n.parents[0]->grad.vec() += n.grad.vec(); });
}

// clipped focal core as one fused op; the clip zeroes the gradient at the
// saturated pixels, matching the subgradient convention
template <class Scalar>
Var<Scalar> focal_mean(const Var<Scalar>& predicted, const Tensor<Scalar>& target, Scalar gamma, Scalar alpha) {
  const auto lo = static_cast<Scalar>(kFocalClip), hi = Scalar(1) - static_cast<Scalar>(kFocalClip);
  const auto& pv = predicted.value();
  const auto n_px = static_cast<Scalar>(pv.numel());
  Tensor<Scalar> out({1});
  Scalar acc = Scalar(0);
  for (Index i = 0; i < pv.numel(); ++i) {
    const Scalar p = std::min(hi, std::max(lo, pv[i]));
    const Scalar pt = target[i] == Scalar(1) ? p : Scalar(1) - p;
    acc += -alpha * std::pow(Scalar(1) - pt, gamma) * std::log(pt);
  }
  out[0] = acc / n_px;
  return make_op<Scalar>(std::move(out), {predicted}, [target, gamma, alpha, lo, hi, n_px](Node<Scalar>& n) {
    const Scalar g = n.grad[0];
    for (Index i = 0; i < n.parents[0]->value.numel(); ++i) {
      const Scalar raw = n.parents[0]->value[i];
      if (raw < lo || raw > hi) continue;  // clipped: no gradient through the clamp
      const Scalar pt = target[i] == Scalar(1) ? raw : Scalar(1) - raw;
      const Scalar one_m = Scalar(1) - pt;
      // d/dpt of -alpha (1-pt)^g ln(pt)
      Scalar dpt = -alpha * (-gamma * std::pow(one_m, gamma - Scalar(1)) * std::log(pt) +
                             std::pow(one_m, gamma) / pt);
      if (target[i] != Scalar(1)) dpt = -dpt;  // pt = 1 - p
      n.parents[0]->grad[i] += g * dpt / n_px;
    }
  });
}
}  // namespace seg_detail

template <class Scalar>
Var<Scalar> iou_loss(const Var<Scalar>& predicted, const Tensor<Scalar>& target) {
  const auto eps = static_cast<Scalar>(kSegEps);
  auto t = leaf(target);
  auto spt = sum(hadamard(predicted, t));
  auto denom = seg_detail::add_const(sub(add(sum(predicted), sum(t)), spt), eps);
  auto ratio = seg_detail::div_scalar(seg_detail::add_const(spt, eps), denom);
  return seg_detail::add_const(scale(ratio, Scalar(-1)), Scalar(1));
}

template <class Scalar>
Var<Scalar> dice_loss(const Var<Scalar>& predicted, const Tensor<Scalar>& target) {
  const auto eps = static_cast<Scalar>(kSegEps);
  auto t = leaf(target);
  auto spt = sum(hadamard(predicted, t));
  auto denom = seg_detail::add_const(add(sum(predicted), sum(t)), eps);
  auto ratio = seg_detail::div_scalar(seg_detail::add_const(scale(spt, Scalar(2)), eps), denom);
  return seg_detail::add_const(scale(ratio, Scalar(-1)), Scalar(1));
}

template <class Scalar>
Var<Scalar> focal_loss(const Var<Scalar>& predicted, const Tensor<Scalar>& target,
                       Scalar gamma = static_cast<Scalar>(kFocalGamma),
                       Scalar alpha = static_cast<Scalar>(kFocalAlpha)) {
  return seg_detail::focal_mean(predicted, target, gamma, alpha);
}

template <class Scalar>
Var<Scalar> fine_tune_loss(const Var<Scalar>& predicted, const Tensor<Scalar>& target) {
  return add(add(scale(iou_loss(predicted, target), static_cast<Scalar>(kIouWeight)),
                 dice_loss(predicted, target)),
             focal_loss(predicted, target));
}

}  // namespace ag
}  // namespace attnkit
