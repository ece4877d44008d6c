#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "attnkit/tensor.hpp"

namespace attnkit::ag {

// Reverse-mode tape. Each node owns its value, a same-shaped gradient
// buffer, and a closure that pushes the node's gradient into its parents.
// The graph is rebuilt per training step; parameter leaves persist across
// steps and are updated in place by the optimizer.
template <class Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  explicit Node(Tensor<Scalar> v) : value(std::move(v)), grad(value.shape()) {}
};

template <class Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value) : node_(std::make_shared<Node<Scalar>>(std::move(value))) {}
  explicit Var(std::shared_ptr<Node<Scalar>> n) : node_(std::move(n)) {}

  bool valid() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& value_mut() { return node_->value; }
  Tensor<Scalar>& grad_mut() { return node_->grad; }
  std::shared_ptr<Node<Scalar>> node() const { return node_; }

  void zero_grad() { node_->grad = Tensor<Scalar>(node_->value.shape()); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

template <class Scalar>
Var<Scalar> leaf(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value));
}

// Builds an interior node from a computed value, its parents, and the
// gradient-distribution closure. Loss primitives outside this header
// (segmentation losses) register themselves through this hook.
template <class Scalar>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                    std::function<void(Node<Scalar>&)> backprop) {
  auto n = std::make_shared<Node<Scalar>>(std::move(value));
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backprop = std::move(backprop);
  return Var<Scalar>(std::move(n));
}

// Reverse topological sweep from a scalar loss. Nodes unreachable from
// the loss are never visited, so their gradients stay zero.
template <class Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().numel() != 1)
    throw contract_error(msg("backward: loss must be scalar, got shape ", shape_str(loss.value().shape())));

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  struct Frame {
    Node<Scalar>* n;
    std::size_t next = 0;
  };
  std::vector<Frame> stack{{loss.node().get()}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<Scalar>* p = f.n->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->grad[0] = Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// ---- primitive ops -------------------------------------------------------

template <class Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tensor<Scalar> av = a.value(), bv = b.value();
  return make_op<Scalar>(attnkit::matmul(a.value(), b.value()), {a, b},
                         [av = std::move(av), bv = std::move(bv)](Node<Scalar>& n) {
                           n.parents[0]->grad.mat() += attnkit::matmul(n.grad, attnkit::transpose(bv)).mat();
                           n.parents[1]->grad.mat() += attnkit::matmul(attnkit::transpose(av), n.grad).mat();
                         });
}

template <class Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  return make_op<Scalar>(attnkit::transpose(x.value()), {x}, [](Node<Scalar>& n) {
    n.parents[0]->grad.mat() += n.grad.mat().transpose();
  });
}

template <class Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_op<Scalar>(attnkit::add(a.value(), b.value()), {a, b}, [](Node<Scalar>& n) {
    n.parents[0]->grad.vec() += n.grad.vec();
    n.parents[1]->grad.vec() += n.grad.vec();
  });
}

template <class Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_op<Scalar>(attnkit::sub(a.value(), b.value()), {a, b}, [](Node<Scalar>& n) {
    n.parents[0]->grad.vec() += n.grad.vec();
    n.parents[1]->grad.vec() -= n.grad.vec();
  });
}

template <class Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar c) {
  return make_op<Scalar>(attnkit::scale(x.value(), c), {x}, [c](Node<Scalar>& n) {
    n.parents[0]->grad.vec() += n.grad.vec() * c;
  });
}

template <class Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tensor<Scalar> av = a.value(), bv = b.value();
  return make_op<Scalar>(attnkit::hadamard(a.value(), b.value()), {a, b},
                         [av = std::move(av), bv = std::move(bv)](Node<Scalar>& n) {
                           n.parents[0]->grad.vec() += n.grad.vec().cwiseProduct(bv.vec());
                           n.parents[1]->grad.vec() += n.grad.vec().cwiseProduct(av.vec());
                         });
}

// x (m x n) plus a length-n bias broadcast over rows.
template <class Scalar>
Var<Scalar> add_rowvec(const Var<Scalar>& x, const Var<Scalar>& b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() != 2 || bv.numel() != xv.cols())
    throw dimension_error(msg("add_rowvec: bias length ", bv.numel(), " vs ", shape_str(xv.shape())));
  Tensor<Scalar> out = xv;
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
  return make_op<Scalar>(std::move(out), {x, b}, [](Node<Scalar>& n) {
    n.parents[0]->grad.vec() += n.grad.vec();
    auto& bg = n.parents[1]->grad;
    for (Index i = 0; i < n.grad.rows(); ++i)
      for (Index j = 0; j < n.grad.cols(); ++j) bg[j] += n.grad(i, j);
  });
}

template <class Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  Tensor<Scalar> y = attnkit::softmax_rows(x.value());
  Tensor<Scalar> ycopy = y;
  return make_op<Scalar>(std::move(y), {x}, [y = std::move(ycopy)](Node<Scalar>& n) {
    auto& xg = n.parents[0]->grad;
    const Index m = y.rows(), c = y.cols();
    for (Index i = 0; i < m; ++i) {
      Scalar dot = Scalar(0);
      for (Index j = 0; j < c; ++j) dot += n.grad(i, j) * y(i, j);
      for (Index j = 0; j < c; ++j) xg(i, j) += y(i, j) * (n.grad(i, j) - dot);
    }
  });
}

template <class Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  Tensor<Scalar> xv = x.value();
  return make_op<Scalar>(attnkit::gelu(x.value()), {x}, [xv = std::move(xv)](Node<Scalar>& n) {
    auto& xg = n.parents[0]->grad;
    for (Index i = 0; i < xv.numel(); ++i) xg[i] += n.grad[i] * gelu_grad_scalar(xv[i]);
  });
}

template <class Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
  const auto& xv = x.value();
  detail::require_rank2(xv, "layer_norm");
  const Index m = xv.rows(), c = xv.cols();
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw dimension_error(msg("layer_norm: gain/bias length must be ", c));

  Tensor<Scalar> xhat({m, c});
  Tensor<Scalar> inv_sigma({m});
  Tensor<Scalar> out({m, c});
  for (Index i = 0; i < m; ++i) {
    Scalar mean = Scalar(0);
    for (Index j = 0; j < c; ++j) mean += xv(i, j);
    mean /= Scalar(c);
    Scalar var = Scalar(0);
    for (Index j = 0; j < c; ++j) {
      const Scalar d = xv(i, j) - mean;
      var += d * d;
    }
    var /= Scalar(c);
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    inv_sigma[i] = inv;
    for (Index j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * inv;
      out(i, j) = xhat(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  Tensor<Scalar> gv = gamma.value();
  return make_op<Scalar>(std::move(out), {x, gamma, beta},
                         [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), gv = std::move(gv)](Node<Scalar>& n) {
                           auto& xg = n.parents[0]->grad;
                           auto& gg = n.parents[1]->grad;
                           auto& bg = n.parents[2]->grad;
                           const Index m2 = xhat.rows(), c2 = xhat.cols();
                           for (Index i = 0; i < m2; ++i) {
                             Scalar mean_g = Scalar(0), mean_gx = Scalar(0);
                             for (Index j = 0; j < c2; ++j) {
                               const Scalar g = n.grad(i, j) * gv[j];
                               mean_g += g;
                               mean_gx += g * xhat(i, j);
                             }
                             mean_g /= Scalar(c2);
                             mean_gx /= Scalar(c2);
                             for (Index j = 0; j < c2; ++j) {
                               const Scalar g = n.grad(i, j) * gv[j];
                               xg(i, j) += inv_sigma[i] * (g - mean_g - xhat(i, j) * mean_gx);
                               gg[j] += n.grad(i, j) * xhat(i, j);
                               bg[j] += n.grad(i, j);
                             }
                           }
                         });
}

template <class Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tensor<Scalar> av = a.value(), bv = b.value();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(attnkit::mse(a.value(), b.value()));
  return make_op<Scalar>(std::move(out), {a, b},
                         [av = std::move(av), bv = std::move(bv)](Node<Scalar>& n) {
                           const Scalar g = n.grad[0] * Scalar(2) / Scalar(av.numel());
                           for (Index i = 0; i < av.numel(); ++i) {
                             const Scalar d = g * (av[i] - bv[i]);
                             n.parents[0]->grad[i] += d;
                             n.parents[1]->grad[i] -= d;
                           }
                         });
}

template <class Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Scalar acc = Scalar(0);
  for (Index i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
  return make_op<Scalar>(Tensor<Scalar>::scalar(acc), {x}, [](Node<Scalar>& n) {
    n.parents[0]->grad.vec().array() += n.grad[0];
  });
}

template <class Scalar>
Var<Scalar> slice_rows_strided(const Var<Scalar>& x, Index start, Index stride, Index count) {
  return make_op<Scalar>(attnkit::slice_rows_strided(x.value(), start, stride, count), {x},
                         [start, stride, count](Node<Scalar>& n) {
                           auto& xg = n.parents[0]->grad;
                           for (Index i = 0; i < count; ++i)
                             xg.mat().row(start + i * stride) += n.grad.mat().row(i);
                         });
}

// Places src's rows into an all-zero (dest_rows x cols) tensor, the
// placement case of the accumulating plain-tensor scatter.
template <class Scalar>
Var<Scalar> scatter_rows(const Var<Scalar>& src, std::vector<Index> row_indices, Index dest_rows) {
  Tensor<Scalar> dest({dest_rows, src.value().cols()});
  Tensor<Scalar> out = attnkit::scatter_rows(dest, src.value(), row_indices);
  return make_op<Scalar>(std::move(out), {src}, [idx = std::move(row_indices)](Node<Scalar>& n) {
    auto& sg = n.parents[0]->grad;
    for (Index i = 0; i < sg.rows(); ++i) sg.mat().row(i) += n.grad.mat().row(idx[static_cast<std::size_t>(i)]);
  });
}

template <class Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw dimension_error("concat_cols: no parts");
  const Index m = parts.front().value().rows();
  Index total = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.value().rows() != m) throw dimension_error("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor<Scalar> out({m, total});
  Index off = 0;
  for (const auto& p : parts) {
    out.mat().block(0, off, m, p.value().cols()) = p.value().mat();
    off += p.value().cols();
  }
  return make_op<Scalar>(std::move(out), parts, [widths = std::move(widths)](Node<Scalar>& n) {
    Index o = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      n.parents[i]->grad.mat() += n.grad.mat().block(0, o, n.grad.rows(), widths[i]);
      o += widths[i];
    }
  });
}

}  // namespace attnkit::ag
