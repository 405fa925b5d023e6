#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "driqa/tensor.hpp"

namespace driqa::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

class Node;
using Var = std::shared_ptr<Node>;

// Define-by-run graph node. Values are computed eagerly at op construction;
// backward closures accumulate into parent grads. Node ids are globally
// monotone, so parents always have smaller ids than children and a reverse
// id sort is a valid reverse-topological order.
class Node {
 public:
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::uint64_t id = 0;
  std::vector<Var> parents;
  std::function<void()> backward_op;

  void accumulate(const Tensor& g) {
    if (!has_grad) {
      grad = Tensor::zeros(value.shape());
      has_grad = true;
    }
    for (std::size_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
  }
  Tensor& ensure_grad() {
    if (!has_grad) {
      grad = Tensor::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// When grad mode is off, ops still compute values but record no graph.
inline bool& grad_mode() {
  thread_local bool mode = true;
  return mode;
}

struct NoGradGuard {
  bool saved;
  NoGradGuard() : saved(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = saved; }
};

inline Var make_var(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad && grad_mode();
  n->id = next_node_id();
  return n;
}

inline Var constant(Tensor value) { return make_var(std::move(value), false); }

inline Var detach(const Var& x) { return make_var(x->value, false); }

// Runs reverse-mode accumulation from a scalar root.
inline void backward(const Var& root) {
  require(root->value.numel() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;
  // Collect reachable grad-requiring nodes.
  std::vector<Node*> nodes;
  std::vector<Node*> stack{root.get()};
  std::unordered_set<Node*> visited{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && visited.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->id > b->id; });
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (Node* n : nodes) {
    if (n->backward_op && n->has_grad) n->backward_op();
  }
}

// ----------------------------------------------------------------------
// Elementwise & structural ops
// ----------------------------------------------------------------------

namespace detail {

template <typename F>
Var op_with_self(Tensor value, std::vector<Var> parents, F&& fn) {
  bool req = false;
  if (grad_mode()) {
    for (const auto& p : parents) req = req || p->requires_grad;
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = req;
  n->id = next_node_id();
  if (req) {
    n->parents = parents;
    std::weak_ptr<Node> wself = n;
    n->backward_op = [wself, parents, fn]() {
      if (auto self = wself.lock()) fn(*self, parents);
    };
  }
  return n;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return detail::op_with_self(std::move(out), {a, b},
                              [](Node& self, const std::vector<Var>& ps) {
                                for (const auto& p : ps)
                                  if (p->requires_grad) p->accumulate(self.grad);
                              });
}

inline Var sub(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return detail::op_with_self(
      std::move(out), {a, b}, [](Node& self, const std::vector<Var>& ps) {
        if (ps[0]->requires_grad) ps[0]->accumulate(self.grad);
        if (ps[1]->requires_grad) {
          Tensor& g = ps[1]->ensure_grad();
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
      });
}

inline Var mul(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return detail::op_with_self(
      std::move(out), {a, b}, [](Node& self, const std::vector<Var>& ps) {
        if (ps[0]->requires_grad) {
          Tensor& g = ps[0]->ensure_grad();
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * ps[1]->value[i];
        }
        if (ps[1]->requires_grad) {
          Tensor& g = ps[1]->ensure_grad();
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * ps[0]->value[i];
        }
      });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return detail::op_with_self(std::move(out), {a},
                              [s](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                for (std::size_t i = 0; i < g.numel(); ++i)
                                  g[i] += self.grad[i] * s;
                              });
}

inline Var add_n(const std::vector<Var>& xs) {
  require(!xs.empty(), "add_n: empty input");
  Tensor out = xs[0]->value;
  for (std::size_t k = 1; k < xs.size(); ++k) {
    require(xs[k]->value.same_shape(out), "add_n: shape mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += xs[k]->value[i];
  }
  return detail::op_with_self(std::move(out), xs,
                              [](Node& self, const std::vector<Var>& ps) {
                                for (const auto& p : ps)
                                  if (p->requires_grad) p->accumulate(self.grad);
                              });
}

inline Var silu(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double x = out[i];
    out[i] = x / (1.0 + std::exp(-x));
  }
  return detail::op_with_self(
      std::move(out), {a}, [](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double x = ps[0]->value[i];
          const double s = 1.0 / (1.0 + std::exp(-x));
          g[i] += self.grad[i] * (s * (1.0 + x * (1.0 - s)));
        }
      });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return detail::op_with_self(
      std::move(out), {a}, [](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double y = self.value[i];
          g[i] += self.grad[i] * y * (1.0 - y);
        }
      });
}

inline Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return detail::op_with_self(std::move(out), {a},
                              [](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                for (std::size_t i = 0; i < g.numel(); ++i)
                                  g[i] += self.grad[i];
                              });
}

// ----------------------------------------------------------------------
// Reductions
// ----------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return detail::op_with_self(std::move(out), {a},
                              [](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                const double d = self.grad[0];
                                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += d;
                              });
}

inline Var mean_all(const Var& a) {
  const double n = static_cast<double>(a->value.numel());
  Tensor out = Tensor::scalar(a->value.sum() / n);
  return detail::op_with_self(std::move(out), {a},
                              [n](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                const double d = self.grad[0] / n;
                                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += d;
                              });
}

// mean((a-b)^2); the workhorse regression/restoration loss.
inline Var mse(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "mse: shape mismatch");
  const std::size_t n = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a->value[i] - b->value[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  return detail::op_with_self(
      std::move(out), {a, b}, [n](Node& self, const std::vector<Var>& ps) {
        const double c = 2.0 * self.grad[0] / static_cast<double>(n);
        if (ps[0]->requires_grad) {
          Tensor& g = ps[0]->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            g[i] += c * (ps[0]->value[i] - ps[1]->value[i]);
        }
        if (ps[1]->requires_grad) {
          Tensor& g = ps[1]->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            g[i] -= c * (ps[0]->value[i] - ps[1]->value[i]);
        }
      });
}

// Stable log(sum(exp(x))) over a 1-D tensor.
inline Var logsumexp(const Var& a) {
  require(a->value.rank() == 1, "logsumexp: expects 1-D input");
  const std::size_t n = a->value.numel();
  double m = a->value[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, a->value[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(a->value[i] - m);
  Tensor out = Tensor::scalar(m + std::log(s));
  return detail::op_with_self(
      std::move(out), {a}, [](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        const double lse = self.value[0];
        const double d = self.grad[0];
        for (std::size_t i = 0; i < g.numel(); ++i)
          g[i] += d * std::exp(ps[0]->value[i] - lse);
      });
}

// ----------------------------------------------------------------------
// Matrix ops (Eigen GEMM backend)
// ----------------------------------------------------------------------

// y = x * w^T + b, torch Linear convention: x (B,F), w (O,F), b (O) or null.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  require(x->value.rank() == 2 && w->value.rank() == 2, "linear: expects matrices");
  const std::size_t B = x->value.dim(0), F = x->value.dim(1), O = w->value.dim(0);
  require(w->value.dim(1) == F, "linear: weight shape mismatch");
  Tensor out({B, O});
  {
    CMapM xm(x->value.data(), B, F);
    CMapM wm(w->value.data(), O, F);
    MapM om(out.data(), B, O);
    om.noalias() = xm * wm.transpose();
  }
  if (b) {
    require(b->value.numel() == O, "linear: bias shape mismatch");
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t c = 0; c < O; ++c) out.at(r, c) += b->value[c];
  }
  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return detail::op_with_self(
      std::move(out), std::move(parents),
      [B, F, O](Node& self, const std::vector<Var>& ps) {
        CMapM dym(self.grad.data(), B, O);
        if (ps[0]->requires_grad) {
          MapM gx(ps[0]->ensure_grad().data(), B, F);
          CMapM wm(ps[1]->value.data(), O, F);
          gx.noalias() += dym * wm;
        }
        if (ps[1]->requires_grad) {
          MapM gw(ps[1]->ensure_grad().data(), O, F);
          CMapM xm(ps[0]->value.data(), B, F);
          gw.noalias() += dym.transpose() * xm;
        }
        if (ps.size() == 3 && ps[2]->requires_grad) {
          Tensor& gb = ps[2]->ensure_grad();
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t c = 0; c < O; ++c) gb[c] += self.grad[r * O + c];
        }
      });
}

// Batched matmul: a (N,M,K) * b (N,K,P) -> (N,M,P). If trans_b, b is (N,P,K).
inline Var bmm(const Var& a, const Var& b, bool trans_b = false) {
  require(a->value.rank() == 3 && b->value.rank() == 3, "bmm: expects 3-D inputs");
  const std::size_t N = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2);
  require(b->value.dim(0) == N, "bmm: batch mismatch");
  const std::size_t P = trans_b ? b->value.dim(1) : b->value.dim(2);
  require((trans_b ? b->value.dim(2) : b->value.dim(1)) == K, "bmm: inner dim mismatch");
  Tensor out({N, M, P});
  for (std::size_t i = 0; i < N; ++i) {
    CMapM am(a->value.data() + i * M * K, M, K);
    MapM om(out.data() + i * M * P, M, P);
    if (trans_b) {
      CMapM bm(b->value.data() + i * P * K, P, K);
      om.noalias() = am * bm.transpose();
    } else {
      CMapM bm(b->value.data() + i * K * P, K, P);
      om.noalias() = am * bm;
    }
  }
  return detail::op_with_self(
      std::move(out), {a, b},
      [N, M, K, P, trans_b](Node& self, const std::vector<Var>& ps) {
        for (std::size_t i = 0; i < N; ++i) {
          CMapM dym(self.grad.data() + i * M * P, M, P);
          if (ps[0]->requires_grad) {
            MapM ga(ps[0]->ensure_grad().data() + i * M * K, M, K);
            if (trans_b) {
              CMapM bm(ps[1]->value.data() + i * P * K, P, K);
              ga.noalias() += dym * bm;
            } else {
              CMapM bm(ps[1]->value.data() + i * K * P, K, P);
              ga.noalias() += dym * bm.transpose();
            }
          }
          if (ps[1]->requires_grad) {
            CMapM am(ps[0]->value.data() + i * M * K, M, K);
            if (trans_b) {
              MapM gb(ps[1]->ensure_grad().data() + i * P * K, P, K);
              gb.noalias() += dym.transpose() * am;
            } else {
              MapM gb(ps[1]->ensure_grad().data() + i * K * P, K, P);
              gb.noalias() += am.transpose() * dym;
            }
          }
        }
      });
}

// Gathers rows of a (R,D) matrix -> (|idx|, D).
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  require(x->value.rank() == 2, "gather_rows: expects a matrix");
  const std::size_t R = x->value.dim(0), D = x->value.dim(1);
  Tensor out({idx.size(), D});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < R, "gather_rows: index out of range");
    std::copy_n(x->value.data() + idx[r] * D, D, out.data() + r * D);
  }
  return detail::op_with_self(std::move(out), {x},
                              [idx = std::move(idx), D](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t c = 0; c < D; ++c)
                                    g[idx[r] * D + c] += self.grad[r * D + c];
                              });
}

// Column slice of a (B,D) matrix -> (B, c1-c0).
inline Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  require(x->value.rank() == 2, "slice_cols: expects a matrix");
  const std::size_t B = x->value.dim(0), D = x->value.dim(1);
  require(c0 < c1 && c1 <= D, "slice_cols: bad range");
  const std::size_t W = c1 - c0;
  Tensor out({B, W});
  for (std::size_t r = 0; r < B; ++r)
    std::copy_n(x->value.data() + r * D + c0, W, out.data() + r * W);
  return detail::op_with_self(std::move(out), {x},
                              [c0, W, D](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                const std::size_t B = self.value.dim(0);
                                for (std::size_t r = 0; r < B; ++r)
                                  for (std::size_t c = 0; c < W; ++c)
                                    g[r * D + c0 + c] += self.grad[r * W + c];
                              });
}

// Concat 1-D tensors along dim 0.
inline Var concat_vec(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_vec: empty input");
  std::size_t total = 0;
  for (const auto& x : xs) total += x->value.numel();
  Tensor out({total});
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy_n(x->value.data(), x->value.numel(), out.data() + off);
    off += x->value.numel();
  }
  return detail::op_with_self(std::move(out), xs,
                              [](Node& self, const std::vector<Var>& ps) {
                                std::size_t off = 0;
                                for (const auto& p : ps) {
                                  if (p->requires_grad) {
                                    Tensor& g = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.numel(); ++i)
                                      g[i] += self.grad[off + i];
                                  }
                                  off += p->value.numel();
                                }
                              });
}

// ----------------------------------------------------------------------
// Feature-map (NCHW) ops
// ----------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W,
                   std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t Ho, std::size_t Wo, double* col) {
  // col is (C*k*k, Ho*Wo)
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * (Ho * Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill_n(row + oy * Wo, Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            row[oy * Wo + ox] =
                (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t k, std::size_t stride, std::size_t pad,
                       std::size_t Ho, std::size_t Wo, double* x) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * (Ho * Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = x + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution: x (B,C,H,W), w (Co,C,k,k), optional bias (Co).
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride,
                  std::size_t pad) {
  require(x->value.rank() == 4 && w->value.rank() == 4, "conv2d: expects 4-D x and w");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                    W = x->value.dim(3);
  const std::size_t Co = w->value.dim(0), k = w->value.dim(2);
  require(w->value.dim(1) == C && w->value.dim(3) == k, "conv2d: weight shape mismatch");
  require(H + 2 * pad >= k && W + 2 * pad >= k, "conv2d: input smaller than kernel");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t ck2 = C * k * k;

  Tensor out({B, Co, Ho, Wo});
  {
    std::vector<double> col(ck2 * Ho * Wo);
    CMapM wm(w->value.data(), Co, ck2);
    for (std::size_t n = 0; n < B; ++n) {
      detail::im2col(x->value.data() + n * C * H * W, C, H, W, k, stride, pad, Ho, Wo,
                     col.data());
      CMapM cm(col.data(), ck2, Ho * Wo);
      MapM om(out.data() + n * Co * Ho * Wo, Co, Ho * Wo);
      om.noalias() = wm * cm;
    }
  }
  if (b) {
    require(b->value.numel() == Co, "conv2d: bias shape mismatch");
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t c = 0; c < Co; ++c) {
        double* p = out.data() + (n * Co + c) * Ho * Wo;
        const double bv = b->value[c];
        for (std::size_t i = 0; i < Ho * Wo; ++i) p[i] += bv;
      }
  }
  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return detail::op_with_self(
      std::move(out), std::move(parents),
      [B, C, H, W, Co, k, stride, pad, Ho, Wo, ck2](Node& self, const std::vector<Var>& ps) {
        std::vector<double> col(ck2 * Ho * Wo);
        std::vector<double> dcol(ck2 * Ho * Wo);
        const bool need_dx = ps[0]->requires_grad;
        const bool need_dw = ps[1]->requires_grad;
        CMapM wm(ps[1]->value.data(), Co, ck2);
        for (std::size_t n = 0; n < B; ++n) {
          CMapM dym(self.grad.data() + n * Co * Ho * Wo, Co, Ho * Wo);
          if (need_dw) {
            detail::im2col(ps[0]->value.data() + n * C * H * W, C, H, W, k, stride, pad,
                           Ho, Wo, col.data());
            CMapM cm(col.data(), ck2, Ho * Wo);
            MapM gw(ps[1]->ensure_grad().data(), Co, ck2);
            gw.noalias() += dym * cm.transpose();
          }
          if (need_dx) {
            MapM dcm(dcol.data(), ck2, Ho * Wo);
            dcm.noalias() = wm.transpose() * dym;
            detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, Ho, Wo,
                               ps[0]->ensure_grad().data() + n * C * H * W);
          }
        }
        if (ps.size() == 3 && ps[2]->requires_grad) {
          Tensor& gb = ps[2]->ensure_grad();
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < Co; ++c) {
              const double* p = self.grad.data() + (n * Co + c) * Ho * Wo;
              double acc = 0.0;
              for (std::size_t i = 0; i < Ho * Wo; ++i) acc += p[i];
              gb[c] += acc;
            }
        }
      });
}

inline Var nearest_upsample2x(const Var& x) {
  require(x->value.rank() == 4, "upsample: expects NCHW");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                    W = x->value.dim(3);
  Tensor out({B, C, 2 * H, 2 * W});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xx = 0; xx < 2 * W; ++xx)
          out.at(n, c, y, xx) = x->value.at(n, c, y / 2, xx / 2);
  return detail::op_with_self(
      std::move(out), {x}, [B, C, H, W](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < 2 * H; ++y)
              for (std::size_t xx = 0; xx < 2 * W; ++xx)
                g[((n * C + c) * H + y / 2) * W + xx / 2] += self.grad.at(n, c, y, xx);
      });
}

inline Var global_avg_pool(const Var& x) {
  require(x->value.rank() == 4, "gap: expects NCHW");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                    W = x->value.dim(3);
  const double inv = 1.0 / static_cast<double>(H * W);
  Tensor out({B, C});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x->value.data() + (n * C + c) * H * W;
      double acc = 0.0;
      for (std::size_t i = 0; i < H * W; ++i) acc += p[i];
      out.at(n, c) = acc * inv;
    }
  return detail::op_with_self(std::move(out), {x},
                              [B, C, H, W, inv](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                for (std::size_t n = 0; n < B; ++n)
                                  for (std::size_t c = 0; c < C; ++c) {
                                    const double d = self.grad.at(n, c) * inv;
                                    double* p = g.data() + (n * C + c) * H * W;
                                    for (std::size_t i = 0; i < H * W; ++i) p[i] += d;
                                  }
                              });
}

inline Var concat_channels(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_channels: empty input");
  const std::size_t B = xs[0]->value.dim(0), H = xs[0]->value.dim(2),
                    W = xs[0]->value.dim(3);
  std::size_t Ct = 0;
  for (const auto& x : xs) {
    require(x->value.rank() == 4 && x->value.dim(0) == B && x->value.dim(2) == H &&
                x->value.dim(3) == W,
            "concat_channels: shape mismatch");
    Ct += x->value.dim(1);
  }
  Tensor out({B, Ct, H, W});
  const std::size_t plane = H * W;
  for (std::size_t n = 0; n < B; ++n) {
    std::size_t coff = 0;
    for (const auto& x : xs) {
      const std::size_t Cx = x->value.dim(1);
      std::copy_n(x->value.data() + n * Cx * plane, Cx * plane,
                  out.data() + (n * Ct + coff) * plane);
      coff += Cx;
    }
  }
  return detail::op_with_self(
      std::move(out), xs, [B, Ct, plane](Node& self, const std::vector<Var>& ps) {
        for (std::size_t n = 0; n < B; ++n) {
          std::size_t coff = 0;
          for (const auto& p : ps) {
            const std::size_t Cx = p->value.dim(1);
            if (p->requires_grad) {
              Tensor& g = p->ensure_grad();
              for (std::size_t i = 0; i < Cx * plane; ++i)
                g[n * Cx * plane + i] += self.grad[(n * Ct + coff) * plane + i];
            }
            coff += Cx;
          }
        }
      });
}

inline Var slice_channels(const Var& x, std::size_t c0, std::size_t c1) {
  require(x->value.rank() == 4, "slice_channels: expects NCHW");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                    W = x->value.dim(3);
  require(c0 < c1 && c1 <= C, "slice_channels: bad range");
  const std::size_t Cs = c1 - c0, plane = H * W;
  Tensor out({B, Cs, H, W});
  for (std::size_t n = 0; n < B; ++n)
    std::copy_n(x->value.data() + (n * C + c0) * plane, Cs * plane,
                out.data() + n * Cs * plane);
  return detail::op_with_self(
      std::move(out), {x}, [B, C, c0, Cs, plane](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t i = 0; i < Cs * plane; ++i)
            g[(n * C + c0) * plane + i] += self.grad[n * Cs * plane + i];
      });
}

// Per-channel FiLM conditioning: y = x*(1+s) + t, s/t shaped (B,C).
inline Var channel_affine(const Var& x, const Var& s, const Var& t) {
  require(x->value.rank() == 4, "channel_affine: expects NCHW");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), plane = x->value.dim(2) * x->value.dim(3);
  require(s->value.rank() == 2 && s->value.dim(0) == B && s->value.dim(1) == C,
          "channel_affine: scale shape mismatch");
  require(t->value.same_shape(s->value), "channel_affine: shift shape mismatch");
  Tensor out = x->value;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data() + (n * C + c) * plane;
      const double sv = 1.0 + s->value.at(n, c), tv = t->value.at(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * sv + tv;
    }
  return detail::op_with_self(
      std::move(out), {x, s, t}, [B, C, plane](Node& self, const std::vector<Var>& ps) {
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const double* dy = self.grad.data() + (n * C + c) * plane;
            const double* xv = ps[0]->value.data() + (n * C + c) * plane;
            if (ps[0]->requires_grad) {
              double* gx = ps[0]->ensure_grad().data() + (n * C + c) * plane;
              const double sv = 1.0 + ps[1]->value.at(n, c);
              for (std::size_t i = 0; i < plane; ++i) gx[i] += dy[i] * sv;
            }
            if (ps[1]->requires_grad) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += dy[i] * xv[i];
              ps[1]->ensure_grad().at(n, c) += acc;
            }
            if (ps[2]->requires_grad) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += dy[i];
              ps[2]->ensure_grad().at(n, c) += acc;
            }
          }
      });
}

// ----------------------------------------------------------------------
// Normalization / softmax
// ----------------------------------------------------------------------

namespace detail {

// Shared normalization backward over contiguous rows of length m:
// dx = (1/s) * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
inline void norm_rows_backward(const double* xhat, const double* dxhat, double inv_std,
                               std::size_t m, double* dx) {
  double mean_d = 0.0, mean_dx = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mean_d += dxhat[i];
    mean_dx += dxhat[i] * xhat[i];
  }
  mean_d /= static_cast<double>(m);
  mean_dx /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    dx[i] += inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

}  // namespace detail

// GroupNorm over NCHW with per-channel affine.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups,
                      double eps = 1e-5) {
  require(x->value.rank() == 4, "group_norm: expects NCHW");
  const std::size_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                    W = x->value.dim(3);
  require(C % groups == 0, "group_norm: channels not divisible by groups");
  require(gamma->value.numel() == C && beta->value.numel() == C,
          "group_norm: affine shape mismatch");
  const std::size_t cpg = C / groups, plane = H * W, m = cpg * plane;
  Tensor out({B, C, H, W});
  Tensor xhat({B, C, H, W});
  std::vector<double> inv_std(B * groups);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t g = 0; g < groups; ++g) {
      const double* p = x->value.data() + (n * C + g * cpg) * plane;
      double mean = 0.0;
      for (std::size_t i = 0; i < m; ++i) mean += p[i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = p[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[n * groups + g] = is;
      double* xh = xhat.data() + (n * C + g * cpg) * plane;
      double* o = out.data() + (n * C + g * cpg) * plane;
      for (std::size_t c = 0; c < cpg; ++c) {
        const double gm = gamma->value[g * cpg + c], bt = beta->value[g * cpg + c];
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = (p[c * plane + i] - mean) * is;
          xh[c * plane + i] = v;
          o[c * plane + i] = gm * v + bt;
        }
      }
    }
  return detail::op_with_self(
      std::move(out), {x, gamma, beta},
      [B, C, groups, cpg, plane, m, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& self, const std::vector<Var>& ps) {
        std::vector<double> dxhat(m);
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t g = 0; g < groups; ++g) {
            const double* dy = self.grad.data() + (n * C + g * cpg) * plane;
            const double* xh = xhat.data() + (n * C + g * cpg) * plane;
            for (std::size_t c = 0; c < cpg; ++c) {
              const double gm = ps[1]->value[g * cpg + c];
              for (std::size_t i = 0; i < plane; ++i)
                dxhat[c * plane + i] = dy[c * plane + i] * gm;
              if (ps[1]->requires_grad) {
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i)
                  acc += dy[c * plane + i] * xh[c * plane + i];
                ps[1]->ensure_grad()[g * cpg + c] += acc;
              }
              if (ps[2]->requires_grad) {
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += dy[c * plane + i];
                ps[2]->ensure_grad()[g * cpg + c] += acc;
              }
            }
            if (ps[0]->requires_grad)
              detail::norm_rows_backward(xh, dxhat.data(), inv_std[n * groups + g], m,
                                         ps[0]->ensure_grad().data() + (n * C + g * cpg) * plane);
          }
      });
}

// LayerNorm over the last dim of (B,T,C) or (B,C).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t C = x->value.dim(x->value.rank() - 1);
  const std::size_t rows = x->value.numel() / C;
  require(gamma->value.numel() == C && beta->value.numel() == C,
          "layer_norm: affine shape mismatch");
  Tensor out(x->value.shape());
  Tensor xhat(x->value.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * C;
    double mean = 0.0;
    for (std::size_t i = 0; i < C; ++i) mean += p[i];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      const double d = p[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* xh = xhat.data() + r * C;
    double* o = out.data() + r * C;
    for (std::size_t i = 0; i < C; ++i) {
      xh[i] = (p[i] - mean) * is;
      o[i] = gamma->value[i] * xh[i] + beta->value[i];
    }
  }
  return detail::op_with_self(
      std::move(out), {x, gamma, beta},
      [rows, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Node& self, const std::vector<Var>& ps) {
        std::vector<double> dxhat(C);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * C;
          const double* xh = xhat.data() + r * C;
          for (std::size_t i = 0; i < C; ++i) dxhat[i] = dy[i] * ps[1]->value[i];
          if (ps[1]->requires_grad) {
            Tensor& gg = ps[1]->ensure_grad();
            for (std::size_t i = 0; i < C; ++i) gg[i] += dy[i] * xh[i];
          }
          if (ps[2]->requires_grad) {
            Tensor& gb = ps[2]->ensure_grad();
            for (std::size_t i = 0; i < C; ++i) gb[i] += dy[i];
          }
          if (ps[0]->requires_grad)
            detail::norm_rows_backward(xh, dxhat.data(), inv_std[r], C,
                                       ps[0]->ensure_grad().data() + r * C);
        }
      });
}

// Softmax over the last dim.
inline Var softmax_lastdim(const Var& x) {
  const std::size_t C = x->value.dim(x->value.rank() - 1);
  const std::size_t rows = x->value.numel() / C;
  Tensor out(x->value.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * C;
    double m = p[0];
    for (std::size_t i = 1; i < C; ++i) m = std::max(m, p[i]);
    double s = 0.0;
    double* o = out.data() + r * C;
    for (std::size_t i = 0; i < C; ++i) {
      o[i] = std::exp(p[i] - m);
      s += o[i];
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < C; ++i) o[i] *= inv;
  }
  return detail::op_with_self(
      std::move(out), {x}, [rows, C](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.value.data() + r * C;
          const double* dy = self.grad.data() + r * C;
          double dot = 0.0;
          for (std::size_t i = 0; i < C; ++i) dot += y[i] * dy[i];
          for (std::size_t i = 0; i < C; ++i) g[r * C + i] += y[i] * (dy[i] - dot);
        }
      });
}

// Row-wise L2 normalization of (B,D) or a 1-D vector; rejects near-zero rows
// (cosine similarity is undefined there).
inline Var l2_normalize_rows(const Var& x, double min_norm = 1e-12) {
  const std::size_t D = x->value.dim(x->value.rank() - 1);
  const std::size_t rows = x->value.numel() / D;
  Tensor out(x->value.shape());
  std::vector<double> inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * D;
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) s += p[i] * p[i];
    const double nrm = std::sqrt(s);
    require(nrm > min_norm, "l2_normalize: zero vector has no direction");
    inv_norm[r] = 1.0 / nrm;
    double* o = out.data() + r * D;
    for (std::size_t i = 0; i < D; ++i) o[i] = p[i] * inv_norm[r];
  }
  return detail::op_with_self(
      std::move(out), {x},
      [rows, D, inv_norm = std::move(inv_norm)](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.value.data() + r * D;
          const double* dy = self.grad.data() + r * D;
          double dot = 0.0;
          for (std::size_t i = 0; i < D; ++i) dot += y[i] * dy[i];
          for (std::size_t i = 0; i < D; ++i)
            g[r * D + i] += inv_norm[r] * (dy[i] - y[i] * dot);
        }
      });
}

// Swap dims 1 and 2 of a 4-D tensor (multi-head attention plumbing).
inline Var transpose_12(const Var& x) {
  require(x->value.rank() == 4, "transpose_12: expects 4-D");
  const std::size_t A = x->value.dim(0), B = x->value.dim(1), C = x->value.dim(2),
                    D = x->value.dim(3);
  Tensor out({A, C, B, D});
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(x->value.data() + ((a * B + b) * C + c) * D, D,
                    out.data() + ((a * C + c) * B + b) * D);
  return detail::op_with_self(
      std::move(out), {x}, [A, B, C, D](Node& self, const std::vector<Var>& ps) {
        if (!ps[0]->requires_grad) return;
        Tensor& g = ps[0]->ensure_grad();
        for (std::size_t a = 0; a < A; ++a)
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* src = self.grad.data() + ((a * C + c) * B + b) * D;
              double* dst = g.data() + ((a * B + b) * C + c) * D;
              for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
            }
      });
}

// Mean over dim 1 of (B,T,C) -> (B,C).
inline Var mean_dim1(const Var& x) {
  require(x->value.rank() == 3, "mean_dim1: expects (B,T,C)");
  const std::size_t B = x->value.dim(0), T = x->value.dim(1), C = x->value.dim(2);
  const double inv = 1.0 / static_cast<double>(T);
  Tensor out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        out.at(b, c) += x->value[(b * T + t) * C + c] * inv;
  return detail::op_with_self(std::move(out), {x},
                              [B, T, C, inv](Node& self, const std::vector<Var>& ps) {
                                if (!ps[0]->requires_grad) return;
                                Tensor& g = ps[0]->ensure_grad();
                                for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t t = 0; t < T; ++t)
                                    for (std::size_t c = 0; c < C; ++c)
                                      g[(b * T + t) * C + c] += self.grad.at(b, c) * inv;
                              });
}

}  // namespace driqa::ad
