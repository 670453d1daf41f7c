#include "morph/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "morph/errors.hpp"

namespace morph {

namespace {

std::atomic<std::uint64_t> g_order{1};

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

Var new_node(Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  n->order = g_order.fetch_add(1);
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                     " vs " + b->value.shape_str());
}

}  // namespace

Var make_var(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->order = g_order.fetch_add(1);
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw DomainError("backward: root must be a scalar");
  // Collect the reachable graph; creation order is a valid topological order.
  std::vector<Node*> nodes;
  std::vector<Var> stack{root};
  std::unordered_set<const Node*> seen;
  while (!stack.empty()) {
    Var n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    nodes.push_back(n.get());
    for (const auto& p : n->parents)
      if (p->requires_grad && !seen.count(p.get())) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->order > b->order; });
  root->ensure_grad()[0] += 1.0;
  for (Node* n : nodes)
    if (n->backprop && n->requires_grad) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b](Node& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  };
  return n;
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b](Node& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  };
  return n;
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b](Node& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  };
  return n;
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b](Node& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        g[i] -= self.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
    }
  };
  return n;
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var add_scalar(const Var& a, double s) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + s;
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  };
  return n;
}

Var mul_scalar(const Var& a, double s) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, s](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
  };
  return n;
}

Var scale_add(const Var& a, const Var& b, double wa, double wb) {
  require_same_shape(a, b, "scale_add");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = wa * a->value[i] + wb * b->value[i];
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b, wa, wb](Node& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * wa;
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * wb;
    }
  };
  return n;
}

Var relu(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (a->value[i] > 0.0) g[i] += self.grad[i];
  };
  return n;
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] > 0.0 ? a->value[i] : slope * a->value[i];
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, slope](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += self.grad[i] * (a->value[i] > 0.0 ? 1.0 : slope);
  };
  return n;
}

Var sigmoid(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  };
  return n;
}

Var log_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / a->value[i];
  };
  return n;
}

Var sqrt_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a->value[i]);
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += self.grad[i] * 0.5 / self.value[i];
  };
  return n;
}

Var abs_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(a->value[i]);
  auto n = new_node(std::move(out), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double v = a->value[i];
      g[i] += self.grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  };
  return n;
}

Var square(const Var& a) { return mul(a, a); }

Var clamp(const Var& a, double lo, double hi) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::min(hi, std::max(lo, a->value[i]));
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, lo, hi](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (a->value[i] > lo && a->value[i] < hi) g[i] += self.grad[i];
  };
  return n;
}

// ---------------------------------------------------------------------------
// reductions / reshapes
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  auto n = new_node(Tensor::scalar(s), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
  };
  return n;
}

Var mean(const Var& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var sample_sum(const Var& a) {
  int n_samples = a->value.dim(0);
  std::int64_t per = a->value.numel() / n_samples;
  Tensor out({n_samples});
  for (int s = 0; s < n_samples; ++s) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < per; ++i) acc += a->value[s * per + i];
    out[s] = acc;
  }
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, per](Node& self) {
    auto& g = a->ensure_grad();
    int n_samples = self.value.dim(0);
    for (int s = 0; s < n_samples; ++s)
      for (std::int64_t i = 0; i < per; ++i) g[s * per + i] += self.grad[s];
  };
  return n;
}

Var row_sum(const Var& a) { return sample_sum(a); }

Var reshape(const Var& a, std::vector<int> shape) {
  if (numel_of(shape) != a->value.numel())
    throw ShapeError("reshape: element count mismatch");
  auto n = new_node(a->value.reshaped(shape), {a});
  n->backprop = [a](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  };
  return n;
}

Var slice_rows(const Var& a, int begin, int count) {
  if (a->value.rank() < 2) throw ShapeError("slice_rows: need rank >= 2");
  std::vector<int> shape = a->value.shape();
  int rows = shape[0];
  if (begin < 0 || begin + count > rows) throw ShapeError("slice_rows: out of range");
  std::int64_t per = a->value.numel() / rows;
  shape[0] = count;
  Tensor out(shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[begin * per + i];
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, begin, per](Node& self) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < self.value.numel(); ++i)
      g[begin * per + i] += self.grad[i];
  };
  return n;
}

Var slice_cols(const Var& a, int begin, int count) {
  if (a->value.rank() != 2) throw ShapeError("slice_cols: need rank 2");
  int rows = a->value.dim(0), cols = a->value.dim(1);
  if (begin < 0 || begin + count > cols) throw ShapeError("slice_cols: out of range");
  Tensor out({rows, count});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c) out.at(r, c) = a->value.at(r, begin + c);
  auto n = new_node(std::move(out), {a});
  n->backprop = [a, begin, count](Node& self) {
    auto& g = a->ensure_grad();
    int rows = self.value.dim(0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c) g.at(r, begin + c) += self.grad.at(r, c);
  };
  return n;
}

Var mul_mask(const Var& x, const Var& m) {
  if (x->value.rank() != 4 || m->value.rank() != 4 || m->value.dim(1) != 1 ||
      m->value.dim(0) != x->value.dim(0) || m->value.dim(2) != x->value.dim(2) ||
      m->value.dim(3) != x->value.dim(3))
    throw ShapeError("mul_mask: mask must be [N,1,H,W] matching x");
  int n_batch = x->value.dim(0), c = x->value.dim(1);
  int h = x->value.dim(2), w = x->value.dim(3);
  Tensor out(x->value.shape());
  for (int n = 0; n < n_batch; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xw = 0; xw < w; ++xw)
          out.at(n, ch, y, xw) = x->value.at(n, ch, y, xw) * m->value.at(n, 0, y, xw);
  auto node = new_node(std::move(out), {x, m});
  node->backprop = [x, m](Node& self) {
    int n_batch = x->value.dim(0), c = x->value.dim(1);
    int h = x->value.dim(2), w = x->value.dim(3);
    for (int n = 0; n < n_batch; ++n)
      for (int y = 0; y < h; ++y)
        for (int xw = 0; xw < w; ++xw) {
          double mv = m->value.at(n, 0, y, xw);
          double gm = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            double g = self.grad.at(n, ch, y, xw);
            if (x->requires_grad) x->ensure_grad().at(n, ch, y, xw) += g * mv;
            gm += g * x->value.at(n, ch, y, xw);
          }
          if (m->requires_grad) m->ensure_grad().at(n, 0, y, xw) += gm;
        }
  };
  return node;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
    throw ShapeError("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                     b->value.shape_str());
  int m = a->value.dim(0), k = a->value.dim(1), p = b->value.dim(1);
  Tensor out({m, p});
  CMapM A(a->value.data(), m, k), B(b->value.data(), k, p);
  MapM O(out.data(), m, p);
  O.noalias() = A * B;
  auto n = new_node(std::move(out), {a, b});
  n->backprop = [a, b, m, k, p](Node& self) {
    CMapM G(self.grad.data(), m, p);
    if (a->requires_grad) {
      MapM GA(a->ensure_grad().data(), m, k);
      CMapM B(b->value.data(), k, p);
      GA.noalias() += G * B.transpose();
    }
    if (b->requires_grad) {
      MapM GB(b->ensure_grad().data(), k, p);
      CMapM A(a->value.data(), m, k);
      GB.noalias() += A.transpose() * G;
    }
  };
  return n;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->value.rank() != 2 || w->value.rank() != 2 || b->value.rank() != 1)
    throw ShapeError("linear: bad ranks");
  if (x->value.dim(1) != w->value.dim(0) || w->value.dim(1) != b->value.dim(0))
    throw ShapeError("linear: incompatible shapes");
  int n_rows = x->value.dim(0), k = x->value.dim(1), m = w->value.dim(1);
  Tensor out({n_rows, m});
  CMapM X(x->value.data(), n_rows, k), W(w->value.data(), k, m);
  MapM O(out.data(), n_rows, m);
  O.noalias() = X * W;
  for (int r = 0; r < n_rows; ++r)
    for (int c = 0; c < m; ++c) out.at(r, c) += b->value[c];
  auto n = new_node(std::move(out), {x, w, b});
  n->backprop = [x, w, b, n_rows, k, m](Node& self) {
    CMapM G(self.grad.data(), n_rows, m);
    if (x->requires_grad) {
      MapM GX(x->ensure_grad().data(), n_rows, k);
      CMapM W(w->value.data(), k, m);
      GX.noalias() += G * W.transpose();
    }
    if (w->requires_grad) {
      MapM GW(w->ensure_grad().data(), k, m);
      CMapM X(x->value.data(), n_rows, k);
      GW.noalias() += X.transpose() * G;
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int r = 0; r < n_rows; ++r)
        for (int c = 0; c < m; ++c) gb[c] += self.grad[static_cast<std::int64_t>(r) * m + c];
    }
  };
  return n;
}

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

void im2col(const Tensor& x, int n, int kh, int kw, int stride, int pad,
            int oh, int ow, Tensor& cols) {
  int c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  // cols: [c_in*kh*kw, oh*ow]
  std::int64_t col = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox, ++col) {
      std::int64_t row = 0;
      for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx, ++row) {
            int ix = ox * stride + kx - pad;
            double v = 0.0;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = x.at(n, c, iy, ix);
            cols[row * (static_cast<std::int64_t>(oh) * ow) + col] = v;
          }
        }
      }
    }
  }
}

void col2im_accum(const Tensor& cols, int n, int kh, int kw, int stride, int pad,
                  int oh, int ow, Tensor& gx) {
  int c_in = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  std::int64_t col = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox, ++col) {
      std::int64_t row = 0;
      for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx, ++row) {
            int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              gx.at(n, c, iy, ix) += cols[row * (static_cast<std::int64_t>(oh) * ow) + col];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4)
    throw ShapeError("conv2d: inputs must be rank 4");
  int n_batch = x->value.dim(0), c_in = x->value.dim(1);
  int h = x->value.dim(2), wd = x->value.dim(3);
  int c_out = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != c_in)
    throw ShapeError("conv2d: channel mismatch");
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: output collapses");
  std::int64_t krows = static_cast<std::int64_t>(c_in) * kh * kw;
  Tensor out({n_batch, c_out, oh, ow});
  Tensor cols({static_cast<int>(krows), oh * ow});
  CMapM W(w->value.data(), c_out, krows);
  for (int n = 0; n < n_batch; ++n) {
    im2col(x->value, n, kh, kw, stride, pad, oh, ow, cols);
    CMapM C(cols.data(), krows, static_cast<std::int64_t>(oh) * ow);
    MapM O(out.data() + static_cast<std::int64_t>(n) * c_out * oh * ow, c_out,
           static_cast<std::int64_t>(oh) * ow);
    O.noalias() = W * C;
  }
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < c_out; ++c) {
      double bias = b->value[c];
      for (int i = 0; i < oh * ow; ++i)
        out[((static_cast<std::int64_t>(n) * c_out + c) * oh * ow) + i] += bias;
    }
  auto node = new_node(std::move(out), {x, w, b});
  node->backprop = [x, w, b, stride, pad, oh, ow, kh, kw, c_out, krows](Node& self) {
    int n_batch = x->value.dim(0);
    Tensor cols({static_cast<int>(krows), oh * ow});
    for (int n = 0; n < n_batch; ++n) {
      CMapM G(self.grad.data() + static_cast<std::int64_t>(n) * c_out * oh * ow, c_out,
              static_cast<std::int64_t>(oh) * ow);
      if (w->requires_grad || x->requires_grad)
        im2col(x->value, n, kh, kw, stride, pad, oh, ow, cols);
      if (w->requires_grad) {
        MapM GW(w->ensure_grad().data(), c_out, krows);
        CMapM C(cols.data(), krows, static_cast<std::int64_t>(oh) * ow);
        GW.noalias() += G * C.transpose();
      }
      if (x->requires_grad) {
        Tensor gcols({static_cast<int>(krows), oh * ow});
        MapM GC(gcols.data(), krows, static_cast<std::int64_t>(oh) * ow);
        CMapM W(w->value.data(), c_out, krows);
        GC.noalias() = W.transpose() * G;
        col2im_accum(gcols, n, kh, kw, stride, pad, oh, ow, x->ensure_grad());
      }
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int n = 0; n < n_batch; ++n)
        for (int c = 0; c < c_out; ++c)
          for (int i = 0; i < oh * ow; ++i)
            gb[c] += self.grad[(static_cast<std::int64_t>(n) * c_out + c) * oh * ow + i];
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                Tensor& running_mean, Tensor& running_var, bool training,
                double momentum, double eps) {
  if (x->value.rank() != 4) throw ShapeError("batchnorm2d: input must be rank 4");
  int n_batch = x->value.dim(0), c = x->value.dim(1);
  int h = x->value.dim(2), w = x->value.dim(3);
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw ShapeError("batchnorm2d: affine size mismatch");
  std::int64_t per = static_cast<std::int64_t>(n_batch) * h * w;

  Tensor mean_t({c}), var_t({c});
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double m = 0.0;
      for (int n = 0; n < n_batch; ++n)
        for (int y = 0; y < h; ++y)
          for (int xw = 0; xw < w; ++xw) m += x->value.at(n, ch, y, xw);
      m /= static_cast<double>(per);
      double v = 0.0;
      for (int n = 0; n < n_batch; ++n)
        for (int y = 0; y < h; ++y)
          for (int xw = 0; xw < w; ++xw) {
            double d = x->value.at(n, ch, y, xw) - m;
            v += d * d;
          }
      v /= static_cast<double>(per);
      mean_t[ch] = m;
      var_t[ch] = v;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * m;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * v;
    }
  } else {
    mean_t = running_mean;
    var_t = running_var;
  }

  Tensor out(x->value.shape());
  Tensor inv_std({c});
  for (int ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var_t[ch] + eps);
  for (int n = 0; n < n_batch; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xw = 0; xw < w; ++xw) {
          double xhat = (x->value.at(n, ch, y, xw) - mean_t[ch]) * inv_std[ch];
          out.at(n, ch, y, xw) = gamma->value[ch] * xhat + beta->value[ch];
        }

  auto node = new_node(std::move(out), {x, gamma, beta});
  node->backprop = [x, gamma, beta, mean_t, inv_std, training, per](Node& self) {
    int n_batch = x->value.dim(0), c = x->value.dim(1);
    int h = x->value.dim(2), w = x->value.dim(3);
    // Per-channel reductions shared by all three gradients.
    std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
    for (int n = 0; n < n_batch; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xw = 0; xw < w; ++xw) {
            double g = self.grad.at(n, ch, y, xw);
            double xhat = (x->value.at(n, ch, y, xw) - mean_t[ch]) * inv_std[ch];
            sum_g[ch] += g;
            sum_gx[ch] += g * xhat;
          }
    if (gamma->requires_grad) {
      auto& gg = gamma->ensure_grad();
      for (int ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
    }
    if (beta->requires_grad) {
      auto& gb = beta->ensure_grad();
      for (int ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
    }
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      double inv_per = 1.0 / static_cast<double>(per);
      for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < w; ++xw) {
              double g = self.grad.at(n, ch, y, xw);
              if (training) {
                double xhat = (x->value.at(n, ch, y, xw) - mean_t[ch]) * inv_std[ch];
                gx.at(n, ch, y, xw) += gamma->value[ch] * inv_std[ch] *
                    (g - inv_per * sum_g[ch] - inv_per * xhat * sum_gx[ch]);
              } else {
                gx.at(n, ch, y, xw) += gamma->value[ch] * inv_std[ch] * g;
              }
            }
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// bilinear 2x upsampling (pixel-center convention)
// ---------------------------------------------------------------------------

Var upsample_bilinear_x2(const Var& x) {
  if (x->value.rank() != 4) throw ShapeError("upsample: input must be rank 4");
  int n_batch = x->value.dim(0), c = x->value.dim(1);
  int h = x->value.dim(2), w = x->value.dim(3);
  int oh = 2 * h, ow = 2 * w;
  Tensor out({n_batch, c, oh, ow});
  // Precompute the 1-D interpolation stencils once; reused in backward.
  auto stencil = [](int oi, int in_size) {
    double src = (oi + 0.5) / 2.0 - 0.5;
    int lo = static_cast<int>(std::floor(src));
    double frac = src - lo;
    int i0 = std::min(std::max(lo, 0), in_size - 1);
    int i1 = std::min(std::max(lo + 1, 0), in_size - 1);
    return std::tuple<int, int, double>(i0, i1, frac);
  };
  for (int n = 0; n < n_batch; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy) {
        auto [y0, y1, fy] = stencil(oy, h);
        for (int ox = 0; ox < ow; ++ox) {
          auto [x0, x1, fx] = stencil(ox, w);
          double v = (1 - fy) * ((1 - fx) * x->value.at(n, ch, y0, x0) +
                                 fx * x->value.at(n, ch, y0, x1)) +
                     fy * ((1 - fx) * x->value.at(n, ch, y1, x0) +
                           fx * x->value.at(n, ch, y1, x1));
          out.at(n, ch, oy, ox) = v;
        }
      }
  auto node = new_node(std::move(out), {x});
  node->backprop = [x, h, w, oh, ow](Node& self) {
    auto stencil = [](int oi, int in_size) {
      double src = (oi + 0.5) / 2.0 - 0.5;
      int lo = static_cast<int>(std::floor(src));
      double frac = src - lo;
      int i0 = std::min(std::max(lo, 0), in_size - 1);
      int i1 = std::min(std::max(lo + 1, 0), in_size - 1);
      return std::tuple<int, int, double>(i0, i1, frac);
    };
    auto& gx = x->ensure_grad();
    int n_batch = x->value.dim(0), c = x->value.dim(1);
    for (int n = 0; n < n_batch; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy) {
          auto [y0, y1, fy] = stencil(oy, h);
          for (int ox = 0; ox < ow; ++ox) {
            auto [x0, x1, fx] = stencil(ox, w);
            double g = self.grad.at(n, ch, oy, ox);
            gx.at(n, ch, y0, x0) += g * (1 - fy) * (1 - fx);
            gx.at(n, ch, y0, x1) += g * (1 - fy) * fx;
            gx.at(n, ch, y1, x0) += g * fy * (1 - fx);
            gx.at(n, ch, y1, x1) += g * fy * fx;
          }
        }
  };
  return node;
}

// ---------------------------------------------------------------------------
// conditioning / odds and ends
// ---------------------------------------------------------------------------

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  if (x->value.rank() != 4 || gamma->value.rank() != 2 || beta->value.rank() != 2)
    throw ShapeError("channel_affine: bad ranks");
  int n_batch = x->value.dim(0), c = x->value.dim(1);
  int h = x->value.dim(2), w = x->value.dim(3);
  if (gamma->value.dim(0) != n_batch || gamma->value.dim(1) != c ||
      !gamma->value.same_shape(beta->value))
    throw ShapeError("channel_affine: projection/channel mismatch: x " +
                     x->value.shape_str() + " gamma " + gamma->value.shape_str());
  Tensor out(x->value.shape());
  for (int n = 0; n < n_batch; ++n)
    for (int ch = 0; ch < c; ++ch) {
      double g = gamma->value.at(n, ch), b = beta->value.at(n, ch);
      for (int y = 0; y < h; ++y)
        for (int xw = 0; xw < w; ++xw)
          out.at(n, ch, y, xw) = g * x->value.at(n, ch, y, xw) + b;
    }
  auto node = new_node(std::move(out), {x, gamma, beta});
  node->backprop = [x, gamma, beta](Node& self) {
    int n_batch = x->value.dim(0), c = x->value.dim(1);
    int h = x->value.dim(2), w = x->value.dim(3);
    for (int n = 0; n < n_batch; ++n)
      for (int ch = 0; ch < c; ++ch) {
        double acc_g = 0.0, acc_b = 0.0;
        for (int y = 0; y < h; ++y)
          for (int xw = 0; xw < w; ++xw) {
            double g = self.grad.at(n, ch, y, xw);
            acc_g += g * x->value.at(n, ch, y, xw);
            acc_b += g;
            if (x->requires_grad)
              x->ensure_grad().at(n, ch, y, xw) += g * gamma->value.at(n, ch);
          }
        if (gamma->requires_grad) gamma->ensure_grad().at(n, ch) += acc_g;
        if (beta->requires_grad) beta->ensure_grad().at(n, ch) += acc_b;
      }
  };
  return node;
}

Var batch_tile(const Var& x, int n) {
  if (x->value.rank() != 4 || x->value.dim(0) != 1)
    throw ShapeError("batch_tile: input must be [1,C,H,W]");
  std::vector<int> shape = x->value.shape();
  shape[0] = n;
  std::int64_t per = x->value.numel();
  Tensor out(shape);
  for (int i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < per; ++j) out[i * per + j] = x->value[j];
  auto node = new_node(std::move(out), {x});
  node->backprop = [x, n, per](Node& self) {
    auto& g = x->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < per; ++j) g[j] += self.grad[i * per + j];
  };
  return node;
}

Var gram(const Var& x) {
  if (x->value.rank() != 4) throw ShapeError("gram: input must be rank 4");
  int n_batch = x->value.dim(0), c = x->value.dim(1);
  int s = x->value.dim(2) * x->value.dim(3);
  if (c <= 0 || s <= 0) throw ShapeError("gram: empty map");
  double scale = 1.0 / (static_cast<double>(c) * s);
  Tensor out({n_batch, c, c});
  for (int n = 0; n < n_batch; ++n) {
    CMapM M(x->value.data() + static_cast<std::int64_t>(n) * c * s, c, s);
    MapM G(out.data() + static_cast<std::int64_t>(n) * c * c, c, c);
    G.noalias() = scale * (M * M.transpose());
  }
  auto node = new_node(std::move(out), {x});
  node->backprop = [x, c, s, scale](Node& self) {
    if (!x->requires_grad) return;
    int n_batch = x->value.dim(0);
    auto& gx = x->ensure_grad();
    for (int n = 0; n < n_batch; ++n) {
      CMapM M(x->value.data() + static_cast<std::int64_t>(n) * c * s, c, s);
      CMapM G(self.grad.data() + static_cast<std::int64_t>(n) * c * c, c, c);
      MapM GX(gx.data() + static_cast<std::int64_t>(n) * c * s, c, s);
      GX.noalias() += scale * ((G + G.transpose()) * M);
    }
  };
  return node;
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  if (logits->value.rank() != 2) throw ShapeError("softmax_ce: logits must be [N,K]");
  int n = logits->value.dim(0), k = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("softmax_ce: label count mismatch");
  Tensor probs({n, k});
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    double mx = -1e300;
    for (int c = 0; c < k; ++c) mx = std::max(mx, logits->value.at(r, c));
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(logits->value.at(r, c) - mx);
    for (int c = 0; c < k; ++c) probs.at(r, c) = std::exp(logits->value.at(r, c) - mx) / z;
    loss -= std::log(std::max(probs.at(r, labels[r]), 1e-300));
  }
  loss /= n;
  auto node = new_node(Tensor::scalar(loss), {logits});
  node->backprop = [logits, probs, labels, n, k](Node& self) {
    auto& g = logits->ensure_grad();
    double scale = self.grad[0] / n;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < k; ++c)
        g.at(r, c) += scale * (probs.at(r, c) - (labels[r] == c ? 1.0 : 0.0));
  };
  return node;
}

Var rowwise_cosine_distance(const Var& a, const Var& b) {
  require_same_shape(a, b, "rowwise_cosine_distance");
  for (int r = 0; r < a->value.dim(0); ++r) {
    double na = 0.0, nb = 0.0;
    for (int c = 0; c < a->value.dim(1); ++c) {
      na += a->value.at(r, c) * a->value.at(r, c);
      nb += b->value.at(r, c) * b->value.at(r, c);
    }
    if (na == 0.0 || nb == 0.0)
      throw DomainError("cosine distance: zero-norm vector");
  }
  Var dot = row_sum(mul(a, b));
  Var norm = mul(sqrt_(row_sum(mul(a, a))), sqrt_(row_sum(mul(b, b))));
  return add_scalar(neg(div(dot, norm)), 1.0);
}

}  // namespace morph
