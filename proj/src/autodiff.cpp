#include "cdmm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "cdmm/error.hpp"

namespace cdmm::ad {

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(const Tensor& value, bool requires_grad) {
  Node n;
  n.ref = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  for (const Var& p : parents) {
    if (&p.graph() != this) throw ContractError("operands belong to different graphs");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.ref ? *n.ref : n.owned;
}

void Graph::accumulate(Var v, std::span<const double> g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  const Tensor& val = n.ref ? *n.ref : n.owned;
  if (g.size() != val.numel()) throw DimensionError("gradient size mismatch");
  if (!n.has_grad) {
    n.grad = Tensor(val.shape(), std::vector<double>(g.begin(), g.end()));
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Graph::accumulate(Var v, const Tensor& g) { accumulate(v, g.values()); }

void Graph::backward(Var loss) {
  if (value(loss).numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(value(loss).shape()));
  }
  accumulate(loss, Tensor::scalar(1.0));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Graph::zero_grad() {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
}

const Tensor* Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? &n.grad : nullptr;
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  // Floored at the smallest normal double so scales never underflow to zero.
  return std::max(std::log1p(std::exp(x)), std::numeric_limits<double>::min());
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

// Unary elementwise op given f(x) and f'(x, f(x)).
template <typename F, typename D>
Var unary(Var a, F f, D df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
  return a.graph().record(std::move(out), {a}, [a, df](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(a);
    std::vector<double> d(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) d[i] = go[i] * df(x[i]);
    g.accumulate(a, d);
  });
}

enum class Bcast { kNone, kLeft, kRight };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kNone;
  if (a.numel() == 1) return Bcast::kLeft;
  if (b.numel() == 1) return Bcast::kRight;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                       " and " + shape_string(b.shape()));
}

// Binary elementwise op. f(x, y); dfx/dfy are partials at (x, y).
template <typename F, typename DX, typename DY>
Var binary(Var a, Var b, const char* name, F f, DX dfx, DY dfy) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast kind = broadcast_kind(av, bv, name);
  const Tensor& big = kind == Bcast::kLeft ? bv : av;
  Tensor out(big.shape());
  const std::size_t n = big.numel();
  auto ai = [&](std::size_t i) { return kind == Bcast::kLeft ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return kind == Bcast::kRight ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));
  return a.graph().record(std::move(out), {a, b}, [a, b, kind, n, dfx, dfy](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    auto xi = [&](std::size_t i) { return kind == Bcast::kLeft ? x[0] : x[i]; };
    auto yi = [&](std::size_t i) { return kind == Bcast::kRight ? y[0] : y[i]; };
    if (g.requires_grad(a)) {
      std::vector<double> d(x.numel(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        d[kind == Bcast::kLeft ? 0 : i] += go[i] * dfx(xi(i), yi(i));
      }
      g.accumulate(a, d);
    }
    if (g.requires_grad(b)) {
      std::vector<double> d(y.numel(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        d[kind == Bcast::kRight ? 0 : i] += go[i] * dfy(xi(i), yi(i));
      }
      g.accumulate(b, d);
    }
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul inner extents differ: " + shape_string(av.shape()) + " · " +
                         shape_string(bv.shape()));
  }
  Tensor out(Shape{m, n});
  gemm_nn(av.values(), bv.values(), out.values(), m, k, n, false);
  return a.graph().record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& go) {
    if (g.requires_grad(a)) {
      std::vector<double> da(m * k);
      gemm_nt(go.values(), g.value(b).values(), da, m, n, k, false);
      g.accumulate(a, da);
    }
    if (g.requires_grad(b)) {
      std::vector<double> db(k * n);
      gemm_tn(g.value(a).values(), go.values(), db, m, k, n, false);
      g.accumulate(b, db);
    }
  });
}

Var add_rowwise(Var m, Var bias) {
  const Tensor& mv = m.value();
  const Tensor& bv = bias.value();
  require_rank2(mv, "add_rowwise");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  if (bv.numel() != cols) {
    throw DimensionError("add_rowwise: bias " + shape_string(bv.shape()) + " vs matrix " +
                         shape_string(mv.shape()));
  }
  Tensor out = mv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  return m.graph().record(std::move(out), {m, bias}, [m, bias, rows, cols](Graph& g, const Tensor& go) {
    g.accumulate(m, go);
    if (g.requires_grad(bias)) {
      std::vector<double> db(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) db[c] += go.at(r, c);
      g.accumulate(bias, db);
    }
  });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return ad::sigmoid(x); },
      [](double x) {
        const double s = ad::sigmoid(x);
        return s * (1.0 - s);
      });
}

Var softplus(Var a) {
  return unary(a, [](double x) { return ad::softplus(x); }, [](double x) { return ad::sigmoid(x); });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const std::size_t n = av.numel();
  return a.graph().record(Tensor::scalar(s), {a}, [a, n](Graph& g, const Tensor& go) {
    g.accumulate(a, std::vector<double>(n, go[0]));
  });
}

Var row(Var m, std::size_t r) {
  const Tensor& mv = m.value();
  require_rank2(mv, "row");
  if (r >= mv.rows()) throw DimensionError("row index out of range");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  return m.graph().record(Tensor::row(mv.row_span(r)), {m}, [m, r, rows, cols](Graph& g, const Tensor& go) {
    std::vector<double> d(rows * cols, 0.0);
    std::copy(go.values().begin(), go.values().end(), d.begin() + static_cast<std::ptrdiff_t>(r * cols));
    g.accumulate(m, d);
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows needs at least one row");
  const std::size_t cols = rows[0].value().numel();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const Var& r : rows) {
    const Tensor& v = r.value();
    if (v.numel() != cols) throw DimensionError("stack_rows: ragged rows");
    data.insert(data.end(), v.values().begin(), v.values().end());
  }
  std::vector<Var> parents(rows.begin(), rows.end());
  Graph& graph = rows[0].graph();
  return graph.record(Tensor(Shape{rows.size(), cols}, std::move(data)), parents,
                      [parents, cols](Graph& g, const Tensor& go) {
                        for (std::size_t i = 0; i < parents.size(); ++i) {
                          g.accumulate(parents[i], go.values().subspan(i * cols, cols));
                        }
                      });
}

Var repeat_rows(Var m, std::size_t k) {
  const Tensor& mv = m.value();
  require_rank2(mv, "repeat_rows");
  if (k == 0) throw ContractError("repeat factor must be positive");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  Tensor out(Shape{rows * k, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) std::copy_n(mv.row_span(r).begin(), cols, out.row_span(r * k + j).begin());
  return m.graph().record(std::move(out), {m}, [m, rows, cols, k](Graph& g, const Tensor& go) {
    std::vector<double> d(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += go.at(r * k + j, c);
    g.accumulate(m, d);
  });
}

Var first_rows(Var m, std::size_t n) {
  const Tensor& mv = m.value();
  require_rank2(mv, "first_rows");
  if (n == 0 || n > mv.rows()) throw DimensionError("first_rows: bad row count");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  std::vector<double> data(mv.values().begin(), mv.values().begin() + static_cast<std::ptrdiff_t>(n * cols));
  return m.graph().record(Tensor(Shape{n, cols}, std::move(data)), {m},
                          [m, rows, cols](Graph& g, const Tensor& go) {
                            std::vector<double> d(rows * cols, 0.0);
                            std::copy(go.values().begin(), go.values().end(), d.begin());
                            g.accumulate(m, d);
                          });
}

std::size_t conv_out_length(std::size_t length, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  if (stride == 0) throw ContractError("conv stride must be positive");
  if (length + 2 * pad < kernel) {
    throw DimensionError("conv1d: input length " + std::to_string(length) + " with pad " +
                         std::to_string(pad) + " shorter than kernel " + std::to_string(kernel));
  }
  return (length + 2 * pad - kernel) / stride + 1;
}

Var conv1d(Var x, Var kernels, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  const Tensor& bv = bias.value();
  require_rank2(xv, "conv1d");
  if (kv.rank() != 3) throw DimensionError("conv1d kernels must be [C_out×C_in×K]");
  const std::size_t len = xv.rows(), cin = xv.cols();
  const std::size_t cout = kv.dim(0), ksize = kv.dim(2);
  if (kv.dim(1) != cin) {
    throw DimensionError("conv1d: input has " + std::to_string(cin) + " channels, kernels expect " +
                         std::to_string(kv.dim(1)));
  }
  if (bv.numel() != cout) throw DimensionError("conv1d: bias length differs from output channels");
  const std::size_t out_len = conv_out_length(len, ksize, stride, pad);
  const std::size_t width = ksize * cin;

  // im2col: cols[t, k*cin + c] = x[t*stride + k - pad, c]
  auto cols = std::make_shared<std::vector<double>>(out_len * width, 0.0);
  for (std::size_t t = 0; t < out_len; ++t) {
    for (std::size_t k = 0; k < ksize; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      std::copy_n(xv.row_span(static_cast<std::size_t>(src)).begin(), cin,
                  cols->begin() + static_cast<std::ptrdiff_t>(t * width + k * cin));
    }
  }
  // wmat[(k*cin + c), o] = kernels[o, c, k]
  auto wmat = std::make_shared<std::vector<double>>(width * cout);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t k = 0; k < ksize; ++k) (*wmat)[(k * cin + c) * cout + o] = kv[(o * cin + c) * ksize + k];

  Tensor out(Shape{out_len, cout});
  for (std::size_t t = 0; t < out_len; ++t) std::copy_n(bv.values().begin(), cout, out.row_span(t).begin());
  gemm_nn(*cols, *wmat, out.values(), out_len, width, cout, true);

  return x.graph().record(
      std::move(out), {x, kernels, bias},
      [=](Graph& g, const Tensor& go) {
        if (g.requires_grad(bias)) {
          std::vector<double> db(cout, 0.0);
          for (std::size_t t = 0; t < out_len; ++t)
            for (std::size_t o = 0; o < cout; ++o) db[o] += go.at(t, o);
          g.accumulate(bias, db);
        }
        if (g.requires_grad(kernels)) {
          std::vector<double> dw(width * cout);
          gemm_tn(*cols, go.values(), dw, out_len, width, cout, false);
          std::vector<double> dk(cout * cin * ksize);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t k = 0; k < ksize; ++k) dk[(o * cin + c) * ksize + k] = dw[(k * cin + c) * cout + o];
          g.accumulate(kernels, dk);
        }
        if (g.requires_grad(x)) {
          std::vector<double> dcols(out_len * width);
          gemm_nt(go.values(), *wmat, dcols, out_len, cout, width, false);
          std::vector<double> dx(len * cin, 0.0);
          for (std::size_t t = 0; t < out_len; ++t) {
            for (std::size_t k = 0; k < ksize; ++k) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(pad);
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
              const double* from = dcols.data() + t * width + k * cin;
              double* to = dx.data() + static_cast<std::size_t>(src) * cin;
              for (std::size_t c = 0; c < cin; ++c) to[c] += from[c];
            }
          }
          g.accumulate(x, dx);
        }
      });
}

Var log_softmax_rows(Var m) {
  const Tensor& mv = m.value();
  require_rank2(mv, "log_softmax_rows");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  Tensor out(mv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = mv.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (double v : in) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = in[c] - lse;
  }
  Tensor saved = out;
  return m.graph().record(std::move(out), {m}, [m, saved, rows, cols](Graph& g, const Tensor& go) {
    std::vector<double> d(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += go.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] = go.at(r, c) - std::exp(saved.at(r, c)) * gs;
    }
    g.accumulate(m, d);
  });
}

Var pick(Var m, std::span<const int> index) {
  const Tensor& mv = m.value();
  require_rank2(mv, "pick");
  const std::size_t rows = mv.rows(), cols = mv.cols();
  if (index.size() != rows) throw DimensionError("pick: one index per row required");
  std::vector<int> idx(index.begin(), index.end());
  Tensor out(Shape{rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) throw ContractError("pick: index out of range");
    out[r] = mv.at(r, static_cast<std::size_t>(idx[r]));
  }
  return m.graph().record(std::move(out), {m}, [m, idx, rows, cols](Graph& g, const Tensor& go) {
    std::vector<double> d(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) d[r * cols + static_cast<std::size_t>(idx[r])] = go[r];
    g.accumulate(m, d);
  });
}

}  // namespace cdmm::ad
