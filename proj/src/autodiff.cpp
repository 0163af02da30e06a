#include "flowscan/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "flowscan/errors.hpp"

namespace flowscan {
namespace autodiff {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<bool> g_finite_checks{true};

void check_finite(const char* op, const Tensor& t) {
  if (g_finite_checks.load(std::memory_order_relaxed) && !t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

Var make_node(const char* op, Tensor value) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  return node;
}

using Pull = std::function<void(const Tensor&, Tensor&)>;

void attach(const Var& child, const Var& parent, Pull pull) {
  if (!g_grad_enabled || !parent->requires_grad) return;
  child->requires_grad = true;
  child->parents.push_back(Parent{parent, std::move(pull)});
}

// --- broadcasting machinery -------------------------------------------------

std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b,
                                         const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  std::vector<std::size_t> out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Element strides of `shape` right-aligned into `out_shape`; zero on axes
// where the operand broadcasts.
std::vector<std::size_t> aligned_strides(const std::vector<std::size_t>& shape,
                                         const std::vector<std::size_t>& out_shape) {
  const std::size_t rank = out_shape.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const std::size_t axis = shape.size() - 1 - i;
    const std::size_t out_axis = rank - 1 - i;
    strides[out_axis] = shape[axis] == 1 ? 0 : stride;
    stride *= shape[axis];
  }
  return strides;
}

// Visits every element of a tensor with shape `os`, handing the visitor the
// linear output offset plus offsets into two stride-aligned operands.
template <class F>
void broadcast_walk(const std::vector<std::size_t>& os, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& visit) {
  const std::size_t rank = os.size();
  const std::size_t total = shape_numel(os);
  if (total == 0) return;
  if (rank == 0) {
    visit(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  const std::size_t inner = os[rank - 1];
  const std::size_t ia = sa[rank - 1];
  const std::size_t ib = sb[rank - 1];
  for (std::size_t base = 0; base < total; base += inner) {
    std::size_t pa = oa;
    std::size_t pb = ob;
    for (std::size_t j = 0; j < inner; ++j) {
      visit(base + j, pa, pb);
      pa += ia;
      pb += ib;
    }
    if (rank == 1) break;
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++idx[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (idx[axis] < os[axis]) break;
      oa -= sa[axis] * os[axis];
      ob -= sb[axis] * os[axis];
      idx[axis] = 0;
    }
  }
}

struct BinaryPlan {
  std::vector<std::size_t> out_shape;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
};

BinaryPlan plan_binary(const Var& a, const Var& b, const char* op) {
  BinaryPlan plan;
  plan.out_shape = broadcast_shape(a->value.shape(), b->value.shape(), op);
  plan.sa = aligned_strides(a->value.shape(), plan.out_shape);
  plan.sb = aligned_strides(b->value.shape(), plan.out_shape);
  return plan;
}

// Forward + two backward closures built from per-element lambdas.
template <class FwdF, class DaF, class DbF>
Var binary_op(const char* op, const Var& a, const Var& b, FwdF fwd, DaF dfda, DbF dfdb) {
  BinaryPlan plan = plan_binary(a, b, op);
  Tensor out(plan.out_shape);
  {
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* po = out.data();
    if (a->value.same_shape(b->value) && a->value.shape() == plan.out_shape) {
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
      broadcast_walk(plan.out_shape, plan.sa, plan.sb,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       po[o] = fwd(pa[ia], pb[ib]);
                     });
    }
  }
  Var node = make_node(op, std::move(out));
  attach(node, a, [plan, av = a, bv = b, dfda](const Tensor& g, Tensor& ga) {
    const double* pa = av->value.data();
    const double* pb = bv->value.data();
    const double* pg = g.data();
    double* pga = ga.data();
    broadcast_walk(plan.out_shape, plan.sa, plan.sb,
                   [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     pga[ia] += pg[o] * dfda(pa[ia], pb[ib]);
                   });
  });
  attach(node, b, [plan, av = a, bv = b, dfdb](const Tensor& g, Tensor& gb) {
    const double* pa = av->value.data();
    const double* pb = bv->value.data();
    const double* pg = g.data();
    double* pgb = gb.data();
    broadcast_walk(plan.out_shape, plan.sa, plan.sb,
                   [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     pgb[ib] += pg[o] * dfdb(pa[ia], pb[ib]);
                   });
  });
  return node;
}

template <class FwdF, class DerivF>
Var unary_op(const char* op, const Var& a, FwdF fwd, DerivF deriv) {
  Tensor out(a->value.shape());
  const std::size_t n = out.numel();
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  Var node = make_node(op, std::move(out));
  Node* self = node.get();
  attach(node, a, [av = a, self, deriv](const Tensor& g, Tensor& ga) {
    const std::size_t n = g.numel();
    const double* pg = g.data();
    const double* px = av->value.data();
    const double* py = self->value.data();
    double* pga = ga.data();
    for (std::size_t i = 0; i < n; ++i) pga[i] += pg[i] * deriv(px[i], py[i]);
  });
  return node;
}

// Decomposes a shape around an axis into (outer, mid, inner) extents.
struct AxisView {
  std::size_t outer{1};
  std::size_t mid{1};
  std::size_t inner{1};
};

AxisView axis_view(const std::vector<std::size_t>& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(shape));
  }
  AxisView view;
  for (std::size_t i = 0; i < axis; ++i) view.outer *= shape[i];
  view.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) view.inner *= shape[i];
  return view;
}

std::vector<std::size_t> reduced_shape(const std::vector<std::size_t>& shape, std::size_t axis,
                                       bool keepdims) {
  std::vector<std::size_t> out = shape;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// --- matrix kernels ----------------------------------------------------------

// C[M,N] (+)= A[M,K] . B[K,N]
void mm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
           std::size_t N, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!accumulate) std::fill(c, c + N, 0.0);
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C[M,N] (+)= A[M,K] . B[N,K]^T
void mm_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
           std::size_t N, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      if (accumulate) {
        c[j] += acc;
      } else {
        c[j] = acc;
      }
    }
  }
}

// C[M,N] (+)= A[K,M]^T . B[K,N]
void mm_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
           std::size_t N, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double aki = a[i];
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aki * b[j];
    }
  }
}

}  // namespace

Var leaf(Tensor value) {
  Var node = make_node("leaf", std::move(value));
  node->requires_grad = true;
  return node;
}

Var constant(Tensor value) { return make_node("constant", std::move(value)); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

Var add(const Var& a, const Var& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var add(const Var& a, double b) {
  return unary_op(
      "add_scalar", a, [b](double x) { return x + b; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, double b) { return add(a, -b); }

Var sub(double a, const Var& b) {
  return unary_op(
      "rsub_scalar", b, [a](double x) { return a - x; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, double b) {
  return unary_op(
      "mul_scalar", a, [b](double x) { return x * b; },
      [b](double, double) { return b; });
}

Var div(const Var& a, double b) { return mul(a, 1.0 / b); }

Var neg(const Var& a) { return mul(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " and " + bv.shape_str());
  }
  const std::size_t M = av.extent(0);
  const std::size_t K = av.extent(1);
  const std::size_t N = bv.extent(1);
  Tensor out({M, N});
  mm_nn(av.data(), bv.data(), out.data(), M, K, N, false);
  Var node = make_node("matmul", std::move(out));
  attach(node, a, [bv_node = b, M, K, N](const Tensor& g, Tensor& ga) {
    mm_nt(g.data(), bv_node->value.data(), ga.data(), M, N, K, true);
  });
  attach(node, b, [av_node = a, M, K, N](const Tensor& g, Tensor& gb) {
    mm_tn(av_node->value.data(), g.data(), gb.data(), K, M, N, true);
  });
  return node;
}

Var exp(const Var& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) {
          const double z = std::exp(-x);
          return 1.0 / (1.0 + z);
        }
        const double z = std::exp(x);
        return z / (1.0 + z);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(const Var& a, double slope) {
  if (slope <= 0.0) throw ConfigError("leaky_relu: slope must be positive");
  return unary_op(
      "leaky_relu", a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Var sum(const Var& a) {
  const std::size_t n = a->value.numel();
  const double* pa = a->value.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += pa[i];
  Var node = make_node("sum", Tensor::scalar(acc));
  attach(node, a, [](const Tensor& g, Tensor& ga) {
    const double gv = g[0];
    const std::size_t n = ga.numel();
    double* pga = ga.data();
    for (std::size_t i = 0; i < n; ++i) pga[i] += gv;
  });
  return node;
}

Var sum(const Var& a, std::size_t axis, bool keepdims) {
  const AxisView view = axis_view(a->value.shape(), axis, "sum");
  if (view.mid == 0) throw ShapeError("sum: empty reduction axis");
  Tensor out(reduced_shape(a->value.shape(), axis, keepdims));
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      double acc = 0.0;
      for (std::size_t m = 0; m < view.mid; ++m) {
        acc += pa[(o * view.mid + m) * view.inner + i];
      }
      po[o * view.inner + i] = acc;
    }
  }
  Var node = make_node("sum", std::move(out));
  attach(node, a, [view](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t m = 0; m < view.mid; ++m) {
        for (std::size_t i = 0; i < view.inner; ++i) {
          pga[(o * view.mid + m) * view.inner + i] += pg[o * view.inner + i];
        }
      }
    }
  });
  return node;
}

Var mean(const Var& a, std::size_t axis, bool keepdims) {
  const std::size_t mid = axis_view(a->value.shape(), axis, "mean").mid;
  if (mid == 0) throw ShapeError("mean: empty reduction axis");
  return mul(sum(a, axis, keepdims), 1.0 / static_cast<double>(mid));
}

Var max(const Var& a, std::size_t axis, bool keepdims) {
  const AxisView view = axis_view(a->value.shape(), axis, "max");
  if (view.mid == 0) throw ShapeError("max: empty reduction axis");
  Tensor out(reduced_shape(a->value.shape(), axis, keepdims));
  std::vector<std::size_t> argmax(view.outer * view.inner, 0);
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      double best = pa[o * view.mid * view.inner + i];
      std::size_t best_m = 0;
      for (std::size_t m = 1; m < view.mid; ++m) {
        const double v = pa[(o * view.mid + m) * view.inner + i];
        if (v > best) {
          best = v;
          best_m = m;
        }
      }
      po[o * view.inner + i] = best;
      argmax[o * view.inner + i] = best_m;
    }
  }
  Var node = make_node("max", std::move(out));
  attach(node, a, [view, argmax = std::move(argmax)](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        const std::size_t m = argmax[o * view.inner + i];
        pga[(o * view.mid + m) * view.inner + i] += pg[o * view.inner + i];
      }
    }
  });
  return node;
}

Var logsumexp(const Var& a, std::size_t axis, bool keepdims) {
  const AxisView view = axis_view(a->value.shape(), axis, "logsumexp");
  if (view.mid == 0) throw ShapeError("logsumexp: empty reduction axis");
  Tensor out(reduced_shape(a->value.shape(), axis, keepdims));
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      double shift = pa[o * view.mid * view.inner + i];
      for (std::size_t m = 1; m < view.mid; ++m) {
        shift = std::max(shift, pa[(o * view.mid + m) * view.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t m = 0; m < view.mid; ++m) {
        acc += std::exp(pa[(o * view.mid + m) * view.inner + i] - shift);
      }
      po[o * view.inner + i] = shift + std::log(acc);
    }
  }
  Var node = make_node("logsumexp", std::move(out));
  Node* self = node.get();
  attach(node, a, [view, av = a, self](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    const double* px = av->value.data();
    const double* py = self->value.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        const double lse = py[o * view.inner + i];
        const double gv = pg[o * view.inner + i];
        for (std::size_t m = 0; m < view.mid; ++m) {
          const std::size_t idx = (o * view.mid + m) * view.inner + i;
          pga[idx] += gv * std::exp(px[idx] - lse);
        }
      }
    }
  });
  return node;
}

Var softmax(const Var& a, std::size_t axis) {
  const AxisView view = axis_view(a->value.shape(), axis, "softmax");
  if (view.mid == 0) throw ShapeError("softmax: empty reduction axis");
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      double shift = pa[o * view.mid * view.inner + i];
      for (std::size_t m = 1; m < view.mid; ++m) {
        shift = std::max(shift, pa[(o * view.mid + m) * view.inner + i]);
      }
      double total = 0.0;
      for (std::size_t m = 0; m < view.mid; ++m) {
        const std::size_t idx = (o * view.mid + m) * view.inner + i;
        po[idx] = std::exp(pa[idx] - shift);
        total += po[idx];
      }
      for (std::size_t m = 0; m < view.mid; ++m) {
        po[(o * view.mid + m) * view.inner + i] /= total;
      }
    }
  }
  Var node = make_node("softmax", std::move(out));
  Node* self = node.get();
  attach(node, a, [view, self](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    const double* py = self->value.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        double dot = 0.0;
        for (std::size_t m = 0; m < view.mid; ++m) {
          const std::size_t idx = (o * view.mid + m) * view.inner + i;
          dot += pg[idx] * py[idx];
        }
        for (std::size_t m = 0; m < view.mid; ++m) {
          const std::size_t idx = (o * view.mid + m) * view.inner + i;
          pga[idx] += py[idx] * (pg[idx] - dot);
        }
      }
    }
  });
  return node;
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Var node = make_node("reshape", a->value.reshaped(std::move(shape)));
  attach(node, a, [](const Tensor& g, Tensor& ga) {
    const std::size_t n = g.numel();
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t i = 0; i < n; ++i) pga[i] += pg[i];
  });
  return node;
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisView view = axis_view(a->value.shape(), axis, "slice");
  if (start + length > view.mid) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds extent " +
                     std::to_string(view.mid));
  }
  std::vector<std::size_t> out_shape = a->value.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t m = 0; m < length; ++m) {
      const double* src = pa + (o * view.mid + start + m) * view.inner;
      double* dst = po + (o * length + m) * view.inner;
      std::copy(src, src + view.inner, dst);
    }
  }
  Var node = make_node("slice", std::move(out));
  attach(node, a, [view, start, length](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t m = 0; m < length; ++m) {
        const double* src = pg + (o * length + m) * view.inner;
        double* dst = pga + (o * view.mid + start + m) * view.inner;
        for (std::size_t i = 0; i < view.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return node;
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::vector<std::size_t>& base = parts[0]->value.shape();
  std::size_t total_mid = 0;
  for (const Var& p : parts) {
    const std::vector<std::size_t>& s = p->value.shape();
    if (s.size() != base.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != base[i]) {
        throw ShapeError("concat: shape mismatch off the concat axis");
      }
    }
    total_mid += axis_view(s, axis, "concat").mid;
  }
  std::vector<std::size_t> out_shape = base;
  out_shape[axis] = total_mid;
  const AxisView out_view = axis_view(out_shape, axis, "concat");
  Tensor out(out_shape);
  double* po = out.data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const AxisView view = axis_view(p->value.shape(), axis, "concat");
    const double* pa = p->value.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      const double* src = pa + o * view.mid * view.inner;
      double* dst = po + (o * out_view.mid + offset) * view.inner;
      std::copy(src, src + view.mid * view.inner, dst);
    }
    offsets.push_back(offset);
    offset += view.mid;
  }
  Var node = make_node("concat", std::move(out));
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const AxisView view = axis_view(parts[pi]->value.shape(), axis, "concat");
    const std::size_t part_offset = offsets[pi];
    attach(node, parts[pi], [view, out_view, part_offset](const Tensor& g, Tensor& ga) {
      const double* pg = g.data();
      double* pga = ga.data();
      for (std::size_t o = 0; o < view.outer; ++o) {
        const double* src = pg + (o * out_view.mid + part_offset) * view.inner;
        double* dst = pga + o * view.mid * view.inner;
        for (std::size_t i = 0; i < view.mid * view.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return node;
}

Var repeat(const Var& a, std::size_t axis, std::size_t times) {
  if (times == 0) throw ShapeError("repeat: times must be >= 1");
  const AxisView view = axis_view(a->value.shape(), axis, "repeat");
  std::vector<std::size_t> out_shape = a->value.shape();
  out_shape[axis] = view.mid * times;
  Tensor out(out_shape);
  const double* pa = a->value.data();
  double* po = out.data();
  const std::size_t block = view.mid * view.inner;
  for (std::size_t o = 0; o < view.outer; ++o) {
    const double* src = pa + o * block;
    for (std::size_t t = 0; t < times; ++t) {
      std::copy(src, src + block, po + (o * times + t) * block);
    }
  }
  Var node = make_node("repeat", std::move(out));
  attach(node, a, [view, times, block](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      double* dst = pga + o * block;
      for (std::size_t t = 0; t < times; ++t) {
        const double* src = pg + (o * times + t) * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
  return node;
}

Var index_select(const Var& a, std::size_t axis, std::vector<std::size_t> indices) {
  const AxisView view = axis_view(a->value.shape(), axis, "index_select");
  for (std::size_t idx : indices) {
    if (idx >= view.mid) {
      throw ShapeError("index_select: index " + std::to_string(idx) + " out of range " +
                       std::to_string(view.mid));
    }
  }
  std::vector<std::size_t> out_shape = a->value.shape();
  out_shape[axis] = indices.size();
  Tensor out(out_shape);
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const double* src = pa + (o * view.mid + indices[j]) * view.inner;
      double* dst = po + (o * indices.size() + j) * view.inner;
      std::copy(src, src + view.inner, dst);
    }
  }
  Var node = make_node("index_select", std::move(out));
  attach(node, a, [view, indices = std::move(indices)](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t j = 0; j < indices.size(); ++j) {
        const double* src = pg + (o * indices.size() + j) * view.inner;
        double* dst = pga + (o * view.mid + indices[j]) * view.inner;
        for (std::size_t i = 0; i < view.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return node;
}

Var index_scatter(const Var& a, std::size_t axis, std::vector<std::size_t> indices,
                  std::size_t out_extent) {
  const AxisView view = axis_view(a->value.shape(), axis, "index_scatter");
  if (indices.size() != view.mid) {
    throw ShapeError("index_scatter: need one index per slice");
  }
  for (std::size_t idx : indices) {
    if (idx >= out_extent) {
      throw ShapeError("index_scatter: index " + std::to_string(idx) + " out of range " +
                       std::to_string(out_extent));
    }
  }
  std::vector<std::size_t> out_shape = a->value.shape();
  out_shape[axis] = out_extent;
  Tensor out(out_shape);
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < view.mid; ++j) {
      const double* src = pa + (o * view.mid + j) * view.inner;
      double* dst = po + (o * out_extent + indices[j]) * view.inner;
      for (std::size_t i = 0; i < view.inner; ++i) dst[i] += src[i];
    }
  }
  Var node = make_node("index_scatter", std::move(out));
  attach(node, a, [view, indices = std::move(indices), out_extent](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t j = 0; j < view.mid; ++j) {
        const double* src = pg + (o * out_extent + indices[j]) * view.inner;
        double* dst = pga + (o * view.mid + j) * view.inner;
        for (std::size_t i = 0; i < view.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return node;
}

Var batch_gather_rows(const Var& a, std::vector<std::size_t> perm) {
  const Tensor& av = a->value;
  if (av.rank() != 3) throw ShapeError("batch_gather_rows: expected B x n x d input");
  const std::size_t B = av.extent(0);
  const std::size_t n = av.extent(1);
  const std::size_t d = av.extent(2);
  if (perm.size() != B * n) {
    throw ShapeError("batch_gather_rows: permutation size mismatch");
  }
  for (std::size_t idx : perm) {
    if (idx >= n) throw ShapeError("batch_gather_rows: row index out of range");
  }
  Tensor out({B, n, d});
  const double* pa = av.data();
  double* po = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* src = pa + (b * n + perm[b * n + j]) * d;
      double* dst = po + (b * n + j) * d;
      std::copy(src, src + d, dst);
    }
  }
  Var node = make_node("batch_gather_rows", std::move(out));
  attach(node, a, [B, n, d, perm = std::move(perm)](const Tensor& g, Tensor& ga) {
    const double* pg = g.data();
    double* pga = ga.data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* src = pg + (b * n + j) * d;
        double* dst = pga + (b * n + perm[b * n + j]) * d;
        for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
      }
    }
  });
  return node;
}

void backward(const Var& loss) {
  if (!loss) throw ShapeError("backward: null loss");
  if (loss->value.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + loss->value.shape_str());
  }
  // Post-order DFS: parents land before children, so the reversed order is
  // a valid reverse-topological schedule.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen{loss.get()};
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].node.get();
      ++next;
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad.fill(1.0);
  const bool check = finite_checks_enabled();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->has_grad() || !node->requires_grad) continue;
    if (check && !node->grad.all_finite()) {
      throw NumericError(std::string("backward through ") + node->op +
                         " produced a non-finite gradient");
    }
    for (Parent& edge : node->parents) {
      if (!edge.node->requires_grad) continue;
      edge.node->ensure_grad();
      edge.pull(node->grad, edge.node->grad);
    }
  }
}

}  // namespace autodiff
}  // namespace flowscan
