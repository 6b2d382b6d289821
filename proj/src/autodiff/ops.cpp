#include "coperc/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>

namespace coperc::ad {
namespace {

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw std::logic_error("operands are tracked on different tapes");
    tape = t->tape();
  }
  return tape;
}

Tape* common_tape(std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.tracked()) continue;
    if (tape && tape != t.tape()) throw std::logic_error("operands are tracked on different tapes");
    tape = t.tape();
  }
  return tape;
}

// Parameters are owned by the caller; holding a reference to them costs no
// activation memory.
std::int64_t saved_cost(const Tensor& t) {
  if (t.tracked() && t.tape()->is_leaf(t.node())) return 0;
  return t.numel();
}

#ifndef NDEBUG
bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_finite(OpKind kind, std::initializer_list<const Tensor*> inputs, std::span<const double> out) {
  for (const auto* t : inputs) {
    if (!all_finite(t->values())) return;
  }
  if (!all_finite(out)) {
    throw std::domain_error(std::string("non-finite output from ") + std::string(op_name(kind)) +
                            " on finite inputs");
  }
}
#else
void check_finite(OpKind, std::initializer_list<const Tensor*>, std::span<const double>) {}
#endif

Tensor finish(OpKind kind, std::initializer_list<const Tensor*> inputs, Shape shape,
              std::vector<double> values, std::int64_t saved, BackwardFn backward) {
  check_finite(kind, inputs, values);
  Tape* tape = common_tape(inputs);
  if (!tape) return Tensor(std::move(shape), std::move(values));
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto* t : inputs) ids.push_back(t->tracked() ? t->node() : kNoNode);
  return tape->record(kind, ids, std::move(shape), std::move(values), saved, std::move(backward));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

std::int64_t normalize_axis(const char* op, const Tensor& x, std::int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " + to_string(x.shape()));
  }
  return axis;
}

// Splits a shape around `axis` into (outer, n, inner).
struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.size()); ++i) {
    if (i < axis) r.outer *= s[static_cast<std::size_t>(i)];
    else if (i == axis) r.n = s[static_cast<std::size_t>(i)];
    else r.inner *= s[static_cast<std::size_t>(i)];
  }
  return r;
}

void elementwise_elig(BackwardContext& ctx, std::size_t input) {
  auto e = ctx.elig_in(input);
  auto eo = ctx.elig_out();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] |= eo[i];
}

template <typename F>
Tensor unary(OpKind kind, const Tensor& x, F&& f, std::int64_t saved,
             std::function<void(std::span<const double> g, std::span<double> gx)> back) {
  std::vector<double> out(x.values().size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  BackwardFn fn;
  if (x.tracked()) {
    fn = [back = std::move(back)](BackwardContext& ctx) {
      back(ctx.grad_out(), ctx.grad_in(0));
      elementwise_elig(ctx, 0);
    };
  }
  return finish(kind, {&x}, x.shape(), std::move(out), x.tracked() ? saved : 0, std::move(fn));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return finish(OpKind::kAdd, {&a, &b}, a.shape(), std::move(out), 0, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.tracked(k)) continue;
      auto gi = ctx.grad_in(k);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
      elementwise_elig(ctx, k);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return finish(OpKind::kSub, {&a, &b}, a.shape(), std::move(out), 0, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.tracked(k)) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto gi = ctx.grad_in(k);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += sign * g[i];
      elementwise_elig(ctx, k);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  std::int64_t saved = 0;
  if (a.tracked()) saved += saved_cost(b);
  if (b.tracked()) saved += saved_cost(a);
  // Only the operand needed by the other side's gradient is kept alive.
  Tensor keep_a = b.tracked() ? a.detached() : Tensor();
  Tensor keep_b = a.tracked() ? b.detached() : Tensor();
  return finish(OpKind::kMul, {&a, &b}, a.shape(), std::move(out), saved,
                [keep_a, keep_b](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  if (ctx.tracked(0)) {
                    auto gi = ctx.grad_in(0);
                    auto o = keep_b.values();
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i] * o[i];
                    elementwise_elig(ctx, 0);
                  }
                  if (ctx.tracked(1)) {
                    auto gi = ctx.grad_in(1);
                    auto o = keep_a.values();
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i] * o[i];
                    elementwise_elig(ctx, 1);
                  }
                });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  return unary(
      OpKind::kAffine, x, [=](double v) { return scale * v + shift; }, 0,
      [scale](std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale * g[i];
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m), 0.0);
  const double* A = a.data();
  const double* B = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * m;
      for (std::int64_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  std::int64_t saved = 0;
  if (a.tracked()) saved += saved_cost(b);
  if (b.tracked()) saved += saved_cost(a);
  Tensor keep_a = b.tracked() ? a.detached() : Tensor();
  Tensor keep_b = a.tracked() ? b.detached() : Tensor();
  return finish(
      OpKind::kMatmul, {&a, &b}, {n, m}, std::move(out), saved,
      [keep_a, keep_b, n, k, m](BackwardContext& ctx) {
        auto g = ctx.grad_out();
        auto eo = ctx.elig_out();
        if (ctx.tracked(0)) {
          auto ga = ctx.grad_in(0);
          auto ea = ctx.elig_in(0);
          const double* B = keep_b.data();
          for (std::int64_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * m;
            bool row_elig = false;
            for (std::int64_t j = 0; j < m; ++j) row_elig |= eo[static_cast<std::size_t>(i * m + j)] != 0;
            for (std::int64_t p = 0; p < k; ++p) {
              const double* brow = B + p * m;
              double acc = 0.0;
              for (std::int64_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i * k + p)] += acc;
              if (row_elig) ea[static_cast<std::size_t>(i * k + p)] = 1;
            }
          }
        }
        if (ctx.tracked(1)) {
          auto gb = ctx.grad_in(1);
          auto eb = ctx.elig_in(1);
          const double* A = keep_a.data();
          std::vector<std::uint8_t> col_elig(static_cast<std::size_t>(m), 0);
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < m; ++j) col_elig[static_cast<std::size_t>(j)] |= eo[static_cast<std::size_t>(i * m + j)];
            const double* grow = g.data() + i * m;
            for (std::int64_t p = 0; p < k; ++p) {
              const double av = A[i * k + p];
              if (av == 0.0) continue;
              double* gbrow = gb.data() + p * m;
              for (std::int64_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
            }
          }
          for (std::int64_t p = 0; p < k; ++p) {
            for (std::int64_t j = 0; j < m; ++j) {
              if (col_elig[static_cast<std::size_t>(j)]) eb[static_cast<std::size_t>(p * m + j)] = 1;
            }
          }
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  Tensor y_keep = x.tracked() ? Tensor(x.shape(), out) : Tensor();
  return finish(OpKind::kRelu, {&x}, x.shape(), std::move(out), x.tracked() ? x.numel() : 0,
                [y_keep](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  auto gx = ctx.grad_in(0);
                  auto y = y_keep.values();
                  for (std::size_t i = 0; i < gx.size(); ++i) {
                    if (y[i] > 0.0) gx[i] += g[i];
                  }
                  elementwise_elig(ctx, 0);
                });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.values().size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(in[i]);
  Tensor y_keep = x.tracked() ? Tensor(x.shape(), out) : Tensor();
  return finish(OpKind::kExp, {&x}, x.shape(), std::move(out), x.tracked() ? x.numel() : 0,
                [y_keep](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  auto gx = ctx.grad_in(0);
                  auto y = y_keep.values();
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i];
                  elementwise_elig(ctx, 0);
                });
}

Tensor log(const Tensor& x) {
  Tensor x_keep = x.detached();
  return unary(
      OpKind::kLog, x, [](double v) { return std::log(v); }, saved_cost(x),
      [x_keep](std::span<const double> g, std::span<double> gx) {
        auto in = x_keep.values();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] / in[i];
      });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.values().size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
  Tensor y_keep = x.tracked() ? Tensor(x.shape(), out) : Tensor();
  return finish(OpKind::kSigmoid, {&x}, x.shape(), std::move(out), x.tracked() ? x.numel() : 0,
                [y_keep](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  auto gx = ctx.grad_in(0);
                  auto y = y_keep.values();
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                  elementwise_elig(ctx, 0);
                });
}

Tensor log_sigmoid(const Tensor& x) {
  Tensor x_keep = x.detached();
  return unary(
      OpKind::kLogSigmoid, x,
      [](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); },
      saved_cost(x), [x_keep](std::span<const double> g, std::span<double> gx) {
        auto in = x_keep.values();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * stable_sigmoid(-in[i]);
      });
}

Tensor abs(const Tensor& x) {
  Tensor x_keep = x.detached();
  return unary(
      OpKind::kAbs, x, [](double v) { return std::abs(v); }, saved_cost(x),
      [x_keep](std::span<const double> g, std::span<double> gx) {
        auto in = x_keep.values();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (in[i] > 0.0) gx[i] += g[i];
          else if (in[i] < 0.0) gx[i] -= g[i];
        }
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return finish(OpKind::kSum, {&x}, {}, {s}, 0, [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    auto gx = ctx.grad_in(0);
    for (auto& v : gx) v += g;
    ctx.dense_eligibility(0);
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return finish(OpKind::kMean, {&x}, {}, {s / n}, 0, [n](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0] / n;
    auto gx = ctx.grad_in(0);
    for (auto& v : gx) v += g;
    ctx.dense_eligibility(0);
  });
}

Tensor sum(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis("sum", x, axis);
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<double> out(static_cast<std::size_t>(s.outer * s.inner), 0.0);
  const double* in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t j = 0; j < s.n; ++j) {
      const double* src = in + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return finish(OpKind::kSumAxis, {&x}, std::move(out_shape), std::move(out), 0, [s](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto eo = ctx.elig_out();
    auto gx = ctx.grad_in(0);
    auto ex = ctx.elig_in(0);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t j = 0; j < s.n; ++j) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const auto src = static_cast<std::size_t>(o * s.inner + i);
          const auto dst = static_cast<std::size_t>((o * s.n + j) * s.inner + i);
          gx[dst] += g[src];
          ex[dst] |= eo[src];
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis("softmax", x, axis);
  const auto s = split_at(x.shape(), axis);
  std::vector<double> out(x.values().size());
  const double* in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::int64_t j) { return static_cast<std::size_t>((o * s.n + j) * s.inner + i); };
      double mx = in[at(0)];
      for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, in[at(j)]);
      double z = 0.0;
      for (std::int64_t j = 0; j < s.n; ++j) {
        out[at(j)] = std::exp(in[at(j)] - mx);
        z += out[at(j)];
      }
      for (std::int64_t j = 0; j < s.n; ++j) out[at(j)] /= z;
    }
  }
  Tensor y_keep = x.tracked() ? Tensor(x.shape(), out) : Tensor();
  return finish(OpKind::kSoftmax, {&x}, x.shape(), std::move(out), x.tracked() ? x.numel() : 0,
                [y_keep, s](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  auto eo = ctx.elig_out();
                  auto gx = ctx.grad_in(0);
                  auto ex = ctx.elig_in(0);
                  auto y = y_keep.values();
                  for (std::int64_t o = 0; o < s.outer; ++o) {
                    for (std::int64_t i = 0; i < s.inner; ++i) {
                      auto at = [&](std::int64_t j) {
                        return static_cast<std::size_t>((o * s.n + j) * s.inner + i);
                      };
                      double dot = 0.0;
                      std::uint8_t any = 0;
                      for (std::int64_t j = 0; j < s.n; ++j) {
                        dot += g[at(j)] * y[at(j)];
                        any |= eo[at(j)];
                      }
                      for (std::int64_t j = 0; j < s.n; ++j) {
                        gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        ex[at(j)] |= any;
                      }
                    }
                  }
                });
}

MaxResult max(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis("max", x, axis);
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<double> out(static_cast<std::size_t>(s.outer * s.inner));
  std::vector<std::int64_t> arg(out.size(), 0);
  const double* in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const auto dst = static_cast<std::size_t>(o * s.inner + i);
      double best = in[o * s.n * s.inner + i];
      std::int64_t best_j = 0;
      for (std::int64_t j = 1; j < s.n; ++j) {
        const double v = in[(o * s.n + j) * s.inner + i];
        if (v > best) {  // strict: ties keep the lowest index
          best = v;
          best_j = j;
        }
      }
      out[dst] = best;
      arg[dst] = best_j;
    }
  }
  const std::int64_t saved = x.tracked() ? static_cast<std::int64_t>(arg.size()) : 0;
  BackwardFn fn;
  if (x.tracked()) {
    auto shared_arg = std::make_shared<const std::vector<std::int64_t>>(arg);
    fn = [shared_arg, s](BackwardContext& ctx) {
      auto g = ctx.grad_out();
      auto eo = ctx.elig_out();
      auto gx = ctx.grad_in(0);
      auto ex = ctx.elig_in(0);
      const auto& a = *shared_arg;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const auto src = static_cast<std::size_t>(o * s.inner + i);
          const auto dst = static_cast<std::size_t>((o * s.n + a[src]) * s.inner + i);
          gx[dst] += g[src];
          ex[dst] |= eo[src];
        }
      }
    };
  }
  Tensor values = finish(OpKind::kMaxAxis, {&x}, std::move(out_shape), std::move(out), saved, std::move(fn));
  return {std::move(values), std::move(arg)};
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() > 0 ? 1 : 0), parts[0].shape().end());
  if (parts[0].rank() == 0) throw ShapeError("concat: scalar input");
  std::int64_t rows = 0;
  std::vector<double> out;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.rank() == 0 || pt != tail) {
      throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    offsets.push_back(static_cast<std::int64_t>(out.size()));
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.dim(0);
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());

  Tape* tape = common_tape(parts);
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  std::vector<NodeId> ids;
  for (const auto& p : parts) ids.push_back(p.tracked() ? p.node() : kNoNode);
  return tape->record(OpKind::kConcat, ids, std::move(out_shape), std::move(out), 0,
                      [offsets](BackwardContext& ctx) {
                        auto g = ctx.grad_out();
                        auto eo = ctx.elig_out();
                        for (std::size_t k = 0; k < offsets.size(); ++k) {
                          if (!ctx.tracked(k)) continue;
                          auto gi = ctx.grad_in(k);
                          auto ei = ctx.elig_in(k);
                          const auto off = static_cast<std::size_t>(offsets[k]);
                          for (std::size_t i = 0; i < gi.size(); ++i) {
                            gi[i] += g[off + i];
                            ei[i] |= eo[off + i];
                          }
                        }
                      });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) {
      throw ShapeError("stack: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, std::move(s)));
  }
  return concat(lifted);
}

Tensor index_select(const Tensor& x, std::span<const std::int64_t> rows) {
  if (x.rank() == 0) throw ShapeError("index_select: scalar input");
  if (rows.empty()) throw ShapeError("index_select: empty index list");
  const std::int64_t n_rows = x.dim(0);
  const std::int64_t width = x.numel() / n_rows;
  std::vector<double> out(rows.size() * static_cast<std::size_t>(width), 0.0);
  const double* in = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto idx = rows[r];
    if (idx == -1) continue;
    if (idx < 0 || idx >= n_rows) {
      throw ShapeError("index_select: row " + std::to_string(idx) + " out of range for shape " +
                       to_string(x.shape()));
    }
    std::copy_n(in + idx * width, width, out.begin() + static_cast<std::ptrdiff_t>(r) * width);
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(rows.size());
  BackwardFn fn;
  std::int64_t saved = 0;
  if (x.tracked()) {
    auto idx = std::make_shared<const std::vector<std::int64_t>>(rows.begin(), rows.end());
    saved = static_cast<std::int64_t>(rows.size());
    fn = [idx, width](BackwardContext& ctx) {
      auto g = ctx.grad_out();
      auto eo = ctx.elig_out();
      auto gx = ctx.grad_in(0);
      auto ex = ctx.elig_in(0);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        const auto src_row = (*idx)[r];
        if (src_row < 0) continue;
        for (std::int64_t c = 0; c < width; ++c) {
          const auto src = r * static_cast<std::size_t>(width) + static_cast<std::size_t>(c);
          const auto dst = static_cast<std::size_t>(src_row * width + c);
          gx[dst] += g[src];
          ex[dst] |= eo[src];
        }
      }
    };
  }
  return finish(OpKind::kIndexSelect, {&x}, std::move(out_shape), std::move(out), saved, std::move(fn));
}

Tensor scatter_add(const Tensor& src, std::span<const std::int64_t> rows, std::int64_t n_rows) {
  if (src.rank() == 0 || src.dim(0) != static_cast<std::int64_t>(rows.size())) {
    throw ShapeError("scatter_add: " + std::to_string(rows.size()) + " indices for source shape " +
                     to_string(src.shape()));
  }
  if (n_rows <= 0) throw ShapeError("scatter_add: n_rows must be positive");
  const std::int64_t width = src.numel() / src.dim(0);
  std::vector<double> out(static_cast<std::size_t>(n_rows * width), 0.0);
  const double* in = src.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto dst_row = rows[r];
    if (dst_row == -1) continue;
    if (dst_row < 0 || dst_row >= n_rows) {
      throw ShapeError("scatter_add: row " + std::to_string(dst_row) + " out of range " +
                       std::to_string(n_rows));
    }
    for (std::int64_t c = 0; c < width; ++c) {
      out[static_cast<std::size_t>(dst_row * width + c)] += in[static_cast<std::int64_t>(r) * width + c];
    }
  }
  Shape out_shape = src.shape();
  out_shape[0] = n_rows;
  BackwardFn fn;
  std::int64_t saved = 0;
  if (src.tracked()) {
    auto idx = std::make_shared<const std::vector<std::int64_t>>(rows.begin(), rows.end());
    saved = static_cast<std::int64_t>(rows.size());
    fn = [idx, width](BackwardContext& ctx) {
      auto g = ctx.grad_out();
      auto eo = ctx.elig_out();
      auto gx = ctx.grad_in(0);
      auto ex = ctx.elig_in(0);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        const auto dst_row = (*idx)[r];
        if (dst_row < 0) continue;
        for (std::int64_t c = 0; c < width; ++c) {
          const auto from = static_cast<std::size_t>(dst_row * width + c);
          const auto to = r * static_cast<std::size_t>(width) + static_cast<std::size_t>(c);
          gx[to] += g[from];
          ex[to] |= eo[from];
        }
      }
    };
  }
  return finish(OpKind::kScatterAdd, {&src}, std::move(out_shape), std::move(out), saved, std::move(fn));
}

Tensor broadcast(const Tensor& x, const Shape& shape) {
  const auto r_out = static_cast<std::int64_t>(shape.size());
  const auto lead = r_out - x.rank();
  if (lead < 0) {
    throw ShapeError("broadcast: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  // Input strides expressed in output axes; 0 marks a broadcast axis.
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(r_out), 0);
  std::int64_t stride = 1;
  for (std::int64_t ax = r_out - 1; ax >= lead; --ax) {
    const auto in_extent = x.shape()[static_cast<std::size_t>(ax - lead)];
    const auto out_extent = shape[static_cast<std::size_t>(ax)];
    if (in_extent != out_extent && in_extent != 1) {
      throw ShapeError("broadcast: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
    }
    in_stride[static_cast<std::size_t>(ax)] = in_extent == 1 ? 0 : stride;
    stride *= in_extent;
  }
  const auto total = numel(shape);
  if (total <= 0) throw ShapeError("broadcast: invalid target " + to_string(shape));
  auto src_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(total));
  {
    std::vector<std::int64_t> counter(static_cast<std::size_t>(r_out), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < total; ++i) {
      (*src_index)[static_cast<std::size_t>(i)] = src;
      for (std::int64_t ax = r_out - 1; ax >= 0; --ax) {
        auto a = static_cast<std::size_t>(ax);
        ++counter[a];
        src += in_stride[a];
        if (counter[a] < shape[a]) break;
        src -= in_stride[a] * counter[a];
        counter[a] = 0;
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(total));
  const double* in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*src_index)[i]];
  return finish(OpKind::kBroadcast, {&x}, shape, std::move(out), 0,
                [src_index = std::shared_ptr<const std::vector<std::int64_t>>(src_index)](BackwardContext& ctx) {
                  auto g = ctx.grad_out();
                  auto eo = ctx.elig_out();
                  auto gx = ctx.grad_in(0);
                  auto ex = ctx.elig_in(0);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const auto s = static_cast<std::size_t>((*src_index)[i]);
                    gx[s] += g[i];
                    ex[s] |= eo[i];
                  }
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return finish(OpKind::kReshape, {&x}, std::move(shape), std::move(out), 0, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    elementwise_elig(ctx, 0);
  });
}

}  // namespace coperc::ad
