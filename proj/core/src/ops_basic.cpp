#include <algorithm>
#include <cmath>

#include "tensor_impl.hpp"

namespace upstep {

using detail::Access;
using detail::ImplPtr;
using detail::finish_op;
using detail::make_impl;

namespace {

enum class Broadcast { None, ScalarA, ScalarB };

Broadcast binary_layout(const char* op, const Tensor& a, const Tensor& b,
                        std::vector<std::size_t>& out_shape) {
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
    return Broadcast::None;
  }
  if (a.numel() == 1) {
    out_shape = b.shape();
    return Broadcast::ScalarA;
  }
  if (b.numel() == 1) {
    out_shape = a.shape();
    return Broadcast::ScalarB;
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are incompatible (equal or scalar broadcast only)");
}

// dfa/dfb receive (x, y, out) and return the local partial.
using PartialFn = double (*)(double, double, double);

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                 double (*f)(double, double), PartialFn dfa, PartialFn dfb) {
  std::vector<std::size_t> out_shape;
  const Broadcast bc = binary_layout(name, a, b, out_shape);
  const ImplPtr& ia = Access::impl(a);
  const ImplPtr& ib = Access::impl(b);
  auto io = make_impl(std::move(out_shape));
  const std::size_t n = io->numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ia->data[bc == Broadcast::ScalarA ? 0 : i];
    const double y = ib->data[bc == Broadcast::ScalarB ? 0 : i];
    io->data[i] = f(x, y);
  }
  const bool needs = a.requires_grad() || b.requires_grad();
  return finish_op(io, needs, [ia, ib, io, bc, dfa, dfb] {
    if (!io->grad) return;
    const auto& g = *io->grad;
    const std::size_t n = io->numel();
    auto* ga = ia->requires_grad ? &ia->ensure_grad() : nullptr;
    auto* gb = ib->requires_grad ? &ib->ensure_grad() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = ia->data[bc == Broadcast::ScalarA ? 0 : i];
      const double y = ib->data[bc == Broadcast::ScalarB ? 0 : i];
      const double o = io->data[i];
      if (ga) (*ga)[bc == Broadcast::ScalarA ? 0 : i] += g[i] * dfa(x, y, o);
      if (gb) (*gb)[bc == Broadcast::ScalarB ? 0 : i] += g[i] * dfb(x, y, o);
    }
  });
}

// Unary map y = f(x) with partial df(x, out).
Tensor unary_op(const Tensor& a, double (*f)(double, double), double (*df)(double, double),
                double c = 0.0) {
  const ImplPtr& ia = Access::impl(a);
  if (!ia) throw ContractError("op on an undefined tensor");
  auto io = make_impl(ia->shape);
  const std::size_t n = io->numel();
  for (std::size_t i = 0; i < n; ++i) io->data[i] = f(ia->data[i], c);
  return finish_op(io, a.requires_grad(), [ia, io, df, c] {
    if (!io->grad || !ia->requires_grad) return;
    const auto& g = *io->grad;
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < io->numel(); ++i) ga[i] += g[i] * df(ia->data[i], c);
  });
}

}  // namespace

// ---- binary -----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values())
    if (v == 0.0) throw NumericError("div: exact zero divisor");
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor add(const Tensor& a, double c) {
  return unary_op(
      a, [](double x, double k) { return x + k; }, [](double, double) { return 1.0; }, c);
}

Tensor sub(const Tensor& a, double c) { return add(a, -c); }

Tensor sub(double c, const Tensor& a) {
  return unary_op(
      a, [](double x, double k) { return k - x; }, [](double, double) { return -1.0; }, c);
}

Tensor mul(const Tensor& a, double c) {
  return unary_op(
      a, [](double x, double k) { return x * k; }, [](double, double k) { return k; }, c);
}

Tensor scale(const Tensor& a, double c) { return mul(a, c); }

Tensor div(const Tensor& a, double c) {
  if (c == 0.0) throw NumericError("div: exact zero divisor");
  return mul(a, 1.0 / c);
}

// ---- unary ------------------------------------------------------------------

Tensor exp(const Tensor& a) {
  const ImplPtr& ia = Access::impl(a);
  auto io = make_impl(ia->shape);
  for (std::size_t i = 0; i < io->numel(); ++i) io->data[i] = std::exp(ia->data[i]);
  return finish_op(io, a.requires_grad(), [ia, io] {
    if (!io->grad || !ia->requires_grad) return;
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < io->numel(); ++i) ga[i] += (*io->grad)[i] * io->data[i];
  });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (v <= 0.0) throw NumericError("log: non-positive input " + std::to_string(v));
  return unary_op(
      a, [](double x, double) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) throw NumericError("sqrt: negative input " + std::to_string(v));
  return unary_op(
      a, [](double x, double) { return std::sqrt(x); },
      [](double x, double) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x, double) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x, double) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      a, [](double x, double k) { return x < k ? k : x; },
      [](double x, double k) { return x > k ? 1.0 : 0.0; }, floor);
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const ImplPtr& ia = Access::impl(a);
  auto io = make_impl({1});
  double total = 0.0;
  for (double v : ia->data) total += v;
  io->data[0] = total;
  return finish_op(io, a.requires_grad(), [ia, io] {
    if (!io->grad || !ia->requires_grad) return;
    const double g = (*io->grad)[0];
    auto& ga = ia->ensure_grad();
    for (auto& v : ga) v += g;
  });
}

Tensor mean(const Tensor& a) { return div(sum(a), static_cast<double>(a.numel())); }

namespace {

Tensor axis_reduce(const char* name, const Tensor& a, int axis, bool take_mean) {
  detail::check_2d(a, name);
  if (axis != 0 && axis != 1)
    throw ContractError(std::string(name) + ": axis must be 0 or 1, got " + std::to_string(axis));
  const ImplPtr& ia = Access::impl(a);
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t out_len = axis == 0 ? c : r;
  const double norm = take_mean ? 1.0 / static_cast<double>(axis == 0 ? r : c) : 1.0;
  auto io = make_impl({out_len});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) io->data[axis == 0 ? j : i] += ia->data[i * c + j];
  if (take_mean)
    for (auto& v : io->data) v *= norm;
  return finish_op(io, a.requires_grad(), [ia, io, r, c, axis, norm] {
    if (!io->grad || !ia->requires_grad) return;
    const auto& g = *io->grad;
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 0 ? j : i] * norm;
  });
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return axis_reduce("sum", a, axis, false); }
Tensor mean(const Tensor& a, int axis) { return axis_reduce("mean", a, axis, true); }

Tensor l2_norm(const Tensor& a) {
  const ImplPtr& ia = Access::impl(a);
  auto io = make_impl({1});
  double ss = 0.0;
  for (double v : ia->data) ss += v * v;
  io->data[0] = std::sqrt(ss);
  return finish_op(io, a.requires_grad(), [ia, io] {
    if (!io->grad || !ia->requires_grad) return;
    const double g = (*io->grad)[0];
    const double norm = io->data[0];
    if (norm == 0.0) return;  // subgradient 0 at the origin
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < ia->numel(); ++i) ga[i] += g * ia->data[i] / norm;
  });
}

Tensor softmax_rows(const Tensor& a) {
  detail::check_2d(a, "softmax_rows");
  const ImplPtr& ia = Access::impl(a);
  const std::size_t r = a.rows(), c = a.cols();
  auto io = make_impl(ia->shape);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = ia->data.data() + i * c;
    double* y = io->data.data() + i * c;
    double m = x[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - m);
      z += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return finish_op(io, a.requires_grad(), [ia, io, r, c] {
    if (!io->grad || !ia->requires_grad) return;
    const auto& g = *io->grad;
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* p = io->data.data() + i * c;
      const double* gi = g.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gi[j] * p[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += p[j] * (gi[j] - dot);
    }
  });
}

Tensor logsumexp_rows(const Tensor& a) {
  detail::check_2d(a, "logsumexp_rows");
  const ImplPtr& ia = Access::impl(a);
  const std::size_t r = a.rows(), c = a.cols();
  auto io = make_impl({r});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = ia->data.data() + i * c;
    double m = x[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - m);
    io->data[i] = m + std::log(z);
  }
  return finish_op(io, a.requires_grad(), [ia, io, r, c] {
    if (!io->grad || !ia->requires_grad) return;
    const auto& g = *io->grad;
    auto& ga = ia->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += g[i] * std::exp(ia->data[i * c + j] - io->data[i]);
  });
}

// ---- matmul / transpose -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const ImplPtr& ia = Access::impl(a);
  const ImplPtr& ib = Access::impl(b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto io = make_impl({m, n});
  detail::mat_view_mut(io->data, m, n).noalias() =
      detail::mat_view(*ia, m, k) * detail::mat_view(*ib, k, n);
  const bool needs = a.requires_grad() || b.requires_grad();
  return finish_op(io, needs, [ia, ib, io, m, k, n] {
    if (!io->grad) return;
    auto g = detail::mat_view_mut(*io->grad, m, n);
    if (ia->requires_grad)
      detail::mat_view_mut(ia->ensure_grad(), m, k).noalias() +=
          g * detail::mat_view(*ib, k, n).transpose();
    if (ib->requires_grad)
      detail::mat_view_mut(ib->ensure_grad(), k, n).noalias() +=
          detail::mat_view(*ia, m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  detail::check_2d(a, "transpose");
  const ImplPtr& ia = Access::impl(a);
  const std::size_t r = a.rows(), c = a.cols();
  auto io = make_impl({c, r});
  detail::mat_view_mut(io->data, c, r).noalias() = detail::mat_view(*ia, r, c).transpose();
  return finish_op(io, a.requires_grad(), [ia, io, r, c] {
    if (!io->grad || !ia->requires_grad) return;
    detail::mat_view_mut(ia->ensure_grad(), r, c).noalias() +=
        detail::mat_view_mut(*io->grad, c, r).transpose();
  });
}

}  // namespace upstep
