#include <cmath>

#include "tensor_impl.hpp"

namespace upstep {

using detail::Access;
using detail::ImplPtr;
using detail::finish_op;
using detail::make_impl;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::check_2d(x, "linear");
  detail::check_2d(w, "linear");
  if (b.ndim() != 1)
    throw ShapeError("linear: bias must be 1-d, got " + shape_str(b.shape()));
  if (x.cols() != w.rows() || w.cols() != b.numel())
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                     shape_str(w.shape()) + " b" + shape_str(b.shape()));
  const ImplPtr& ix = Access::impl(x);
  const ImplPtr& iw = Access::impl(w);
  const ImplPtr& ib = Access::impl(b);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  auto io = make_impl({m, n});
  auto out = detail::mat_view_mut(io->data, m, n);
  out.noalias() = detail::mat_view(*ix, m, k) * detail::mat_view(*iw, k, n);
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(ib->data.data(), n);
  const bool needs = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return finish_op(io, needs, [ix, iw, ib, io, m, k, n] {
    if (!io->grad) return;
    auto g = detail::mat_view_mut(*io->grad, m, n);
    if (ix->requires_grad)
      detail::mat_view_mut(ix->ensure_grad(), m, k).noalias() +=
          g * detail::mat_view(*iw, k, n).transpose();
    if (iw->requires_grad)
      detail::mat_view_mut(iw->ensure_grad(), k, n).noalias() +=
          detail::mat_view(*ix, m, k).transpose() * g;
    if (ib->requires_grad)
      Eigen::Map<Eigen::RowVectorXd>(ib->ensure_grad().data(), n) += g.colwise().sum();
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  detail::check_2d(x, "layer_norm");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.ndim() != 1 || gain.numel() != d || bias.ndim() != 1 || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  const ImplPtr& ix = Access::impl(x);
  const ImplPtr& ig = Access::impl(gain);
  const ImplPtr& ib = Access::impl(bias);
  auto io = make_impl(ix->shape);
  // Normalized activations and reciprocal stddevs are needed for the backward
  // pass; keep them alive in the closure.
  auto xhat = std::make_shared<detail::DataVec>(m * d);
  auto rstd = std::make_shared<detail::DataVec>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = ix->data.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mu) * rs;
      (*xhat)[i * d + j] = h;
      io->data[i * d + j] = ig->data[j] * h + ib->data[j];
    }
  }
  const bool needs = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return finish_op(io, needs, [ix, ig, ib, io, xhat, rstd, m, d] {
    if (!io->grad) return;
    const auto& g = *io->grad;
    auto* ggain = ig->requires_grad ? &ig->ensure_grad() : nullptr;
    auto* gbias = ib->requires_grad ? &ib->ensure_grad() : nullptr;
    auto* gx = ix->requires_grad ? &ix->ensure_grad() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
      const double* gi = g.data() + i * d;
      const double* hi = xhat->data() + i * d;
      if (ggain)
        for (std::size_t j = 0; j < d; ++j) (*ggain)[j] += gi[j] * hi[j];
      if (gbias)
        for (std::size_t j = 0; j < d; ++j) (*gbias)[j] += gi[j];
      if (gx) {
        // dxhat = g * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gi[j] * ig->data[j];
          s1 += dh;
          s2 += dh * hi[j];
        }
        s1 /= static_cast<double>(d);
        s2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gi[j] * ig->data[j];
          (*gx)[i * d + j] += (*rstd)[i] * (dh - s1 - hi[j] * s2);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  const ImplPtr& ix = Access::impl(x);
  auto io = make_impl(ix->shape);
  for (std::size_t i = 0; i < io->numel(); ++i) {
    const double v = ix->data[i];
    io->data[i] = 0.5 * v * (1.0 + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  return finish_op(io, x.requires_grad(), [ix, io] {
    if (!io->grad || !ix->requires_grad) return;
    auto& gx = ix->ensure_grad();
    for (std::size_t i = 0; i < io->numel(); ++i) {
      const double v = ix->data[i];
      const double t = std::tanh(kAlpha * (v + kBeta * v * v * v));
      const double du = kAlpha * (1.0 + 3.0 * kBeta * v * v);
      gx[i] += (*io->grad)[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 Tensor* probs_out) {
  detail::check_2d(qkv, "attention");
  if (qkv.cols() % 3 != 0)
    throw ShapeError("attention: qkv width " + std::to_string(qkv.cols()) +
                     " is not divisible by 3");
  const std::size_t d = qkv.cols() / 3;
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention: dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  if (qkv.rows() != batch * tokens)
    throw ShapeError("attention: qkv has " + std::to_string(qkv.rows()) + " rows, expected " +
                     std::to_string(batch * tokens));
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const ImplPtr& iq = Access::impl(qkv);
  auto io = make_impl({batch * tokens, d});
  auto probs = std::make_shared<detail::DataVec>(batch * heads * tokens * tokens);

  detail::ECMap in = detail::mat_view(*iq, batch * tokens, 3 * d);
  detail::EMap out = detail::mat_view_mut(io->data, batch * tokens, d);
  detail::EMat s(tokens, tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto q = in.block(b * tokens, h * dh, tokens, dh);
      auto k = in.block(b * tokens, d + h * dh, tokens, dh);
      auto v = in.block(b * tokens, 2 * d + h * dh, tokens, dh);
      s.noalias() = scl * (q * k.transpose());
      detail::EMap p(probs->data() + (b * heads + h) * tokens * tokens,
                     static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(tokens));
      for (std::size_t i = 0; i < tokens; ++i) {
        const double mx = s.row(i).maxCoeff();
        p.row(i) = (s.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
      out.block(b * tokens, h * dh, tokens, dh).noalias() = p * v;
    }
  }
  if (probs_out) {
    auto pi = make_impl({batch * heads * tokens, tokens});
    pi->data = *probs;
    *probs_out = Access::wrap(std::move(pi));
  }
  return finish_op(io, qkv.requires_grad(), [iq, io, probs, batch, tokens, heads, d, dh, scl] {
    if (!io->grad || !iq->requires_grad) return;
    detail::ECMap in = detail::mat_view(*iq, batch * tokens, 3 * d);
    detail::ECMap g(io->grad->data(), static_cast<Eigen::Index>(batch * tokens),
                    static_cast<Eigen::Index>(d));
    detail::EMap gq = detail::mat_view_mut(iq->ensure_grad(), batch * tokens, 3 * d);
    detail::EMat dp(tokens, tokens), ds(tokens, tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        auto q = in.block(b * tokens, h * dh, tokens, dh);
        auto k = in.block(b * tokens, d + h * dh, tokens, dh);
        auto v = in.block(b * tokens, 2 * d + h * dh, tokens, dh);
        detail::ECMap p(probs->data() + (b * heads + h) * tokens * tokens,
                        static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(tokens));
        auto gh = g.block(b * tokens, h * dh, tokens, dh);
        gq.block(b * tokens, 2 * d + h * dh, tokens, dh).noalias() += p.transpose() * gh;
        dp.noalias() = gh * v.transpose();
        // softmax backward per row: ds = p .* (dp - rowsum(dp .* p))
        Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
        ds = p.array() * (dp.colwise() - rs).array();
        gq.block(b * tokens, h * dh, tokens, dh).noalias() += scl * (ds * k);
        gq.block(b * tokens, d + h * dh, tokens, dh).noalias() += scl * (ds.transpose() * q);
      }
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  detail::check_2d(x, "normalize_rows");
  const ImplPtr& ix = Access::impl(x);
  const std::size_t m = x.rows(), d = x.cols();
  auto io = make_impl(ix->shape);
  auto norms = std::make_shared<detail::DataVec>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = ix->data.data() + i * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    const double n = std::sqrt(ss);
    if (n == 0.0)
      throw NumericError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    (*norms)[i] = n;
    for (std::size_t j = 0; j < d; ++j) io->data[i * d + j] = xi[j] / n;
  }
  return finish_op(io, x.requires_grad(), [ix, io, norms, m, d] {
    if (!io->grad || !ix->requires_grad) return;
    const auto& g = *io->grad;
    auto& gx = ix->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* gi = g.data() + i * d;
      const double* yi = io->data.data() + i * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gi[j] * yi[j];
      const double n = (*norms)[i];
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (gi[j] - yi[j] * dot) / n;
    }
  });
}

Tensor center_cols(const Tensor& x) {
  detail::check_2d(x, "center_cols");
  const ImplPtr& ix = Access::impl(x);
  const std::size_t m = x.rows(), d = x.cols();
  if (m == 0) throw ShapeError("center_cols: empty input");
  auto io = make_impl(ix->shape);
  std::vector<double> col_mean(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) col_mean[j] += ix->data[i * d + j];
  for (std::size_t j = 0; j < d; ++j) col_mean[j] /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) io->data[i * d + j] = ix->data[i * d + j] - col_mean[j];
  return finish_op(io, x.requires_grad(), [ix, io, m, d] {
    if (!io->grad || !ix->requires_grad) return;
    const auto& g = *io->grad;
    auto& gx = ix->ensure_grad();
    std::vector<double> gmean(d, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) gmean[j] += g[i * d + j];
    for (std::size_t j = 0; j < d; ++j) gmean[j] /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] - gmean[j];
  });
}

Tensor scale_cols(const Tensor& x, const Tensor& v) {
  detail::check_2d(x, "scale_cols");
  if (v.ndim() != 1 || v.numel() != x.cols())
    throw ShapeError("scale_cols: vector " + shape_str(v.shape()) + " does not match columns of " +
                     shape_str(x.shape()));
  const ImplPtr& ix = Access::impl(x);
  const ImplPtr& iv = Access::impl(v);
  const std::size_t m = x.rows(), d = x.cols();
  auto io = make_impl(ix->shape);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) io->data[i * d + j] = ix->data[i * d + j] * iv->data[j];
  const bool needs = x.requires_grad() || v.requires_grad();
  return finish_op(io, needs, [ix, iv, io, m, d] {
    if (!io->grad) return;
    const auto& g = *io->grad;
    if (ix->requires_grad) {
      auto& gx = ix->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * iv->data[j];
    }
    if (iv->requires_grad) {
      auto& gv = iv->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j] * ix->data[i * d + j];
    }
  });
}

Tensor tile_rows(const Tensor& x, std::size_t repeat) {
  detail::check_2d(x, "tile_rows");
  if (repeat == 0) throw ContractError("tile_rows: repeat must be positive");
  const ImplPtr& ix = Access::impl(x);
  const std::size_t m = x.rows(), d = x.cols();
  auto io = make_impl({m * repeat, d});
  for (std::size_t r = 0; r < repeat; ++r)
    std::copy(ix->data.begin(), ix->data.end(), io->data.begin() + r * m * d);
  return finish_op(io, x.requires_grad(), [ix, io, m, d, repeat] {
    if (!io->grad || !ix->requires_grad) return;
    const auto& g = *io->grad;
    auto& gx = ix->ensure_grad();
    for (std::size_t r = 0; r < repeat; ++r)
      for (std::size_t i = 0; i < m * d; ++i) gx[i] += g[r * m * d + i];
  });
}

Tensor prepend_row_per_block(const Tensor& x, const Tensor& row, std::size_t blocks) {
  detail::check_2d(x, "prepend_row_per_block");
  const std::size_t d = x.cols();
  if (row.numel() != d)
    throw ShapeError("prepend_row_per_block: row " + shape_str(row.shape()) +
                     " does not match width of " + shape_str(x.shape()));
  if (blocks == 0 || x.rows() % blocks != 0)
    throw ShapeError("prepend_row_per_block: " + std::to_string(x.rows()) +
                     " rows do not split into " + std::to_string(blocks) + " blocks");
  const std::size_t n = x.rows() / blocks;
  const ImplPtr& ix = Access::impl(x);
  const ImplPtr& ir = Access::impl(row);
  auto io = make_impl({blocks * (n + 1), d});
  for (std::size_t b = 0; b < blocks; ++b) {
    double* dst = io->data.data() + b * (n + 1) * d;
    std::copy(ir->data.begin(), ir->data.end(), dst);
    std::copy(ix->data.begin() + b * n * d, ix->data.begin() + (b + 1) * n * d, dst + d);
  }
  const bool needs = x.requires_grad() || row.requires_grad();
  return finish_op(io, needs, [ix, ir, io, blocks, n, d] {
    if (!io->grad) return;
    const auto& g = *io->grad;
    auto* gx = ix->requires_grad ? &ix->ensure_grad() : nullptr;
    auto* gr = ir->requires_grad ? &ir->ensure_grad() : nullptr;
    for (std::size_t b = 0; b < blocks; ++b) {
      const double* gb = g.data() + b * (n + 1) * d;
      if (gr)
        for (std::size_t j = 0; j < d; ++j) (*gr)[j] += gb[j];
      if (gx)
        for (std::size_t i = 0; i < n * d; ++i) (*gx)[b * n * d + i] += gb[d + i];
    }
  });
}

Tensor take_block_rows(const Tensor& x, std::size_t blocks, std::size_t block_len,
                       std::size_t offset) {
  detail::check_2d(x, "take_block_rows");
  if (x.rows() != blocks * block_len)
    throw ShapeError("take_block_rows: " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(blocks) + " blocks of " + std::to_string(block_len));
  if (offset >= block_len)
    throw ShapeError("take_block_rows: offset " + std::to_string(offset) +
                     " outside block of length " + std::to_string(block_len));
  const ImplPtr& ix = Access::impl(x);
  const std::size_t d = x.cols();
  auto io = make_impl({blocks, d});
  for (std::size_t b = 0; b < blocks; ++b) {
    const double* src = ix->data.data() + (b * block_len + offset) * d;
    std::copy(src, src + d, io->data.data() + b * d);
  }
  return finish_op(io, x.requires_grad(), [ix, io, blocks, block_len, offset, d] {
    if (!io->grad || !ix->requires_grad) return;
    auto& gx = ix->ensure_grad();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t j = 0; j < d; ++j)
        gx[(b * block_len + offset) * d + j] += (*io->grad)[b * d + j];
  });
}

Tensor block_mean_rows(const Tensor& x, std::size_t blocks, std::size_t block_len,
                       std::size_t skip_leading) {
  detail::check_2d(x, "block_mean_rows");
  if (x.rows() != blocks * block_len)
    throw ShapeError("block_mean_rows: " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(blocks) + " blocks of " + std::to_string(block_len));
  if (skip_leading >= block_len)
    throw ShapeError("block_mean_rows: skip_leading " + std::to_string(skip_leading) +
                     " leaves no rows in block of length " + std::to_string(block_len));
  const ImplPtr& ix = Access::impl(x);
  const std::size_t d = x.cols();
  const double inv = 1.0 / static_cast<double>(block_len - skip_leading);
  auto io = make_impl({blocks, d});
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = skip_leading; i < block_len; ++i)
      for (std::size_t j = 0; j < d; ++j)
        io->data[b * d + j] += ix->data[(b * block_len + i) * d + j] * inv;
  return finish_op(io, x.requires_grad(), [ix, io, blocks, block_len, skip_leading, d, inv] {
    if (!io->grad || !ix->requires_grad) return;
    auto& gx = ix->ensure_grad();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = skip_leading; i < block_len; ++i)
        for (std::size_t j = 0; j < d; ++j)
          gx[(b * block_len + i) * d + j] += (*io->grad)[b * d + j] * inv;
  });
}

}  // namespace upstep
