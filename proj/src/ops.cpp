// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "upoc2/errors.hpp"

namespace upoc2 {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
using Impl = std::shared_ptr<TensorImpl>;

ConstMatMap cmap(const Buffer& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap mmap(Buffer& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

Tape& tape() { return Tape::current(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto mismatch = [&] {
    return DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                          shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  };
  if (a.rank() < 1 || b.rank() < 2) throw mismatch();

  std::size_t groups = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  bool batched = b.rank() >= 3;
  if (!batched) {
    k = last_dim(a);
    const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
    n = transpose_b ? b.dim(0) : b.dim(1);
    if (k != bk) throw mismatch();
    m = a.numel() / k;
    out_shape = a.shape();
    out_shape.back() = n;
  } else {
    if (a.rank() != b.rank()) throw mismatch();
    const std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i) {
      if (a.dim(i) != b.dim(i)) throw mismatch();
      groups *= a.dim(i);
    }
    m = a.dim(r - 2);
    k = a.dim(r - 1);
    const std::size_t bk = transpose_b ? b.dim(r - 1) : b.dim(r - 2);
    n = transpose_b ? b.dim(r - 2) : b.dim(r - 1);
    if (k != bk) throw mismatch();
    out_shape = a.shape();
    out_shape[r - 1] = n;
  }

  Tensor out = Tensor::zeros(out_shape);
  const std::size_t b_rows = transpose_b ? n : k;
  const std::size_t b_cols = transpose_b ? k : n;
  {
    const auto& av = a.impl()->data;
    const auto& bv = b.impl()->data;
    auto& ov = out.impl()->data;
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t b_off = batched ? g * k * n : 0;
      auto A = cmap(av, g * m * k, m, k);
      auto B = cmap(bv, b_off, b_rows, b_cols);
      auto C = mmap(ov, g * m * n, m, n);
      if (transpose_b) {
        C.noalias() = A * B.transpose();
      } else {
        C.noalias() = A * B;
      }
    }
  }

  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  tape().record({a, b}, out, [=] {
    const auto& dC = oi->grad;
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t b_off = batched ? g * k * n : 0;
      auto G = cmap(dC, g * m * n, m, n);
      if (ai->requires_grad) {
        auto dA = mmap(ai->grad_buffer(), g * m * k, m, k);
        auto B = cmap(bi->data, b_off, b_rows, b_cols);
        if (transpose_b) {
          dA.noalias() += G * B;
        } else {
          dA.noalias() += G * B.transpose();
        }
      }
      if (bi->requires_grad) {
        auto dB = mmap(bi->grad_buffer(), b_off, b_rows, b_cols);
        auto A = cmap(ai->data, g * m * k, m, k);
        if (transpose_b) {
          dB.noalias() += G.transpose() * A;
        } else {
          dB.noalias() += A.transpose() * G;
        }
      }
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  ConstVecMap av(a.data().data(), a.numel());
  ConstVecMap bv(b.data().data(), b.numel());
  VecMap(out.data().data(), out.numel()) = av + bv;
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  tape().record({a, b}, out, [=] {
    ConstVecMap g(oi->grad.data(), oi->grad.size());
    if (ai->requires_grad) VecMap(ai->grad_buffer().data(), g.size()) += g;
    if (bi->requires_grad) VecMap(bi->grad_buffer().data(), g.size()) += g;
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  ConstVecMap av(a.data().data(), a.numel());
  ConstVecMap bv(b.data().data(), b.numel());
  VecMap(out.data().data(), out.numel()) = av - bv;
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  tape().record({a, b}, out, [=] {
    ConstVecMap g(oi->grad.data(), oi->grad.size());
    if (ai->requires_grad) VecMap(ai->grad_buffer().data(), g.size()) += g;
    if (bi->requires_grad) VecMap(bi->grad_buffer().data(), g.size()) -= g;
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  ConstVecMap av(a.data().data(), a.numel());
  ConstVecMap bv(b.data().data(), b.numel());
  VecMap(out.data().data(), out.numel()) = av.cwiseProduct(bv);
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  tape().record({a, b}, out, [=] {
    const auto n = static_cast<Eigen::Index>(oi->grad.size());
    ConstVecMap g(oi->grad.data(), n);
    if (ai->requires_grad) VecMap(ai->grad_buffer().data(), n) += g.cwiseProduct(ConstVecMap(bi->data.data(), n));
    if (bi->requires_grad) VecMap(bi->grad_buffer().data(), n) += g.cwiseProduct(ConstVecMap(ai->data.data(), n));
  });
  return out;
}

Tensor scale(const Tensor& a, Real factor) {
  Tensor out = Tensor::zeros(a.shape());
  VecMap(out.data().data(), out.numel()) = ConstVecMap(a.data().data(), a.numel()) * factor;
  Impl ai = a.impl(), oi = out.impl();
  tape().record({a}, out, [=] {
    const auto n = static_cast<Eigen::Index>(oi->grad.size());
    VecMap(ai->grad_buffer().data(), n) += ConstVecMap(oi->grad.data(), n) * factor;
  });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  Tensor out = x.clone();
  out.set_requires_grad(false);
  {
    auto O = mmap(out.impl()->data, 0, rows, n);
    O.rowwise() += ConstVecMap(bias.data().data(), n).transpose();
  }
  Impl xi = x.impl(), bi = bias.impl(), oi = out.impl();
  tape().record({x, bias}, out, [=] {
    auto G = cmap(oi->grad, 0, rows, n);
    if (xi->requires_grad) mmap(xi->grad_buffer(), 0, rows, n) += G;
    if (bi->requires_grad) VecMap(bi->grad_buffer().data(), n) += G.colwise().sum().transpose();
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(ConstVecMap(x.data().data(), x.numel()).sum());
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    const Real g = oi->grad[0];
    for (auto& v : xi->grad_buffer()) v += g;
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Real>(x.numel())); }

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0 ? xv[i] : 0.0;
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xi->data[i] > 0) gx[i] += oi->grad[i];
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real z = xv[i];
    ov[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const Real s = oi->data[i];
      gx[i] += oi->grad[i] * s * (1.0 - s);
    }
  });
  return out;
}

namespace {

// Offset of the mask slice broadcast onto x's slice `slice` (last dim excluded).
struct Broadcast {
  std::vector<std::size_t> x_dims;       // leading dims of x
  std::vector<std::size_t> mask_stride;  // stride of mask per leading dim, 0 when broadcast
  std::size_t mask_last_stride = 1;      // 0 when mask's last dim is broadcast

  Broadcast(const Shape& xs, const Shape& ms) {
    if (ms.size() > xs.size()) throw DimensionError("softmax mask " + shape_str(ms) + " not broadcastable to " + shape_str(xs));
    Shape aligned(xs.size() - ms.size(), 1);
    aligned.insert(aligned.end(), ms.begin(), ms.end());
    std::vector<std::size_t> strides(aligned.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = aligned.size(); i-- > 0;) {
      if (aligned[i] != 1 && aligned[i] != xs[i]) {
        throw DimensionError("softmax mask " + shape_str(ms) + " not broadcastable to " + shape_str(xs));
      }
      strides[i] = aligned[i] == 1 ? 0 : s;
      s *= aligned[i];
    }
    x_dims.assign(xs.begin(), xs.end() - 1);
    mask_stride.assign(strides.begin(), strides.end() - 1);
    mask_last_stride = strides.back();
  }

  std::size_t offset(std::size_t slice) const {
    std::size_t off = 0;
    for (std::size_t i = x_dims.size(); i-- > 0;) {
      off += (slice % x_dims[i]) * mask_stride[i];
      slice /= x_dims[i];
    }
    return off;
  }
};

}  // namespace

Tensor softmax_lastdim(const Tensor& x, const std::optional<Tensor>& mask) {
  const std::size_t n = last_dim(x);
  const std::size_t slices = x.numel() / n;
  std::optional<Broadcast> bc;
  if (mask) bc.emplace(x.shape(), mask->shape());
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  Buffer row(n);
  for (std::size_t s = 0; s < slices; ++s) {
    const Real* xs = xv.data() + s * n;
    bool any_open = !mask;
    if (mask) {
      const Real* ms = mask->data().data() + bc->offset(s);
      for (std::size_t j = 0; j < n; ++j) {
        const Real mv = ms[j * bc->mask_last_stride];
        row[j] = xs[j] + mv;
        any_open = any_open || mv > kMaskedThreshold;
      }
      if (!any_open) {
        throw ContractError("softmax_lastdim: slice " + std::to_string(s) + " has every position masked");
      }
    } else {
      std::copy(xs, xs + n, row.begin());
    }
    const Real mx = *std::max_element(row.begin(), row.end());
    Real total = 0;
    Real* os = ov.data() + s * n;
    for (std::size_t j = 0; j < n; ++j) {
      os[j] = std::exp(row[j] - mx);
      total += os[j];
    }
    const Real inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) os[j] *= inv;
  }
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t s = 0; s < slices; ++s) {
      const Real* y = oi->data.data() + s * n;
      const Real* g = oi->grad.data() + s * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      Real* d = gx.data() + s * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t slices = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t s = 0; s < slices; ++s) {
    const Real* xs = xv.data() + s * n;
    const Real mx = *std::max_element(xs, xs + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(xs[j] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) ov[s * n + j] = xs[j] - lse;
  }
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t s = 0; s < slices; ++s) {
      const Real* y = oi->data.data() + s * n;
      const Real* g = oi->grad.data() + s * n;
      Real gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += g[j];
      for (std::size_t j = 0; j < n; ++j) gx[s * n + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t h = last_dim(x);
  if (gain.numel() != h || bias.numel() != h) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / h;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  const auto& xv = x.impl()->data;
  const auto& gv = gain.impl()->data;
  const auto& bv = bias.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xs = xv.data() + r * h;
    Real mu = 0;
    for (std::size_t j = 0; j < h; ++j) mu += xs[j];
    mu /= static_cast<Real>(h);
    Real var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xs[j] - mu) * (xs[j] - mu);
    var /= static_cast<Real>(h);
    const Real inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < h; ++j) {
      const Real xn = (xs[j] - mu) * inv;
      (*xhat)[r * h + j] = xn;
      ov[r * h + j] = gv[j] * xn + bv[j];
    }
  }
  Impl xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  tape().record({x, gain, bias}, out, [=] {
    const auto& g = oi->grad;
    if (gi->requires_grad) {
      auto& dg = gi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) dg[j] += g[r * h + j] * (*xhat)[r * h + j];
    }
    if (bi->requires_grad) {
      auto& db = bi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) db[j] += g[r * h + j];
    }
    if (xi->requires_grad) {
      auto& dx = xi->grad_buffer();
      Buffer dxhat(h);
      for (std::size_t r = 0; r < rows; ++r) {
        Real m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < h; ++j) {
          dxhat[j] = g[r * h + j] * gi->data[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * (*xhat)[r * h + j];
        }
        m1 /= static_cast<Real>(h);
        m2 /= static_cast<Real>(h);
        for (std::size_t j = 0; j < h; ++j) {
          dx[r * h + j] += (*rstd)[r] * (dxhat[j] - m1 - (*xhat)[r * h + j] * m2);
        }
      }
    }
  });
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int64_t> labels, std::int64_t ignore_id) {
  const std::size_t v = last_dim(logits);
  const std::size_t rows = logits.numel() / v;
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy_masked: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] == ignore_id) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= v) {
      throw IndexError("cross_entropy_masked: label " + std::to_string(labels[r]) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    active.push_back(r);
  }
  auto probs = std::make_shared<Buffer>(active.size() * v);
  std::vector<std::int64_t> picked;
  Real total = 0;
  const auto& lv = logits.impl()->data;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const Real* xs = lv.data() + active[i] * v;
    const Real mx = *std::max_element(xs, xs + v);
    Real z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      (*probs)[i * v + j] = std::exp(xs[j] - mx);
      z += (*probs)[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    const auto label = static_cast<std::size_t>(labels[active[i]]);
    total += mx + std::log(z) - xs[label];
    picked.push_back(labels[active[i]]);
  }
  const Real count = static_cast<Real>(active.size());
  Tensor out = Tensor::scalar(active.empty() ? 0.0 : total / count);
  Impl li = logits.impl(), oi = out.impl();
  tape().record({logits}, out, [=] {
    auto& gx = li->grad_buffer();
    if (active.empty()) return;
    const Real g = oi->grad[0] / count;
    for (std::size_t i = 0; i < active.size(); ++i) {
      Real* d = gx.data() + active[i] * v;
      for (std::size_t j = 0; j < v; ++j) d[j] += g * (*probs)[i * v + j];
      d[picked[i]] -= g;
    }
  });
  return out;
}

Tensor binary_cross_entropy(const Tensor& scores, std::span<const int> labels) {
  if (labels.size() != scores.numel()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(labels.size()) + " labels for scores " +
                         shape_str(scores.shape()));
  }
  // Keeps log() finite when a sigmoid saturates in double precision.
  constexpr Real kClamp = 1e-15;
  const auto& sv = scores.impl()->data;
  const std::size_t n = sv.size();
  Real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real s = std::clamp(sv[i], kClamp, 1.0 - kClamp);
    total -= labels[i] ? std::log(s) : std::log(1.0 - s);
  }
  Tensor out = Tensor::scalar(total / static_cast<Real>(n));
  std::vector<int> l(labels.begin(), labels.end());
  Impl si = scores.impl(), oi = out.impl();
  tape().record({scores}, out, [=] {
    auto& gs = si->grad_buffer();
    const Real g = oi->grad[0] / static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Real s = std::clamp(si->data[i], kClamp, 1.0 - kClamp);
      gs[i] += g * (l[i] ? -1.0 / s : 1.0 / (1.0 - s));
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = table.dim(0), h = table.dim(1);
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  for (auto id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(id) + " outside [0, " + std::to_string(rows) + ")");
    }
  }
  Tensor out = Tensor::zeros({idx.size(), h});
  const auto& tv = table.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idx[i] * h), h, ov.begin() + static_cast<std::ptrdiff_t>(i * h));
  }
  Impl ti = table.impl(), oi = out.impl();
  tape().record({table}, out, [=] {
    auto& gt = ti->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Real* g = oi->grad.data() + i * h;
      Real* d = gt.data() + idx[i] * h;
      for (std::size_t j = 0; j < h; ++j) d[j] += g[j];
    }
  });
  return out;
}

Tensor pick(const Tensor& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("pick: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out = Tensor::zeros({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel()) throw IndexError("pick: index " + std::to_string(idx[i]) + " outside tensor");
    out.at(i) = x.at(idx[i]);
  }
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += oi->grad[i];
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
  });
  return out;
}

namespace {

// outer x axis x inner decomposition of a shape.
struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
  AxisSplit(const Shape& s, std::size_t ax) {
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    axis = s[ax];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  }
};

}  // namespace

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit sp(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out = Tensor::zeros(shape);
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  const std::size_t chunk = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const auto src = xv.begin() + static_cast<std::ptrdiff_t>((o * sp.axis + start) * sp.inner);
    std::copy_n(src, chunk, ov.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      Real* d = gx.data() + (o * sp.axis + start) * sp.inner;
      const Real* g = oi->grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) d[i] += g[i];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(shape) + " differ off-axis");
    total += p.dim(axis);
  }
  shape[axis] = total;
  Tensor out = Tensor::zeros(shape);
  const AxisSplit sp(shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t acc = 0;
  for (const auto& p : parts) {
    offsets.push_back(acc);
    acc += p.dim(axis);
  }
  auto& ov = out.impl()->data;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t chunk = parts[k].dim(axis) * sp.inner;
    const auto& pv = parts[k].impl()->data;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  ov.begin() + static_cast<std::ptrdiff_t>((o * sp.axis + offsets[k]) * sp.inner));
    }
  }
  std::vector<Impl> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  Impl oi = out.impl();
  tape().record(parts, out, [=] {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (!impls[k]->requires_grad) continue;
      auto& gp = impls[k]->grad_buffer();
      const std::size_t chunk = impls[k]->shape[axis] * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const Real* g = oi->grad.data() + (o * sp.axis + offsets[k]) * sp.inner;
        Real* d = gp.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) d[i] += g[i];
      }
    }
  });
  return out;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t b = x.dim(0), t = x.dim(1), h = x.dim(2), dh = h / heads;
  Tensor out = Tensor::zeros({b, heads, t, dh});
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t a = 0; a < heads; ++a)
      for (std::size_t s = 0; s < t; ++s)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((i * t + s) * h + a * dh), dh,
                    ov.begin() + static_cast<std::ptrdiff_t>(((i * heads + a) * t + s) * dh));
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t a = 0; a < heads; ++a)
        for (std::size_t s = 0; s < t; ++s) {
          const Real* g = oi->grad.data() + ((i * heads + a) * t + s) * dh;
          Real* d = gx.data() + (i * t + s) * h + a * dh;
          for (std::size_t j = 0; j < dh; ++j) d[j] += g[j];
        }
  });
  return out;
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: expected [B, heads, T, d], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), heads = x.dim(1), t = x.dim(2), dh = x.dim(3), h = heads * dh;
  Tensor out = Tensor::zeros({b, t, h});
  const auto& xv = x.impl()->data;
  auto& ov = out.impl()->data;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t a = 0; a < heads; ++a)
      for (std::size_t s = 0; s < t; ++s)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(((i * heads + a) * t + s) * dh), dh,
                    ov.begin() + static_cast<std::ptrdiff_t>((i * t + s) * h + a * dh));
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t a = 0; a < heads; ++a)
        for (std::size_t s = 0; s < t; ++s) {
          const Real* g = oi->grad.data() + (i * t + s) * h + a * dh;
          Real* d = gx.data() + ((i * heads + a) * t + s) * dh;
          for (std::size_t j = 0; j < dh; ++j) d[j] += g[j];
        }
  });
  return out;
}

Tensor dropout(const Tensor& x, Real rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0, 1)");
  if (rate == 0) return x;
  auto keep = std::make_shared<Buffer>(x.numel());
  const Real inv = 1.0 / (1.0 - rate);
  for (auto& k : *keep) k = rng.uniform() < rate ? 0.0 : inv;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) * (*keep)[i];
  Impl xi = x.impl(), oi = out.impl();
  tape().record({x}, out, [=] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i] * (*keep)[i];
  });
  return out;
}

}  // namespace upoc2
