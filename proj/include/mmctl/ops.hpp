#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "mmctl/tensor.hpp"

namespace mmctl {

// Matrix product with 64-bit accumulation, rounded back to the operand scalar.
// Accepts arbitrary Eigen expressions (transposes, blocks, maps).
template <typename DA, typename DB>
Matrix<typename DA::Scalar> mul_acc(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using S = typename DA::Scalar;
  static_assert(std::is_same_v<S, typename DB::Scalar>, "mixed scalar product");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  if constexpr (std::is_same_v<S, double>) {
    return a * b;
  } else {
    Matrix<double> r = a.template cast<double>() * b.template cast<double>();
    return r.template cast<S>();
  }
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: operands must be rank 2");
  return Tensor<S>::from_matrix(mul_acc(a.matrix(), b.matrix()));
}

// Row-wise softmax with max subtraction. Rows with no admissible entry
// (every entry -inf) come back as zeros.
template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    if (!std::isfinite(static_cast<double>(mx))) {
      out.row(r).setZero();
      continue;
    }
    double total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const double e = std::exp(static_cast<double>(x(r, c) - mx));
      out(r, c) = static_cast<S>(e);
      total += e;
    }
    out.row(r) /= static_cast<S>(total);
  }
  return out;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  const Index rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range");
  const Shape& sh = x.shape();
  Index inner = 1;
  for (Index i = axis + 1; i < rank; ++i) inner *= sh[static_cast<std::size_t>(i)];
  const Index n = sh[static_cast<std::size_t>(axis)];
  const Index outer = x.size() / std::max<Index>(n * inner, 1);
  Tensor<S> out(sh);
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double total = 0;
      for (Index j = 0; j < n; ++j) total += std::exp(static_cast<double>(x[base + j * inner] - mx));
      for (Index j = 0; j < n; ++j) {
        out[base + j * inner] =
            static_cast<S>(std::exp(static_cast<double>(x[base + j * inner] - mx)) / total);
      }
    }
  }
  return out;
}

// Normalizes each row to zero mean / unit variance. Optionally records the
// normalized rows and reciprocal standard deviations for a backward pass.
template <typename S>
Matrix<S> normalize_rows(const Matrix<S>& x, double eps, RowVector<S>* rstd_out = nullptr) {
  Matrix<S> out(x.rows(), x.cols());
  if (rstd_out) rstd_out->resize(x.rows());
  const double d = static_cast<double>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mean = 0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= d;
    double var = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const double dv = x(r, c) - mean;
      var += dv * dv;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (Index c = 0; c < x.cols(); ++c) out(r, c) = static_cast<S>((x(r, c) - mean) * rstd);
    if (rstd_out) (*rstd_out)(r) = static_cast<S>(rstd);
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps) {
  const Index d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal last axis " + std::to_string(d));
  }
  Matrix<S> y = normalize_rows(x.matrix(), eps);
  const auto g = Eigen::Map<const RowVector<S>>(gain.data(), d);
  const auto b = Eigen::Map<const RowVector<S>>(bias.data(), d);
  for (Index r = 0; r < y.rows(); ++r) y.row(r) = y.row(r).cwiseProduct(g) + b;
  return Tensor<S>(x.shape(), std::move(y));
}

// Multi-head scaled dot-product attention over row-major token matrices.
// `key_valid`, when given, masks out keys whose entry is false. If `probs` is
// non-null it receives the per-head attention weights [n_q x n_k].
template <typename S>
Matrix<S> attention_rows(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v, Index heads,
                         std::span<const std::uint8_t> key_valid = {},
                         std::vector<Matrix<S>>* probs = nullptr) {
  if (heads <= 0 || q.cols() % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.cols() != q.cols()) throw DimensionError("attention: query/key widths differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: key/value counts differ");
  if (v.cols() % heads != 0) throw ConfigError("attention: value width not divisible by heads");
  if (!key_valid.empty() && static_cast<Index>(key_valid.size()) != k.rows()) {
    throw DimensionError("attention: key mask length differs from key count");
  }
  const Index dh = q.cols() / heads;
  const Index dv = v.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix<S> out(q.rows(), v.cols());
  if (probs) probs->assign(static_cast<std::size_t>(heads), Matrix<S>());
  for (Index h = 0; h < heads; ++h) {
    Matrix<S> logits = mul_acc(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh).transpose());
    logits *= static_cast<S>(scale);
    if (!key_valid.empty()) {
      for (Index j = 0; j < k.rows(); ++j) {
        if (!key_valid[static_cast<std::size_t>(j)]) {
          logits.col(j).setConstant(-std::numeric_limits<S>::infinity());
        }
      }
    }
    Matrix<S> p = softmax_rows(logits);
    out.middleCols(h * dv, dv) = mul_acc(p, v.middleCols(h * dv, dv));
    if (probs) (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  return out;
}

template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention: operands must be rank 2");
  }
  return Tensor<S>::from_matrix(attention_rows(q.matrix(), k.matrix(), v.matrix(), heads));
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename S>
S gelu(S x) {
  const double xd = x;
  return static_cast<S>(0.5 * xd * (1.0 + std::tanh(kGeluC * (xd + 0.044715 * xd * xd * xd))));
}

template <typename S>
S gelu_grad(S x) {
  const double xd = x;
  const double u = kGeluC * (xd + 0.044715 * xd * xd * xd);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<S>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

template <typename S>
S silu(S x) {
  const double xd = x;
  return static_cast<S>(xd / (1.0 + std::exp(-xd)));
}

template <typename S>
S silu_grad(S x) {
  const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
  return static_cast<S>(s * (1.0 + static_cast<double>(x) * (1.0 - s)));
}

}  // namespace mmctl
