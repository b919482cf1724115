#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xdvae/errors.hpp"
#include "xdvae/rng.hpp"

namespace xdvae {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Activation { Tanh, Sigmoid, Identity };

// Batches are column-major: one column per user, one row per feature.

template <typename Scalar>
void activate_inplace(Mat<Scalar>& z, Activation act) {
  switch (act) {
    case Activation::Tanh:
      z = z.array().tanh();
      break;
    case Activation::Sigmoid:
      z = (Scalar(1) + (-z.array()).exp()).inverse();
      break;
    case Activation::Identity:
      break;
  }
}

/// Multiplies `grad` by the activation derivative, written in terms of the
/// activation output `y`.
template <typename Scalar>
void activation_backward_inplace(Mat<Scalar>& grad, const Mat<Scalar>& y, Activation act) {
  switch (act) {
    case Activation::Tanh:
      grad.array() *= Scalar(1) - y.array().square();
      break;
    case Activation::Sigmoid:
      grad.array() *= y.array() * (Scalar(1) - y.array());
      break;
    case Activation::Identity:
      break;
  }
}

/// Contiguous view of one named parameter tensor, row count x column count.
template <typename Scalar>
struct ParamView {
  std::string name;
  Scalar* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  Eigen::Map<Mat<Scalar>> map() const { return {data, rows, cols}; }
};

template <typename Scalar>
struct DenseLayer {
  Mat<Scalar> W;  // out x in
  Vec<Scalar> b;  // out
  Activation act = Activation::Identity;

  DenseLayer() = default;
  DenseLayer(Eigen::Index in, Eigen::Index out, Activation a)
      : W(Mat<Scalar>::Zero(out, in)), b(Vec<Scalar>::Zero(out)), act(a) {}

  Eigen::Index in_dim() const { return W.cols(); }
  Eigen::Index out_dim() const { return W.rows(); }

  void append_views(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    out.push_back({prefix + ".W", W.data(), W.rows(), W.cols()});
    out.push_back({prefix + ".b", b.data(), b.rows(), 1});
  }

  void set_zero() {
    W.setZero();
    b.setZero();
  }

  template <typename Other>
  DenseLayer<Other> cast() const {
    DenseLayer<Other> o;
    o.W = W.template cast<Other>();
    o.b = b.template cast<Other>();
    o.act = act;
    return o;
  }
};

/// Glorot-uniform weights: i.i.d. on [-sqrt(6/(fan_in+fan_out)), +sqrt(...)].
template <typename Scalar>
Mat<Scalar> glorot_init(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  if (fan_in < 1 || fan_out < 1) throw ShapeError("glorot_init needs fan_in, fan_out >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<Scalar> w(fan_out, fan_in);
  // Column-major fill order; fixed so the same seed always gives the same matrix.
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(dist(rng));
  return w;
}

/// act(W x + b) for every column of `x`.
template <typename Scalar, typename Derived>
Mat<Scalar> dense_forward(const DenseLayer<Scalar>& layer, const Eigen::MatrixBase<Derived>& x) {
  if (x.rows() != layer.in_dim()) {
    throw ShapeError("dense_forward: input has " + std::to_string(x.rows()) + " rows, layer expects " +
                     std::to_string(layer.in_dim()));
  }
  Mat<Scalar> z = layer.W * x;
  z.colwise() += layer.b;
  activate_inplace(z, layer.act);
  return z;
}

/// Backward through one layer given its input `x`, output `y` and dL/dy.
/// Accumulates into `grad` and returns dL/dx.
template <typename Scalar>
Mat<Scalar> dense_backward(const DenseLayer<Scalar>& layer, const Mat<Scalar>& x, const Mat<Scalar>& y,
                           Mat<Scalar> dy, DenseLayer<Scalar>& grad) {
  activation_backward_inplace(dy, y, layer.act);
  grad.W.noalias() += dy * x.transpose();
  grad.b += dy.rowwise().sum();
  return layer.W.transpose() * dy;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators, one flat vector per parameter tensor in
/// view order.
template <typename Scalar>
struct AdamState {
  AdamOptions opt;
  std::uint64_t t = 0;
  std::vector<Vec<Scalar>> m;
  std::vector<Vec<Scalar>> v;
};

/// Bias-corrected Adam update over matching view lists.
template <typename Scalar>
void adam_step(const std::vector<ParamView<Scalar>>& params, const std::vector<ParamView<Scalar>>& grads,
               AdamState<Scalar>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Vec<Scalar>::Zero(p.size()));
      state.v.push_back(Vec<Scalar>::Zero(p.size()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  state.t += 1;
  const auto& o = state.opt;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  const auto b1 = static_cast<Scalar>(o.beta1);
  const auto b2 = static_cast<Scalar>(o.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw ShapeError("adam_step: shape mismatch at " + params[k].name);
    Eigen::Map<Vec<Scalar>> p(params[k].data, params[k].size());
    Eigen::Map<const Vec<Scalar>> g(grads[k].data, grads[k].size());
    auto& m = state.m[k];
    auto& v = state.v[k];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    const auto step_size = static_cast<Scalar>(o.lr / c1);
    const auto v_scale = static_cast<Scalar>(1.0 / c2);
    p.array() -= step_size * m.array() / ((v.array() * v_scale).sqrt() + static_cast<Scalar>(o.eps));
  }
}

/// Max over all entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// with numeric = (f(p+h) - f(p-h)) / 2h. `loss` must be deterministic: any
/// sampled noise has to be frozen for the duration of the check, otherwise
/// the result is meaningless.
template <typename Scalar>
double finite_diff_check(const std::function<double()>& loss, const std::vector<ParamView<Scalar>>& params,
                         const std::vector<ParamView<Scalar>>& analytic, double h = 1e-5,
                         std::string* worst_name = nullptr) {
  if (params.size() != analytic.size()) throw ShapeError("finite_diff_check: view count mismatch");
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      Scalar& p = params[k].data[i];
      const Scalar saved = p;
      p = static_cast<Scalar>(saved + h);
      const double up = loss();
      p = static_cast<Scalar>(saved - h);
      const double down = loss();
      p = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[k].data[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > worst) {
        worst = rel;
        if (worst_name) *worst_name = params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return worst;
}

template <typename Scalar>
bool all_finite(const std::vector<ParamView<Scalar>>& views, std::string* bad = nullptr) {
  for (const auto& v : views) {
    if (!v.map().allFinite()) {
      if (bad) *bad = v.name;
      return false;
    }
  }
  return true;
}

}  // namespace xdvae
