#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xdvae/errors.hpp"
#include "xdvae/nn.hpp"

namespace xdvae {

// Every batch loss here is summed over features and averaged over the batch
// (columns). Single vectors are one-column batches.

inline constexpr double kProbClamp = 1e-7;

namespace detail {

template <typename DA, typename DB>
void require_same_shape(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  }
}

template <typename Scalar>
Scalar clamp_prob(Scalar p) {
  const auto lo = static_cast<Scalar>(kProbClamp);
  const auto hi = static_cast<Scalar>(1.0 - kProbClamp);
  return p < lo ? lo : (p > hi ? hi : p);
}

template <typename Scalar>
bool inside_clamp(Scalar p) {
  return p >= static_cast<Scalar>(kProbClamp) && p <= static_cast<Scalar>(1.0 - kProbClamp);
}

}  // namespace detail

/// Binary cross-entropy -sum_j [r ln p + (1-r) ln(1-p)], p clamped to
/// [1e-7, 1-1e-7], natural log.
template <typename DR, typename DP>
double bce(const Eigen::MatrixBase<DR>& r, const Eigen::MatrixBase<DP>& r_hat) {
  detail::require_same_shape(r, r_hat, "bce");
  if (r.cols() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index c = 0; c < r.cols(); ++c) {
    for (Eigen::Index j = 0; j < r.rows(); ++j) {
      const double p = static_cast<double>(detail::clamp_prob(r_hat(j, c)));
      const double y = static_cast<double>(r(j, c));
      total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
  }
  return total / static_cast<double>(r.cols());
}

/// Sparsity-weighted reconstruction H(r, p) + beta * H(r, p . r). The second
/// term only sees positives: it reduces to -beta * sum_{r_j = 1} ln p_j.
template <typename DR, typename DP>
double masked_recon(const Eigen::MatrixBase<DR>& r, const Eigen::MatrixBase<DP>& r_hat, double beta) {
  if (beta < 0.0) throw std::invalid_argument("masked_recon: beta must be >= 0");
  const double base = bce(r, r_hat);
  if (beta == 0.0 || r.cols() == 0) return base;
  double extra = 0.0;
  for (Eigen::Index c = 0; c < r.cols(); ++c)
    for (Eigen::Index j = 0; j < r.rows(); ++j)
      if (r(j, c) != 0) extra -= std::log(static_cast<double>(detail::clamp_prob(r_hat(j, c))));
  return base + beta * extra / static_cast<double>(r.cols());
}

/// d masked_recon / d r_hat. Zero where the clamp is active.
template <typename Scalar>
Mat<Scalar> masked_recon_grad(const Mat<Scalar>& r, const Mat<Scalar>& r_hat, double beta) {
  detail::require_same_shape(r, r_hat, "masked_recon_grad");
  Mat<Scalar> g(r.rows(), r.cols());
  const double inv_batch = r.cols() ? 1.0 / static_cast<double>(r.cols()) : 0.0;
  for (Eigen::Index c = 0; c < r.cols(); ++c) {
    for (Eigen::Index j = 0; j < r.rows(); ++j) {
      const Scalar p = r_hat(j, c);
      if (!detail::inside_clamp(p)) {
        g(j, c) = Scalar(0);
        continue;
      }
      const double pd = static_cast<double>(p);
      const double y = static_cast<double>(r(j, c));
      double d = -y / pd + (1.0 - y) / (1.0 - pd);
      if (y != 0.0) d -= beta / pd;
      g(j, c) = static_cast<Scalar>(d * inv_batch);
    }
  }
  return g;
}

/// 0.5 * sum_l (exp(logvar) + mu^2 - 1 - logvar) against N(0, I).
template <typename DM, typename DL>
double kl_divergence(const Eigen::MatrixBase<DM>& mu, const Eigen::MatrixBase<DL>& logvar) {
  detail::require_same_shape(mu, logvar, "kl_divergence");
  if (mu.cols() == 0) return 0.0;
  const auto m = mu.template cast<double>().array();
  const auto lv = logvar.template cast<double>().array();
  return 0.5 * (lv.exp() + m.square() - 1.0 - lv).sum() / static_cast<double>(mu.cols());
}

template <typename Scalar>
void kl_grad(const Mat<Scalar>& mu, const Mat<Scalar>& logvar, Mat<Scalar>& d_mu, Mat<Scalar>& d_logvar) {
  const auto inv_batch = static_cast<Scalar>(1.0 / static_cast<double>(mu.cols()));
  d_mu += mu * inv_batch;
  d_logvar.array() += Scalar(0.5) * (logvar.array().exp() - Scalar(1)) * inv_batch;
}

/// lambda * sum of squared entries over every view.
template <typename Scalar>
double l2_reg(const std::vector<ParamView<Scalar>>& params, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("l2_reg: lambda must be >= 0");
  if (lambda == 0.0) return 0.0;
  double s = 0.0;
  for (const auto& p : params) s += p.map().template cast<double>().squaredNorm();
  return lambda * s;
}

template <typename Scalar>
void l2_reg_grad(const std::vector<ParamView<Scalar>>& params, double lambda,
                 const std::vector<ParamView<Scalar>>& grads) {
  if (lambda == 0.0) return;
  for (std::size_t k = 0; k < params.size(); ++k)
    grads[k].map() += static_cast<Scalar>(2.0 * lambda) * params[k].map();
}

/// Linear MMD: squared distance between the batch means of two row-aligned
/// latent batches.
template <typename DS, typename DT>
double mmd_linear(const Eigen::MatrixBase<DS>& z_s, const Eigen::MatrixBase<DT>& z_t) {
  if (z_s.rows() != z_t.rows()) throw ShapeError("mmd_linear: latent dimension mismatch");
  if (z_s.cols() == 0 || z_t.cols() == 0) throw ShapeError("mmd_linear: empty batch");
  if (z_s.cols() != z_t.cols()) throw ShapeError("mmd_linear: batches are not row-aligned");
  const Eigen::VectorXd diff = z_s.template cast<double>().rowwise().mean() - z_t.template cast<double>().rowwise().mean();
  return diff.squaredNorm();
}

template <typename Scalar>
void mmd_grad(const Mat<Scalar>& z_s, const Mat<Scalar>& z_t, Mat<Scalar>& d_zs, Mat<Scalar>& d_zt) {
  const Scalar n = static_cast<Scalar>(z_s.cols());
  const Vec<Scalar> diff = z_s.rowwise().mean() - z_t.rowwise().mean();
  const Vec<Scalar> g = Scalar(2) * diff / n;
  d_zs.colwise() += g;
  d_zt.colwise() -= g;
}

/// (1/L) sum_l (z'_l - z_l)^2, averaged over the batch.
template <typename DP, typename DZ>
double mapping_loss(const Eigen::MatrixBase<DP>& z_prime, const Eigen::MatrixBase<DZ>& z) {
  detail::require_same_shape(z_prime, z, "mapping_loss");
  if (z.cols() == 0 || z.rows() == 0) return 0.0;
  const double sq = (z_prime.template cast<double>() - z.template cast<double>()).squaredNorm();
  return sq / static_cast<double>(z.rows()) / static_cast<double>(z.cols());
}

template <typename Scalar>
Mat<Scalar> mapping_loss_grad(const Mat<Scalar>& z_prime, const Mat<Scalar>& z) {
  const auto scale = static_cast<Scalar>(2.0 / static_cast<double>(z.rows()) / static_cast<double>(z.cols()));
  return scale * (z_prime - z);
}

enum class Variant { Generic, Single, Merged, NoMMD, ColdStart, Aux };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct LossBreakdown {
  double recon_source = 0.0;
  double recon_target = 0.0;
  double kl_source = 0.0;
  double kl_target = 0.0;
  double reg = 0.0;
  double mmd = 0.0;
  double map_loss = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator*=(double s);
  bool finite() const;
  nlohmann::json to_json() const;
};

/// Loss terms available from one forward pass; a term is absent when the
/// forward pass did not compute it.
struct LossComponents {
  std::optional<double> recon_source;
  std::optional<double> recon_target;
  std::optional<double> kl_source;
  std::optional<double> kl_target;
  std::optional<double> reg;
  std::optional<double> mmd;
  std::optional<double> map_loss;
};

/// Sums the terms a variant's objective prescribes. Throws if one is missing.
///   Generic, Aux : recon_S + kl_S + recon_T + kl_T + reg + mmd
///   NoMMD        : Generic without mmd
///   Single       : recon_T + kl_T + reg
///   Merged       : recon_S + recon_T (slices of one joint reconstruction) + kl_T + reg
///   ColdStart    : Generic + map_loss
LossBreakdown compose_total(Variant variant, const LossComponents& c);

}  // namespace xdvae
