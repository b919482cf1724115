#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xdvae/config.hpp"
#include "xdvae/data.hpp"
#include "xdvae/errors.hpp"
#include "xdvae/model.hpp"

namespace xdvae {

/// Dense n x |users| 0/1 matrix, one column per listed user.
template <typename Scalar>
Mat<Scalar> dense_rows(const Rows& rows, std::span<const std::uint32_t> users, std::size_t n_items) {
  Mat<Scalar> out = Mat<Scalar>::Zero(static_cast<Eigen::Index>(n_items), static_cast<Eigen::Index>(users.size()));
  for (std::size_t c = 0; c < users.size(); ++c)
    for (auto j : rows.at(users[c])) out(j, static_cast<Eigen::Index>(c)) = Scalar(1);
  return out;
}

template <typename Scalar>
Mat<Scalar> aux_columns(const Eigen::MatrixXd& aux, std::span<const std::uint32_t> users) {
  Mat<Scalar> out(aux.rows(), static_cast<Eigen::Index>(users.size()));
  for (std::size_t c = 0; c < users.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = aux.col(users[c]).cast<Scalar>();
  return out;
}

template <typename Scalar>
Batch<Scalar> make_batch(const ModelParams<Scalar>& p, const DatasetBundle& bundle,
                         std::span<const std::uint32_t> users) {
  Batch<Scalar> b;
  if (p.variant != Variant::Single) b.source = dense_rows<Scalar>(bundle.source.rows, users, bundle.source.n_items());
  b.target = dense_rows<Scalar>(bundle.target.rows, users, bundle.target.n_items());
  if (p.aux_encoder) b.aux = aux_columns<Scalar>(*bundle.aux, users);
  return b;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;     // user-weighted mean over the epoch's batches
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::optional<std::size_t> early_stop_epoch;
  std::vector<std::string> warnings;
  /// Users whose rows entered at least one batch, sorted.
  std::vector<std::uint32_t> trained_users;

  nlohmann::json to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& e : epochs) {
      auto j = e.loss.to_json();
      j["epoch"] = e.epoch;
      j["seconds"] = e.seconds;
      recs.push_back(std::move(j));
    }
    return {{"seed", seed},
            {"config", config},
            {"epochs", recs},
            {"early_stop_epoch", early_stop_epoch ? nlohmann::json(*early_stop_epoch) : nlohmann::json(nullptr)},
            {"warnings", warnings},
            {"trained_users", trained_users.size()}};
  }
};

template <typename Scalar>
struct TrainResult {
  ModelParams<Scalar> params;
  TrainHistory history;
};

/// Mini-batch Adam over the listed users (all users when `users` is empty).
/// Seeded streams: "init" per tensor, "shuffle" per run, "eps" per run.
template <typename Scalar>
TrainResult<Scalar> train(const DatasetBundle& bundle, const ModelConfig& cfg,
                          std::vector<std::uint32_t> users = {},
                          const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  bundle.validate();
  if (cfg.variant == Variant::Aux && !bundle.aux) throw DataError("aux variant needs auxiliary vectors in the bundle");
  const auto m = bundle.n_users();
  if (users.empty()) {
    users.resize(m);
    std::iota(users.begin(), users.end(), 0u);
  }
  for (auto u : users)
    if (u >= m) throw ShapeError("train: user index out of range");

  TrainResult<Scalar> out;
  out.params = build_model<Scalar>(cfg, bundle.source.n_items(), bundle.target.n_items(),
                                   cfg.variant == Variant::Aux ? bundle.aux_dim() : 0);
  init_params(out.params, cfg.seed);
  auto& p = out.params;
  auto& h = out.history;
  h.seed = cfg.seed;
  h.config = cfg.to_json();
  if (cfg.epochs == 0) return out;

  h.trained_users = users;
  std::sort(h.trained_users.begin(), h.trained_users.end());

  AdamState<Scalar> adam;
  adam.opt.lr = cfg.lr;
  auto shuffle_rng = make_rng(cfg.seed, "shuffle");
  auto eps_rng = make_rng(cfg.seed, "eps");
  auto grad = p.zeros_like();
  const auto params_view = p.views();
  const auto grad_view = grad.views();

  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::vector<std::uint32_t> order = users;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown sum;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const auto len = std::min(cfg.batch_size, order.size() - start);
      const std::span<const std::uint32_t> ids(order.data() + start, len);
      const auto batch = make_batch(p, bundle, ids);
      const auto noise = sample_noise(p, static_cast<Eigen::Index>(len), eps_rng);
      auto loss = loss_and_grad(p, cfg, batch, noise, &grad);
      const auto where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
      if (!loss.finite()) throw NumericError("non-finite loss at " + where);
      std::string bad;
      if (!all_finite(grad_view, &bad)) throw NumericError("non-finite gradient for " + bad + " at " + where);
      adam_step(params_view, grad_view, adam);
      if (!all_finite(params_view, &bad)) throw NumericError("non-finite parameter " + bad + " at " + where);
      loss *= static_cast<double>(len);
      sum += loss;
    }
    sum *= 1.0 / static_cast<double>(order.size());
    EpochRecord rec{epoch, sum, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    h.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (cfg.early_stop) {
      if (sum.total < best - cfg.min_delta) {
        best = sum.total;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        h.early_stop_epoch = epoch;
        h.warnings.push_back("early stop at epoch " + std::to_string(epoch) + ": no improvement above min_delta for " +
                             std::to_string(cfg.patience) + " epochs");
        break;
      }
    }
  }

  // Tail check: the last five epochs should not trend upward beyond noise.
  const auto& e = h.epochs;
  if (e.size() >= 5) {
    const double first = e[e.size() - 5].loss.total;
    const double last = e.back().loss.total;
    if (last > first + 0.01 * std::abs(first)) {
      h.warnings.push_back("total loss rose over the final 5 epochs (" + std::to_string(first) + " -> " +
                           std::to_string(last) + ")");
    }
  }
  return out;
}

/// Ablation suite member: "generic", "single", "single0", "merged", "merged0",
/// "no-mmd". The "...0" members force beta = 0.
inline ModelConfig suite_config(const ModelConfig& base, const std::string& name) {
  ModelConfig c = base;
  if (name == "single0" || name == "merged0") {
    c.variant = parse_variant(name.substr(0, name.size() - 1));
    c.beta = 0.0;
  } else {
    c.variant = parse_variant(name);
    if (c.variant == Variant::ColdStart || c.variant == Variant::Aux) {
      throw std::invalid_argument("variant suite does not include '" + name + "'");
    }
  }
  return c;
}

template <typename Scalar>
std::map<std::string, TrainResult<Scalar>> run_variant_suite(const DatasetBundle& training, const ModelConfig& base,
                                                             const std::vector<std::string>& names) {
  std::map<std::string, TrainResult<Scalar>> out;
  for (const auto& n : names) out.emplace(n, train<Scalar>(training, suite_config(base, n)));
  return out;
}

}  // namespace xdvae
