#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xdvae/data.hpp"
#include "xdvae/errors.hpp"
#include "xdvae/model.hpp"
#include "xdvae/trainer.hpp"

namespace xdvae {

inline constexpr std::size_t kCandidates = kNegativesPerUser + 1;
inline const std::vector<std::size_t> kDefaultKs{5, 10, 20, 50};

struct RankOutcome {
  std::uint32_t user = 0;
  std::uint32_t rank = 1;  // 1..100
};

/// 1 + #(higher scores) + #(equal scores on a smaller item id).
/// `scores` and `item_ids` are candidate-aligned; exactly 100 candidates.
RankOutcome rank_test_item(std::span<const double> scores, std::span<const std::uint32_t> item_ids,
                           std::size_t test_index, std::uint32_t user = 0);

double hit_ratio(std::span<const RankOutcome> outcomes, std::size_t k);
/// Mean of ln2 / ln(rank + 1) over hits within K, misses count 0.
double ndcg(std::span<const RankOutcome> outcomes, std::size_t k);

/// Throws std::invalid_argument for an empty list or K outside 1..100.
void validate_ks(const std::vector<std::size_t>& ks);

struct MetricsReport {
  std::string variant;
  std::string protocol;  // standard, degrade:<fraction>, coldstart
  std::uint64_t seed = 0;
  std::size_t m_evaluated = 0;
  std::vector<std::size_t> ks;
  std::vector<double> hr;
  std::vector<double> ndcg;

  double hr_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
  nlohmann::json to_json() const;
};

MetricsReport make_report(std::span<const RankOutcome> outcomes, const std::vector<std::size_t>& ks,
                          std::string variant, std::string protocol, std::uint64_t seed);

/// CSV with columns variant,protocol,K,HR,NDCG,m,seed.
std::string reports_to_csv(std::span<const MetricsReport> reports);
nlohmann::json reports_to_json(std::span<const MetricsReport> reports);

namespace detail {

inline constexpr std::size_t kEvalChunk = 256;

template <typename Scalar>
Mat<Scalar> score_users(const ModelParams<Scalar>& p, const DatasetBundle& bundle,
                        std::span<const std::uint32_t> users, bool feed_target, InferenceMode mode, Rng* rng) {
  const auto source = p.variant == Variant::Single ? Mat<Scalar>::Zero(p.n_source, users.size()).eval()
                                                   : dense_rows<Scalar>(bundle.source.rows, users,
                                                                        bundle.source.n_items());
  const Mat<Scalar> target = feed_target ? dense_rows<Scalar>(bundle.target.rows, users, bundle.target.n_items())
                                         : Mat<Scalar>::Zero(p.n_target, static_cast<Eigen::Index>(users.size()));
  Mat<Scalar> aux;
  if (p.aux_encoder) aux = aux_columns<Scalar>(*bundle.aux, users);
  return predict_scores(p, source, &target, p.aux_encoder ? &aux : nullptr, mode, rng);
}

template <typename Scalar>
void check_dims(const ModelParams<Scalar>& p, const DatasetBundle& bundle) {
  if (static_cast<std::size_t>(p.n_target) != bundle.target.n_items() ||
      (p.variant != Variant::Single && static_cast<std::size_t>(p.n_source) != bundle.source.n_items())) {
    throw ShapeError("model dimensions do not match the bundle (model n_S=" + std::to_string(p.n_source) +
                     ", n_T=" + std::to_string(p.n_target) + "; bundle n_S=" +
                     std::to_string(bundle.source.n_items()) + ", n_T=" + std::to_string(bundle.target.n_items()) +
                     ")");
  }
  if (p.aux_encoder && !bundle.aux) throw DataError("aux model needs auxiliary vectors in the bundle");
}

}  // namespace detail

/// Leave-one-out protocol. `training` must already exclude the held-out items.
template <typename Scalar>
MetricsReport evaluate(const ModelParams<Scalar>& p, const LeaveOneOutSplit& split, const DatasetBundle& training,
                       const std::vector<std::size_t>& ks = kDefaultKs, InferenceMode mode = InferenceMode::Mean,
                       std::uint64_t seed = 0, std::string protocol = "standard") {
  validate_ks(ks);
  detail::check_dims(p, training);
  const auto m = training.n_users();
  if (split.held_out.size() != m || split.negatives.size() != m) throw DataError("split does not match the bundle");
  auto rng = make_rng(seed, "eval-eps");
  std::vector<RankOutcome> outcomes;
  outcomes.reserve(m);
  std::vector<std::uint32_t> users;
  std::vector<double> cand_scores(kCandidates);
  std::vector<std::uint32_t> cand_ids(kCandidates);
  for (std::size_t start = 0; start < m; start += detail::kEvalChunk) {
    users.clear();
    for (std::size_t u = start; u < std::min(m, start + detail::kEvalChunk); ++u) users.push_back(static_cast<std::uint32_t>(u));
    const auto scores = detail::score_users(p, training, users, true, mode, &rng);
    for (std::size_t c = 0; c < users.size(); ++c) {
      const auto u = users[c];
      if (split.negatives[u].size() != kNegativesPerUser) throw DataError("user " + std::to_string(u) + " lacks 99 negatives");
      cand_ids[0] = split.held_out[u];
      std::copy(split.negatives[u].begin(), split.negatives[u].end(), cand_ids.begin() + 1);
      for (std::size_t k = 0; k < kCandidates; ++k)
        cand_scores[k] = static_cast<double>(scores(cand_ids[k], static_cast<Eigen::Index>(c)));
      outcomes.push_back(rank_test_item(cand_scores, cand_ids, 0, u));
    }
  }
  return make_report(outcomes, ks, variant_name(p.variant), std::move(protocol), seed);
}

std::string degrade_protocol_name(double fraction);

/// Target rows thinned to each kept fraction before scoring; source rows untouched.
template <typename Scalar>
std::vector<MetricsReport> evaluate_degraded(const ModelParams<Scalar>& p, const LeaveOneOutSplit& split,
                                             const DatasetBundle& training, const std::vector<double>& fractions,
                                             std::uint64_t seed, const std::vector<std::size_t>& ks = kDefaultKs) {
  if (p.variant == Variant::ColdStart) {
    throw std::invalid_argument("degrade protocol needs a model that reads target rows; got cold-start");
  }
  if (fractions.empty()) throw std::invalid_argument("degrade protocol needs at least one fraction");
  std::vector<MetricsReport> out;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("fractions must lie in [0, 1]");
    DatasetBundle thinned = training;
    thinned.target.rows = degrade_target_rows(training.target.rows, f, seed);
    thinned.target.timestamps.clear();
    out.push_back(evaluate(p, split, thinned, ks, InferenceMode::Mean, seed, degrade_protocol_name(f)));
  }
  return out;
}

/// Cold-start protocol: each target positive of each test user is ranked
/// against 99 fresh negatives, from the source row alone. Averaged per
/// interaction. `feed_target_rows` passes the real target rows to the scorer,
/// which the cold-start path must ignore.
template <typename Scalar>
MetricsReport evaluate_cold_start(const ModelParams<Scalar>& p, const ColdStartSplit& cold, const DatasetBundle& bundle,
                                  const std::vector<std::size_t>& ks = kDefaultKs, std::uint64_t seed = 0,
                                  bool feed_target_rows = false) {
  if (p.variant != Variant::ColdStart) {
    throw std::invalid_argument("cold-start protocol needs a cold-start model; got " + variant_name(p.variant));
  }
  validate_ks(ks);
  detail::check_dims(p, bundle);
  if (cold.test_users.empty()) throw DataError("cold-start split has no test users");
  const auto n_t = bundle.target.n_items();
  std::vector<RankOutcome> outcomes;
  std::vector<double> cand_scores(kCandidates);
  std::vector<std::uint32_t> cand_ids(kCandidates);
  for (std::size_t start = 0; start < cold.test_users.size(); start += detail::kEvalChunk) {
    const auto len = std::min(detail::kEvalChunk, cold.test_users.size() - start);
    const std::span<const std::uint32_t> users(cold.test_users.data() + start, len);
    const auto scores = detail::score_users(p, bundle, users, feed_target_rows, InferenceMode::Mean, nullptr);
    for (std::size_t c = 0; c < len; ++c) {
      const auto u = users[c];
      const auto& row = bundle.target.rows.at(u);
      for (auto item : row) {
        auto rng = make_rng(derive_seed(seed, "cold-negatives", u), "item", item);
        const auto negs = sample_negatives(row, n_t, kNegativesPerUser, rng);
        cand_ids[0] = item;
        std::copy(negs.begin(), negs.end(), cand_ids.begin() + 1);
        for (std::size_t k = 0; k < kCandidates; ++k)
          cand_scores[k] = static_cast<double>(scores(cand_ids[k], static_cast<Eigen::Index>(c)));
        outcomes.push_back(rank_test_item(cand_scores, cand_ids, 0, u));
      }
    }
  }
  if (outcomes.empty()) throw DataError("cold-start test users have no target positives");
  return make_report(outcomes, ks, variant_name(p.variant), "coldstart", seed);
}

}  // namespace xdvae
