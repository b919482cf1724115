#include "xdvae/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace xdvae {

RankOutcome rank_test_item(std::span<const double> scores, std::span<const std::uint32_t> item_ids,
                           std::size_t test_index, std::uint32_t user) {
  if (scores.size() != kCandidates) {
    throw std::invalid_argument("rank_test_item: expected 100 candidates, got " + std::to_string(scores.size()));
  }
  if (item_ids.size() != scores.size()) throw std::invalid_argument("rank_test_item: ids/scores length mismatch");
  if (test_index >= scores.size()) throw std::invalid_argument("rank_test_item: test index out of range");
  const double s = scores[test_index];
  const auto id = item_ids[test_index];
  std::uint32_t rank = 1;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (c == test_index) continue;
    if (scores[c] > s || (scores[c] == s && item_ids[c] < id)) ++rank;
  }
  return {user, rank};
}

double hit_ratio(std::span<const RankOutcome> outcomes, std::size_t k) {
  if (outcomes.empty()) throw std::invalid_argument("hit_ratio: no outcomes");
  std::size_t hits = 0;
  for (const auto& o : outcomes) hits += o.rank <= k;
  return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double ndcg(std::span<const RankOutcome> outcomes, std::size_t k) {
  if (outcomes.empty()) throw std::invalid_argument("ndcg: no outcomes");
  double s = 0.0;
  for (const auto& o : outcomes)
    if (o.rank <= k) s += std::log(2.0) / std::log(static_cast<double>(o.rank) + 1.0);
  return s / static_cast<double>(outcomes.size());
}

void validate_ks(const std::vector<std::size_t>& ks) {
  if (ks.empty()) throw std::invalid_argument("need at least one K");
  for (auto k : ks)
    if (k < 1 || k > kCandidates) throw std::invalid_argument("K must lie in 1..100, got " + std::to_string(k));
}

double MetricsReport::hr_at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return hr[i];
  throw std::out_of_range("no HR@" + std::to_string(k) + " in report");
}

double MetricsReport::ndcg_at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return ndcg[i];
  throw std::out_of_range("no NDCG@" + std::to_string(k) + " in report");
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < ks.size(); ++i) rows.push_back({{"K", ks[i]}, {"HR", hr[i]}, {"NDCG", ndcg[i]}});
  return {{"variant", variant}, {"protocol", protocol}, {"seed", seed}, {"m", m_evaluated}, {"metrics", rows}};
}

MetricsReport make_report(std::span<const RankOutcome> outcomes, const std::vector<std::size_t>& ks,
                          std::string variant, std::string protocol, std::uint64_t seed) {
  validate_ks(ks);
  MetricsReport r;
  r.variant = std::move(variant);
  r.protocol = std::move(protocol);
  r.seed = seed;
  r.m_evaluated = outcomes.size();
  r.ks = ks;
  for (auto k : ks) {
    r.hr.push_back(hit_ratio(outcomes, k));
    r.ndcg.push_back(ndcg(outcomes, k));
  }
  return r;
}

std::string degrade_protocol_name(double fraction) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "degrade:%.4g", fraction);
  return buf;
}

std::string reports_to_csv(std::span<const MetricsReport> reports) {
  std::string out = "variant,protocol,K,HR,NDCG,m,seed\n";
  char buf[256];
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%.6f,%zu,%llu\n", r.variant.c_str(), r.protocol.c_str(), r.ks[i],
                    r.hr[i], r.ndcg[i], r.m_evaluated, static_cast<unsigned long long>(r.seed));
      out += buf;
    }
  }
  return out;
}

nlohmann::json reports_to_json(std::span<const MetricsReport> reports) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : reports) a.push_back(r.to_json());
  return a;
}

}  // namespace xdvae
