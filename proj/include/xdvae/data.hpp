#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xdvae/rng.hpp"

namespace xdvae {

enum class DomainTag { Source, Target };

struct Interaction {
  std::string user;
  std::string item;
  int rating = 0;  // 1..5
  std::optional<std::int64_t> timestamp;

  bool operator==(const Interaction&) const = default;
};

enum class RatingFormat { MovielensDat, Csv };

RatingFormat parse_rating_format(const std::string& name);

/// Positive-only interaction matrix for one domain. Rows are indexed by the
/// shared user index; each row holds the sorted column indices of its
/// positives. `timestamps`, when non-empty, is row-aligned with `rows`.
struct DomainMatrix {
  DomainTag tag = DomainTag::Source;
  std::vector<std::string> user_index;
  std::vector<std::string> item_index;
  std::vector<std::vector<std::uint32_t>> rows;
  std::vector<std::vector<std::int64_t>> timestamps;

  std::size_t n_users() const { return rows.size(); }
  std::size_t n_items() const { return item_index.size(); }
  std::size_t nnz() const;
  bool has_timestamps() const { return !timestamps.empty(); }
  /// 1 - nnz / (m * n), in [0, 1].
  double sparsity() const;
  bool contains(std::size_t user, std::uint32_t item) const;
};

using Rows = std::vector<std::vector<std::uint32_t>>;

struct DatasetBundle {
  DomainMatrix source;
  DomainMatrix target;
  /// d_aux x m, one column per user, when auxiliary vectors are attached.
  std::optional<Eigen::MatrixXd> aux;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t n_users() const { return source.user_index.size(); }
  std::size_t aux_dim() const { return aux ? static_cast<std::size_t>(aux->rows()) : 0; }
  /// Throws DataError if the shared-user or aux invariants are broken.
  void validate() const;
};

struct LeaveOneOutSplit {
  std::vector<std::uint32_t> held_out;
  std::vector<std::vector<std::uint32_t>> negatives;
  std::uint64_t seed = 0;

  bool operator==(const LeaveOneOutSplit&) const = default;
};

struct ColdStartSplit {
  std::vector<std::uint32_t> train_users;
  std::vector<std::uint32_t> test_users;
  double fraction = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const ColdStartSplit&) const = default;
};

enum class HoldOutPolicy { Random, Latest };

struct LooResult {
  LeaveOneOutSplit split;
  DatasetBundle training;
};

using ItemLabels = std::unordered_map<std::string, std::set<std::string>>;
using LabelSet = std::set<std::string>;

inline constexpr std::size_t kNegativesPerUser = 99;

std::vector<Interaction> parse_ratings(std::istream& in, RatingFormat format);
std::vector<Interaction> load_ratings(const std::filesystem::path& path, RatingFormat format);

/// movielens-dat: `movies.dat` (`id::title::genre|genre`);
/// csv: `item,label|label` with a header line.
ItemLabels parse_item_labels(std::istream& in, RatingFormat format);
ItemLabels load_item_labels(const std::filesystem::path& path, RatingFormat format);

/// Routes each interaction by its item's labels. Items whose labels meet both
/// label sets, or neither, are dropped together with their interactions.
std::pair<std::vector<Interaction>, std::vector<Interaction>> split_domains(
    std::span<const Interaction> interactions, const ItemLabels& item_labels,
    const LabelSet& source_labels, const LabelSet& target_labels);

/// Ratings >= threshold become positives. A user survives only with at least
/// one source positive and `min_target_positives` target positives; items are
/// indexed only if a surviving user has them as a positive.
DatasetBundle binarize_and_filter(std::span<const Interaction> source, std::span<const Interaction> target,
                                  int threshold = 4, std::size_t min_target_positives = 2);

std::vector<std::uint32_t> sample_negatives(std::span<const std::uint32_t> positives, std::size_t n_items,
                                            std::size_t k, Rng& rng);

LooResult build_loo_split(const DatasetBundle& bundle, std::uint64_t seed,
                          HoldOutPolicy policy = HoldOutPolicy::Random);

ColdStartSplit cold_start_split(const DatasetBundle& bundle, double fraction, std::uint64_t seed);

/// Keeps ceil(fraction_kept * |row|) uniformly chosen positives per row.
Rows degrade_target_rows(const Rows& rows, double fraction_kept, std::uint64_t seed);

std::unordered_map<std::string, Eigen::VectorXd> parse_aux_vectors(std::istream& in, std::size_t expected_dim);
std::unordered_map<std::string, Eigen::VectorXd> load_aux_vectors(const std::filesystem::path& path,
                                                                  std::size_t expected_dim = 256);

/// Attaches one column per bundle user; users absent from `vectors` get zeros
/// and are counted in provenance["aux_missing_users"].
void attach_aux_vectors(DatasetBundle& bundle, const std::unordered_map<std::string, Eigen::VectorXd>& vectors,
                        std::size_t dim);

}  // namespace xdvae
