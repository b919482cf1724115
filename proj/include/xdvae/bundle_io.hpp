#pragma once

#include <filesystem>
#include <optional>

#include "xdvae/data.hpp"

namespace xdvae {

/// Everything `prepare` produces: the filtered bundle plus the frozen
/// leave-one-out and cold-start splits.
///
/// On-disk layout (a directory):
///   manifest.json  indices, provenance, split seeds, cold-start partition
///   source.rows    row blob for the source matrix
///   target.rows    row blob for the target matrix (before hold-out)
///   loo.bin        held-out item and 99 negatives per user
///   aux.bin        d_aux x m float64 matrix, only when aux vectors exist
///
/// Row blob: "XDR1", u32 n_rows, u8 has_timestamps, then per row u32 count,
/// count x u32 item index, and (if has_timestamps) count x i64 timestamp.
/// LOO blob: "XDL1", u32 m, u32 k, then per user u32 held-out, k x u32 negatives.
/// Aux blob: "XDA1", u32 dim, u32 m, then m x dim f64, user-major.
/// Integers and floats are little-endian.
struct PreparedData {
  DatasetBundle bundle;
  LeaveOneOutSplit loo;
  ColdStartSplit cold;
  nlohmann::json run = nlohmann::json::object();

  /// Bundle with every held-out item removed from the target rows.
  DatasetBundle training_bundle() const;
};

void save_prepared(const PreparedData& data, const std::filesystem::path& dir);
PreparedData load_prepared(const std::filesystem::path& dir);

/// FNV-1a over file contents, hex encoded.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace xdvae
