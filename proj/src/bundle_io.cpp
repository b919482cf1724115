#include "xdvae/bundle_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xdvae/errors.hpp"
#include "xdvae/io_util.hpp"

namespace xdvae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint32_t kBundleVersion = 1;

void write_rows(const DomainMatrix& dm, const fs::path& path) {
  ByteWriter w;
  w.magic("XDR1");
  w.u32(static_cast<std::uint32_t>(dm.rows.size()));
  w.u8(dm.has_timestamps() ? 1 : 0);
  for (std::size_t u = 0; u < dm.rows.size(); ++u) {
    w.u32(static_cast<std::uint32_t>(dm.rows[u].size()));
    for (auto c : dm.rows[u]) w.u32(c);
    if (dm.has_timestamps())
      for (auto t : dm.timestamps[u]) w.i64(t);
  }
  w.save(path);
}

void read_rows(DomainMatrix& dm, const fs::path& path, std::size_t expected_rows) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("XDR1");
  const auto n = r.u32();
  if (n != expected_rows) throw FormatError(path.string() + ": row count does not match manifest");
  const bool has_ts = r.u8() != 0;
  dm.rows.assign(n, {});
  dm.timestamps.clear();
  if (has_ts) dm.timestamps.assign(n, {});
  for (std::size_t u = 0; u < n; ++u) {
    const auto count = r.u32();
    auto& row = dm.rows[u];
    row.resize(count);
    for (auto& c : row) c = r.u32();
    if (has_ts) {
      dm.timestamps[u].resize(count);
      for (auto& t : dm.timestamps[u]) t = r.i64();
    }
  }
  r.expect_end();
}

}  // namespace

DatasetBundle PreparedData::training_bundle() const {
  DatasetBundle b = bundle;
  auto& tgt = b.target;
  for (std::size_t u = 0; u < tgt.rows.size(); ++u) {
    auto& row = tgt.rows[u];
    auto it = std::lower_bound(row.begin(), row.end(), loo.held_out.at(u));
    if (it == row.end() || *it != loo.held_out[u]) throw DataError("held-out item missing from target row");
    const auto pos = it - row.begin();
    row.erase(it);
    if (tgt.has_timestamps()) tgt.timestamps[u].erase(tgt.timestamps[u].begin() + pos);
  }
  return b;
}

void save_prepared(const PreparedData& data, const fs::path& dir) {
  data.bundle.validate();
  fs::create_directories(dir);
  const auto& b = data.bundle;
  json manifest;
  manifest["format"] = "xdvae-bundle";
  manifest["version"] = kBundleVersion;
  manifest["users"] = b.source.user_index;
  manifest["source_items"] = b.source.item_index;
  manifest["target_items"] = b.target.item_index;
  manifest["provenance"] = b.provenance;
  manifest["aux_dim"] = b.aux_dim();
  manifest["loo"] = {{"seed", data.loo.seed}, {"negatives", kNegativesPerUser}};
  manifest["cold_start"] = {{"fraction", data.cold.fraction},
                            {"seed", data.cold.seed},
                            {"test_users", data.cold.test_users}};
  manifest["run"] = data.run;
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");

  write_rows(b.source, dir / "source.rows");
  write_rows(b.target, dir / "target.rows");

  ByteWriter loo;
  loo.magic("XDL1");
  loo.u32(static_cast<std::uint32_t>(data.loo.held_out.size()));
  loo.u32(static_cast<std::uint32_t>(kNegativesPerUser));
  for (std::size_t u = 0; u < data.loo.held_out.size(); ++u) {
    loo.u32(data.loo.held_out[u]);
    const auto& neg = data.loo.negatives.at(u);
    if (neg.size() != kNegativesPerUser) throw DataError("leave-one-out split needs 99 negatives per user");
    for (auto j : neg) loo.u32(j);
  }
  loo.save(dir / "loo.bin");

  if (b.aux) {
    ByteWriter aux;
    aux.magic("XDA1");
    aux.u32(static_cast<std::uint32_t>(b.aux->rows()));
    aux.u32(static_cast<std::uint32_t>(b.aux->cols()));
    for (Eigen::Index u = 0; u < b.aux->cols(); ++u)
      for (Eigen::Index d = 0; d < b.aux->rows(); ++d) aux.f64((*b.aux)(d, u));
    aux.save(dir / "aux.bin");
  } else if (fs::exists(dir / "aux.bin")) {
    fs::remove(dir / "aux.bin");
  }
}

PreparedData load_prepared(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "xdvae-bundle") throw FormatError("not an xdvae bundle: " + dir.string());
  if (manifest.value("version", 0u) != kBundleVersion) throw FormatError("unsupported bundle version");

  PreparedData data;
  auto& b = data.bundle;
  const auto users = manifest.at("users").get<std::vector<std::string>>();
  b.source.tag = DomainTag::Source;
  b.target.tag = DomainTag::Target;
  b.source.user_index = users;
  b.target.user_index = users;
  b.source.item_index = manifest.at("source_items").get<std::vector<std::string>>();
  b.target.item_index = manifest.at("target_items").get<std::vector<std::string>>();
  b.provenance = manifest.at("provenance");
  read_rows(b.source, dir / "source.rows", users.size());
  read_rows(b.target, dir / "target.rows", users.size());

  ByteReader loo(read_file(dir / "loo.bin"), (dir / "loo.bin").string());
  loo.expect_magic("XDL1");
  const auto m = loo.u32();
  const auto k = loo.u32();
  if (m != users.size() || k != kNegativesPerUser) throw FormatError("loo.bin shape does not match manifest");
  data.loo.seed = manifest.at("loo").at("seed").get<std::uint64_t>();
  data.loo.held_out.resize(m);
  data.loo.negatives.assign(m, std::vector<std::uint32_t>(k));
  for (std::size_t u = 0; u < m; ++u) {
    data.loo.held_out[u] = loo.u32();
    for (auto& j : data.loo.negatives[u]) j = loo.u32();
  }
  loo.expect_end();

  const auto aux_dim = manifest.at("aux_dim").get<std::size_t>();
  if (aux_dim > 0) {
    ByteReader aux(read_file(dir / "aux.bin"), (dir / "aux.bin").string());
    aux.expect_magic("XDA1");
    const auto d = aux.u32();
    const auto cols = aux.u32();
    if (d != aux_dim || cols != users.size()) throw FormatError("aux.bin shape does not match manifest");
    Eigen::MatrixXd mat(d, cols);
    for (Eigen::Index u = 0; u < mat.cols(); ++u)
      for (Eigen::Index i = 0; i < mat.rows(); ++i) mat(i, u) = aux.f64();
    aux.expect_end();
    b.aux = std::move(mat);
  }

  const auto& cs = manifest.at("cold_start");
  data.cold.fraction = cs.at("fraction").get<double>();
  data.cold.seed = cs.at("seed").get<std::uint64_t>();
  data.cold.test_users = cs.at("test_users").get<std::vector<std::uint32_t>>();
  std::vector<char> is_test(users.size(), 0);
  for (auto u : data.cold.test_users) {
    if (u >= users.size()) throw FormatError("cold-start test user out of range");
    is_test[u] = 1;
  }
  for (std::uint32_t u = 0; u < users.size(); ++u)
    if (!is_test[u]) data.cold.train_users.push_back(u);
  data.run = manifest.value("run", json::object());

  try {
    b.validate();
  } catch (const DataError& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return data;
}

std::string file_fingerprint(const fs::path& path) {
  const auto bytes = read_file(path);
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(bytes);
  return hex.str();
}

}  // namespace xdvae
