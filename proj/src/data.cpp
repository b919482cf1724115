#include "xdvae/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "xdvae/errors.hpp"

namespace xdvae {

namespace {

std::vector<std::string> split(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string line_error(std::size_t line_no, const std::string& what) {
  return "line " + std::to_string(line_no) + ": " + what;
}

int parse_rating(const std::string& field, std::size_t line_no) {
  double value = 0.0;
  try {
    std::size_t used = 0;
    value = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
  } catch (const std::exception&) {
    throw DataError(line_error(line_no, "bad rating '" + field + "'"));
  }
  if (value != std::floor(value) || value < 1.0 || value > 5.0) {
    throw DataError(line_error(line_no, "rating out of range 1..5: '" + field + "'"));
  }
  return static_cast<int>(value);
}

std::optional<std::int64_t> parse_timestamp(const std::string& field, std::size_t line_no) {
  if (field.empty()) return std::nullopt;
  std::int64_t ts = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), ts);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw DataError(line_error(line_no, "bad timestamp '" + field + "'"));
  }
  return ts;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

bool intersects(const std::set<std::string>& a, const LabelSet& b) {
  for (const auto& x : a)
    if (b.count(x)) return true;
  return false;
}

}  // namespace

RatingFormat parse_rating_format(const std::string& name) {
  if (name == "movielens-dat" || name == "movielens" || name == "dat") return RatingFormat::MovielensDat;
  if (name == "csv") return RatingFormat::Csv;
  throw std::invalid_argument("unknown format '" + name + "' (expected movielens-dat or csv)");
}

std::size_t DomainMatrix::nnz() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

double DomainMatrix::sparsity() const {
  const double cells = static_cast<double>(n_users()) * static_cast<double>(n_items());
  if (cells == 0.0) return 1.0;
  return 1.0 - static_cast<double>(nnz()) / cells;
}

bool DomainMatrix::contains(std::size_t user, std::uint32_t item) const {
  const auto& r = rows.at(user);
  return std::binary_search(r.begin(), r.end(), item);
}

void DatasetBundle::validate() const {
  if (source.user_index != target.user_index) throw DataError("source and target user indices differ");
  const auto m = n_users();
  if (source.rows.size() != m || target.rows.size() != m) throw DataError("row count differs from user count");
  for (const auto* dm : {&source, &target}) {
    for (const auto& row : dm->rows) {
      if (!std::is_sorted(row.begin(), row.end())) throw DataError("row indices not sorted");
      if (!row.empty() && row.back() >= dm->n_items()) throw DataError("row index beyond item count");
    }
    if (dm->has_timestamps()) {
      if (dm->timestamps.size() != m) throw DataError("timestamp rows misaligned");
      for (std::size_t u = 0; u < m; ++u)
        if (dm->timestamps[u].size() != dm->rows[u].size()) throw DataError("timestamp rows misaligned");
    }
  }
  if (aux && static_cast<std::size_t>(aux->cols()) != m) throw DataError("aux vectors do not cover every user");
}

std::vector<Interaction> parse_ratings(std::istream& in, RatingFormat format) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = format != RatingFormat::Csv;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!header_seen) {
      auto cols = split(trim(line), ",");
      for (auto& c : cols) c = trim(c);
      if (cols.size() < 3 || cols[0] != "user" || cols[1] != "item" || cols[2] != "rating") {
        throw DataError(line_error(line_no, "expected csv header 'user,item,rating,timestamp'"));
      }
      header_seen = true;
      continue;
    }
    auto fields = format == RatingFormat::Csv ? split(line, ",") : split(line, "::");
    for (auto& f : fields) f = trim(f);
    const bool ok = format == RatingFormat::Csv ? (fields.size() == 3 || fields.size() == 4) : fields.size() == 4;
    if (!ok || fields[0].empty() || fields[1].empty()) {
      throw DataError(line_error(line_no, "malformed rating line '" + line + "'"));
    }
    Interaction x;
    x.user = fields[0];
    x.item = fields[1];
    x.rating = parse_rating(fields[2], line_no);
    if (fields.size() == 4) x.timestamp = parse_timestamp(fields[3], line_no);
    out.push_back(std::move(x));
  }
  if (out.empty()) throw DataError("no interactions");
  return out;
}

std::vector<Interaction> load_ratings(const std::filesystem::path& path, RatingFormat format) {
  auto in = open_or_throw(path);
  try {
    return parse_ratings(in, format);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ItemLabels parse_item_labels(std::istream& in, RatingFormat format) {
  ItemLabels labels;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = format != RatingFormat::Csv;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::string item, label_field;
    if (format == RatingFormat::MovielensDat) {
      // Titles never contain "::", so the id is the first field and the genres the last.
      auto first = line.find("::");
      auto last = line.rfind("::");
      if (first == std::string::npos || first == last) throw DataError(line_error(line_no, "malformed movies line"));
      item = trim(line.substr(0, first));
      label_field = trim(line.substr(last + 2));
    } else {
      auto comma = line.find(',');
      if (comma == std::string::npos) throw DataError(line_error(line_no, "malformed item label line"));
      item = trim(line.substr(0, comma));
      label_field = trim(line.substr(comma + 1));
    }
    auto& set = labels[item];
    for (auto& l : split(label_field, "|")) {
      l = trim(l);
      if (!l.empty()) set.insert(l);
    }
  }
  return labels;
}

ItemLabels load_item_labels(const std::filesystem::path& path, RatingFormat format) {
  auto in = open_or_throw(path);
  return parse_item_labels(in, format);
}

std::pair<std::vector<Interaction>, std::vector<Interaction>> split_domains(std::span<const Interaction> interactions,
                                                                            const ItemLabels& item_labels,
                                                                            const LabelSet& source_labels,
                                                                            const LabelSet& target_labels) {
  std::vector<std::string> unknown;
  std::unordered_set<std::string> unknown_seen;
  std::vector<Interaction> source, target;
  for (const auto& x : interactions) {
    auto it = item_labels.find(x.item);
    if (it == item_labels.end()) {
      if (unknown_seen.insert(x.item).second) unknown.push_back(x.item);
      continue;
    }
    const bool s = intersects(it->second, source_labels);
    const bool t = intersects(it->second, target_labels);
    if (s && !t) source.push_back(x);
    if (t && !s) target.push_back(x);
  }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << unknown.size() << " items without labels:";
    for (std::size_t i = 0; i < unknown.size() && i < 20; ++i) msg << ' ' << unknown[i];
    if (unknown.size() > 20) msg << " ...";
    throw DataError(msg.str());
  }
  return {std::move(source), std::move(target)};
}

namespace {

// Positives of one domain, keyed by user then item, keeping the latest timestamp.
struct PositiveTable {
  std::unordered_map<std::string, std::map<std::string, std::optional<std::int64_t>>> by_user;
  std::vector<std::string> item_order;  // first appearance
  bool all_timestamped = true;
};

PositiveTable collect_positives(std::span<const Interaction> xs, int threshold, std::vector<std::string>& user_order,
                                std::unordered_set<std::string>& users_seen) {
  PositiveTable t;
  std::unordered_set<std::string> items_seen;
  for (const auto& x : xs) {
    if (x.rating < threshold) continue;
    if (users_seen.insert(x.user).second) user_order.push_back(x.user);
    if (items_seen.insert(x.item).second) t.item_order.push_back(x.item);
    if (!x.timestamp) t.all_timestamped = false;
    auto [it, inserted] = t.by_user[x.user].try_emplace(x.item, x.timestamp);
    if (!inserted && x.timestamp && (!it->second || *x.timestamp > *it->second)) it->second = x.timestamp;
  }
  return t;
}

DomainMatrix build_matrix(DomainTag tag, const PositiveTable& table, const std::vector<std::string>& users) {
  DomainMatrix dm;
  dm.tag = tag;
  dm.user_index = users;
  std::unordered_set<std::string> live;
  for (const auto& u : users)
    for (const auto& [item, ts] : table.by_user.at(u)) live.insert(item);
  std::unordered_map<std::string, std::uint32_t> col;
  for (const auto& item : table.item_order) {
    if (!live.count(item)) continue;
    col.emplace(item, static_cast<std::uint32_t>(dm.item_index.size()));
    dm.item_index.push_back(item);
  }
  dm.rows.resize(users.size());
  if (table.all_timestamped) dm.timestamps.resize(users.size());
  for (std::size_t u = 0; u < users.size(); ++u) {
    std::vector<std::pair<std::uint32_t, std::int64_t>> entries;
    for (const auto& [item, ts] : table.by_user.at(users[u])) entries.emplace_back(col.at(item), ts.value_or(0));
    std::sort(entries.begin(), entries.end());
    for (const auto& [c, ts] : entries) {
      dm.rows[u].push_back(c);
      if (table.all_timestamped) dm.timestamps[u].push_back(ts);
    }
  }
  return dm;
}

}  // namespace

DatasetBundle binarize_and_filter(std::span<const Interaction> source, std::span<const Interaction> target,
                                  int threshold, std::size_t min_target_positives) {
  if (source.empty() || target.empty()) throw DataError("source and target interaction lists must be nonempty");
  if (min_target_positives < 1) throw std::invalid_argument("min_target_positives must be >= 1");

  std::vector<std::string> user_order;
  std::unordered_set<std::string> users_seen;
  auto src = collect_positives(source, threshold, user_order, users_seen);
  auto tgt = collect_positives(target, threshold, user_order, users_seen);
  if (src.by_user.empty() && tgt.by_user.empty()) {
    throw DataError("no positive interactions at rating threshold " + std::to_string(threshold));
  }

  std::vector<std::string> kept;
  for (const auto& u : user_order) {
    auto s = src.by_user.find(u);
    auto t = tgt.by_user.find(u);
    if (s == src.by_user.end() || t == tgt.by_user.end()) continue;
    if (t->second.size() < min_target_positives) continue;
    kept.push_back(u);
  }
  if (kept.empty()) throw DataError("no users survive the shared-user filter");

  DatasetBundle b;
  b.source = build_matrix(DomainTag::Source, src, kept);
  b.target = build_matrix(DomainTag::Target, tgt, kept);
  b.provenance["rating_threshold"] = threshold;
  b.provenance["min_target_positives"] = min_target_positives;
  b.provenance["users"] = kept.size();
  return b;
}

std::vector<std::uint32_t> sample_negatives(std::span<const std::uint32_t> positives, std::size_t n_items,
                                            std::size_t k, Rng& rng) {
  if (k == 0) return {};
  std::vector<char> taken(n_items, 0);
  for (auto p : positives)
    if (p < n_items) taken[p] = 1;
  std::vector<std::uint32_t> pool;
  pool.reserve(n_items);
  for (std::size_t j = 0; j < n_items; ++j)
    if (!taken[j]) pool.push_back(static_cast<std::uint32_t>(j));
  if (pool.size() < k) {
    throw DataError("only " + std::to_string(pool.size()) + " non-interacted items, need " + std::to_string(k));
  }
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

LooResult build_loo_split(const DatasetBundle& bundle, std::uint64_t seed, HoldOutPolicy policy) {
  const auto m = bundle.n_users();
  const auto& tgt = bundle.target;
  if (policy == HoldOutPolicy::Latest && !tgt.has_timestamps()) {
    throw DataError("hold-out policy 'latest' needs timestamps");
  }
  LooResult res;
  res.split.seed = seed;
  res.split.held_out.resize(m);
  res.split.negatives.resize(m);
  res.training = bundle;
  for (std::size_t u = 0; u < m; ++u) {
    const auto& row = tgt.rows[u];
    if (row.size() < 2) {
      throw DataError("user '" + tgt.user_index[u] + "' has fewer than 2 target positives");
    }
    std::size_t pos = 0;
    if (policy == HoldOutPolicy::Random) {
      auto rng = make_rng(seed, "holdout", u);
      pos = std::uniform_int_distribution<std::size_t>(0, row.size() - 1)(rng);
    } else {
      const auto& ts = tgt.timestamps[u];
      pos = static_cast<std::size_t>(std::max_element(ts.begin(), ts.end()) - ts.begin());
    }
    res.split.held_out[u] = row[pos];
    auto rng = make_rng(seed, "negatives", u);
    res.split.negatives[u] = sample_negatives(row, tgt.n_items(), kNegativesPerUser, rng);

    auto& train_row = res.training.target.rows[u];
    train_row.erase(train_row.begin() + static_cast<std::ptrdiff_t>(pos));
    if (res.training.target.has_timestamps()) {
      auto& train_ts = res.training.target.timestamps[u];
      train_ts.erase(train_ts.begin() + static_cast<std::ptrdiff_t>(pos));
    }
  }
  return res;
}

ColdStartSplit cold_start_split(const DatasetBundle& bundle, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("cold-start fraction must be in (0, 1)");
  const auto m = bundle.n_users();
  const auto n_test = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(m)));
  std::vector<std::uint32_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0u);
  auto rng = make_rng(seed, "cold-start");
  std::shuffle(perm.begin(), perm.end(), rng);
  ColdStartSplit cs;
  cs.fraction = fraction;
  cs.seed = seed;
  cs.test_users.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  cs.train_users.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(cs.test_users.begin(), cs.test_users.end());
  std::sort(cs.train_users.begin(), cs.train_users.end());
  return cs;
}

Rows degrade_target_rows(const Rows& rows, double fraction_kept, std::uint64_t seed) {
  if (!(fraction_kept >= 0.0 && fraction_kept <= 1.0)) throw std::invalid_argument("fraction_kept must be in [0, 1]");
  Rows out(rows.size());
  for (std::size_t u = 0; u < rows.size(); ++u) {
    const auto n = rows[u].size();
    // The epsilon keeps exact products such as 0.1 * 10 from rounding up.
    const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(fraction_kept * static_cast<double>(n) - 1e-9)));
    if (keep == n) {
      out[u] = rows[u];
      continue;
    }
    auto shuffled = rows[u];
    auto rng = make_rng(seed, "degrade", u);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    shuffled.resize(keep);
    std::sort(shuffled.begin(), shuffled.end());
    out[u] = std::move(shuffled);
  }
  return out;
}

std::unordered_map<std::string, Eigen::VectorXd> parse_aux_vectors(std::istream& in, std::size_t expected_dim) {
  std::unordered_map<std::string, Eigen::VectorXd> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split(line, ",");
    if (line_no == 1 && fields.size() > 1) {
      // Optional header: first value column is not numeric.
      char* end = nullptr;
      auto v = trim(fields[1]);
      std::strtod(v.c_str(), &end);
      if (v.empty() || end != v.c_str() + v.size()) continue;
    }
    if (fields.size() != expected_dim + 1) {
      throw DataError(line_error(line_no, "expected " + std::to_string(expected_dim) + " values, got " +
                                              std::to_string(fields.size() - 1)));
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(expected_dim));
    for (std::size_t i = 0; i < expected_dim; ++i) {
      auto f = trim(fields[i + 1]);
      char* end = nullptr;
      double x = std::strtod(f.c_str(), &end);
      if (f.empty() || end != f.c_str() + f.size()) throw DataError(line_error(line_no, "bad value '" + f + "'"));
      if (!std::isfinite(x)) throw DataError(line_error(line_no, "non-finite value"));
      v[static_cast<Eigen::Index>(i)] = x;
    }
    auto user = trim(fields[0]);
    if (!out.emplace(user, std::move(v)).second) throw DataError(line_error(line_no, "duplicate user '" + user + "'"));
  }
  return out;
}

std::unordered_map<std::string, Eigen::VectorXd> load_aux_vectors(const std::filesystem::path& path,
                                                                  std::size_t expected_dim) {
  auto in = open_or_throw(path);
  return parse_aux_vectors(in, expected_dim);
}

void attach_aux_vectors(DatasetBundle& bundle, const std::unordered_map<std::string, Eigen::VectorXd>& vectors,
                        std::size_t dim) {
  const auto m = bundle.n_users();
  Eigen::MatrixXd aux = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(m));
  std::size_t missing = 0;
  for (std::size_t u = 0; u < m; ++u) {
    auto it = vectors.find(bundle.source.user_index[u]);
    if (it == vectors.end()) {
      ++missing;
      continue;
    }
    if (static_cast<std::size_t>(it->second.size()) != dim) throw DataError("aux vector dimension mismatch");
    aux.col(static_cast<Eigen::Index>(u)) = it->second;
  }
  bundle.aux = std::move(aux);
  bundle.provenance["aux_dim"] = dim;
  bundle.provenance["aux_missing_users"] = missing;
}

}  // namespace xdvae
