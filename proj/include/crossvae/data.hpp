#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crossvae/errors.hpp"
#include "crossvae/rng.hpp"

// Rating data: parsing, dense re-indexing, splits, binarization, subsampling
// and batching. Matrices are immutable after construction and safe to share.

namespace crossvae::data {

struct Rating {
  int user = 0;
  int item = 0;
  double value = 0.0;

  bool operator==(const Rating&) const = default;
};

class SparseRatingMatrix {
 public:
  SparseRatingMatrix() = default;

  // Validates index bounds, duplicate pairs and rating finiteness, then builds
  // the per-user / per-item index structures (sorted by counterpart index).
  // Ratings must be > 0 unless allow_zero is set (binarized matrices store 0s;
  // 0 is reserved for "missing" everywhere else).
  static SparseRatingMatrix from_triples(int n_users, int n_items, std::vector<Rating> triples,
                                         bool allow_zero = false) {
    SparseRatingMatrix m;
    m.n_users_ = n_users;
    m.n_items_ = n_items;
    m.triples_ = std::move(triples);
    m.by_user_.assign(static_cast<std::size_t>(n_users), {});
    m.by_item_.assign(static_cast<std::size_t>(n_items), {});
    for (const Rating& r : m.triples_) {
      if (r.user < 0 || r.user >= n_users || r.item < 0 || r.item >= n_items)
        throw ContractError("rating index (" + std::to_string(r.user) + "," +
                            std::to_string(r.item) + ") out of range");
      if (!std::isfinite(r.value) || (!allow_zero && r.value <= 0.0) ||
          (allow_zero && r.value < 0.0))
        throw ContractError("invalid rating value " + std::to_string(r.value));
      m.by_user_[static_cast<std::size_t>(r.user)].emplace_back(r.item, r.value);
      m.by_item_[static_cast<std::size_t>(r.item)].emplace_back(r.user, r.value);
    }
    for (auto& row : m.by_user_) std::sort(row.begin(), row.end());
    for (auto& col : m.by_item_) std::sort(col.begin(), col.end());
    for (int u = 0; u < n_users; ++u) {
      const auto& row = m.by_user_[static_cast<std::size_t>(u)];
      for (std::size_t i = 1; i < row.size(); ++i)
        if (row[i].first == row[i - 1].first)
          throw ContractError("duplicate rating pair (" + std::to_string(u) + "," +
                              std::to_string(row[i].first) + ")");
    }
    return m;
  }

  int n_users() const { return n_users_; }
  int n_items() const { return n_items_; }
  std::size_t size() const { return triples_.size(); }
  const std::vector<Rating>& triples() const { return triples_; }

  // (item, rating) pairs of one user, sorted by item index.
  const std::vector<std::pair<int, double>>& rated_by_user(int u) const {
    return by_user_[static_cast<std::size_t>(u)];
  }
  // (user, rating) pairs of one item, sorted by user index.
  const std::vector<std::pair<int, double>>& rated_by_item(int i) const {
    return by_item_[static_cast<std::size_t>(i)];
  }

 private:
  int n_users_ = 0;
  int n_items_ = 0;
  std::vector<Rating> triples_;
  std::vector<std::vector<std::pair<int, double>>> by_user_;
  std::vector<std::vector<std::pair<int, double>>> by_item_;
};

enum class RatingFormat { kDoubleColon, kCsv, kAmazonCsv };

inline RatingFormat parse_format(const std::string& s) {
  if (s == "double_colon") return RatingFormat::kDoubleColon;
  if (s == "csv") return RatingFormat::kCsv;
  if (s == "amazon_csv") return RatingFormat::kAmazonCsv;
  throw ParameterError("unknown rating format '" + s + "'");
}

// Raw-id labels per dense index, alongside the re-indexed matrix.
struct LoadedRatings {
  SparseRatingMatrix matrix;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    if (next == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return out;
}

inline double parse_rating_value(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": bad rating value '" + s + "'");
  }
}

}  // namespace detail

// Parse a rating file and re-index raw ids densely, in first-appearance order.
// Timestamps are discarded; a duplicated (user,item) pair keeps the rating of
// its last occurrence.
inline LoadedRatings load_ratings(const std::string& path, RatingFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open rating file '" + path + "'");

  const std::string sep = format == RatingFormat::kDoubleColon ? "::" : ",";
  std::unordered_map<std::string, int> user_index, item_index;
  std::unordered_map<std::int64_t, std::size_t> pair_pos;  // (user,item) -> triple slot
  LoadedRatings out;
  std::vector<Rating> triples;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (format == RatingFormat::kCsv && line_no == 1) {
      if (line != "userId,movieId,rating,timestamp")
        throw DataError("line 1: expected header 'userId,movieId,rating,timestamp', got '" + line +
                        "'");
      continue;
    }
    const auto fields = detail::split_fields(line, sep);
    if (fields.size() != 4 || fields[0].empty() || fields[1].empty())
      throw DataError("line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(fields.size()));
    const double value = detail::parse_rating_value(fields[2], line_no);

    auto [uit, u_new] = user_index.try_emplace(fields[0], static_cast<int>(user_index.size()));
    if (u_new) out.user_ids.push_back(fields[0]);
    auto [iit, i_new] = item_index.try_emplace(fields[1], static_cast<int>(item_index.size()));
    if (i_new) out.item_ids.push_back(fields[1]);
    const int u = uit->second, i = iit->second;

    const std::int64_t key = static_cast<std::int64_t>(u) * (1LL << 31) + i;
    auto [pit, fresh] = pair_pos.try_emplace(key, triples.size());
    if (fresh)
      triples.push_back({u, i, value});
    else
      triples[pit->second].value = value;  // duplicate pair: last occurrence wins
  }
  if (triples.empty()) throw DataError("rating file '" + path + "' contains no ratings");

  out.matrix = SparseRatingMatrix::from_triples(static_cast<int>(out.user_ids.size()),
                                                static_cast<int>(out.item_ids.size()),
                                                std::move(triples));
  return out;
}

struct FilterResult {
  SparseRatingMatrix matrix;
  std::vector<int> kept_users;  // new dense index -> old index
  std::vector<int> kept_items;
};

// Iteratively drop users/items with fewer than min_count ratings until a
// fixed point, then re-index densely in first-appearance order.
inline FilterResult filter_min_ratings(const SparseRatingMatrix& m, int min_count) {
  if (min_count < 1) throw ParameterError("filter_min_ratings: min_count must be >= 1");
  std::vector<char> user_ok(static_cast<std::size_t>(m.n_users()), 1);
  std::vector<char> item_ok(static_cast<std::size_t>(m.n_items()), 1);
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<int> user_deg(static_cast<std::size_t>(m.n_users()), 0);
    std::vector<int> item_deg(static_cast<std::size_t>(m.n_items()), 0);
    for (const Rating& r : m.triples()) {
      if (!user_ok[static_cast<std::size_t>(r.user)] ||
          !item_ok[static_cast<std::size_t>(r.item)])
        continue;
      ++user_deg[static_cast<std::size_t>(r.user)];
      ++item_deg[static_cast<std::size_t>(r.item)];
    }
    for (int u = 0; u < m.n_users(); ++u) {
      if (user_ok[static_cast<std::size_t>(u)] && user_deg[static_cast<std::size_t>(u)] < min_count) {
        user_ok[static_cast<std::size_t>(u)] = 0;
        changed = true;
      }
    }
    for (int i = 0; i < m.n_items(); ++i) {
      if (item_ok[static_cast<std::size_t>(i)] && item_deg[static_cast<std::size_t>(i)] < min_count) {
        item_ok[static_cast<std::size_t>(i)] = 0;
        changed = true;
      }
    }
  }

  FilterResult out;
  std::vector<int> user_new(static_cast<std::size_t>(m.n_users()), -1);
  std::vector<int> item_new(static_cast<std::size_t>(m.n_items()), -1);
  std::vector<Rating> kept;
  for (const Rating& r : m.triples()) {
    if (!user_ok[static_cast<std::size_t>(r.user)] || !item_ok[static_cast<std::size_t>(r.item)])
      continue;
    int& u = user_new[static_cast<std::size_t>(r.user)];
    if (u < 0) {
      u = static_cast<int>(out.kept_users.size());
      out.kept_users.push_back(r.user);
    }
    int& i = item_new[static_cast<std::size_t>(r.item)];
    if (i < 0) {
      i = static_cast<int>(out.kept_items.size());
      out.kept_items.push_back(r.item);
    }
    kept.push_back({u, i, r.value});
  }
  if (kept.empty()) throw DataError("filter_min_ratings: no ratings survive min_count=" +
                                    std::to_string(min_count));
  out.matrix = SparseRatingMatrix::from_triples(static_cast<int>(out.kept_users.size()),
                                                static_cast<int>(out.kept_items.size()),
                                                std::move(kept));
  return out;
}

struct DataSplit {
  SparseRatingMatrix train;
  SparseRatingMatrix validation;
  SparseRatingMatrix test;
  std::uint64_t seed = 0;
};

namespace detail {

inline SparseRatingMatrix submatrix(const SparseRatingMatrix& m, const std::vector<Rating>& all,
                                    const std::vector<int>& perm, std::size_t begin,
                                    std::size_t end) {
  std::vector<Rating> part;
  part.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) part.push_back(all[static_cast<std::size_t>(perm[i])]);
  return SparseRatingMatrix::from_triples(m.n_users(), m.n_items(), std::move(part));
}

}  // namespace detail

// Triple-level 70/15/15 holdout over one seeded global permutation. The three
// parts keep the source index space (a user or item may be absent from any of
// them).
inline DataSplit split(const SparseRatingMatrix& m, std::uint64_t seed) {
  if (m.size() < 10) throw ContractError("split: need at least 10 ratings");
  std::mt19937_64 eng(rng::derive_seed(seed, /*stream_tag=*/0x5EEDULL));
  const std::vector<int> perm = rng::shuffled_indices(m.size(), eng);
  const auto n = m.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  DataSplit out;
  out.seed = seed;
  out.train = detail::submatrix(m, m.triples(), perm, 0, n_train);
  out.validation = detail::submatrix(m, m.triples(), perm, n_train, n_train + n_val);
  out.test = detail::submatrix(m, m.triples(), perm, n_train + n_val, n);
  return out;
}

// Relevance labels: 1 if the rating is greater than 3, else 0. Structure and
// triple order are preserved exactly.
inline SparseRatingMatrix binarize(const SparseRatingMatrix& m) {
  std::vector<Rating> labeled = m.triples();
  for (Rating& r : labeled) r.value = r.value > 3.0 ? 1.0 : 0.0;
  return SparseRatingMatrix::from_triples(m.n_users(), m.n_items(), std::move(labeled),
                                          /*allow_zero=*/true);
}

// Seeded uniform sample of ceil(fraction * N) triples; the remainder is
// returned for the caller's validation/test split.
inline std::pair<SparseRatingMatrix, SparseRatingMatrix> subsample(const SparseRatingMatrix& m,
                                                                   double fraction,
                                                                   std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ParameterError("subsample: fraction must be in (0,1)");
  std::mt19937_64 eng(rng::derive_seed(seed, /*stream_tag=*/0x5AB5A17ULL));
  const std::vector<int> perm = rng::shuffled_indices(m.size(), eng);
  const auto n_take = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(m.size())));
  return {detail::submatrix(m, m.triples(), perm, 0, n_take),
          detail::submatrix(m, m.triples(), perm, n_take, m.size())};
}

// Seeded shuffle of 0..n-1 chopped into ceil(n / batch_size) batches; the last
// batch may be short.
inline std::vector<std::vector<int>> make_batches(std::size_t n, int batch_size,
                                                  std::uint64_t seed) {
  if (batch_size < 1) throw ParameterError("make_batches: batch_size must be >= 1");
  std::mt19937_64 eng(rng::derive_seed(seed, /*stream_tag=*/0xBA7C4E5ULL));
  const std::vector<int> perm = rng::shuffled_indices(n, eng);
  std::vector<std::vector<int>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

// --- file outputs ------------------------------------------------------------

inline void write_id_map(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write id map '" + path + "'");
  out << "raw_id,dense_idx\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << "," << i << "\n";
}

inline void write_split_manifest(const std::string& path, const DataSplit& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write split manifest '" + path + "'");
  out << "user_idx,item_idx,rating,split\n";
  const auto dump = [&out](const SparseRatingMatrix& m, const char* label) {
    for (const Rating& r : m.triples())
      out << r.user << "," << r.item << "," << r.value << "," << label << "\n";
  };
  dump(s.train, "train");
  dump(s.validation, "val");
  dump(s.test, "test");
}

}  // namespace crossvae::data
