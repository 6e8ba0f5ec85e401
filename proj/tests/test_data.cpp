#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "crossvae/data.hpp"

using namespace crossvae;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& contents) {
    static int counter = 0;
    path = fs::temp_directory_path() / ("crossvae_data_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++) + ".txt");
    std::ofstream out(path);
    out << contents;
  }
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
};

data::SparseRatingMatrix random_matrix(int n_users, int n_items, std::size_t target,
                                       std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::set<std::pair<int, int>> used;
  std::vector<data::Rating> triples;
  while (triples.size() < target) {
    const int u = static_cast<int>(rng::uniform_below(eng, n_users));
    const int i = static_cast<int>(rng::uniform_below(eng, n_items));
    if (!used.insert({u, i}).second) continue;
    triples.push_back({u, i, 1.0 + static_cast<double>(rng::uniform_below(eng, 9)) * 0.5});
  }
  return data::SparseRatingMatrix::from_triples(n_users, n_items, std::move(triples));
}

}  // namespace

TEST_CASE("load_ratings re-indexes densely in first-appearance order") {
  TempFile f("1::10::4.0::978300760\n2::10::3.0::978302109\n");
  const auto loaded = data::load_ratings(f.path.string(), data::RatingFormat::kDoubleColon);
  CHECK(loaded.matrix.n_users() == 2);
  CHECK(loaded.matrix.n_items() == 1);
  REQUIRE(loaded.matrix.size() == 2);
  CHECK(loaded.matrix.triples()[0] == data::Rating{0, 0, 4.0});
  CHECK(loaded.matrix.triples()[1] == data::Rating{1, 0, 3.0});
  CHECK(loaded.user_ids == std::vector<std::string>{"1", "2"});
  CHECK(loaded.item_ids == std::vector<std::string>{"10"});
}

TEST_CASE("load_ratings keeps the last occurrence of a duplicate pair") {
  TempFile f("7::3::2.0::t\n8::3::5.0::t\n7::3::4.5::t\n");
  const auto loaded = data::load_ratings(f.path.string(), data::RatingFormat::kDoubleColon);
  CHECK(loaded.matrix.size() == 2);
  CHECK(loaded.matrix.triples()[0] == data::Rating{0, 0, 4.5});
}

TEST_CASE("load_ratings csv needs its header, amazon csv has none") {
  TempFile good("userId,movieId,rating,timestamp\n3,9,4.0,100\n4,9,2.0,101\n");
  const auto loaded = data::load_ratings(good.path.string(), data::RatingFormat::kCsv);
  CHECK(loaded.matrix.n_users() == 2);

  TempFile headerless("3,9,4.0,100\n");
  CHECK_THROWS_AS(data::load_ratings(headerless.path.string(), data::RatingFormat::kCsv),
                  DataError);

  TempFile amazon("A1B2C3,ITEM9,5.0,100\nZZZ,ITEM9,1.0,101\n");
  const auto az = data::load_ratings(amazon.path.string(), data::RatingFormat::kAmazonCsv);
  CHECK(az.matrix.n_users() == 2);
  CHECK(az.user_ids[0] == "A1B2C3");
}

TEST_CASE("load_ratings reports the failing line and rejects empty files") {
  TempFile bad("1::10::4.0::t\n2::oops\n");
  try {
    data::load_ratings(bad.path.string(), data::RatingFormat::kDoubleColon);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  TempFile empty("");
  CHECK_THROWS_AS(data::load_ratings(empty.path.string(), data::RatingFormat::kDoubleColon),
                  DataError);
  CHECK_THROWS_AS(data::load_ratings("/nonexistent/path.dat", data::RatingFormat::kCsv),
                  DataError);
}

TEST_CASE("by_user and by_item reconstruct the triple set exactly") {
  const auto m = random_matrix(20, 30, 150, 99);
  std::set<std::tuple<int, int, double>> from_triples, from_users, from_items;
  for (const auto& r : m.triples()) from_triples.insert({r.user, r.item, r.value});
  for (int u = 0; u < m.n_users(); ++u)
    for (const auto& [i, v] : m.rated_by_user(u)) from_users.insert({u, i, v});
  for (int i = 0; i < m.n_items(); ++i)
    for (const auto& [u, v] : m.rated_by_item(i)) from_items.insert({u, i, v});
  CHECK(from_triples == from_users);
  CHECK(from_triples == from_items);
}

TEST_CASE("from_triples rejects duplicates, bad indices and zero ratings") {
  CHECK_THROWS_AS(data::SparseRatingMatrix::from_triples(2, 2, {{0, 0, 1.0}, {0, 0, 2.0}}),
                  ContractError);
  CHECK_THROWS_AS(data::SparseRatingMatrix::from_triples(2, 2, {{2, 0, 1.0}}), ContractError);
  CHECK_THROWS_AS(data::SparseRatingMatrix::from_triples(2, 2, {{0, 0, 0.0}}), ContractError);
  CHECK_NOTHROW(data::SparseRatingMatrix::from_triples(2, 2, {{0, 0, 0.0}}, /*allow_zero=*/true));
}

TEST_CASE("filter_min_ratings with min_count=1 only drops zero-degree entities") {
  // user 2 and item 2 exist in the index space but have no ratings
  const auto m = data::SparseRatingMatrix::from_triples(3, 3, {{0, 0, 5.0}, {1, 1, 3.0}});
  const auto f = data::filter_min_ratings(m, 1);
  CHECK(f.matrix.n_users() == 2);
  CHECK(f.matrix.n_items() == 2);
  CHECK(f.matrix.size() == 2);
  CHECK(f.kept_users == std::vector<int>{0, 1});
}

TEST_CASE("filter_min_ratings cascades to a fixed point") {
  // user 0 has 9 ratings and is dropped at min_count=10; items 0..8 lose
  // their only rating and are dropped with it, stranding user 1 as well.
  std::vector<data::Rating> triples;
  for (int i = 0; i < 9; ++i) triples.push_back({0, i, 4.0});
  triples.push_back({1, 0, 3.0});
  const auto m = data::SparseRatingMatrix::from_triples(2, 9, triples);
  CHECK_THROWS_AS(data::filter_min_ratings(m, 10), DataError);
}

TEST_CASE("filter_min_ratings output verified by brute-force degree recount") {
  const auto m = random_matrix(50, 50, 400, 4242);
  const int min_count = 6;
  const auto f = data::filter_min_ratings(m, min_count);
  std::vector<int> user_deg(static_cast<std::size_t>(f.matrix.n_users()), 0);
  std::vector<int> item_deg(static_cast<std::size_t>(f.matrix.n_items()), 0);
  for (const auto& r : f.matrix.triples()) {
    ++user_deg[static_cast<std::size_t>(r.user)];
    ++item_deg[static_cast<std::size_t>(r.item)];
  }
  for (int d : user_deg) CHECK(d >= min_count);
  for (int d : item_deg) CHECK(d >= min_count);

  // every surviving triple maps back to an original one
  for (const auto& r : f.matrix.triples()) {
    const int old_u = f.kept_users[static_cast<std::size_t>(r.user)];
    const int old_i = f.kept_items[static_cast<std::size_t>(r.item)];
    bool found = false;
    for (const auto& [i, v] : m.rated_by_user(old_u))
      if (i == old_i && v == r.value) found = true;
    CHECK(found);
  }
}

TEST_CASE("split produces exact 70/15/15 on 100 triples and is deterministic") {
  const auto m = random_matrix(10, 20, 100, 7);
  const auto s1 = data::split(m, 42);
  CHECK(s1.train.size() == 70);
  CHECK(s1.validation.size() == 15);
  CHECK(s1.test.size() == 15);
  CHECK(s1.train.n_users() == m.n_users());
  CHECK(s1.test.n_items() == m.n_items());

  const auto s2 = data::split(m, 42);
  CHECK(s1.train.triples() == s2.train.triples());
  CHECK(s1.validation.triples() == s2.validation.triples());
  CHECK(s1.test.triples() == s2.test.triples());

  const auto s3 = data::split(m, 43);
  CHECK(s1.train.triples() != s3.train.triples());
}

TEST_CASE("split parts are disjoint and cover the source (set oracle, 1000 triples)") {
  const auto m = random_matrix(40, 60, 1000, 77);
  const auto s = data::split(m, 5);
  const auto key = [](const data::Rating& r) { return std::pair<int, int>{r.user, r.item}; };
  std::set<std::pair<int, int>> train_set, val_set, test_set, all;
  for (const auto& r : s.train.triples()) train_set.insert(key(r));
  for (const auto& r : s.validation.triples()) val_set.insert(key(r));
  for (const auto& r : s.test.triples()) test_set.insert(key(r));
  for (const auto& r : m.triples()) all.insert(key(r));
  CHECK(train_set.size() + val_set.size() + test_set.size() == all.size());
  std::set<std::pair<int, int>> merged = train_set;
  merged.insert(val_set.begin(), val_set.end());
  merged.insert(test_set.begin(), test_set.end());
  CHECK(merged == all);
  for (const auto& k : val_set) CHECK(train_set.count(k) == 0);
  for (const auto& k : test_set) {
    CHECK(train_set.count(k) == 0);
    CHECK(val_set.count(k) == 0);
  }
}

TEST_CASE("split sizes stay within one triple of exact proportions") {
  for (std::size_t n : {10u, 11u, 37u, 1001u}) {
    const auto m = random_matrix(30, 40, n, 1000 + n);
    const auto s = data::split(m, 9);
    CHECK(s.train.size() + s.validation.size() + s.test.size() == n);
    CHECK(std::abs(static_cast<double>(s.train.size()) - 0.70 * static_cast<double>(n)) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.validation.size()) - 0.15 * static_cast<double>(n)) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.test.size()) - 0.15 * static_cast<double>(n)) <= 1.0);
  }
}

TEST_CASE("binarize thresholds strictly above 3 and keeps structure") {
  const auto m = data::SparseRatingMatrix::from_triples(
      2, 3, {{0, 0, 4.0}, {0, 1, 3.0}, {1, 2, 5.0}, {1, 0, 0.5}});
  const auto b = data::binarize(m);
  CHECK(b.size() == m.size());
  CHECK(b.n_users() == m.n_users());
  CHECK(b.triples()[0].value == 1.0);  // 4 -> 1
  CHECK(b.triples()[1].value == 0.0);  // 3 -> 0 (strict inequality)
  CHECK(b.triples()[2].value == 1.0);
  CHECK(b.triples()[3].value == 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(b.triples()[i].user == m.triples()[i].user);
    CHECK(b.triples()[i].item == m.triples()[i].item);
  }

  const auto fives = data::SparseRatingMatrix::from_triples(1, 2, {{0, 0, 5.0}, {0, 1, 5.0}});
  const auto all_ones = data::binarize(fives);
  for (const auto& r : all_ones.triples()) CHECK(r.value == 1.0);
}

TEST_CASE("subsample takes the ceiling and partitions the triples") {
  // ceil(0.01 * 1,000,209) = 10,003: the ML-1M-sized case, synthetic grid
  std::vector<data::Rating> triples;
  triples.reserve(1000209);
  const int cols = 166;
  int made = 0;
  for (int u = 0; made < 1000209; ++u)
    for (int i = 0; i < cols && made < 1000209; ++i, ++made)
      triples.push_back({u, i, 3.0});
  const int rows = triples.back().user + 1;
  const auto m = data::SparseRatingMatrix::from_triples(rows, cols, std::move(triples));
  REQUIRE(m.size() == 1000209);

  const auto [train, rest] = data::subsample(m, 0.01, 3);
  CHECK(train.size() == 10003);
  CHECK(train.size() + rest.size() == m.size());

  const auto [train2, rest2] = data::subsample(m, 0.01, 3);
  CHECK(train2.triples() == train.triples());
}

TEST_CASE("make_batches partitions a shuffled index range") {
  const auto b = data::make_batches(5, 2, 11);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 2);
  CHECK(b[1].size() == 2);
  CHECK(b[2].size() == 1);

  CHECK(data::make_batches(100, 100, 11).size() == 1);

  std::set<int> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  CHECK(seen == std::set<int>{0, 1, 2, 3, 4});

  CHECK(data::make_batches(5, 2, 11) == b);
  CHECK_THROWS_AS(data::make_batches(5, 0, 11), ParameterError);
}

TEST_CASE("id map and split manifest files round-trip through text") {
  TempFile probe("");  // reserve a unique temp path
  const auto m = random_matrix(5, 5, 20, 13);
  const auto s = data::split(m, 2);
  const auto manifest = probe.path.string() + ".manifest";
  data::write_split_manifest(manifest, s);
  std::ifstream in(manifest);
  std::string header;
  std::getline(in, header);
  CHECK(header == "user_idx,item_idx,rating,split");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++rows;
  CHECK(rows == m.size());
  fs::remove(manifest);

  const auto idmap = probe.path.string() + ".ids";
  data::write_id_map(idmap, {"a", "b"});
  std::ifstream ids(idmap);
  std::getline(ids, header);
  CHECK(header == "raw_id,dense_idx");
  std::getline(ids, header);
  CHECK(header == "a,0");
  fs::remove(idmap);
}
