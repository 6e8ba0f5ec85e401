#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "crossvae/data.hpp"
#include "crossvae/rng.hpp"

// Synthetic low-rank rating fixtures shared by the unit and acceptance suites.
//
// ratings = U* V*^T + N(0, noise_sd^2) with U*, V* entries N(0,1)/sqrt(k),
// shifted by +3 so every rating is positive and the file parses through the
// standard loaders (the shift is rank-one and leaves RMSE targets unchanged).

namespace fixtures {

struct LowRank {
  crossvae::data::SparseRatingMatrix matrix;
  int n_users = 0;
  int n_items = 0;
};

inline LowRank low_rank_ratings(int n_users, int n_items, int k_true, double density,
                                double noise_sd, std::uint64_t seed) {
  namespace rng = crossvae::rng;
  std::mt19937_64 eng(rng::derive_seed(seed, 0xF177));
  const double scale = 1.0 / std::sqrt(static_cast<double>(k_true));
  std::vector<double> u(static_cast<std::size_t>(n_users) * static_cast<std::size_t>(k_true));
  std::vector<double> v(static_cast<std::size_t>(n_items) * static_cast<std::size_t>(k_true));
  rng::fill_normal(eng, u, 0.0, scale);
  rng::fill_normal(eng, v, 0.0, scale);

  std::vector<crossvae::data::Rating> triples;
  for (int i = 0; i < n_users; ++i) {
    for (int j = 0; j < n_items; ++j) {
      if (rng::next_unit(eng) >= density) continue;
      double dot = 0.0;
      for (int k = 0; k < k_true; ++k)
        dot += u[static_cast<std::size_t>(i) * k_true + k] *
               v[static_cast<std::size_t>(j) * k_true + k];
      double value = 3.0 + dot + rng::normal(eng, 0.0, noise_sd);
      if (value <= 0.0) value = 0.01;  // ~7 sigma tail, keeps the loader invariant
      triples.push_back({i, j, value});
    }
  }
  LowRank out;
  out.n_users = n_users;
  out.n_items = n_items;
  out.matrix = crossvae::data::SparseRatingMatrix::from_triples(n_users, n_items,
                                                                std::move(triples));
  return out;
}

// The acceptance fixture: 200 x 300 grid, true rank 5, 20% observed,
// noise floor 0.10.
inline LowRank acceptance_fixture(std::uint64_t seed) {
  return low_rank_ratings(200, 300, 5, 0.20, 0.10, seed);
}

inline void write_ratings_csv(const std::string& path,
                              const crossvae::data::SparseRatingMatrix& m) {
  std::ofstream out(path);
  out << "userId,movieId,rating,timestamp\n";
  out.precision(17);
  for (const auto& r : m.triples())
    out << (r.user + 1) << "," << (r.item + 1) << "," << r.value << ",0\n";
}

}  // namespace fixtures
