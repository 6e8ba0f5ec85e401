#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossvae/errors.hpp"
#include "crossvae/train.hpp"

// Versioned binary checkpoint: magic + version, a JSON metadata block
// (hyperparameters, counters, RNG state, tensor manifest) and a raw
// little-endian float64 payload. Sufficient for bit-exact resume.

namespace crossvae::checkpoint {

inline constexpr char kMagic[8] = {'X', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline nlohmann::json hp_to_json(const model::Hyperparams& hp) {
  nlohmann::json j;
  j["k"] = hp.k;
  j["k_prime"] = hp.k_prime;
  j["layers"] = hp.layers;
  j["layers_prime"] = hp.layers_prime;
  j["widths"] = hp.widths;
  j["beta_u"] = hp.beta_u;
  j["beta_v"] = hp.beta_v;
  j["batch_users"] = hp.batch_users;
  j["batch_items"] = hp.batch_items;
  j["attention"] = model::attention_mode_name(hp.attention);
  j["attention_softmax"] = hp.attention_softmax;
  j["cross_feedback"] = hp.cross_feedback;
  j["data_input"] = hp.data_input;
  j["init_mu"] = hp.init_mu;
  j["init_sigma"] = hp.init_sigma;
  j["learning_rate"] = hp.learning_rate;
  j["adam_beta1"] = hp.adam_beta1;
  j["adam_beta2"] = hp.adam_beta2;
  j["adam_eps"] = hp.adam_eps;
  j["max_iterations"] = hp.max_iterations;
  j["patience"] = hp.patience;
  j["sequential"] = hp.sequential;
  return j;
}

inline model::Hyperparams hp_from_json(const nlohmann::json& j) {
  model::Hyperparams hp;
  hp.k = j.at("k").get<int>();
  hp.k_prime = j.at("k_prime").get<int>();
  hp.layers = j.at("layers").get<int>();
  hp.layers_prime = j.at("layers_prime").get<int>();
  hp.widths = j.at("widths").get<std::vector<int>>();
  hp.beta_u = j.at("beta_u").get<double>();
  hp.beta_v = j.at("beta_v").get<double>();
  hp.batch_users = j.at("batch_users").get<int>();
  hp.batch_items = j.at("batch_items").get<int>();
  hp.attention = model::parse_attention_mode(j.at("attention").get<std::string>());
  hp.attention_softmax = j.at("attention_softmax").get<bool>();
  hp.cross_feedback = j.at("cross_feedback").get<bool>();
  hp.data_input = j.at("data_input").get<bool>();
  hp.init_mu = j.at("init_mu").get<double>();
  hp.init_sigma = j.at("init_sigma").get<double>();
  hp.learning_rate = j.at("learning_rate").get<double>();
  hp.adam_beta1 = j.at("adam_beta1").get<double>();
  hp.adam_beta2 = j.at("adam_beta2").get<double>();
  hp.adam_eps = j.at("adam_eps").get<double>();
  hp.max_iterations = j.at("max_iterations").get<int>();
  hp.patience = j.at("patience").get<int>();
  hp.sequential = j.at("sequential").get<bool>();
  return hp;
}

inline std::uint64_t double_bits(double v) {
  std::uint64_t out;
  std::memcpy(&out, &v, sizeof(out));
  return out;
}

inline double bits_double(std::uint64_t v) {
  double out;
  std::memcpy(&out, &v, sizeof(out));
  return out;
}

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, std::vector<double>& v, std::size_t n) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("checkpoint payload truncated");
}

}  // namespace detail

inline void save(const std::string& path, const train::TrainState& s) {
  nlohmann::json meta;
  meta["hyperparams"] = detail::hp_to_json(s.params.hp);
  meta["n_users"] = s.params.n_users;
  meta["n_items"] = s.params.n_items;
  meta["master_seed"] = s.master_seed;
  meta["iteration"] = s.iteration;
  meta["best_validation_rmse_bits"] = detail::double_bits(s.best_validation_rmse);
  meta["epochs_since_improvement"] = s.epochs_since_improvement;
  meta["adam_step"] = s.adam.step;
  {
    std::ostringstream oss;
    oss << s.noise_engine;
    meta["noise_engine"] = oss.str();
  }
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, t] : s.params.named_tensors())
    manifest.push_back({{"name", name}, {"rows", t->rows}, {"cols", t->cols}});
  meta["tensors"] = manifest;
  meta["table_dim"] = s.users.dim;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  const std::string meta_str = meta.dump();
  const std::uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

  for (const auto& [name, t] : s.params.named_tensors()) {
    (void)name;
    detail::write_doubles(out, t->values);
  }
  detail::write_doubles(out, s.users.values);
  detail::write_doubles(out, s.items.values);
  for (const auto& [name, t] : s.params.named_tensors()) {
    const auto it = s.adam.moments.find(name);
    if (it != s.adam.moments.end()) {
      detail::write_doubles(out, it->second.m);
      detail::write_doubles(out, it->second.v);
    } else {
      const std::vector<double> zero(t->size(), 0.0);
      detail::write_doubles(out, zero);
      detail::write_doubles(out, zero);
    }
  }
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

// Rebuilds a TrainState against the same training matrix the checkpoint was
// produced with; batches are re-derived from the stored seed.
inline train::TrainState load(const std::string& path, const data::SparseRatingMatrix& train_data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("'" + path + "' is not a checkpoint file");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError("checkpoint metadata truncated");
  const nlohmann::json meta = nlohmann::json::parse(meta_str);

  const auto hp = detail::hp_from_json(meta.at("hyperparams"));
  const int n_users = meta.at("n_users").get<int>();
  const int n_items = meta.at("n_items").get<int>();
  if (n_users != train_data.n_users() || n_items != train_data.n_items())
    throw DataError("checkpoint index space " + std::to_string(n_users) + "x" +
                    std::to_string(n_items) + " does not match dataset " +
                    std::to_string(train_data.n_users()) + "x" +
                    std::to_string(train_data.n_items()));

  auto s = train::init_train_state(train_data, hp, meta.at("master_seed").get<std::uint64_t>());
  s.iteration = meta.at("iteration").get<int>();
  s.best_validation_rmse =
      detail::bits_double(meta.at("best_validation_rmse_bits").get<std::uint64_t>());
  s.epochs_since_improvement = meta.at("epochs_since_improvement").get<int>();
  s.adam.step = meta.at("adam_step").get<std::int64_t>();
  {
    std::istringstream iss(meta.at("noise_engine").get<std::string>());
    iss >> s.noise_engine;
    if (!iss) throw DataError("checkpoint RNG state unreadable");
  }

  const auto named = s.params.named_tensors();
  const auto& manifest = meta.at("tensors");
  if (manifest.size() != named.size())
    throw DataError("checkpoint tensor manifest does not match this configuration");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != named[i].first ||
        entry.at("rows").get<std::size_t>() != named[i].second->rows ||
        entry.at("cols").get<std::size_t>() != named[i].second->cols)
      throw DataError("checkpoint tensor '" + entry.at("name").get<std::string>() +
                      "' does not match this configuration");
  }
  for (const auto& [name, t] : named) {
    (void)name;
    detail::read_doubles(in, t->values, t->size());
  }
  detail::read_doubles(in, s.users.values,
                       static_cast<std::size_t>(n_users) * static_cast<std::size_t>(hp.k));
  detail::read_doubles(in, s.items.values,
                       static_cast<std::size_t>(n_items) * static_cast<std::size_t>(hp.k));
  for (const auto& [name, t] : named) {
    auto& mom = s.adam.moments[name];
    detail::read_doubles(in, mom.m, t->size());
    detail::read_doubles(in, mom.v, t->size());
  }
  return s;
}

}  // namespace crossvae::checkpoint
