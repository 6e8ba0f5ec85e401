#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossvae/checkpoint.hpp"
#include "crossvae/data.hpp"
#include "crossvae/errors.hpp"
#include "crossvae/eval.hpp"
#include "crossvae/gradcheck.hpp"
#include "crossvae/model.hpp"
#include "crossvae/train.hpp"

// Command implementations behind the CLI front end. Each returns a process
// exit status: 0 success, 1 verification/acceptance failure, 2 usage or data
// error. Every artifact lands under the configured output directory.

namespace crossvae::cli {

struct RunConfig {
  std::string dataset;
  std::string format = "double_colon";
  std::uint64_t seed = 42;
  int min_ratings = 1;
  model::Hyperparams hp;
  std::string rank_over = "test";
  std::string out_dir = "out";
  bool emit_svg = false;
  std::vector<double> sparsity_fractions = {0.01, 0.02, 0.03, 0.05, 0.10};
  std::string checkpoint_path;  // evaluate only
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailure = 1;
inline constexpr int kExitUsageError = 2;

namespace detail {

inline std::string fingerprint_hex(const std::string& canonical) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_fingerprint(const RunConfig& cfg) {
  std::ostringstream oss;
  oss << "dataset=" << cfg.dataset << "\nformat=" << cfg.format << "\nseed=" << cfg.seed
      << "\nmin_ratings=" << cfg.min_ratings << "\nrank_over=" << cfg.rank_over << "\n";
  const auto& hp = cfg.hp;
  oss << "k=" << hp.k << "\nk_prime=" << hp.k_prime << "\nlayers=" << hp.layers
      << "\nlayers_prime=" << hp.layers_prime << "\nwidths=";
  for (int w : hp.widths) oss << w << " ";
  oss << "\nbeta_u=" << hp.beta_u << "\nbeta_v=" << hp.beta_v << "\nbatch_users=" << hp.batch_users
      << "\nbatch_items=" << hp.batch_items << "\nattention=" << model::attention_mode_name(hp.attention)
      << "\nattention_softmax=" << hp.attention_softmax << "\ncross_feedback=" << hp.cross_feedback
      << "\ndata_input=" << hp.data_input << "\ninit_mu=" << hp.init_mu
      << "\ninit_sigma=" << hp.init_sigma << "\nlearning_rate=" << hp.learning_rate
      << "\nadam=" << hp.adam_beta1 << "," << hp.adam_beta2 << "," << hp.adam_eps
      << "\nmax_iterations=" << hp.max_iterations << "\npatience=" << hp.patience
      << "\nsequential=" << hp.sequential << "\n";
  return fingerprint_hex(oss.str());
}

struct Pipeline {
  data::DataSplit split;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

inline Pipeline load_and_split(const RunConfig& cfg) {
  const auto loaded = data::load_ratings(cfg.dataset, data::parse_format(cfg.format));
  const auto filtered = data::filter_min_ratings(loaded.matrix, cfg.min_ratings);
  Pipeline p;
  p.user_ids.reserve(filtered.kept_users.size());
  for (int old : filtered.kept_users)
    p.user_ids.push_back(loaded.user_ids[static_cast<std::size_t>(old)]);
  for (int old : filtered.kept_items)
    p.item_ids.push_back(loaded.item_ids[static_cast<std::size_t>(old)]);
  p.split = data::split(filtered.matrix, cfg.seed);
  return p;
}

inline void write_training_log(const std::string& path,
                               const std::vector<train::IterationLog>& logs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write training log '" + path + "'");
  out << "iteration,train_loss,val_rmse,seconds\n";
  for (const auto& log : logs)
    out << log.iteration << "," << eval::format_double(log.train_loss) << ","
        << eval::format_double(log.validation_rmse) << "," << eval::format_double(log.seconds)
        << "\n";
}

// Minimal self-contained line chart of the validation-RMSE curve.
inline void write_convergence_svg(const std::string& path,
                                  const std::vector<train::IterationLog>& logs) {
  if (logs.empty()) return;
  double lo = logs[0].validation_rmse, hi = logs[0].validation_rmse;
  for (const auto& l : logs) {
    lo = std::min(lo, l.validation_rmse);
    hi = std::max(hi, l.validation_rmse);
  }
  if (hi <= lo) hi = lo + 1e-9;
  const double w = 640, h = 400, pad = 40;
  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << w << " " << h << "\">\n"
      << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
      << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const double x = pad + (w - 2 * pad) * (logs.size() == 1 ? 0.0
                                                             : static_cast<double>(i) /
                                                                   static_cast<double>(logs.size() - 1));
    const double y = h - pad - (h - 2 * pad) * (logs[i].validation_rmse - lo) / (hi - lo);
    out << x << "," << y << " ";
  }
  out << "\"/>\n"
      << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\""
      << h - pad << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << pad << "\" y=\"" << pad - 8 << "\" font-size=\"12\">validation RMSE "
      << eval::format_double(lo) << " .. " << eval::format_double(hi) << "</text>\n"
      << "<text x=\"" << w - pad << "\" y=\"" << h - pad + 16
      << "\" font-size=\"12\" text-anchor=\"end\">iteration 1 .. " << logs.back().iteration
      << "</text>\n</svg>\n";
}

inline nlohmann::json report_json(const eval::MetricsReport& r) {
  nlohmann::json j;
  j["split"] = r.split;
  j["rmse"] = r.rmse;
  for (const auto& [n, v] : r.ndcg) j["ndcg"][std::to_string(n)] = v;
  for (const auto& [n, v] : r.recall) j["recall"][std::to_string(n)] = v;
  j["n_users"] = r.n_users_evaluated;
  j["config_fingerprint"] = r.config_fingerprint;
  return j;
}

inline void write_reports(const std::string& dir, const std::vector<eval::MetricsReport>& reports) {
  std::ofstream csv(dir + "/metrics.csv");
  if (!csv) throw DataError("cannot write '" + dir + "/metrics.csv'");
  csv << eval::metrics_csv_header() << "\n";
  for (const auto& r : reports) csv << eval::metrics_csv_row(r) << "\n";

  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  std::ofstream js(dir + "/metrics.json");
  js << arr.dump(2) << "\n";
}

// Evaluate train/val/test against one model state, reusing one posterior pass.
inline std::vector<eval::MetricsReport> evaluate_all_splits(const train::TrainState& s,
                                                            const data::DataSplit& split,
                                                            eval::RankOver rank_over,
                                                            const std::string& fingerprint) {
  const auto fb_items =
      s.params.hp.cross_feedback ? model::feedback_tensor(s.items) : ad::TensorPtr{};
  const auto fb_users =
      s.params.hp.cross_feedback ? model::feedback_tensor(s.users) : ad::TensorPtr{};
  const auto user_post = model::full_posterior(s.params.user_side, s.params.hp, split.train,
                                               model::EntityKind::kUser, fb_items);
  const auto item_post = model::full_posterior(s.params.item_side, s.params.hp, split.train,
                                               model::EntityKind::kItem, fb_users);
  std::vector<eval::MetricsReport> reports;
  const std::vector<std::pair<const char*, const data::SparseRatingMatrix*>> targets = {
      {"train", &split.train}, {"val", &split.validation}, {"test", &split.test}};
  for (const auto& [label, target] : targets) {
    auto r = eval::evaluate_means(user_post, item_post, *target, {20, 50}, rank_over);
    r.split = label;
    r.config_fingerprint = fingerprint;
    reports.push_back(std::move(r));
  }
  return reports;
}

struct TrainOutcome {
  train::TrainState state;
  std::vector<train::IterationLog> logs;
  std::vector<eval::MetricsReport> reports;
};

inline TrainOutcome train_pipeline(const RunConfig& cfg, const data::DataSplit& split,
                                   const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  TrainOutcome out{train::init_train_state(split.train, cfg.hp, cfg.seed), {}, {}};
  out.logs = train::fit(out.state, split);
  checkpoint::save(out_dir + "/checkpoint.bin", out.state);
  write_training_log(out_dir + "/training_log.csv", out.logs);
  if (cfg.emit_svg) write_convergence_svg(out_dir + "/convergence.svg", out.logs);
  out.reports = evaluate_all_splits(out.state, split, eval::parse_rank_over(cfg.rank_over),
                                    config_fingerprint(cfg));
  write_reports(out_dir, out.reports);
  return out;
}

inline int usage_guard(const RunConfig& cfg) {
  if (cfg.dataset.empty() || !std::filesystem::exists(cfg.dataset)) {
    std::cerr << "dataset not found: '" << cfg.dataset << "'\n";
    return kExitUsageError;
  }
  return kExitOk;
}

}  // namespace detail

// load -> filter -> split -> fit to convergence; writes checkpoint, training
// log, id maps and metric reports for all three splits.
inline int cmd_train(const RunConfig& cfg) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  cfg.hp.validate();
  const auto pipeline = detail::load_and_split(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  data::write_id_map(cfg.out_dir + "/idmap_users.csv", pipeline.user_ids);
  data::write_id_map(cfg.out_dir + "/idmap_items.csv", pipeline.item_ids);
  const auto outcome = detail::train_pipeline(cfg, pipeline.split, cfg.out_dir);
  std::cout << "trained " << outcome.state.iteration << " iterations, best validation RMSE "
            << eval::format_double(outcome.state.best_validation_rmse) << "\n";
  for (const auto& r : outcome.reports) std::cout << eval::metrics_csv_row(r) << "\n";
  if (outcome.state.last_attention_fallbacks > 0)
    std::cout << "note: " << outcome.state.last_attention_fallbacks
              << " local-attention rows fell back to global in the last iteration\n";
  return kExitOk;
}

// Re-derive the split from the seed, load the checkpoint against it and
// report metrics for all three splits.
inline int cmd_evaluate(const RunConfig& cfg) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  if (!std::filesystem::exists(cfg.checkpoint_path)) {
    std::cerr << "checkpoint not found: '" << cfg.checkpoint_path << "'\n";
    return kExitUsageError;
  }
  const auto pipeline = detail::load_and_split(cfg);
  const auto state = checkpoint::load(cfg.checkpoint_path, pipeline.split.train);
  std::filesystem::create_directories(cfg.out_dir);
  const auto reports = detail::evaluate_all_splits(
      state, pipeline.split, eval::parse_rank_over(cfg.rank_over), detail::config_fingerprint(cfg));
  detail::write_reports(cfg.out_dir, reports);
  for (const auto& r : reports) std::cout << eval::metrics_csv_row(r) << "\n";
  return kExitOk;
}

struct AblationVariant {
  std::string name;
  model::Hyperparams hp;
};

// The four §-style variants, derived from the configured architecture. The
// full model keeps the configured attention mode (local if the base config
// disabled attention); removing cross-feedback also removes attention, which
// is defined over the cross-fed embeddings.
inline std::vector<AblationVariant> ablation_variants(const model::Hyperparams& base) {
  model::Hyperparams full = base;
  full.data_input = true;
  full.cross_feedback = true;
  if (full.attention == model::AttentionMode::kOff) full.attention = model::AttentionMode::kLocal;

  AblationVariant no_data{"no-data-input", full};
  no_data.hp.data_input = false;

  AblationVariant no_cross{"no-cross-feedback", full};
  no_cross.hp.cross_feedback = false;
  no_cross.hp.attention = model::AttentionMode::kOff;

  AblationVariant no_attention{"no-attention", full};
  no_attention.hp.attention = model::AttentionMode::kOff;

  return {no_data, no_cross, no_attention, {"full", full}};
}

// Train the four ablation variants on one shared seed/split and write the
// comparison CSV (test-split metrics per variant).
inline int cmd_ablate(const RunConfig& cfg) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  const auto pipeline = detail::load_and_split(cfg);
  std::filesystem::create_directories(cfg.out_dir);

  std::ofstream csv(cfg.out_dir + "/ablation.csv");
  if (!csv) throw DataError("cannot write ablation.csv");
  csv << "variant," << eval::metrics_csv_header() << "\n";
  for (const auto& variant : ablation_variants(cfg.hp)) {
    RunConfig vcfg = cfg;
    vcfg.hp = variant.hp;
    vcfg.hp.validate();
    const auto dir = cfg.out_dir + "/" + variant.name;
    const auto outcome = detail::train_pipeline(vcfg, pipeline.split, dir);
    for (const auto& r : outcome.reports) {
      if (r.split != "test") continue;
      csv << variant.name << "," << eval::metrics_csv_row(r) << "\n";
      std::cout << variant.name << ": test RMSE " << eval::format_double(r.rmse) << "\n";
    }
  }
  return kExitOk;
}

// §-style sparsity sweep: for each fraction, subsample a training set, split
// the remainder equally into validation and test, train and evaluate.
inline int cmd_sparsity(const RunConfig& cfg) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  for (double f : cfg.sparsity_fractions)
    if (!(f > 0.0 && f < 1.0)) {
      std::cerr << "sparsity fraction " << f << " outside (0,1)\n";
      return kExitUsageError;
    }
  auto fractions = cfg.sparsity_fractions;
  std::sort(fractions.begin(), fractions.end());

  const auto loaded = data::load_ratings(cfg.dataset, data::parse_format(cfg.format));
  const auto filtered = data::filter_min_ratings(loaded.matrix, cfg.min_ratings);
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream csv(cfg.out_dir + "/sparsity.csv");
  if (!csv) throw DataError("cannot write sparsity.csv");
  csv << "fraction," << eval::metrics_csv_header() << "\n";

  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    const double fraction = fractions[fi];
    const auto [train_m, rest] = data::subsample(filtered.matrix, fraction, cfg.seed);
    const auto [val_m, test_m] =
        data::subsample(rest, 0.5, rng::derive_seed(cfg.seed, 0x50AB + fi));
    data::DataSplit split;
    split.seed = cfg.seed;
    split.train = train_m;
    split.validation = val_m;
    split.test = test_m;

    char label[32];
    std::snprintf(label, sizeof(label), "f%.4f", fraction);
    const auto outcome = detail::train_pipeline(cfg, split, cfg.out_dir + "/" + label);
    for (const auto& r : outcome.reports) {
      if (r.split != "test") continue;
      csv << eval::format_double(fraction) << "," << eval::metrics_csv_row(r) << "\n";
      std::cout << "fraction " << eval::format_double(fraction) << ": test RMSE "
                << eval::format_double(r.rmse) << "\n";
    }
  }
  return kExitOk;
}

// Finite-difference verification suite; exit 0 iff every check passes.
inline int cmd_gradcheck(std::uint64_t seed, int instances = 100,
                         const std::string& corrupt_op = "", std::ostream& out = std::cout) {
  const auto results = gradcheck::run_all(seed, instances, corrupt_op);
  bool all_ok = true;
  out << "op                        max_rel_err   tolerance  status\n";
  for (const auto& r : results) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-24s %12.3e %10.0e  %s\n", r.name.c_str(), r.max_rel_err,
                  r.tolerance, r.ok ? "ok" : "FAIL");
    out << line;
    all_ok = all_ok && r.ok;
  }
  if (!all_ok) {
    out << "gradient check FAILED\n";
    return kExitVerificationFailure;
  }
  out << "all gradient checks passed\n";
  return kExitOk;
}

// Subsample a training fraction and split the remainder 50/50 into
// validation/test; writes the manifest and id maps.
inline int cmd_subsample(const RunConfig& cfg, double fraction) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  if (!(fraction > 0.0 && fraction < 1.0)) {
    std::cerr << "fraction must be in (0,1)\n";
    return kExitUsageError;
  }
  const auto loaded = data::load_ratings(cfg.dataset, data::parse_format(cfg.format));
  const auto filtered = data::filter_min_ratings(loaded.matrix, cfg.min_ratings);
  const auto [train_m, rest] = data::subsample(filtered.matrix, fraction, cfg.seed);
  const auto [val_m, test_m] = data::subsample(rest, 0.5, rng::derive_seed(cfg.seed, 0x50AB));
  data::DataSplit split;
  split.seed = cfg.seed;
  split.train = train_m;
  split.validation = val_m;
  split.test = test_m;

  std::filesystem::create_directories(cfg.out_dir);
  data::write_split_manifest(cfg.out_dir + "/subsample_manifest.csv", split);
  std::vector<std::string> user_ids, item_ids;
  for (int old : filtered.kept_users) user_ids.push_back(loaded.user_ids[static_cast<std::size_t>(old)]);
  for (int old : filtered.kept_items) item_ids.push_back(loaded.item_ids[static_cast<std::size_t>(old)]);
  data::write_id_map(cfg.out_dir + "/idmap_users.csv", user_ids);
  data::write_id_map(cfg.out_dir + "/idmap_items.csv", item_ids);
  std::cout << "subsampled " << train_m.size() << " train / " << val_m.size() << " val / "
            << test_m.size() << " test ratings\n";
  return kExitOk;
}

// load -> filter -> 70/15/15 split; writes the manifest and id maps.
inline int cmd_split(const RunConfig& cfg) {
  if (const int rc = detail::usage_guard(cfg); rc != kExitOk) return rc;
  const auto pipeline = detail::load_and_split(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  data::write_split_manifest(cfg.out_dir + "/split_manifest.csv", pipeline.split);
  data::write_id_map(cfg.out_dir + "/idmap_users.csv", pipeline.user_ids);
  data::write_id_map(cfg.out_dir + "/idmap_items.csv", pipeline.item_ids);
  std::cout << "split " << pipeline.split.train.size() << "/" << pipeline.split.validation.size()
            << "/" << pipeline.split.test.size() << " ratings\n";
  return kExitOk;
}

}  // namespace crossvae::cli
