#include <CLI11.hpp>

#include <exception>
#include <fstream>
#include <sstream>
#include <vector>
#include <iostream>
#include <string>

#include "crossvae/cli.hpp"

// crossvae: VAE-based Bayesian matrix factorization for collaborative
// filtering, with cross-fed user/item embeddings and bilinear attention.

namespace {

struct CliState {
  crossvae::cli::RunConfig cfg;
  std::string attention = "local";
  double subsample_fraction = 0.1;
  std::uint64_t gradcheck_seed = 12345;
  int gradcheck_instances = 100;
  std::string corrupt_op;
  std::string config_path;
};

void add_data_options(CLI::App* sub, CliState& s) {
  sub->add_option("--dataset", s.cfg.dataset, "Rating file path")->capture_default_str();
  sub->add_option("--format", s.cfg.format, "Input format: double_colon|csv|amazon_csv")
      ->check(CLI::IsMember({"double_colon", "csv", "amazon_csv"}))
      ->capture_default_str();
  sub->add_option("--seed", s.cfg.seed, "Master seed (split, init, noise)")->capture_default_str();
  sub->add_option("--min-ratings", s.cfg.min_ratings,
                  "Drop users/items with fewer ratings (fixed point)")
      ->capture_default_str();
  sub->add_option("--out", s.cfg.out_dir, "Output directory")->capture_default_str();
  sub->add_option("--config", s.config_path,
                  "Config file (flat key=value lines; explicit flags win)");
}

// Flat key=value config support: turn the file into argv tokens injected right
// after the subcommand, skipping keys whose flag appears explicitly (flag
// wins). `key=v1 v2` becomes `--key v1 v2`; boolean keys take true/false.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty() || args.size() < 2) return args;

  std::ifstream in(config_path);
  if (!in) throw crossvae::DataError("cannot open config file '" + config_path + "'");
  std::vector<std::string> injected;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw crossvae::DataError("config line " + std::to_string(line_no) + ": expected key=value");
    std::string key = line.substr(first, eq - first);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string value = line.substr(eq + 1);
    const auto vstart = value.find_first_not_of(" \t");
    value = vstart == std::string::npos ? "" : value.substr(vstart);

    const std::string flag = "--" + key;
    bool overridden = false;
    for (std::size_t i = 2; i < args.size(); ++i)
      if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) overridden = true;
    if (overridden) continue;

    if (value == "true" || value == "false") {
      if (value == "true") injected.push_back(flag);
      continue;
    }
    injected.push_back(flag);
    std::istringstream vs(value);
    for (std::string tok; vs >> tok;) injected.push_back(tok);
  }
  std::vector<std::string> out = {args[0], args[1]};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

void add_model_options(CLI::App* sub, CliState& s) {
  auto& hp = s.cfg.hp;
  sub->add_option("--k", hp.k, "Embedding dimension K")->capture_default_str();
  sub->add_option("--k-prime", hp.k_prime, "Intermediate embedding dimension K'")
      ->capture_default_str();
  sub->add_option("--layers", hp.layers, "Hidden layers L in the fusion networks")
      ->capture_default_str();
  sub->add_option("--layers-prime", hp.layers_prime,
                  "Hidden layers L' in the observed/latent networks")
      ->capture_default_str();
  sub->add_option("--widths", hp.widths, "Hidden layer widths")->capture_default_str();
  sub->add_option("--beta-u", hp.beta_u, "User-side KL weight")->capture_default_str();
  sub->add_option("--beta-v", hp.beta_v, "Item-side KL weight")->capture_default_str();
  sub->add_option("--batch-users", hp.batch_users, "User batch size (0 = size rule)")
      ->capture_default_str();
  sub->add_option("--batch-items", hp.batch_items, "Item batch size (0 = size rule)")
      ->capture_default_str();
  sub->add_option("--attention", s.attention, "Attention mode: local|global|off")
      ->check(CLI::IsMember({"local", "global", "off"}))
      ->capture_default_str();
  sub->add_flag("--attention-softmax", hp.attention_softmax,
                "Replace signed weight normalization with softmax");
  sub->add_flag("--no-cross-feedback{false}", hp.cross_feedback,
                "Remove the latent path (no cross-fed embeddings)");
  sub->add_flag("--no-data-input{false}", hp.data_input,
                "Remove the observed-rating path and its MLP");
  sub->add_option("--init-mu", hp.init_mu, "Embedding init mean")->capture_default_str();
  sub->add_option("--init-sigma", hp.init_sigma, "Embedding init std")->capture_default_str();
  sub->add_option("--lr", hp.learning_rate, "Adam learning rate")->capture_default_str();
  sub->add_option("--max-iterations", hp.max_iterations, "Outer iteration cap")
      ->capture_default_str();
  sub->add_option("--patience", hp.patience,
                  "Non-improving validation iterations tolerated before stopping")
      ->capture_default_str();
  sub->add_flag("--sequential", hp.sequential,
                "Alternate side updates instead of nested batch iteration");
  sub->add_option("--rank-over", s.cfg.rank_over, "Ranking candidates: test|full")
      ->check(CLI::IsMember({"test", "full"}))
      ->capture_default_str();
}

int dispatch(const std::function<int()>& run) {
  try {
    return run();
  } catch (const crossvae::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return crossvae::cli::kExitUsageError;
  } catch (const crossvae::ParameterError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return crossvae::cli::kExitUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return crossvae::cli::kExitVerificationFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VAE-based Bayesian matrix factorization with cross-feedback and attention"};
  app.require_subcommand(1);
  CliState s;

  auto* train = app.add_subcommand("train", "Train to convergence and report metrics");
  add_data_options(train, s);
  add_model_options(train, s);
  train->add_flag("--svg", s.cfg.emit_svg, "Also write a convergence-curve SVG");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the derived split");
  add_data_options(evaluate, s);
  add_model_options(evaluate, s);
  evaluate->add_option("--checkpoint", s.cfg.checkpoint_path, "Checkpoint file")->required();

  auto* ablate = app.add_subcommand("ablate",
                                    "Train the component-removal variants on a shared split");
  add_data_options(ablate, s);
  add_model_options(ablate, s);

  auto* sparsity = app.add_subcommand("sparsity", "Subsampled-training sweep over fractions");
  add_data_options(sparsity, s);
  add_model_options(sparsity, s);
  sparsity->add_option("--fractions", s.cfg.sparsity_fractions, "Training fractions")
      ->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("--seed", s.gradcheck_seed, "Seed for random instances")
      ->capture_default_str();
  gradcheck->add_option("--instances", s.gradcheck_instances, "Random instances per op")
      ->capture_default_str();
  gradcheck->add_option("--self-test-corrupt", s.corrupt_op,
                        "Use a deliberately broken backward rule for this op (harness self-test)");

  auto* subsample = app.add_subcommand("subsample",
                                       "Subsample a training fraction; remainder split 50/50");
  add_data_options(subsample, s);
  subsample->add_option("--fraction", s.subsample_fraction, "Training fraction")
      ->capture_default_str();

  auto* split = app.add_subcommand("split", "Write the 70/15/15 split manifest and id maps");
  add_data_options(split, s);

  try {
    const auto args = expand_config(argc, argv);
    std::vector<const char*> raw;
    raw.reserve(args.size());
    for (const auto& a : args) raw.push_back(a.c_str());
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : crossvae::cli::kExitUsageError;
  } catch (const crossvae::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return crossvae::cli::kExitUsageError;
  }

  s.cfg.hp.attention = crossvae::model::parse_attention_mode(s.attention);

  if (train->parsed()) return dispatch([&] { return crossvae::cli::cmd_train(s.cfg); });
  if (evaluate->parsed()) return dispatch([&] { return crossvae::cli::cmd_evaluate(s.cfg); });
  if (ablate->parsed()) return dispatch([&] { return crossvae::cli::cmd_ablate(s.cfg); });
  if (sparsity->parsed()) return dispatch([&] { return crossvae::cli::cmd_sparsity(s.cfg); });
  if (gradcheck->parsed())
    return dispatch([&] {
      return crossvae::cli::cmd_gradcheck(s.gradcheck_seed, s.gradcheck_instances, s.corrupt_op);
    });
  if (subsample->parsed())
    return dispatch([&] { return crossvae::cli::cmd_subsample(s.cfg, s.subsample_fraction); });
  if (split->parsed()) return dispatch([&] { return crossvae::cli::cmd_split(s.cfg); });
  return crossvae::cli::kExitUsageError;
}
