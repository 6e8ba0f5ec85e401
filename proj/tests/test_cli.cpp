#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "crossvae/cli.hpp"
#include "fixtures.hpp"

using namespace crossvae;
namespace fs = std::filesystem;

#ifndef CROSSVAE_CLI_BINARY
#define CROSSVAE_CLI_BINARY ""
#endif

namespace {

struct Scratch {
  fs::path dir;
  Scratch() {
    static int counter = 0;
    dir = fs::temp_directory_path() /
          ("crossvae_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string small_dataset(const Scratch& scratch) {
  const auto fx = fixtures::low_rank_ratings(40, 40, 3, 0.30, 0.10, 7);
  const auto path = scratch.path("ratings.csv");
  fixtures::write_ratings_csv(path, fx.matrix);
  return path;
}

cli::RunConfig fast_config(const std::string& dataset, const std::string& out) {
  cli::RunConfig cfg;
  cfg.dataset = dataset;
  cfg.format = "csv";
  cfg.seed = 5;
  cfg.out_dir = out;
  cfg.hp.k = 4;
  cfg.hp.k_prime = 4;
  cfg.hp.widths = {8};
  cfg.hp.batch_users = 20;
  cfg.hp.batch_items = 20;
  cfg.hp.max_iterations = 3;
  cfg.hp.patience = 3;
  cfg.hp.attention = model::AttentionMode::kLocal;
  return cfg;
}

std::size_t data_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::size_t n = 0;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_binary(const std::string& args) {
  const std::string binary = CROSSVAE_CLI_BINARY;
  REQUIRE(!binary.empty());
  CommandResult res;
  FILE* pipe = ::popen((binary + " " + args + " 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf;
  while (fgets(buf.data(), buf.size(), pipe)) res.output += buf.data();
  const int status = ::pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

}  // namespace

TEST_CASE("cmd_train rejects a missing dataset with exit 2") {
  cli::RunConfig cfg;
  cfg.dataset = "/nonexistent/ratings.dat";
  CHECK(cli::cmd_train(cfg) == cli::kExitUsageError);
}

TEST_CASE("cmd_train writes every artifact under the output directory") {
  Scratch scratch;
  const auto cfg = fast_config(small_dataset(scratch), scratch.path("out"));
  REQUIRE(cli::cmd_train(cfg) == cli::kExitOk);
  for (const char* name : {"checkpoint.bin", "training_log.csv", "metrics.csv", "metrics.json",
                           "idmap_users.csv", "idmap_items.csv"})
    CHECK(fs::exists(fs::path(cfg.out_dir) / name));
  CHECK(data_lines(cfg.out_dir + "/metrics.csv") == 3);  // train, val, test
}

TEST_CASE("max_iterations 1 yields exactly one training-log line beyond the header") {
  Scratch scratch;
  auto cfg = fast_config(small_dataset(scratch), scratch.path("out"));
  cfg.hp.max_iterations = 1;
  REQUIRE(cli::cmd_train(cfg) == cli::kExitOk);
  CHECK(data_lines(cfg.out_dir + "/training_log.csv") == 1);
}

TEST_CASE("identical config and seed reproduce metrics and checkpoint byte-for-byte") {
  Scratch scratch;
  const auto dataset = small_dataset(scratch);
  auto cfg1 = fast_config(dataset, scratch.path("out1"));
  auto cfg2 = fast_config(dataset, scratch.path("out2"));
  REQUIRE(cli::cmd_train(cfg1) == cli::kExitOk);
  REQUIRE(cli::cmd_train(cfg2) == cli::kExitOk);
  CHECK(slurp(cfg1.out_dir + "/metrics.csv") == slurp(cfg2.out_dir + "/metrics.csv"));
  CHECK(slurp(cfg1.out_dir + "/metrics.json") == slurp(cfg2.out_dir + "/metrics.json"));
  CHECK(slurp(cfg1.out_dir + "/checkpoint.bin") == slurp(cfg2.out_dir + "/checkpoint.bin"));
}

TEST_CASE("cmd_evaluate reproduces the training run's reports from the checkpoint") {
  Scratch scratch;
  const auto dataset = small_dataset(scratch);
  auto cfg = fast_config(dataset, scratch.path("out"));
  REQUIRE(cli::cmd_train(cfg) == cli::kExitOk);
  auto ecfg = cfg;
  ecfg.out_dir = scratch.path("eval_out");
  ecfg.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
  REQUIRE(cli::cmd_evaluate(ecfg) == cli::kExitOk);
  CHECK(slurp(cfg.out_dir + "/metrics.csv") == slurp(ecfg.out_dir + "/metrics.csv"));

  ecfg.checkpoint_path = scratch.path("missing.bin");
  CHECK(cli::cmd_evaluate(ecfg) == cli::kExitUsageError);
}

TEST_CASE("cmd_ablate writes one row per variant in the documented order") {
  Scratch scratch;
  auto cfg = fast_config(small_dataset(scratch), scratch.path("out"));
  cfg.hp.max_iterations = 2;
  cfg.hp.patience = 2;
  REQUIRE(cli::cmd_ablate(cfg) == cli::kExitOk);
  std::ifstream csv(cfg.out_dir + "/ablation.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "variant,split,rmse,ndcg@20,ndcg@50,recall@20,recall@50,n_users");
  std::vector<std::string> variants;
  while (std::getline(csv, line))
    if (!line.empty()) variants.push_back(line.substr(0, line.find(',')));
  REQUIRE(variants.size() == 4);
  CHECK(variants[0] == "no-data-input");
  CHECK(variants[1] == "no-cross-feedback");
  CHECK(variants[2] == "no-attention");
  CHECK(variants[3] == "full");
  for (const auto& v : variants) CHECK(fs::exists(fs::path(cfg.out_dir) / v / "checkpoint.bin"));
}

TEST_CASE("cmd_sparsity emits one row per fraction in increasing order") {
  Scratch scratch;
  auto cfg = fast_config(small_dataset(scratch), scratch.path("out"));
  cfg.hp.max_iterations = 2;
  cfg.hp.patience = 2;
  cfg.sparsity_fractions = {0.30, 0.15};  // intentionally unsorted
  REQUIRE(cli::cmd_sparsity(cfg) == cli::kExitOk);
  std::ifstream csv(cfg.out_dir + "/sparsity.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "fraction,split,rmse,ndcg@20,ndcg@50,recall@20,recall@50,n_users");
  std::vector<double> fractions;
  while (std::getline(csv, line))
    if (!line.empty()) fractions.push_back(std::stod(line.substr(0, line.find(','))));
  REQUIRE(fractions.size() == 2);
  CHECK(fractions[0] < fractions[1]);

  cfg.sparsity_fractions = {1.5};
  CHECK(cli::cmd_sparsity(cfg) == cli::kExitUsageError);
}

TEST_CASE("cmd_gradcheck passes clean and fails naming a corrupted op") {
  std::ostringstream out;
  CHECK(cli::cmd_gradcheck(1234, /*instances=*/5, "", out) == cli::kExitOk);
  CHECK(out.str().find("end_to_end_toy_model") != std::string::npos);
  CHECK(out.str().find("all gradient checks passed") != std::string::npos);

  std::ostringstream bad;
  CHECK(cli::cmd_gradcheck(1234, /*instances=*/5, "relu", bad) ==
        cli::kExitVerificationFailure);
  CHECK(bad.str().find("relu") != std::string::npos);
  CHECK(bad.str().find("FAIL") != std::string::npos);
}

TEST_CASE("cmd_split and cmd_subsample write manifests and id maps") {
  Scratch scratch;
  auto cfg = fast_config(small_dataset(scratch), scratch.path("out"));
  REQUIRE(cli::cmd_split(cfg) == cli::kExitOk);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "split_manifest.csv"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "idmap_users.csv"));

  auto scfg = cfg;
  scfg.out_dir = scratch.path("sub_out");
  REQUIRE(cli::cmd_subsample(scfg, 0.10) == cli::kExitOk);
  CHECK(fs::exists(fs::path(scfg.out_dir) / "subsample_manifest.csv"));
  CHECK(cli::cmd_subsample(scfg, 1.2) == cli::kExitUsageError);

  // manifest carries train/val/test labels
  std::ifstream in(scfg.out_dir + "/subsample_manifest.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all.find(",train") != std::string::npos);
  CHECK(all.find(",val") != std::string::npos);
  CHECK(all.find(",test") != std::string::npos);
}

TEST_CASE("binary: --help lists subcommands and flag defaults") {
  const auto top = run_binary("--help");
  CHECK(top.exit_code == 0);
  for (const char* sub : {"train", "evaluate", "ablate", "sparsity", "gradcheck", "subsample",
                          "split"})
    CHECK(top.output.find(sub) != std::string::npos);

  const auto train_help = run_binary("train --help");
  CHECK(train_help.exit_code == 0);
  for (const char* flag : {"--dataset", "--format", "--seed", "--k", "--k-prime", "--layers",
                           "--layers-prime", "--widths", "--beta-u", "--beta-v", "--batch-users",
                           "--batch-items", "--attention", "--attention-softmax", "--sequential",
                           "--rank-over", "--max-iterations", "--patience", "--out"})
    CHECK(train_help.output.find(flag) != std::string::npos);
  CHECK(train_help.output.find("[0.0001]") != std::string::npos);  // a captured default
}

TEST_CASE("binary: usage errors and missing dataset exit with code 2") {
  CHECK(run_binary("").exit_code == cli::kExitUsageError);
  CHECK(run_binary("train --no-such-flag").exit_code == cli::kExitUsageError);
  const auto missing = run_binary("train --dataset /nonexistent.dat");
  CHECK(missing.exit_code == cli::kExitUsageError);
  CHECK(missing.output.find("dataset not found") != std::string::npos);
}

TEST_CASE("binary: config file provides values and explicit flags win") {
  Scratch scratch;
  const auto dataset = small_dataset(scratch);
  const auto cfg_path = scratch.path("run.cfg");
  {
    std::ofstream cfg(cfg_path);
    cfg << "dataset=" << dataset << "\nformat=csv\nseed=5\nk=4\nk-prime=4\nwidths=8\n"
        << "batch-users=20\nbatch-items=20\nmax-iterations=1\npatience=1\n";
  }
  const auto out1 = scratch.path("cfg_out1");
  const auto r1 = run_binary("train --config " + cfg_path + " --out " + out1);
  CHECK(r1.exit_code == 0);
  CHECK(data_lines(out1 + "/training_log.csv") == 1);

  // the explicit flag overrides the config file's max-iterations=1
  const auto out2 = scratch.path("cfg_out2");
  const auto r2 = run_binary("train --config " + cfg_path + " --out " + out2 +
                             " --max-iterations 2 --patience 2");
  CHECK(r2.exit_code == 0);
  CHECK(data_lines(out2 + "/training_log.csv") == 2);
}

TEST_CASE("binary: gradcheck self-test exits 1 and names the op") {
  const auto r = run_binary("gradcheck --instances 3 --self-test-corrupt relu");
  CHECK(r.exit_code == cli::kExitVerificationFailure);
  CHECK(r.output.find("relu") != std::string::npos);
  CHECK(r.output.find("FAIL") != std::string::npos);
}
