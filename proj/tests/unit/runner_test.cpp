#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ftpg/errors.hpp"
#include "ftpg/runner.hpp"
#include "helpers.hpp"

namespace ftpg {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

TEST(Presets, DeskAndPaper) {
  const ExperimentConfig desk = preset("desk");
  EXPECT_EQ(desk.synth.dim, 32u);
  EXPECT_EQ(desk.synth.num_datasets * desk.synth.classes_per_dataset, 240);
  EXPECT_EQ(desk.fed.rounds, 100);
  EXPECT_EQ(desk.fed.batch_size, 32);
  EXPECT_EQ(desk.classes_per_client, 10);
  EXPECT_EQ(desk.predict.temperature, 0.01);

  const ExperimentConfig paper = preset("paper");
  EXPECT_EQ(paper.synth.dim, 512u);
  EXPECT_EQ(paper.synth.prompt_len, 4u);
  EXPECT_EQ(paper.heads, 4);
  EXPECT_EQ(paper.fed.lr, 0.003);
  EXPECT_EQ(paper.fed.momentum, 0.9);
  EXPECT_EQ(paper.fed.weight_decay, 1e-5);
  EXPECT_EQ(paper.fed.local_steps, 1);
  EXPECT_EQ(paper.fed.rounds, 500);
  EXPECT_EQ(paper.fed.batch_size, 200);
  EXPECT_EQ(paper.shots, 8);
  EXPECT_EQ(paper.classes_per_client, 20);
  EXPECT_THROW(preset("huge"), ConfigError);
}

TEST(ConfigJson, RoundTrips) {
  ExperimentConfig c = preset("desk");
  c.method = Method::fedkgcoop;
  c.fed.participation = 0.4;
  c.world_seed = 17;
  const ExperimentConfig back = from_json(to_json(c), preset("paper"));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(ConfigJson, UnknownKeysAndBadTypesRejected) {
  const ExperimentConfig d = preset("desk");
  EXPECT_THROW(from_json(ordered_json::parse(R"({"lr": 0.1})"), d), ConfigError);
  EXPECT_THROW(from_json(ordered_json::parse(R"({"fed": {"rate": 0.1}})"), d), ConfigError);
  EXPECT_THROW(from_json(ordered_json::parse(R"({"fed": {"rounds": "ten"}})"), d), ConfigError);
  EXPECT_THROW(from_json(ordered_json::parse(R"({"fed": {"rounds": 1.5}})"), d), ConfigError);
  EXPECT_THROW(from_json(ordered_json::parse(R"({"seed": -3})"), d), ConfigError);
  EXPECT_THROW(from_json(ordered_json::parse(R"({"method": "fedprox"})"), d), ConfigError);
  EXPECT_EQ(from_json(ordered_json::parse(R"({"fed": {"lr": 1}})"), d).fed.lr, 1.0);
}

TEST(ConfigJson, DottedOverrides) {
  ordered_json j = ordered_json::object();
  apply_override(j, "fed.rounds=7");
  apply_override(j, "method=fedcoop");
  apply_override(j, "partition.allow_mixed_shards=true");
  const ExperimentConfig c = from_json(j, preset("desk"));
  EXPECT_EQ(c.fed.rounds, 7);
  EXPECT_EQ(c.method, Method::fedcoop);
  EXPECT_TRUE(c.allow_mixed_shards);
  EXPECT_THROW(apply_override(j, "fed.rounds"), ConfigError);
  EXPECT_THROW(apply_override(j, "fed..x=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "fed.rounds.deep=1"), ConfigError);
}

TEST(ConfigResolve, ValidatesSubConfigs) {
  ExperimentConfig c = preset("desk");
  c.heads = 5;
  EXPECT_THROW(resolve(c), ConfigError);
  c = preset("desk");
  c.hm_terms = 4;
  EXPECT_THROW(resolve(c), ConfigError);
  c = preset("desk");
  c.synth.noise_sigma = -1;
  EXPECT_THROW(resolve(c), ConfigError);
  c = preset("desk");
  c.seed = 5;
  const SynthConfig s = resolved_synth(resolve(c));
  EXPECT_EQ(s.seed, 5u);
  EXPECT_EQ(s.encoder_seed, 5u);
}

TEST(Threads, EnvironmentCaps) {
  ::setenv("FTPG_THREADS", "2", 1);
  EXPECT_EQ(effective_threads(8), 2);
  EXPECT_EQ(effective_threads(1), 1);
  EXPECT_LE(effective_threads(0), 2);
  ::setenv("FTPG_THREADS", "zero", 1);
  EXPECT_THROW(effective_threads(4), ConfigError);
  ::unsetenv("FTPG_THREADS");
  EXPECT_EQ(effective_threads(3), 3);
}

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Cli r;
  r.code = run_experiment(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = testing::scratch(name);
  fs::remove_all(d);
  return d;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::vector<std::string> kQuick{"--set", "fed.rounds=4", "--set", "fed.eval_every=2",
                                      "--set", "synth.classes_per_dataset=20", "--set",
                                      "partition.classes_per_client=5"};

std::vector<std::string> with_quick(std::vector<std::string> args) {
  args.insert(args.end(), kQuick.begin(), kQuick.end());
  return args;
}

TEST(Cli, ZeroShotTrainEmitsOneRow) {
  const fs::path dir = fresh_dir("cli_zeroshot");
  const Cli r = cli(with_quick({"train", "--method", "zeroshot", "--out-dir", dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "metrics.csv");
  EXPECT_EQ(line_count(csv), 2u);
  EXPECT_EQ(csv.rfind("round,method,seed,train_loss,local_acc,base_acc,new_acc,hm\n0,zeroshot,0,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "snapshot.bin"));
}

TEST(Cli, ManifestReproducesRun) {
  const fs::path a = fresh_dir("cli_manifest_a"), b = fresh_dir("cli_manifest_b");
  ASSERT_EQ(cli(with_quick({"train", "--method", "fedtpg", "--seed", "4", "--out-dir", a.string()})).code, 0);
  const auto manifest = ordered_json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["method"], "fedtpg");
  EXPECT_EQ(manifest["fed"]["rounds"], 4);
  EXPECT_EQ(manifest["synth"]["seed"], 4);
  const Cli r = cli({"train", "--preset", "paper", "--config", (a / "manifest.json").string(),
                     "--out-dir", b.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "snapshot.bin"), slurp(b / "snapshot.bin"));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
}

TEST(Cli, FlagsOverrideConfigFile) {
  const fs::path dir = fresh_dir("cli_override");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"method": "fedcoop", "fed": {"rounds": 9}})";
  ASSERT_EQ(cli(with_quick({"train", "--config", (dir / "cfg.json").string(), "--method", "fedkgcoop",
                            "--out-dir", dir.string()}))
                .code,
            0);
  const auto manifest = ordered_json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["method"], "fedkgcoop");
  EXPECT_EQ(manifest["fed"]["rounds"], 4);
}

TEST(Cli, GenDataThenTrainOnStore) {
  const fs::path dir = fresh_dir("cli_store");
  ASSERT_EQ(cli(with_quick({"gen-data", "--out-dir", dir.string()})).code, 0);
  const EmbeddingStore s = load_store(dir / "store.ftpg");
  EXPECT_EQ(s.num_classes(), 120u);

  const fs::path synth = fresh_dir("cli_store_synth");
  ASSERT_EQ(cli(with_quick({"train", "--out-dir", synth.string()})).code, 0);
  ASSERT_EQ(cli(with_quick({"train", "--store", "store.ftpg", "--out-dir", dir.string()})).code, 0);
  EXPECT_EQ(slurp(dir / "metrics.csv"), slurp(synth / "metrics.csv"));
}

TEST(Cli, EvalReproducesFinalRow) {
  const fs::path dir = fresh_dir("cli_eval");
  ASSERT_EQ(cli(with_quick({"train", "--method", "coop_local", "--out-dir", dir.string()})).code, 0);
  const std::string csv = slurp(dir / "metrics.csv");
  const std::string last = csv.substr(csv.rfind('\n', csv.size() - 2) + 1);
  const Cli r = cli(with_quick({"eval", "--method", "coop_local", "--out-dir", dir.string(), "--append"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string row = r.out.substr(r.out.find('\n') + 1);
  // same accuracies; train_loss is the full-shard loss instead of the round's batch loss
  auto tail = [](const std::string& s) { return s.substr(s.find(',', s.find(',', s.find(',', s.find(',') + 1) + 1) + 1)); };
  EXPECT_EQ(tail(row), tail(last));
  EXPECT_EQ(line_count(slurp(dir / "metrics.csv")), line_count(csv) + 1);
}

TEST(Cli, ExportPca) {
  const fs::path dir = fresh_dir("cli_pca");
  ASSERT_EQ(cli(with_quick({"train", "--out-dir", dir.string()})).code, 0);
  const Cli r = cli(with_quick({"export-pca", "--out-dir", dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "pca.csv");
  EXPECT_EQ(csv.rfind("method,dataset,split,vec_idx,pc1,pc2,pc3\nfedtpg,ds0,base,0,", 0), 0u);
  EXPECT_EQ(line_count(csv), 1u + 6 * 2 * 4);
}

TEST(Cli, SweepWritesOneCsvPerCell) {
  const fs::path dir = fresh_dir("cli_sweep");
  const Cli r = cli(with_quick({"sweep", "--participation", "0.5,1.0", "--shots", "1,2", "--out-dir",
                                dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  int cells = 0;
  for (const auto& e : fs::directory_iterator(dir / "sweep")) {
    EXPECT_TRUE(fs::exists(e.path() / "metrics.csv"));
    ++cells;
  }
  EXPECT_EQ(cells, 4);
  EXPECT_TRUE(fs::exists(dir / "sweep" / "p0.5_s1_n5" / "manifest.json"));
}

TEST(Cli, ExitCodes) {
  const fs::path dir = fresh_dir("cli_errors");
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"fly"}).code, 1);
  EXPECT_EQ(cli({"train", "--bogus"}).code, 1);
  EXPECT_EQ(cli({"train", "--method", "fedprox", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(cli({"train", "--set", "fed.unknown=1", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(cli({"train", "--config", (dir / "missing.json").string()}).code, 2);
  EXPECT_EQ(cli({"eval", "--out-dir", dir.string(), "--snapshot", "nope.bin"}).code, 2);
  const Cli bad = cli({"train", "--set", "model.heads=5", "--out-dir", dir.string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("heads"), std::string::npos);
}

TEST(Cli, EvalRejectsMismatchedSnapshot) {
  const fs::path dir = fresh_dir("cli_mismatch");
  ASSERT_EQ(cli(with_quick({"train", "--method", "fedcoop", "--out-dir", dir.string()})).code, 0);
  EXPECT_EQ(cli(with_quick({"eval", "--method", "fedtpg", "--out-dir", dir.string()})).code, 1);
}

}  // namespace
}  // namespace ftpg
