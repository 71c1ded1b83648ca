#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "dnas/errors.hpp"
#include "dnas/experiment.hpp"

using namespace dnas;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

struct Cli {
  int code;
  std::string out;
};

Cli run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(DNAS_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), read_file(log)};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dnas_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string smoke_config(const fs::path& out, int epochs = 3) {
  nlohmann::json j = {{"model", {{"preset", "tiny"}, {"layers", 2}, {"filter_multiplier", 4}}},
                      {"plan", {{"total_epochs", epochs}}},
                      {"entropy", {{"magnitude", "M"}}},
                      {"train", {{"batch_size", 4}}},
                      {"data", {{"fine_train", 8}, {"coarse_train", 4}, {"validation", 4}, {"height", 16}, {"width", 16}}},
                      {"seed", 2},
                      {"out", out.string()}};
  return j.dump(2);
}

std::vector<std::string> data_rows(const std::string& csv) {
  std::vector<std::string> rows;
  std::istringstream in(csv);
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    rows.push_back(line);
  }
  return rows;
}

}  // namespace

TEST(Config, JsonRoundTripIsCanonical) {
  ExperimentConfig c;
  c.seed = 17;
  c.entropy.c_beta = 0.3;
  c.split = {PoolSpec::FineHalfA, PoolSpec::FineHalfB};
  c.finetune_epochs = 4;
  c.data_seed = 99;
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.split, c.split);
  EXPECT_EQ(back.resolved_data_seed(), 99u);
  EXPECT_EQ(back.finetune_budget(), 4);
}

TEST(Config, UnknownKeysAndBadTypesAreRejected) {
  EXPECT_THROW(ExperimentConfig::from_json(R"({"sead": 1})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"model": {"layer": 3}})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"plan": {"total_epochs": "ten"}})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"split": {"weights": "Everything"}})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"entropy": {"magnitude": "XXL"}})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json("{not json"), ConfigError);
  try {
    ExperimentConfig::from_json(R"({"optim": {"sgd": {"learning_rate": 0.1}}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, PresetThenOverrides) {
  const auto c = ExperimentConfig::from_json(R"({"model": {"preset": "small", "layers": 3}, "data": {"classes": 19}})");
  EXPECT_EQ(c.model.layers, 3);
  EXPECT_EQ(c.model.scales, SupernetConfig::preset("small").scales);
  EXPECT_EQ(c.model.num_classes, 19);
}

TEST(Config, CrossFieldValidation) {
  EXPECT_THROW(ExperimentConfig::from_json(R"({"data": {"classes": 5}})"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"data": {"height": 36}})"), ConfigError);
  ExperimentConfig c;
  c.model.num_classes = 6;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(DNAS_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(ExperimentConfig::load(entry.path()).validate()) << entry.path();
  }
}

TEST(Config, FinetuneBudgetDefaultsToTenPercent) {
  ExperimentConfig c;
  c.plan.total_epochs = 30;
  EXPECT_EQ(c.finetune_budget(), 3);
  c.plan.total_epochs = 4;
  EXPECT_EQ(c.finetune_budget(), 1);
}

TEST(Ablation, GridArithmetic) {
  ExperimentConfig base;
  const auto entropy = ablation_grid(base, AblationAxis::EntropyMagnitudes);
  EXPECT_EQ(entropy.size(), 8u);
  EXPECT_EQ(ablation_grid(base, AblationAxis::ScalingFunctions).size(), 2u);
  const auto splits = ablation_grid(base, AblationAxis::Splits);
  ASSERT_EQ(splits.size(), 5u);
  std::set<std::string> names;
  for (const auto& s : splits) names.insert(s.name);
  for (const char* n : {"FineHalfA/FineHalfB", "FineFull/FineFull", "FineFull/CoarseFull", "FinePlusCoarse/FineFull",
                        "FinePlusCoarse/FinePlusCoarse"})
    EXPECT_EQ(names.count(n), 1u) << n;
  EXPECT_THROW(parse_axis("depth"), ConfigError);

  std::vector<AblationRun> runs;
  for (const auto& s : entropy)
    for (std::uint64_t seed : {0, 1, 2}) runs.push_back({s.name, seed, 0.5 + 0.01 * static_cast<double>(seed), "ok"});
  std::ostringstream os;
  write_ablation_csv(os, entropy, runs);
  std::size_t run_rows = 0, summary_rows = 0;
  std::istringstream in(os.str());
  std::string line;
  while (std::getline(in, line)) {
    run_rows += line.rfind("run,", 0) == 0;
    summary_rows += line.rfind("summary,", 0) == 0;
  }
  EXPECT_EQ(run_rows, 24u);
  EXPECT_EQ(summary_rows, 8u);
}

TEST(Ablation, SingleSeedHasZeroStd) {
  ExperimentConfig base;
  const auto grid = ablation_grid(base, AblationAxis::ScalingFunctions);
  std::vector<AblationRun> runs{{grid[0].name, 0, 0.4, "ok"}, {grid[1].name, 0, 0.6, "ok"}};
  std::ostringstream os;
  write_ablation_csv(os, grid, runs);
  std::istringstream in(os.str());
  std::string line;
  int summaries = 0;
  while (std::getline(in, line)) {
    if (line.rfind("summary,", 0) != 0) continue;
    ++summaries;
    const std::string head = line.substr(0, line.rfind(','));
    EXPECT_EQ(head.substr(head.rfind(',') + 1), "0") << line;
  }
  EXPECT_EQ(summaries, 2);
}

TEST(Lists, Parsing) {
  EXPECT_EQ(parse_double_list("0,0.1, 0.2"), (std::vector<double>{0, 0.1, 0.2}));
  EXPECT_EQ(parse_seed_list("0,1,2"), (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_THROW(parse_double_list("0,x"), ConfigError);
  EXPECT_THROW(parse_seed_list("-1"), ConfigError);
}

TEST(Cli, SearchWritesDeterministicOutputs) {
  const auto dir = scratch("search");
  write_file(dir / "c.json", smoke_config(dir / "unused"));
  const auto a = run_cli("search --config " + (dir / "c.json").string() + " --out " + (dir / "a/nested").string(), dir);
  ASSERT_EQ(a.code, 0) << a.out;
  const std::string first_metrics = read_file(dir / "a/nested/metrics.csv");
  const std::string first_ckpt = read_file(dir / "a/nested/final.ckpt");
  const auto b = run_cli("search --config " + (dir / "c.json").string() + " --out " + (dir / "a/nested").string(), dir);
  ASSERT_EQ(b.code, 0) << b.out;
  for (const char* f : {"metrics.csv", "final.ckpt", "best.ckpt", "config.json", "timing.csv"})
    EXPECT_TRUE(fs::exists(dir / "a/nested" / f)) << f;
  const std::string ma = read_file(dir / "a/nested/metrics.csv");
  EXPECT_EQ(ma.rfind("# dnas 0.1.0", 0), 0u);
  EXPECT_NE(ma.find("# config: {"), std::string::npos);
  EXPECT_EQ(data_rows(ma).size(), 3u);
  EXPECT_EQ(ma, first_metrics);
  EXPECT_EQ(read_file(dir / "a/nested/final.ckpt"), first_ckpt);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("codes");
  write_file(dir / "bad.json", R"({"model": {"layers": 1}})");
  EXPECT_EQ(run_cli("search --config " + (dir / "bad.json").string(), dir).code, 2);
  write_file(dir / "typo.json", R"({"modle": {}})");
  const auto typo = run_cli("search --config " + (dir / "typo.json").string(), dir);
  EXPECT_EQ(typo.code, 2);
  EXPECT_NE(typo.out.find("modle"), std::string::npos);
  EXPECT_EQ(run_cli("search --config " + (dir / "missing.json").string(), dir).code, 4);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
  write_file(dir / "junk.ckpt", "garbage");
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "junk.ckpt").string(), dir).code, 4);
  EXPECT_EQ(run_cli("prune-sweep --checkpoint " + (dir / "junk.ckpt").string(), dir).code, 4);
  EXPECT_EQ(run_cli("ablate --config " + (dir / "bad.json").string() + " --axis depth", dir).code, 2);
  fs::remove_all(dir);
}

TEST(Cli, DivergenceExitsWithThree) {
  const auto dir = scratch("diverge");
  auto j = nlohmann::json::parse(smoke_config(dir / "run"));
  j["optim"] = {{"sgd", {{"lr", 1e200}}}};
  write_file(dir / "c.json", j.dump());
  EXPECT_EQ(run_cli("search --config " + (dir / "c.json").string(), dir).code, 3);
  fs::remove_all(dir);
}

TEST(Cli, EvalAndPruneSweepAreConsistent) {
  const auto dir = scratch("eval");
  write_file(dir / "c.json", smoke_config(dir / "run"));
  ASSERT_EQ(run_cli("search --config " + (dir / "c.json").string(), dir).code, 0);
  const std::string ckpt = (dir / "run/final.ckpt").string();
  const auto e1 = run_cli("eval --checkpoint " + ckpt, dir);
  const auto e2 = run_cli("eval --checkpoint " + ckpt, dir);
  ASSERT_EQ(e1.code, 0) << e1.out;
  EXPECT_EQ(e1.out, e2.out);
  const auto cost = count_flops_params(ExperimentConfig::load(dir / "c.json").model, 16, 16);
  EXPECT_NE(e1.out.find("\nparams " + std::to_string(cost.params) + "\n"), std::string::npos) << e1.out;
  EXPECT_EQ(run_cli("eval --checkpoint " + ckpt + " --pool test", dir).code, 2);

  const auto sweep = run_cli("prune-sweep --checkpoint " + ckpt + " --finetune-budget 0 --out " + (dir / "sweep").string(), dir);
  ASSERT_EQ(sweep.code, 0) << sweep.out;
  const auto rows = data_rows(read_file(dir / "sweep/prune_report.csv"));
  ASSERT_EQ(rows.size(), 4u);
  const auto at = e1.out.find("miou ") + 5;
  const std::string miou = e1.out.substr(at, e1.out.find('\n', at) - at);
  EXPECT_EQ(std::stod(rows[0].substr(rows[0].find(',') + 1)), std::stod(miou));
  for (const auto& r : rows) EXPECT_NE(r.find(",,"), std::string::npos) << r;
  fs::remove_all(dir);
}

TEST(Cli, EigenTraceSamplesEveryFifthEpoch) {
  const auto dir = scratch("eigen");
  auto j = nlohmann::json::parse(smoke_config(dir / "run", 30));
  j["curvature"] = {{"every_n_epochs", 5}, {"batches", 1}, {"batch_size", 2}, {"max_iters", 3}};
  j["train"]["steps_per_epoch"] = 1;
  write_file(dir / "c.json", j.dump());
  const auto r = run_cli("eigen-trace --config " + (dir / "c.json").string(), dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = data_rows(read_file(dir / "run/eigen.csv"));
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& row : rows) {
    const double lambda = std::stod(row.substr(row.find(',') + 1));
    EXPECT_TRUE(std::isfinite(lambda));
  }
  fs::remove_all(dir);
}

TEST(Cli, AblateRecordsEveryRun) {
  const auto dir = scratch("ablate");
  auto j = nlohmann::json::parse(smoke_config(dir / "run", 2));
  write_file(dir / "c.json", j.dump());
  const auto r = run_cli("ablate --config " + (dir / "c.json").string() + " --axis scaling-functions --seeds 0,1 --out " +
                             (dir / "abl").string(), dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = read_file(dir / "abl/ablation.csv");
  EXPECT_EQ(csv.rfind("# dnas 0.1.0", 0), 0u);
  std::size_t runs = 0;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) runs += line.rfind("run,", 0) == 0;
  EXPECT_EQ(runs, 4u);
  fs::remove_all(dir);
}
