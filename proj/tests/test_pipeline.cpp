#include "dualroi/pipeline.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace dualroi;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<StudyCase> blank_cases(int n) {
  std::vector<StudyCase> cases(n);
  for (int i = 0; i < n; ++i) cases[i].case_id = i;
  return cases;
}

std::string scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dualroi_pipeline_" + name);
  fs::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("case split") {
  const auto c = split_counts(100, {0.65, 0.15, 0.25});
  CHECK(c == std::array<int, 3>{62, 14, 24});
  CHECK(split_counts(3, {0.65, 0.15, 0.25})[0] + split_counts(3, {0.65, 0.15, 0.25})[2] >= 1);
  CHECK_THROWS_AS(split_counts(2, {0.65, 0.15, 0.25}), ConfigError);

  auto a = blank_cases(100), b = blank_cases(100);
  split_cases(a, {0.65, 0.15, 0.25}, 9);
  split_cases(b, {0.65, 0.15, 0.25}, 9);
  std::map<SplitTag, int> count;
  for (int i = 0; i < 100; ++i) {
    CHECK(a[i].split == b[i].split);
    CHECK(a[i].split != SplitTag::unassigned);
    ++count[a[i].split];
  }
  CHECK(count[SplitTag::train] == 62);
  CHECK(count[SplitTag::val] == 14);
  CHECK(count[SplitTag::test] == 24);

  auto d = blank_cases(100);
  split_cases(d, {0.65, 0.15, 0.25}, 10);
  int moved = 0;
  for (int i = 0; i < 100; ++i) moved += a[i].split != d[i].split;
  CHECK(moved > 0);
}

TEST_CASE("balanced sampler audit over full epochs") {
  for (std::size_t n_neg : {1u, 15u, 16u, 17u, 1000u, 1013u}) {
    BalancedSampler s(n_neg, 7, 32, 3);
    CHECK(s.batches_per_epoch() == (n_neg + 15) / 16);
    for (int epoch = 0; epoch < 3; ++epoch) {
      std::vector<int> seen(n_neg, 0);
      for (std::size_t b = 0; b < s.batches_per_epoch(); ++b) {
        const auto batch = s.next();
        CHECK(batch.epoch == epoch);
        CHECK(batch.negatives.size() == batch.positives.size());
        CHECK(batch.negatives.size() <= 16);
        if (b + 1 < s.batches_per_epoch()) CHECK(batch.negatives.size() == 16);
        for (auto i : batch.negatives) ++seen[i];
        for (auto p : batch.positives) CHECK(p < 7);
      }
      for (int v : seen) CHECK(v == 1);
    }
  }
  CHECK_THROWS_AS(BalancedSampler(10, 0, 32, 1), TrainingError);
  CHECK_THROWS_AS(BalancedSampler(0, 10, 32, 1), TrainingError);
  CHECK_THROWS_AS(BalancedSampler(10, 10, 31, 1), ConfigError);
}

TEST_CASE("positive draws are uniform") {
  const std::size_t pool = 20;
  BalancedSampler s(5000, pool, 32, 11);
  std::vector<double> count(pool, 0.0);
  double draws = 0;
  for (int b = 0; b < 10000; ++b)
    for (auto p : s.next().positives) ++count[p], ++draws;
  const double p = 1.0 / pool, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (double c : count) CHECK(std::abs(c - mean) <= 3 * sd);
}

TEST_CASE("config round trip and validation") {
  RunConfig c = RunConfig::desk();
  nlohmann::json j = c;
  RunConfig back = RunConfig::smoke();
  merge_json(j, back);
  CHECK(nlohmann::json(back) == j);

  RunConfig m = RunConfig::desk();
  merge_json(nlohmann::json::parse(R"({"seed": 42, "train": {"epochs": 3}, "phantom": {"n_cases": 20}})"), m);
  CHECK(m.seed == 42);
  CHECK(m.train.epochs == 3);
  CHECK(m.phantom.n_cases == 20);
  CHECK(m.train.learning_rate == c.train.learning_rate);

  RunConfig u = RunConfig::desk();
  CHECK_THROWS_AS(merge_json(nlohmann::json::parse(R"({"train": {"epoch": 3}})"), u), ConfigError);
  CHECK_THROWS_AS(merge_json(nlohmann::json::parse(R"({"experiments": ["twostream_sideways"]})"), u), ConfigError);
  CHECK_THROWS_AS(merge_json(nlohmann::json::parse(R"({"train": {"batch_size": 7}})"), u), ConfigError);

  for (const char* n : {"baseline", "twostream_contralateral", "featgbt_contralateral", "twostream_prior_black",
                        "twostream_prior_copy", "featgbt_prior_copy"})
    CHECK(ExperimentSpec::parse(n).name() == n);
  CHECK_THROWS_AS(ExperimentSpec::parse("twostream_prior"), ConfigError);
}

TEST_CASE("stage errors carry the stage name") {
  RunConfig c = RunConfig::smoke();
  c.out_dir = scratch("empty");
  Workspace ws(c);
  try {
    run_stage("detect", [&] { stage_detect(ws); });
    FAIL("expected a StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "detect");
    CHECK(std::string(e.what()).rfind("[detect] ", 0) == 0);
  }
}

TEST_CASE("smoke run: artifacts, determinism and the test-split audit") {
  RunConfig c = RunConfig::smoke();
  c.seed = 5;
  std::vector<std::string> dirs{scratch("smoke_a"), scratch("smoke_b")};
  for (const auto& d : dirs) {
    c.out_dir = d;
    Workspace ws(c);
    run_all(ws);
  }
  const std::string& out = dirs[0];
  for (const char* f : {"resolved_config.json", "splits.json", "dataset/manifest.json", "detector/forest.rfst",
                        "detector/candidates.json", "mapped_candidates.json", "pairs.csv", "models/baseline.asym",
                        "models/twostream_contralateral.asym", "models/featgbt_contralateral.gbtm",
                        "features/contralateral_train.feat", "predictions/featgbt_contralateral_test.csv",
                        "scores/baseline.csv", "metrics.json", "eval/curves.json", "report/roc.svg",
                        "report/curves.csv", "report/summary.md"})
    CHECK_MESSAGE(fs::exists(fs::path(out) / f), f);

  CHECK(slurp(out + "/metrics.json") == slurp(dirs[1] + "/metrics.json"));
  CHECK(slurp(out + "/eval/curves.json") == slurp(dirs[1] + "/eval/curves.json"));

  // The resolved config reproduces the run's settings.
  const auto resolved = nlohmann::json::parse(slurp(out + "/resolved_config.json"));
  RunConfig again = RunConfig::desk();
  merge_json(resolved, again);
  CHECK(nlohmann::json(again) == resolved);

  // No test case appears in anything a model was fitted on.
  const auto splits = nlohmann::json::parse(slurp(out + "/splits.json")).at("cases");
  std::set<std::string> test_keys;
  for (const auto& [id, split] : splits.items())
    if (split == "test") {
      char buf[16];
      std::snprintf(buf, sizeof buf, "c%04d_", std::stoi(id));
      test_keys.insert(buf);
    }
  REQUIRE(!test_keys.empty());
  std::vector<fs::path> training_files{fs::path(out) / "detector/training_images.txt"};
  for (const auto& e : fs::directory_iterator(fs::path(out) / "models"))
    if (e.path().string().ends_with("_train_ids.txt")) training_files.push_back(e.path());
  for (const auto& e : fs::directory_iterator(fs::path(out) / "features"))
    if (e.path().string().ends_with("_train.csv")) training_files.push_back(e.path());
  CHECK(training_files.size() >= 6);
  for (const auto& f : training_files) {
    const std::string text = slurp(f.string());
    CHECK_MESSAGE(!text.empty(), f.string());
    for (const auto& key : test_keys) {
      const std::string where = f.string() + " " + key;
      CHECK_MESSAGE(text.find(key) == std::string::npos, where);
    }
  }
}
