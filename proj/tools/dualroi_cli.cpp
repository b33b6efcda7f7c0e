// Command-line driver for the experiment pipeline. Every subcommand reads the
// same configuration (desk preset, optionally overlaid by --config) and works
// on the artifacts under --out-dir.

#include "dualroi/pipeline.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <optional>

using namespace dualroi;

namespace {

struct Options {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string arch;
  std::string secondary;
  std::string imputation;
  int trials = 10;
};

RunConfig resolve(const Options& o) {
  RunConfig base = o.preset == "smoke" ? RunConfig::smoke() : RunConfig::desk();
  RunConfig cfg = o.config_path.empty() ? base : load_run_config(o.config_path, base);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  cfg.validate();
  return cfg;
}

// The experiment named by --arch/--secondary/--imputation.
ExperimentSpec chosen(const Options& o, Architecture fallback) {
  ExperimentSpec e;
  e.fusion.architecture = o.arch.empty() ? fallback : parse_architecture(o.arch);
  if (!o.secondary.empty()) e.fusion.secondary = parse_secondary(o.secondary);
  if (!o.imputation.empty()) e.fusion.imputation = parse_imputation(o.imputation);
  if (e.fusion.architecture == Architecture::baseline_single) e.fusion = FusionSpec{Architecture::baseline_single};
  // Names carry the imputation only for prior experiments; normalise the rest.
  return ExperimentSpec::parse(e.name());
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "JSON file overlaid on the preset")->check(CLI::ExistingFile);
  sub->add_option("--preset", o.preset, "Base settings")->check(CLI::IsMember({"desk", "smoke"}));
  sub->add_option("--seed", o.seed, "Master seed");
  sub->add_option("--out-dir", o.out_dir, "Artifact directory");
}

void add_experiment(CLI::App* sub, Options& o) {
  sub->add_option("--arch", o.arch)->check(CLI::IsMember({"baseline", "twostream", "featgbt"}));
  sub->add_option("--secondary", o.secondary)->check(CLI::IsMember({"contralateral", "prior"}));
  sub->add_option("--imputation", o.imputation)->check(CLI::IsMember({"black", "copy"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-view mammography candidate classification on synthetic phantoms"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    std::string name;
    std::string help;
    bool experiment;
  };
  const std::vector<Command> commands{
      {"generate", "Generate the phantom dataset and the case split", false},
      {"detect", "Train the pixel forest and detect candidates on current exams", false},
      {"map", "Map every candidate to its contralateral and prior counterparts", false},
      {"train", "Train the baseline or a two-stream network", true},
      {"extract-features", "Write FC1 features of primary and secondary patches", true},
      {"gbt", "Cross-validate and fit the boosted trees on extracted features", true},
      {"evaluate", "Score the test split and bootstrap the ROC metrics", false},
      {"report", "Render ROC curves and a summary table", false},
      {"run-all", "Every stage for the configured experiments", true},
      {"search", "Random search of learning rate, L2 and dropout on the validation split", true},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (c.experiment) add_experiment(sub, o);
    subs[c.name] = sub;
  }
  subs["search"]->add_option("--trials", o.trials, "Number of trials")->check(CLI::Range(1, 20));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "[cli] %s\n", e.what());
    return 2;
  }

  std::string stage = "config";
  try {
    const RunConfig cfg = resolve(o);
    Workspace ws(cfg);
    const std::string cmd = app.get_subcommands().front()->get_name();
    stage = cmd;
    if (cmd == "run-all") {
      if (!o.arch.empty()) {
        RunConfig narrowed = cfg;
        narrowed.experiments = {ExperimentSpec::parse("baseline")};
        const ExperimentSpec e = chosen(o, Architecture::baseline_single);
        if (e.name() != "baseline") narrowed.experiments.push_back(e);
        Workspace nws(narrowed);
        run_all(nws);
      } else {
        run_all(ws);
      }
      return 0;
    }
    run_stage("config", [&] { write_resolved_config(ws); });
    if (cmd == "generate") {
      run_stage(cmd, [&] { stage_generate(ws); });
    } else if (cmd == "detect") {
      run_stage(cmd, [&] { stage_detect(ws); });
    } else if (cmd == "map") {
      run_stage(cmd, [&] { stage_map(ws); });
    } else if (cmd == "train") {
      const ExperimentSpec e = chosen(o, Architecture::baseline_single);
      if (e.fusion.architecture == Architecture::feature_concat_gbt)
        throw StageError(cmd, "featgbt has no network of its own; train the baseline, then run extract-features and gbt");
      run_stage(cmd, [&] { stage_train(ws, e); });
    } else if (cmd == "extract-features") {
      const ExperimentSpec e = chosen(o, Architecture::feature_concat_gbt);
      run_stage(cmd, [&] { stage_extract_features(ws, e.fusion.secondary, e.fusion.imputation); });
    } else if (cmd == "gbt") {
      const ExperimentSpec e = chosen(o, Architecture::feature_concat_gbt);
      run_stage(cmd, [&] { stage_gbt(ws, e); });
    } else if (cmd == "evaluate") {
      run_stage(cmd, [&] { stage_evaluate(ws); });
    } else if (cmd == "report") {
      run_stage(cmd, [&] { stage_report(ws); });
    } else if (cmd == "search") {
      const ExperimentSpec e = chosen(o, Architecture::baseline_single);
      run_stage(cmd, [&] {
        const auto r = random_search(ws, e, o.trials, cfg.seed);
        nlohmann::json trials = nlohmann::json::array();
        for (const auto& [tc, auc] : r.trials)
          trials.push_back({{"learning_rate", tc.learning_rate}, {"l2", tc.l2}, {"dropout", tc.dropout},
                            {"validation_auc", auc}});
        std::printf("%s\n", nlohmann::json{{"experiment", e.name()}, {"trials", trials},
                                           {"best_validation_auc", r.best_validation_auc}}
                                .dump(2)
                                .c_str());
      });
    }
    return 0;
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: [%s] %s\n", stage.c_str(), e.what());
    return 1;
  }
}
