#pragma once

#include "dualroi/detector.hpp"
#include "dualroi/errors.hpp"
#include "dualroi/eval.hpp"
#include "dualroi/fusion.hpp"
#include "dualroi/gbt.hpp"
#include "dualroi/geometry.hpp"
#include "dualroi/network.hpp"
#include "dualroi/phantom.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace dualroi {

/// Error raised by a pipeline stage; `stage()` names it for diagnostics.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DetectorConfig {
  FeatureOptions features;
  ForestParams forest{32, 12, 5, 0, true};
  int pixel_negatives_per_image = 300;
  double threshold = 0.5;
  double nms_radius_cm = 0.5;
  int max_candidates = 25;  // per image, highest scores kept; 0 keeps all
  double hit_radius_cm = 0.7;
};

struct MappingConfig {
  int jitter_samples = 10;
  double jitter_sigma_mm = 2.0;
};

struct TrainConfig {
  double learning_rate = 0.003;  // 0.01 diverges from the MSRA start
  double lr_decay = 1.0;  // multiplied into the rate after every epoch
  double momentum = 0.9;
  double l2 = 1e-4;
  double dropout = 0.5;
  int batch_size = 32;
  int epochs = 30;
  bool keep_best_epoch = true;  // by validation AUC
  double patch_cm = 5.0;
  std::vector<int> conv_kernels{16, 16, 32, 32, 64};
  int fc_units = 512;
  PatchNormalization normalization;
};

struct GbtStageConfig {
  GbtParams params;
  std::vector<GridPoint> grid = default_grid();
  int folds = 16;
  int positive_rotations = 4;  // rotated copies of every training positive
  double negatives_per_positive = 0.0;  // cap on the negative count; 0 keeps all
};

struct EvalConfig {
  int n_boot = 5000;
  ResampleUnit unit = ResampleUnit::case_level;
  double pauc_lo = 0.0;
  double pauc_hi = 0.2;
};

struct ExperimentSpec {
  FusionSpec fusion;
  std::string name() const;
  static ExperimentSpec parse(const std::string& name);
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  GenConfig phantom;
  std::array<double, 3> split_fractions{0.65, 0.15, 0.25};
  DetectorConfig detector;
  MappingConfig mapping;
  TrainConfig train;
  GbtStageConfig gbt;
  EvalConfig eval;
  std::vector<ExperimentSpec> experiments;

  void validate() const;
  /// Settings sized for one CPU within the acceptance time budget.
  static RunConfig desk();
  /// Tiny settings for liveness checks.
  static RunConfig smoke();
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep the defaults of `c`; unknown keys and invalid results are
/// rejected with ConfigError, leaving `c` untouched.
void merge_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::string& path, const RunConfig& base = RunConfig::desk());

// ---- splitting and sampling ----

/// Case counts after normalising the fractions to sum 1, by largest remainder.
std::array<int, 3> split_counts(int n_cases, std::array<double, 3> fractions);
/// Shuffles case order with `seed` and tags train/val/test by split_counts.
void split_cases(std::vector<StudyCase>& cases, std::array<double, 3> fractions, std::uint64_t seed);

/// Minibatches of half negatives, taken in order from a per-epoch shuffle of
/// the full negative set, and half positives drawn uniformly from the pool.
/// The last batch of an epoch is shorter when the negatives run out, so
/// every batch stays exactly balanced.
class BalancedSampler {
 public:
  BalancedSampler(std::size_t negatives, std::size_t positives, int batch_size, std::uint64_t seed);

  struct Batch {
    std::vector<std::size_t> negatives;
    std::vector<std::size_t> positives;
    int epoch = 0;
  };
  Batch next();

  int epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  void reshuffle();

  std::size_t n_neg_, n_pos_;
  std::size_t half_;
  std::uint64_t seed_;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  Rng pos_rng_;
};

// ---- candidates and mapping ----

struct CounterpartLink {
  bool available = false;
  ImageRef image;
  ImputationUsed used = ImputationUsed::none;  // none or skipped_round_fallback when available
  MappedLocation location;
};

struct CandidateRecord {
  std::string id;
  Candidate candidate;
  SplitTag split = SplitTag::unassigned;
  double lesion_radius_px = 0.0;  // nearest malignant lesion, positives only
  std::map<SecondaryKind, CounterpartLink> links;

  int label() const { return candidate.label == CandidateLabel::malignant ? 1 : 0; }
};

void to_json(nlohmann::json& j, const CandidateRecord& r);
void from_json(const nlohmann::json& j, CandidateRecord& r);

/// Dataset plus per-image caches shared by the stages of one process.
class Workspace {
 public:
  explicit Workspace(RunConfig config);

  const RunConfig& config() const { return config_; }
  std::string path(const std::string& relative) const;

  std::vector<StudyCase>& cases();
  const StudyCase& case_by_id(int id);
  const Image& image(const ImageRef& ref);
  /// Log-transformed pixels in log-attenuation units.
  const RasterD& log_image(const ImageRef& ref);
  const Landmarks& landmarks(const ImageRef& ref);

  std::vector<CandidateRecord>& candidates();  // loads candidates.json, mapped when available
  /// Drops cached dataset and candidates so the next access rereads the files.
  void invalidate();

 private:
  RunConfig config_;
  std::vector<StudyCase> cases_;
  bool loaded_ = false;
  std::map<int, std::size_t> case_index_;
  std::map<std::string, RasterD> log_cache_;
  std::map<std::string, Landmarks> landmark_cache_;
  std::vector<CandidateRecord> candidates_;
  bool candidates_loaded_ = false;
};

std::string image_key(const ImageRef& ref);
std::string candidate_id(const ImageRef& ref, int index);

/// Network input pair for one candidate. `spec` is applied to the primary
/// crop and, with the same shift, scaling and rotation, to the secondary
/// crop around `secondary_center` (or the mapped centre when unset).
PatchPair build_pair(Workspace& ws, const CandidateRecord& rec, const PatchSpec& spec, SecondaryKind kind,
                     ImputationStrategy strategy, const Pixel* secondary_center = nullptr);

NetworkSpec network_spec(const TrainConfig& tc, int streams, double spacing_microns);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double validation_auc = -1.0;  // -1 when not evaluated
  double learning_rate = 0.0;
};

struct TrainedNetwork {
  NetworkSpec spec;
  NetworkState state;
  std::vector<EpochLog> log;
  int selected_epoch = 0;
};

/// Balanced minibatch training of the baseline or two-stream network on the
/// train split; validation AUC per epoch selects the returned state when
/// `keep_best_epoch` is set.
TrainedNetwork train_network(Workspace& ws, const ExperimentSpec& exp, const TrainConfig& tc, std::uint64_t seed);

/// Posterior per candidate of the given split, in candidate order.
std::vector<double> score_candidates(Workspace& ws, const ExperimentSpec& exp, const NetworkSpec& spec,
                                     const NetworkState& state, SplitTag split);

struct RandomSearchResult {
  TrainConfig best;
  double best_validation_auc = -1.0;
  std::vector<std::pair<TrainConfig, double>> trials;
};
/// Log-uniform learning rate and L2, uniform dropout, scored by validation AUC.
RandomSearchResult random_search(Workspace& ws, const ExperimentSpec& exp, int trials, std::uint64_t seed);

// ---- stages ----

void stage_generate(Workspace& ws);
void stage_detect(Workspace& ws);
void stage_map(Workspace& ws);
void stage_train(Workspace& ws, const ExperimentSpec& exp);
void stage_extract_features(Workspace& ws, SecondaryKind kind, ImputationStrategy strategy);
void stage_gbt(Workspace& ws, const ExperimentSpec& exp);
void stage_evaluate(Workspace& ws);
void stage_report(Workspace& ws);

/// Every stage in order for all configured experiments. Stage failures are
/// rethrown as StageError; artifacts written so far stay on disk.
void run_all(Workspace& ws);

/// Writes resolved_config.json with every default filled in.
void write_resolved_config(Workspace& ws);

/// Runs `body` and rewraps library errors as StageError(stage, ...).
template <class F>
void run_stage(const std::string& stage, F&& body) {
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace dualroi
