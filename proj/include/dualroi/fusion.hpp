#pragma once

#include "dualroi/detector.hpp"
#include "dualroi/network.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dualroi {

enum class Architecture { baseline_single, twostream_shared, feature_concat_gbt };
enum class ImputationStrategy { black, copy_current };
enum class ImputationUsed { none, black, copy_current, skipped_round_fallback };

std::string to_string(Architecture a);
std::string to_string(ImputationStrategy s);
std::string to_string(ImputationUsed u);
Architecture parse_architecture(const std::string& s);  // baseline | twostream | featgbt
ImputationStrategy parse_imputation(const std::string& s);  // black | copy

struct FusionSpec {
  Architecture architecture = Architecture::twostream_shared;
  SecondaryKind secondary = SecondaryKind::contralateral;
  ImputationStrategy imputation = ImputationStrategy::black;
};

/// Maps log-attenuation patch values to network input:
/// clamp(scale * (x - offset), -clip, clip).
struct PatchNormalization {
  double offset = 7.7;
  double scale = 8.0;
  double clip = 3.0;

  Tensor apply(const RasterD& patch) const;
};

struct PatchPair {
  Tensor primary;
  Tensor secondary;
  SecondaryKind secondary_kind = SecondaryKind::contralateral;
  ImputationUsed imputation_used = ImputationUsed::none;
  int label = 0;
};

/// The image a primary image is compared with. Contralateral: same exam and
/// view, other breast. Prior: same breast and view from the previous round,
/// or the round before that when the previous one was skipped.
struct SecondarySource {
  const Image* image = nullptr;  // null when nothing is available
  ImputationUsed used = ImputationUsed::none;
};

SecondarySource find_secondary(const StudyCase& sc, int exam_index, Laterality lat, View view, SecondaryKind kind);

struct SecondaryPatch {
  RasterD patch;
  ImputationUsed used = ImputationUsed::none;
};

/// Resolves the secondary patch for the primary image of exam `exam_index`.
/// `extract` crops the mapped location from a real counterpart image; when
/// none exists the strategy applies: black gives an all-zero patch,
/// copy_current returns the primary patch itself.
SecondaryPatch impute_secondary(const StudyCase& sc, int exam_index, const Image& primary,
                                const RasterD& primary_patch, SecondaryKind kind, ImputationStrategy strategy,
                                const std::function<RasterD(const Image&)>& extract);

/// P(malignant) from a two-stream network; the primary patch feeds stream 1.
double forward_twostream(const NetworkSpec& spec, const NetworkState& state, const PatchPair& pair);
double forward_single(const NetworkSpec& spec, const NetworkState& state, const Tensor& patch);

/// Post-activation output of the first fully connected layer, dropout off.
std::vector<double> extract_fc1(const NetworkSpec& spec, const NetworkState& state, const Tensor& patch);

/// Binary feature file: "FEAT", u32 version, u64 rows, u32 width, then f64 rows.
void write_features(const std::string& path, const RowMatrix& rows);
RowMatrix read_features(const std::string& path);

}  // namespace dualroi
