#pragma once

#include "dualroi/forest.hpp"
#include "dualroi/image.hpp"
#include "dualroi/rng.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dualroi {

// ---- feature maps ----

enum FeaturePlane : int { blob = 0, convergence = 1, spiculation_resultant = 2, spiculation_excess = 3, scale_index = 4 };
inline constexpr int kFeatureCount = 5;

struct FeatureOptions {
  std::vector<double> scales_mm{0.4, 0.8, 1.6, 3.2};
  double spiculation_radius_mm = 6.0;  // outer radius of the orientation disc
  double convergence_radius_factor = 2.0;  // disc radius in units of the best scale
};

struct FeatureStack {
  std::array<RasterD, kFeatureCount> planes;
  std::vector<double> scales;  // px

  int rows() const { return static_cast<int>(planes[0].rows()); }
  int cols() const { return static_cast<int>(planes[0].cols()); }
  std::array<double, kFeatureCount> at(int row, int col) const;
};

/// `image` holds log-attenuation values; pixels <= 0 are background and get
/// all-zero features. Scales are in pixels.
FeatureStack compute_features(const RasterD& image, std::span<const double> scales_px,
                              double spiculation_radius_px, double convergence_radius_factor = 2.0);
FeatureStack compute_features(const Image& log_image, const FeatureOptions& options);

/// Physical lengths to pixels for the image spacing.
double mm_to_px(double mm, double spacing_microns);

/// Log-attenuation units from a log-transformed 16-bit image.
RasterD log_units(const Raster16& log_pixels);

// ---- candidates ----

enum class CandidateLabel { normal, malignant };
enum class SecondaryKind { contralateral, prior };
std::string to_string(SecondaryKind k);
SecondaryKind parse_secondary(const std::string& s);

struct ImageRef {
  int case_id = 0;
  int timestamp = 0;
  Laterality laterality = Laterality::left;
  View view = View::cc;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

struct Candidate {
  ImageRef image;
  Pixel center;
  double score = 0.0;
  CandidateLabel label = CandidateLabel::normal;
  std::map<SecondaryKind, std::vector<Pixel>> counterpart_centers;
};

/// Strict local maxima (8-neighbourhood) >= threshold, greedily kept in
/// descending score order when farther than `radius_px` from every kept one.
/// Ties in score are ordered by (row, col).
std::vector<Candidate> nonmax_suppress(const RasterD& likelihood, double radius_px, double threshold);

/// Malignant iff within `hit_radius_cm` of a malignant truth centre.
CandidateLabel label_for(const Image& image, Pixel center, double hit_radius_cm = 0.7);

// ---- pixel classifier ----

struct PixelSample {
  std::array<double, kFeatureCount> features;
  int label = 0;
};

/// Positive pixels lie within `positive_fraction` of a lesion radius of a
/// malignant centre; negatives are drawn from the breast (pixels > 0)
/// outside the 0.7 cm hit radius.
std::vector<PixelSample> sample_pixels(const FeatureStack& stack, const RasterD& image, const Image& truth,
                                       int negatives, Rng& rng, double positive_fraction = 1.0);

RandomForest train_pixel_classifier(std::span<const PixelSample> samples, const ForestParams& params,
                                    std::uint64_t seed);

/// Per-pixel malignancy likelihood; background pixels get 0.
RasterD likelihood_map(const RandomForest& forest, const FeatureStack& stack, const RasterD& image);

// ---- patches and augmentation ----

/// round(side_cm * 10000 / spacing_microns).
int patch_side_px(double side_cm, double spacing_microns);

/// Square patch centred on `center` (top-left at center - side/2); area
/// outside the image is zero.
RasterD extract_patch(const RasterD& image, Pixel center, int side_px);

enum class SampleKind { negative, positive };
enum class VariantKind { original, translation, scaling };

struct PatchSpec {
  VariantKind variant = VariantKind::original;
  Point shift;          // px, applied to the crop centre
  double scale_row = 1.0, scale_col = 1.0;  // crop side / patch side
  int rotation = 0;     // counter-clockwise quarter turns
};

struct PatchMeta {
  Pixel center;
  double lesion_radius_px = 0.0;  // bounding box half-side for positives
  double spacing_microns = 200.0;
  // Overrides for the per-axis translation range and the corner
  // perturbation range; negative means the physical defaults (0.5 cm and
  // 0.6 cm).
  double translation_px = -1.0;
  double corner_px = -1.0;
};

/// Lazily enumerated augmentation specs: 132 for positives, 4 for negatives.
class AugmentationPlan {
 public:
  static constexpr int kTranslations = 16;
  static constexpr int kScalings = 16;
  static constexpr int kRotations = 4;

  AugmentationPlan(const PatchMeta& meta, SampleKind kind, std::uint64_t seed);
  int size() const;
  PatchSpec spec(int i) const;
  const PatchMeta& meta() const { return meta_; }

  /// Per-axis translation range and corner perturbation range in pixels.
  double translation_range_px() const;
  double corner_range_px() const;

 private:
  PatchMeta meta_;
  SampleKind kind_;
  std::uint64_t seed_;
};

std::vector<PatchSpec> augment(const PatchMeta& meta, SampleKind kind, std::uint64_t seed);

/// Renders one spec: crops around centre + shift with the scaled side,
/// resamples to side_px and rotates.
RasterD materialize(const RasterD& image, const PatchMeta& meta, const PatchSpec& spec, int side_px);

}  // namespace dualroi
