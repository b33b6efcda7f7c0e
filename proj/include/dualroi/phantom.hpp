#pragma once

#include "dualroi/image.hpp"
#include "dualroi/rng.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dualroi {

/// Closed interval used for uniform draws.
struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double sample(Rng& rng) const;
  double density(double x) const;
};

/// Appearance distribution of one structure class. Radii are physical.
struct AppearanceModel {
  Range radius_mm;
  Range contrast;  // peak density added, log-attenuation units
  double spiculated_probability = 0.0;
};

struct GenConfig {
  int n_cases = 100;
  int image_size = 256;
  double spacing_microns = 625.0;
  double lesion_prevalence = 0.5;       // fraction of cases with one malignant lesion
  double missing_prior_fraction = 0.3;  // cases with no prior exam
  double second_prior_fraction = 0.3;   // cases with two priors, among those with one
  double skip_fraction = 0.2;           // chance a screening round was skipped
  int min_distractors = 3;
  int max_distractors = 8;
  double unpaired_distractor_fraction = 0.1;
  double asymmetry_strength = 0.9;
  double growth_rate = 0.9;
  AppearanceModel malignant{{3.0, 6.0}, {0.10, 0.22}, 0.4};
  AppearanceModel distractor{{2.5, 6.0}, {0.08, 0.22}, 0.15};
  Range counterpart_ratio{0.85, 1.15};  // contrast jitter of a paired counterpart
  double registration_noise_px = 1.0;
  double texture_fine_std = 0.025;
  double texture_coarse_std = 0.03;
  double texture_fine_sigma_mm = 1.0;
  double texture_coarse_sigma_mm = 3.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// Generates `config.n_cases` cases. Case i depends only on (seed, i).
std::vector<StudyCase> generate_dataset(const GenConfig& config, std::uint64_t seed);
StudyCase generate_case(const GenConfig& config, std::uint64_t seed, int case_id);

/// log(1 + raw) rescaled so that raw 65535 maps to 65535.
Image log_transform(const Image& raw);
/// The unscaled transform, log(1 + raw), as doubles.
RasterD log_attenuation(const Raster16& raw);

/// Writes PGMs plus manifest.json under `dir`.
void save_dataset(const std::vector<StudyCase>& cases, const std::string& dir);
/// Reads a dataset written by save_dataset. True masks are not stored.
std::vector<StudyCase> load_dataset(const std::string& dir);

// ---- latent model shared with the Bayes oracle ----

/// The generator's latent description of one candidate structure.
struct LatentStructure {
  bool malignant = false;
  double radius_mm = 0.0;
  double contrast = 0.0;
  bool spiculated = false;
  /// Contrast of the contralateral counterpart divided by own contrast;
  /// 0 when there is none.
  double contralateral_ratio = 0.0;
};

LatentStructure sample_latent(const GenConfig& config, bool malignant, Rng& rng);

/// Posterior P(malignant | observation) under equal class priors, from the
/// generator's own densities. `use_pair` adds the contralateral ratio.
double oracle_posterior(const GenConfig& config, const LatentStructure& s, bool use_pair);

}  // namespace dualroi
