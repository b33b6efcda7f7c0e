#pragma once

#include "dualroi/raster.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dualroi {

enum class Laterality { left, right };
enum class View { cc, mlo };
enum class SplitTag { train, val, test, unassigned };

std::string to_string(Laterality l);
std::string to_string(View v);
std::string to_string(SplitTag s);
Laterality parse_laterality(const std::string& s);
View parse_view(const std::string& s);
SplitTag parse_split(const std::string& s);

inline Laterality opposite(Laterality l) {
  return l == Laterality::left ? Laterality::right : Laterality::left;
}

/// What a rendered density stands for.
enum class StructureRole { lesion, asymmetry_residual, distractor };
std::string to_string(StructureRole r);
StructureRole parse_role(const std::string& s);

/// A rendered density. `id` links the same physical structure across the
/// images of one case.
struct LesionTruth {
  int id = 0;
  Point center;
  double radius_px = 0.0;
  bool malignant = false;
  double asymmetry_strength = 0.0;
  double growth_rate = 0.0;
  double contrast = 0.0;
  bool spiculated = false;
  StructureRole role = StructureRole::distractor;
};

/// Generator ground truth for landmark extraction.
struct TrueLandmarks {
  double p1 = 0.0;  // row of the breast front point
  double p2 = 0.0;  // column on the reference line
  Point front;      // the breast front point itself
  bool has_pectoral = false;
  double rho = 0.0;        // pectoral line: col*cos(theta) + row*sin(theta) = rho
  double theta_deg = 0.0;
};

/// One view. Images are stored in canonical orientation: chest wall at
/// column 0, nipple direction towards larger columns, for both lateralities.
struct Image {
  Raster16 pixels;
  double spacing_microns = 200.0;
  Laterality laterality = Laterality::left;
  View view = View::cc;
  int timestamp = 0;
  std::vector<LesionTruth> truth;       // malignant lesions only
  std::vector<LesionTruth> structures;  // every rendered density
  Mask true_mask;
  TrueLandmarks true_landmarks;

  int rows() const { return static_cast<int>(pixels.rows()); }
  int cols() const { return static_cast<int>(pixels.cols()); }
  /// Pixels per centimetre.
  double px_per_cm() const { return 10000.0 / spacing_microns; }
};

struct Exam {
  int timestamp = 0;  // screening round
  std::vector<Image> views;

  const Image* find(Laterality l, View v) const;
};

struct StudyCase {
  int case_id = 0;
  std::vector<Exam> exams;  // oldest first
  SplitTag split = SplitTag::unassigned;

  const Exam& current() const { return exams.back(); }
  /// Exam at the given round, if present.
  const Exam* exam_at(int timestamp) const;
  bool has_malignancy() const;
};

}  // namespace dualroi
