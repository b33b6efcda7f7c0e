#include "dualroi/image.hpp"

#include "dualroi/errors.hpp"

namespace dualroi {

std::string to_string(Laterality l) { return l == Laterality::left ? "L" : "R"; }
std::string to_string(View v) { return v == View::cc ? "CC" : "MLO"; }

std::string to_string(SplitTag s) {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    case SplitTag::unassigned: break;
  }
  return "unassigned";
}

Laterality parse_laterality(const std::string& s) {
  if (s == "L") return Laterality::left;
  if (s == "R") return Laterality::right;
  throw ConfigError("unknown laterality '" + s + "'");
}

View parse_view(const std::string& s) {
  if (s == "CC") return View::cc;
  if (s == "MLO") return View::mlo;
  throw ConfigError("unknown view '" + s + "'");
}

SplitTag parse_split(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "val") return SplitTag::val;
  if (s == "test") return SplitTag::test;
  if (s == "unassigned") return SplitTag::unassigned;
  throw ConfigError("unknown split '" + s + "'");
}

std::string to_string(StructureRole r) {
  switch (r) {
    case StructureRole::lesion: return "lesion";
    case StructureRole::asymmetry_residual: return "asymmetry_residual";
    case StructureRole::distractor: break;
  }
  return "distractor";
}

StructureRole parse_role(const std::string& s) {
  if (s == "lesion") return StructureRole::lesion;
  if (s == "asymmetry_residual") return StructureRole::asymmetry_residual;
  if (s == "distractor") return StructureRole::distractor;
  throw ConfigError("unknown structure role '" + s + "'");
}

const Image* Exam::find(Laterality l, View v) const {
  for (const auto& im : views)
    if (im.laterality == l && im.view == v) return &im;
  return nullptr;
}

const Exam* StudyCase::exam_at(int timestamp) const {
  for (const auto& e : exams)
    if (e.timestamp == timestamp) return &e;
  return nullptr;
}

bool StudyCase::has_malignancy() const {
  for (const auto& im : current().views)
    if (!im.truth.empty()) return true;
  return false;
}

}  // namespace dualroi
