#include "dualroi/fusion.hpp"

#include "dualroi/errors.hpp"
#include "binio.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>

namespace dualroi {

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::baseline_single: return "baseline";
    case Architecture::twostream_shared: return "twostream";
    case Architecture::feature_concat_gbt: break;
  }
  return "featgbt";
}

std::string to_string(ImputationStrategy s) { return s == ImputationStrategy::black ? "black" : "copy"; }

std::string to_string(ImputationUsed u) {
  switch (u) {
    case ImputationUsed::none: return "none";
    case ImputationUsed::black: return "black";
    case ImputationUsed::copy_current: return "copy_current";
    case ImputationUsed::skipped_round_fallback: break;
  }
  return "skipped_round_fallback";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "baseline") return Architecture::baseline_single;
  if (s == "twostream") return Architecture::twostream_shared;
  if (s == "featgbt") return Architecture::feature_concat_gbt;
  throw ConfigError("unknown architecture '" + s + "'");
}

ImputationStrategy parse_imputation(const std::string& s) {
  if (s == "black") return ImputationStrategy::black;
  if (s == "copy" || s == "copy_current") return ImputationStrategy::copy_current;
  throw ConfigError("unknown imputation '" + s + "'");
}

Tensor PatchNormalization::apply(const RasterD& patch) const {
  Tensor t({1, static_cast<std::size_t>(patch.rows()), static_cast<std::size_t>(patch.cols())});
  for (Eigen::Index i = 0; i < patch.size(); ++i)
    t.data[i] = std::clamp(scale * (patch.data()[i] - offset), -clip, clip);
  return t;
}

SecondarySource find_secondary(const StudyCase& sc, int exam_index, Laterality lat, View view, SecondaryKind kind) {
  if (exam_index < 0 || exam_index >= static_cast<int>(sc.exams.size())) throw ConfigError("exam index out of range");
  const Exam& exam = sc.exams[exam_index];
  if (kind == SecondaryKind::contralateral) return {exam.find(opposite(lat), view), ImputationUsed::none};
  if (const Exam* prev = sc.exam_at(exam.timestamp - 1))
    if (const Image* im = prev->find(lat, view)) return {im, ImputationUsed::none};
  if (const Exam* prev2 = sc.exam_at(exam.timestamp - 2))
    if (const Image* im = prev2->find(lat, view)) return {im, ImputationUsed::skipped_round_fallback};
  return {};
}

SecondaryPatch impute_secondary(const StudyCase& sc, int exam_index, const Image& primary,
                                const RasterD& primary_patch, SecondaryKind kind, ImputationStrategy strategy,
                                const std::function<RasterD(const Image&)>& extract) {
  const SecondarySource src = find_secondary(sc, exam_index, primary.laterality, primary.view, kind);
  if (src.image) return {extract(*src.image), src.used};
  if (strategy == ImputationStrategy::black)
    return {RasterD::Zero(primary_patch.rows(), primary_patch.cols()), ImputationUsed::black};
  return {primary_patch, ImputationUsed::copy_current};
}

double forward_twostream(const NetworkSpec& spec, const NetworkState& state, const PatchPair& pair) {
  if (spec.streams != 2) throw ConfigError("forward_twostream needs a two-stream spec");
  if (pair.primary.shape != pair.secondary.shape) throw DimensionError("stream patches differ in shape");
  const Tensor inputs[2] = {pair.primary, pair.secondary};
  return forward(spec, state, inputs).posterior();
}

double forward_single(const NetworkSpec& spec, const NetworkState& state, const Tensor& patch) {
  if (spec.streams != 1) throw ConfigError("forward_single needs a single-stream spec");
  return forward(spec, state, std::span<const Tensor>(&patch, 1)).posterior();
}

std::vector<double> extract_fc1(const NetworkSpec& spec, const NetworkState& state, const Tensor& patch) {
  if (spec.streams != 1) throw ConfigError("feature extraction needs the single-stream network");
  check_compatible(spec, state);
  const NetworkTrace tr = forward(spec, state, std::span<const Tensor>(&patch, 1));
  const Tensor& v = tr.tape.value(tr.fc1);
  return v.data;
}

namespace {

using binio::put;

template <class T>
T get(std::istream& in) {
  return binio::get<T>(in, "feature file");
}

}  // namespace

void write_features(const std::string& path, const RowMatrix& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("FEAT", 4);
  put<std::uint32_t>(out, 1);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(rows.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(rows.cols()));
  out.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path);
}

RowMatrix read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "FEAT") throw IoError(path + ": not a feature file");
  if (get<std::uint32_t>(in) != 1) throw IoError(path + ": unsupported version");
  const auto n = get<std::uint64_t>(in);
  const auto w = get<std::uint32_t>(in);
  RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(w));
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw IoError(path + ": truncated");
  return m;
}

}  // namespace dualroi
