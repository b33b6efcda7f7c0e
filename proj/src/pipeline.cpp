#include "dualroi/pipeline.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace dualroi {

// ---------------------------------------------------------------------------
// experiment names

std::string ExperimentSpec::name() const {
  switch (fusion.architecture) {
    case Architecture::baseline_single: return "baseline";
    case Architecture::twostream_shared:
    case Architecture::feature_concat_gbt: break;
  }
  std::string n = fusion.architecture == Architecture::twostream_shared ? "twostream_" : "featgbt_";
  n += to_string(fusion.secondary);
  if (fusion.secondary == SecondaryKind::prior) n += "_" + to_string(fusion.imputation);
  return n;
}

ExperimentSpec ExperimentSpec::parse(const std::string& name) {
  ExperimentSpec e;
  if (name == "baseline") {
    e.fusion.architecture = Architecture::baseline_single;
    return e;
  }
  const auto a = name.find('_');
  if (a == std::string::npos) throw ConfigError("unknown experiment '" + name + "'");
  e.fusion.architecture = parse_architecture(name.substr(0, a));
  if (e.fusion.architecture == Architecture::baseline_single) throw ConfigError("unknown experiment '" + name + "'");
  std::string rest = name.substr(a + 1);
  const auto b = rest.find('_');
  e.fusion.secondary = parse_secondary(rest.substr(0, b));
  if (e.fusion.secondary == SecondaryKind::prior) {
    if (b == std::string::npos) throw ConfigError("experiment '" + name + "' needs an imputation suffix");
    e.fusion.imputation = parse_imputation(rest.substr(b + 1));
  } else if (b != std::string::npos) {
    throw ConfigError("contralateral experiments take no imputation suffix: '" + name + "'");
  }
  return e;
}

// ---------------------------------------------------------------------------
// configuration

void RunConfig::validate() const {
  phantom.validate();
  double sum = 0.0;
  for (double f : split_fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    sum += f;
  }
  if (!(sum > 0.0)) throw ConfigError("split fractions must not all be zero");
  detector.forest.validate();
  if (detector.threshold < 0.0 || detector.threshold > 1.0) throw ConfigError("detector threshold outside [0, 1]");
  if (!(detector.nms_radius_cm > 0.0)) throw ConfigError("nms radius must be positive");
  if (detector.max_candidates < 0) throw ConfigError("max_candidates must be non-negative");
  if (detector.pixel_negatives_per_image < 1) throw ConfigError("pixel_negatives_per_image must be positive");
  if (mapping.jitter_samples < 0 || !(mapping.jitter_sigma_mm >= 0.0)) throw ConfigError("invalid jitter settings");
  if (train.batch_size < 2 || train.batch_size % 2) throw ConfigError("batch size must be even and at least 2");
  if (train.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(train.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(train.lr_decay > 0.0 && train.lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(train.dropout >= 0.0 && train.dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(train.l2 >= 0.0)) throw ConfigError("l2 must be non-negative");
  if (!(train.normalization.scale > 0.0 && train.normalization.clip > 0.0))
    throw ConfigError("normalization scale and clip must be positive");
  network_spec(train, 1, phantom.spacing_microns).validate();
  gbt.params.validate();
  if (gbt.grid.empty()) throw ConfigError("gbt grid is empty");
  if (gbt.folds < 2) throw ConfigError("gbt folds must be at least 2");
  if (gbt.positive_rotations < 1 || gbt.positive_rotations > 4) throw ConfigError("positive_rotations must be 1..4");
  if (!(gbt.negatives_per_positive >= 0.0)) throw ConfigError("negatives_per_positive must be non-negative");
  if (eval.n_boot < 1) throw ConfigError("n_boot must be at least 1");
  if (!(eval.pauc_lo >= 0.0 && eval.pauc_hi <= 1.0 && eval.pauc_lo < eval.pauc_hi))
    throw ConfigError("pauc interval must satisfy 0 <= lo < hi <= 1");
  if (out_dir.empty()) throw ConfigError("out_dir is empty");
  std::vector<std::string> names;
  for (const auto& e : experiments) names.push_back(e.name());
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) throw ConfigError("duplicate experiment");
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.train.epochs = 3;
  c.experiments = {ExperimentSpec::parse("baseline"), ExperimentSpec::parse("twostream_contralateral"),
                   ExperimentSpec::parse("featgbt_contralateral"), ExperimentSpec::parse("twostream_prior_black"),
                   ExperimentSpec::parse("twostream_prior_copy")};
  c.gbt.params.rounds = 60;
  c.gbt.grid = {{0.1, 2}, {0.3, 2}, {0.1, 3}, {0.1, 4}};
  c.gbt.positive_rotations = 2;
  c.gbt.negatives_per_positive = 3.0;
  return c;
}

RunConfig RunConfig::smoke() {
  RunConfig c = desk();
  c.phantom.n_cases = 16;
  c.phantom.lesion_prevalence = 0.9;  // keeps malignant candidates in every split
  c.detector.forest.trees = 8;
  c.detector.pixel_negatives_per_image = 100;
  c.detector.max_candidates = 10;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.train.conv_kernels = {4, 4, 8, 8, 8};
  c.train.fc_units = 16;
  c.gbt.params.rounds = 5;
  c.gbt.grid = {{0.3, 2}, {0.3, 3}};
  c.gbt.folds = 2;
  c.gbt.negatives_per_positive = 0.0;
  c.eval.n_boot = 50;
  return c;
}

void to_json(json& j, const RunConfig& c) {
  json phantom;
  to_json(phantom, c.phantom);
  json grid = json::array();
  for (const auto& g : c.gbt.grid) grid.push_back({{"shrinkage", g.shrinkage}, {"max_depth", g.max_depth}});
  json experiments = json::array();
  for (const auto& e : c.experiments) experiments.push_back(e.name());
  const auto& d = c.detector;
  const auto& t = c.train;
  const auto& g = c.gbt;
  j = json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"phantom", phantom},
      {"split_fractions", c.split_fractions},
      {"detector",
       {{"scales_mm", d.features.scales_mm},
        {"spiculation_radius_mm", d.features.spiculation_radius_mm},
        {"convergence_radius_factor", d.features.convergence_radius_factor},
        {"forest",
         {{"trees", d.forest.trees},
          {"max_depth", d.forest.max_depth},
          {"min_samples_leaf", d.forest.min_samples_leaf},
          {"max_features", d.forest.max_features},
          {"bootstrap", d.forest.bootstrap}}},
        {"pixel_negatives_per_image", d.pixel_negatives_per_image},
        {"threshold", d.threshold},
        {"nms_radius_cm", d.nms_radius_cm},
        {"max_candidates", d.max_candidates},
        {"hit_radius_cm", d.hit_radius_cm}}},
      {"mapping", {{"jitter_samples", c.mapping.jitter_samples}, {"jitter_sigma_mm", c.mapping.jitter_sigma_mm}}},
      {"train",
       {{"learning_rate", t.learning_rate},
        {"lr_decay", t.lr_decay},
        {"momentum", t.momentum},
        {"l2", t.l2},
        {"dropout", t.dropout},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"keep_best_epoch", t.keep_best_epoch},
        {"patch_cm", t.patch_cm},
        {"conv_kernels", t.conv_kernels},
        {"fc_units", t.fc_units},
        {"normalization",
         {{"offset", t.normalization.offset}, {"scale", t.normalization.scale}, {"clip", t.normalization.clip}}}}},
      {"gbt",
       {{"rounds", g.params.rounds},
        {"shrinkage", g.params.shrinkage},
        {"max_depth", g.params.max_depth},
        {"lambda", g.params.lambda},
        {"min_child_weight", g.params.min_child_weight},
        {"max_leaf", g.params.max_leaf},
        {"grid", grid},
        {"folds", g.folds},
        {"positive_rotations", g.positive_rotations},
        {"negatives_per_positive", g.negatives_per_positive}}},
      {"eval",
       {{"n_boot", c.eval.n_boot},
        {"resample_unit", to_string(c.eval.unit)},
        {"pauc_interval", {c.eval.pauc_lo, c.eval.pauc_hi}},
        {"p_value", "two-sided paired bootstrap"}}},
      {"experiments", experiments}};
}

namespace {

// Overlays `patch` onto `base`, descending into objects; a key absent from
// `base` is a typo or an unsupported setting.
void overlay(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object() && value.is_object())
      overlay(base[key], value, path);
    else
      base[key] = value;
  }
}

RunConfig parse_full(const json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  from_json(j.at("phantom"), c.phantom);
  c.split_fractions = j.at("split_fractions").get<std::array<double, 3>>();
  const json& d = j.at("detector");
  c.detector.features.scales_mm = d.at("scales_mm").get<std::vector<double>>();
  c.detector.features.spiculation_radius_mm = d.at("spiculation_radius_mm");
  c.detector.features.convergence_radius_factor = d.at("convergence_radius_factor");
  const json& f = d.at("forest");
  c.detector.forest = {f.at("trees"), f.at("max_depth"), f.at("min_samples_leaf"), f.at("max_features"),
                       f.at("bootstrap")};
  c.detector.pixel_negatives_per_image = d.at("pixel_negatives_per_image");
  c.detector.threshold = d.at("threshold");
  c.detector.nms_radius_cm = d.at("nms_radius_cm");
  c.detector.max_candidates = d.at("max_candidates");
  c.detector.hit_radius_cm = d.at("hit_radius_cm");
  c.mapping.jitter_samples = j.at("mapping").at("jitter_samples");
  c.mapping.jitter_sigma_mm = j.at("mapping").at("jitter_sigma_mm");
  const json& t = j.at("train");
  c.train.learning_rate = t.at("learning_rate");
  c.train.lr_decay = t.at("lr_decay");
  c.train.momentum = t.at("momentum");
  c.train.l2 = t.at("l2");
  c.train.dropout = t.at("dropout");
  c.train.batch_size = t.at("batch_size");
  c.train.epochs = t.at("epochs");
  c.train.keep_best_epoch = t.at("keep_best_epoch");
  c.train.patch_cm = t.at("patch_cm");
  c.train.conv_kernels = t.at("conv_kernels").get<std::vector<int>>();
  c.train.fc_units = t.at("fc_units");
  c.train.normalization.offset = t.at("normalization").at("offset");
  c.train.normalization.scale = t.at("normalization").at("scale");
  c.train.normalization.clip = t.at("normalization").at("clip");
  const json& g = j.at("gbt");
  c.gbt.params.rounds = g.at("rounds");
  c.gbt.params.shrinkage = g.at("shrinkage");
  c.gbt.params.max_depth = g.at("max_depth");
  c.gbt.params.lambda = g.at("lambda");
  c.gbt.params.min_child_weight = g.at("min_child_weight");
  c.gbt.params.max_leaf = g.at("max_leaf");
  c.gbt.grid.clear();
  for (const auto& p : g.at("grid")) c.gbt.grid.push_back({p.at("shrinkage"), p.at("max_depth")});
  c.gbt.folds = g.at("folds");
  c.gbt.positive_rotations = g.at("positive_rotations");
  c.gbt.negatives_per_positive = g.at("negatives_per_positive");
  const json& e = j.at("eval");
  c.eval.n_boot = e.at("n_boot");
  c.eval.unit = parse_resample_unit(e.at("resample_unit"));
  c.eval.pauc_lo = e.at("pauc_interval").at(0);
  c.eval.pauc_hi = e.at("pauc_interval").at(1);
  c.experiments.clear();
  for (const auto& name : j.at("experiments")) c.experiments.push_back(ExperimentSpec::parse(name));
  return c;
}

}  // namespace

void merge_json(const json& j, RunConfig& c) {
  json full = c;
  overlay(full, j, "");
  RunConfig merged;
  try {
    merged = parse_full(full);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  merged.validate();
  c = std::move(merged);
}

RunConfig load_run_config(const std::string& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = base;
  merge_json(j, c);
  return c;
}

// ---------------------------------------------------------------------------
// splitting and sampling

std::array<int, 3> split_counts(int n, std::array<double, 3> fr) {
  if (n < 3) throw ConfigError("splitting needs at least 3 cases");
  const double sum = fr[0] + fr[1] + fr[2];
  if (!(sum > 0.0)) throw ConfigError("split fractions must not all be zero");
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int total = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = n * fr[k] / sum;
    counts[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - counts[k];
    total += counts[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; total < n; ++k, ++total) ++counts[order[k % 3]];
  return counts;
}

void split_cases(std::vector<StudyCase>& cases, std::array<double, 3> fractions, std::uint64_t seed) {
  const auto counts = split_counts(static_cast<int>(cases.size()), fractions);
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const int pos = static_cast<int>(k);
    cases[order[k]].split = pos < counts[0]               ? SplitTag::train
                            : pos < counts[0] + counts[1] ? SplitTag::val
                                                          : SplitTag::test;
  }
}

BalancedSampler::BalancedSampler(std::size_t negatives, std::size_t positives, int batch_size, std::uint64_t seed)
    : n_neg_(negatives), n_pos_(positives), seed_(seed), pos_rng_(make_rng(seed, {1})) {
  if (batch_size < 2 || batch_size % 2) throw ConfigError("batch size must be even and at least 2");
  if (positives == 0) throw TrainingError("balanced sampler: no positive samples");
  if (negatives == 0) throw TrainingError("balanced sampler: no negative samples");
  half_ = static_cast<std::size_t>(batch_size / 2);
  reshuffle();
}

void BalancedSampler::reshuffle() {
  order_.resize(n_neg_);
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng = make_rng(seed_, {0, static_cast<std::uint64_t>(epoch_)});
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::size_t BalancedSampler::batches_per_epoch() const { return (n_neg_ + half_ - 1) / half_; }

BalancedSampler::Batch BalancedSampler::next() {
  if (cursor_ >= n_neg_) {
    ++epoch_;
    reshuffle();
  }
  Batch b;
  b.epoch = epoch_;
  const std::size_t take = std::min(half_, n_neg_ - cursor_);
  b.negatives.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                     order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
  cursor_ += take;
  std::uniform_int_distribution<std::size_t> pick(0, n_pos_ - 1);
  for (std::size_t k = 0; k < take; ++k) b.positives.push_back(pick(pos_rng_));
  return b;
}

// ---------------------------------------------------------------------------
// candidates

std::string image_key(const ImageRef& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "c%04d_t%d_%s_%s", r.case_id, r.timestamp, to_string(r.laterality).c_str(),
                to_string(r.view).c_str());
  return buf;
}

std::string candidate_id(const ImageRef& ref, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%03d", index);
  return image_key(ref) + buf;
}

namespace {

json ref_json(const ImageRef& r) {
  return {{"case", r.case_id}, {"timestamp", r.timestamp}, {"laterality", to_string(r.laterality)},
          {"view", to_string(r.view)}};
}

ImageRef ref_from(const json& j) {
  return {j.at("case"), j.at("timestamp"), parse_laterality(j.at("laterality")), parse_view(j.at("view"))};
}

json pixel_json(Pixel p) { return json::array({p.row, p.col}); }
Pixel pixel_from(const json& j) { return {j.at(0), j.at(1)}; }

ImputationUsed parse_used(const std::string& s) {
  for (auto u : {ImputationUsed::none, ImputationUsed::black, ImputationUsed::copy_current,
                 ImputationUsed::skipped_round_fallback})
    if (to_string(u) == s) return u;
  throw ConfigError("unknown imputation record '" + s + "'");
}

}  // namespace

void to_json(json& j, const CandidateRecord& r) {
  j = {{"id", r.id},
       {"image", ref_json(r.candidate.image)},
       {"center", pixel_json(r.candidate.center)},
       {"score", r.candidate.score},
       {"label", r.label()},
       {"split", to_string(r.split)},
       {"lesion_radius_px", r.lesion_radius_px}};
  if (r.links.empty()) return;
  json links = json::object();
  for (const auto& [kind, l] : r.links) {
    json jl{{"available", l.available}};
    if (l.available) {
      json jitter = json::array();
      for (Pixel p : l.location.jitter_samples) jitter.push_back(pixel_json(p));
      jl.update({{"image", ref_json(l.image)},
                 {"imputation", to_string(l.used)},
                 {"target", pixel_json(l.location.target)},
                 {"clipped", pixel_json(l.location.clipped)},
                 {"was_clipped", l.location.was_clipped},
                 {"jitter", jitter}});
    }
    links[to_string(kind)] = jl;
  }
  j["links"] = links;
}

void from_json(const json& j, CandidateRecord& r) {
  r.id = j.at("id");
  r.candidate.image = ref_from(j.at("image"));
  r.candidate.center = pixel_from(j.at("center"));
  r.candidate.score = j.at("score");
  r.candidate.label = j.at("label").get<int>() ? CandidateLabel::malignant : CandidateLabel::normal;
  r.split = parse_split(j.at("split"));
  r.lesion_radius_px = j.at("lesion_radius_px");
  r.links.clear();
  r.candidate.counterpart_centers.clear();
  if (!j.contains("links")) return;
  for (const auto& [name, jl] : j.at("links").items()) {
    const SecondaryKind kind = parse_secondary(name);
    CounterpartLink l;
    l.available = jl.at("available");
    if (l.available) {
      l.image = ref_from(jl.at("image"));
      l.used = parse_used(jl.at("imputation"));
      l.location.source = r.candidate.center;
      l.location.target = pixel_from(jl.at("target"));
      l.location.clipped = pixel_from(jl.at("clipped"));
      l.location.was_clipped = jl.at("was_clipped");
      for (const auto& p : jl.at("jitter")) l.location.jitter_samples.push_back(pixel_from(p));
      auto& centers = r.candidate.counterpart_centers[kind];
      centers.push_back(l.location.clipped);
      centers.insert(centers.end(), l.location.jitter_samples.begin(), l.location.jitter_samples.end());
    }
    r.links[kind] = l;
  }
}

// ---------------------------------------------------------------------------
// workspace

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

std::ofstream open_out(const std::string& path) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  return out;
}

// Stable 64-bit FNV-1a, used to key seeds by experiment name.
std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

enum SeedStream : std::uint64_t {
  kGenerate = 1,
  kSplit,
  kPixelSampling,
  kForest,
  kJitter,
  kTraining,
  kGbtFolds,
  kGbtSubsample,
  kBootstrap,
  kSearch
};

}  // namespace

Workspace::Workspace(RunConfig config) : config_(std::move(config)) { config_.validate(); }

std::string Workspace::path(const std::string& relative) const { return (fs::path(config_.out_dir) / relative).string(); }

std::vector<StudyCase>& Workspace::cases() {
  if (!loaded_) {
    const std::string dir = path("dataset");
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw StateError("no dataset in " + dir + "; run generate first");
    cases_ = load_dataset(dir);
    case_index_.clear();
    for (std::size_t i = 0; i < cases_.size(); ++i) case_index_[cases_[i].case_id] = i;
    log_cache_.clear();
    landmark_cache_.clear();
    loaded_ = true;
  }
  return cases_;
}

const StudyCase& Workspace::case_by_id(int id) {
  cases();
  const auto it = case_index_.find(id);
  if (it == case_index_.end()) throw ConfigError("unknown case " + std::to_string(id));
  return cases_[it->second];
}

const Image& Workspace::image(const ImageRef& ref) {
  const Exam* exam = case_by_id(ref.case_id).exam_at(ref.timestamp);
  const Image* im = exam ? exam->find(ref.laterality, ref.view) : nullptr;
  if (!im) throw ConfigError("no image " + image_key(ref));
  return *im;
}

const RasterD& Workspace::log_image(const ImageRef& ref) {
  const std::string key = image_key(ref);
  auto it = log_cache_.find(key);
  if (it == log_cache_.end()) it = log_cache_.emplace(key, log_units(log_transform(image(ref)).pixels)).first;
  return it->second;
}

const Landmarks& Workspace::landmarks(const ImageRef& ref) {
  const std::string key = image_key(ref);
  auto it = landmark_cache_.find(key);
  if (it == landmark_cache_.end()) it = landmark_cache_.emplace(key, extract_landmarks(log_transform(image(ref)))).first;
  return it->second;
}

std::vector<CandidateRecord>& Workspace::candidates() {
  if (!candidates_loaded_) {
    std::string file = path("mapped_candidates.json");
    if (!fs::exists(file)) file = path("detector/candidates.json");
    if (!fs::exists(file)) throw StateError("no candidates in " + config_.out_dir + "; run detect first");
    candidates_ = read_json(file).at("candidates").get<std::vector<CandidateRecord>>();
    candidates_loaded_ = true;
  }
  return candidates_;
}

// ---------------------------------------------------------------------------
// patches and networks

NetworkSpec network_spec(const TrainConfig& tc, int streams, double spacing_microns) {
  VggOptions o;
  o.conv_kernels = tc.conv_kernels;
  o.fc_units = tc.fc_units;
  o.dropout_rate = tc.dropout;
  return NetworkSpec::vgg_like(patch_side_px(tc.patch_cm, spacing_microns), streams, o);
}

namespace {

PatchMeta meta_for(const CandidateRecord& rec, double spacing) {
  PatchMeta m;
  m.center = rec.candidate.center;
  m.lesion_radius_px = rec.lesion_radius_px;
  m.spacing_microns = spacing;
  return m;
}

Tensor build_primary(Workspace& ws, const CandidateRecord& rec, const PatchSpec& spec, RasterD* raw_out = nullptr) {
  const Image& im = ws.image(rec.candidate.image);
  const int side = patch_side_px(ws.config().train.patch_cm, im.spacing_microns);
  RasterD raw = materialize(ws.log_image(rec.candidate.image), meta_for(rec, im.spacing_microns), spec, side);
  Tensor t = ws.config().train.normalization.apply(raw);
  if (raw_out) *raw_out = std::move(raw);
  return t;
}

}  // namespace

PatchPair build_pair(Workspace& ws, const CandidateRecord& rec, const PatchSpec& spec, SecondaryKind kind,
                     ImputationStrategy strategy, const Pixel* secondary_center) {
  PatchPair p;
  RasterD primary_raw;
  p.primary = build_primary(ws, rec, spec, &primary_raw);
  p.secondary_kind = kind;
  p.label = rec.label();
  const auto it = rec.links.find(kind);
  if (it == rec.links.end()) throw StateError("candidate " + rec.id + " has no " + to_string(kind) + " mapping; run map");
  const CounterpartLink& link = it->second;
  RasterD secondary_raw;
  if (link.available) {
    const Image& dst = ws.image(link.image);
    PatchMeta m = meta_for(rec, dst.spacing_microns);
    m.center = secondary_center ? *secondary_center : link.location.clipped;
    secondary_raw = materialize(ws.log_image(link.image), m, spec, static_cast<int>(primary_raw.rows()));
    p.imputation_used = link.used;
  } else if (strategy == ImputationStrategy::black) {
    secondary_raw = RasterD::Zero(primary_raw.rows(), primary_raw.cols());
    p.imputation_used = ImputationUsed::black;
  } else {
    secondary_raw = primary_raw;
    p.imputation_used = ImputationUsed::copy_current;
  }
  p.secondary = ws.config().train.normalization.apply(secondary_raw);
  return p;
}

std::vector<double> score_candidates(Workspace& ws, const ExperimentSpec& exp, const NetworkSpec& spec,
                                     const NetworkState& state, SplitTag split) {
  std::vector<double> out;
  const PatchSpec original;
  for (const auto& rec : ws.candidates()) {
    if (rec.split != split) continue;
    if (exp.fusion.architecture == Architecture::baseline_single) {
      out.push_back(forward_single(spec, state, build_primary(ws, rec, original)));
    } else if (exp.fusion.architecture == Architecture::twostream_shared) {
      out.push_back(forward_twostream(spec, state,
                                      build_pair(ws, rec, original, exp.fusion.secondary, exp.fusion.imputation)));
    } else {
      throw ConfigError("network scoring does not apply to " + exp.name());
    }
  }
  return out;
}

namespace {

std::vector<int> split_labels(Workspace& ws, SplitTag split) {
  std::vector<int> y;
  for (const auto& rec : ws.candidates())
    if (rec.split == split) y.push_back(rec.label());
  return y;
}

bool has_both(const std::vector<int>& y) {
  return std::find(y.begin(), y.end(), 0) != y.end() && std::find(y.begin(), y.end(), 1) != y.end();
}

}  // namespace

TrainedNetwork train_network(Workspace& ws, const ExperimentSpec& exp, const TrainConfig& tc, std::uint64_t seed) {
  if (exp.fusion.architecture == Architecture::feature_concat_gbt)
    throw ConfigError("featgbt has no network of its own; train the baseline and run extract-features and gbt");
  const bool twostream = exp.fusion.architecture == Architecture::twostream_shared;
  std::vector<const CandidateRecord*> pos, neg;
  for (const auto& rec : ws.candidates())
    if (rec.split == SplitTag::train) (rec.label() ? pos : neg).push_back(&rec);
  if (pos.empty()) throw TrainingError("no positive training candidates");

  const double spacing = ws.config().phantom.spacing_microns;
  TrainedNetwork tn;
  tn.spec = network_spec(tc, twostream ? 2 : 1, spacing);
  tn.state = init_network(tn.spec, derive_seed(seed, {0}));

  std::vector<AugmentationPlan> plans;
  for (std::size_t i = 0; i < pos.size(); ++i)
    plans.emplace_back(meta_for(*pos[i], spacing), SampleKind::positive, derive_seed(seed, {1, i}));
  const auto per_pos = static_cast<std::size_t>(plans.front().size());
  BalancedSampler sampler(neg.size(), pos.size() * per_pos, tc.batch_size, derive_seed(seed, {2}));
  MomentumSgd opt(tc.momentum);

  const std::vector<int> yval = split_labels(ws, SplitTag::val);
  const bool validate = tc.keep_best_epoch && has_both(yval);
  double best_auc = -1.0;
  NetworkState best = tn.state;
  double lr = tc.learning_rate;

  auto inputs_for = [&](const CandidateRecord& rec, const PatchSpec& spec, Rng& rng) {
    std::vector<Tensor> in;
    if (!twostream) {
      in.push_back(build_primary(ws, rec, spec));
      return in;
    }
    const Pixel* center = nullptr;
    const auto& link = rec.links.at(exp.fusion.secondary);
    if (link.available && !link.location.jitter_samples.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, link.location.jitter_samples.size() - 1);
      center = &link.location.jitter_samples[pick(rng)];
    }
    PatchPair p = build_pair(ws, rec, spec, exp.fusion.secondary, exp.fusion.imputation, center);
    in.push_back(std::move(p.primary));
    in.push_back(std::move(p.secondary));
    return in;
  };

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < sampler.batches_per_epoch(); ++b) {
      const auto batch = sampler.next();
      ParamGrads grads = ParamGrads::zeros_like(tn.state);
      std::size_t slot = 0;
      auto run = [&](const CandidateRecord& rec, const PatchSpec& spec, std::size_t label) {
        Rng rng = make_rng(seed, {3, static_cast<std::uint64_t>(epoch), b, slot});
        const auto in = inputs_for(rec, spec, rng);
        const ForwardOptions fo{true, derive_seed(seed, {4, static_cast<std::uint64_t>(epoch), b, slot})};
        const double loss = accumulate_gradients(tn.spec, tn.state, in, label, fo, grads);
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
        loss_sum += loss;
        ++slot;
      };
      for (std::size_t n : batch.negatives) {
        PatchSpec spec;
        spec.rotation = static_cast<int>(derive_seed(seed, {5, static_cast<std::uint64_t>(epoch), n}) % 4);
        run(*neg[n], spec, 0);
      }
      for (std::size_t p : batch.positives) run(*pos[p / per_pos], plans[p / per_pos].spec(static_cast<int>(p % per_pos)), 1);
      grads.scale(1.0 / static_cast<double>(slot));
      opt.step(tn.state, grads, lr, tc.l2);
      seen += slot;
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(seen), -1.0, lr};
    if (validate) {
      log.validation_auc = roc_auc(score_candidates(ws, exp, tn.spec, tn.state, SplitTag::val), yval);
      if (log.validation_auc > best_auc) {
        best_auc = log.validation_auc;
        best = tn.state;
        tn.selected_epoch = epoch;
      }
    }
    std::fprintf(stderr, "[train] %s epoch %d: loss %.4f, validation AUC %.4f\n", exp.name().c_str(), epoch,
                 log.mean_loss, log.validation_auc);
    tn.log.push_back(log);
    lr *= tc.lr_decay;
  }
  if (validate)
    tn.state = std::move(best);
  else
    tn.selected_epoch = tc.epochs - 1;
  return tn;
}

RandomSearchResult random_search(Workspace& ws, const ExperimentSpec& exp, int trials, std::uint64_t seed) {
  if (trials < 1 || trials > 20) throw ConfigError("random search takes 1 to 20 trials");
  if (!has_both(split_labels(ws, SplitTag::val))) throw TrainingError("validation split lacks a class");
  RandomSearchResult res;
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < trials; ++t) {
    TrainConfig tc = ws.config().train;
    tc.learning_rate = std::pow(10.0, -3.0 + 1.5 * u(rng));
    tc.l2 = std::pow(10.0, -5.0 + 2.0 * u(rng));
    tc.dropout = 0.2 + 0.4 * u(rng);
    tc.keep_best_epoch = true;
    const TrainedNetwork tn = train_network(ws, exp, tc, derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    double best = -1.0;
    for (const auto& l : tn.log) best = std::max(best, l.validation_auc);
    res.trials.emplace_back(tc, best);
    if (best > res.best_validation_auc) {
      res.best_validation_auc = best;
      res.best = tc;
    }
  }
  return res;
}

void Workspace::invalidate() {
  loaded_ = false;
  candidates_loaded_ = false;
  cases_.clear();
  candidates_.clear();
  log_cache_.clear();
  landmark_cache_.clear();
}

// ---------------------------------------------------------------------------
// stages

namespace {

class StageTimer {
 public:
  explicit StageTimer(std::string stage) : stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  void note(const std::string& msg) const {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::fprintf(stderr, "[%s] %s (%.1f s)\n", stage_.c_str(), msg.c_str(), s);
  }

 private:
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<ImageRef> current_images(Workspace& ws, bool train_only) {
  std::vector<ImageRef> refs;
  for (const auto& sc : ws.cases()) {
    if (train_only && sc.split != SplitTag::train) continue;
    for (const auto& im : sc.current().views) refs.push_back({sc.case_id, im.timestamp, im.laterality, im.view});
  }
  return refs;
}

double nearest_lesion_radius(const Image& im, Pixel c) {
  double best = INFINITY, radius = 0.0;
  for (const auto& t : im.truth) {
    const double d = std::hypot(t.center.row - c.row, t.center.col - c.col);
    if (d < best) best = d, radius = t.radius_px;
  }
  return radius;
}

std::uint64_t image_seed(std::uint64_t base, std::uint64_t stream, const ImageRef& r) {
  return derive_seed(base, {stream, static_cast<std::uint64_t>(r.case_id), static_cast<std::uint64_t>(r.timestamp),
                            static_cast<std::uint64_t>(r.laterality), static_cast<std::uint64_t>(r.view)});
}

std::string feature_tag(SecondaryKind kind, ImputationStrategy strategy) {
  return kind == SecondaryKind::prior ? to_string(kind) + "_" + to_string(strategy) : to_string(kind);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t p; (p = line.find(',', start)) != std::string::npos; start = p + 1)
      cells.push_back(line.substr(start, p - start));
    cells.push_back(line.substr(start));
    rows.push_back(std::move(cells));
  }
  return rows;
}

NetworkState load_model(Workspace& ws, const std::string& name) {
  const std::string file = ws.path("models/" + name + ".asym");
  if (!fs::exists(file)) throw StateError("no trained model " + file + "; run train --arch for it first");
  return load_state(file);
}

}  // namespace

void stage_generate(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  StageTimer timer("generate");
  auto cases = generate_dataset(cfg.phantom, derive_seed(cfg.seed, {kGenerate}));
  split_cases(cases, cfg.split_fractions, derive_seed(cfg.seed, {kSplit}));
  const std::string dir = ws.path("dataset");
  fs::remove_all(dir);
  save_dataset(cases, dir);
  json splits = json::object();
  std::map<std::string, int> counts;
  for (const auto& sc : cases) {
    splits[std::to_string(sc.case_id)] = to_string(sc.split);
    ++counts[to_string(sc.split)];
  }
  write_json(ws.path("splits.json"), {{"cases", splits}, {"counts", counts}});
  ws.invalidate();
  timer.note(std::to_string(cases.size()) + " cases");
}

void stage_detect(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  const DetectorConfig& dc = cfg.detector;
  StageTimer timer("detect");

  std::vector<PixelSample> samples;
  std::ofstream used = open_out(ws.path("detector/training_images.txt"));
  for (const ImageRef& ref : current_images(ws, true)) {
    const Image& im = ws.image(ref);
    const FeatureStack stack = compute_features(log_transform(im), dc.features);
    Rng rng = make_rng(image_seed(cfg.seed, kPixelSampling, ref));
    auto s = sample_pixels(stack, ws.log_image(ref), im, dc.pixel_negatives_per_image, rng);
    samples.insert(samples.end(), s.begin(), s.end());
    used << image_key(ref) << '\n';
  }
  if (samples.empty()) throw TrainingError("no training images for the detector");
  timer.note(std::to_string(samples.size()) + " pixel samples");
  const RandomForest forest = train_pixel_classifier(samples, dc.forest, derive_seed(cfg.seed, {kForest}));
  {
    std::ofstream out(ws.path("detector/forest.rfst"), std::ios::binary);
    forest.save(out);
    if (!out) throw IoError("failed writing detector/forest.rfst");
  }
  timer.note("forest trained");

  std::vector<CandidateRecord> records;
  std::map<std::string, std::array<int, 4>> summary;  // candidates, positives, lesions, lesions hit
  for (const ImageRef& ref : current_images(ws, false)) {
    const Image& im = ws.image(ref);
    const StudyCase& sc = ws.case_by_id(ref.case_id);
    const RasterD& img = ws.log_image(ref);
    const FeatureStack stack = compute_features(log_transform(im), dc.features);
    const RasterD lik = likelihood_map(forest, stack, img);
    auto cands = nonmax_suppress(lik, dc.nms_radius_cm * im.px_per_cm(), dc.threshold);
    if (dc.max_candidates > 0 && static_cast<int>(cands.size()) > dc.max_candidates) cands.resize(dc.max_candidates);
    auto& sm = summary[to_string(sc.split)];
    for (std::size_t k = 0; k < cands.size(); ++k) {
      CandidateRecord r;
      r.candidate = cands[k];
      r.candidate.image = ref;
      r.candidate.label = label_for(im, r.candidate.center, dc.hit_radius_cm);
      r.id = candidate_id(ref, static_cast<int>(k));
      r.split = sc.split;
      if (r.label()) r.lesion_radius_px = nearest_lesion_radius(im, r.candidate.center);
      sm[0] += 1;
      sm[1] += r.label();
      records.push_back(std::move(r));
    }
    for (const auto& t : im.truth) {
      sm[2] += 1;
      const double reach = dc.hit_radius_cm * im.px_per_cm();
      sm[3] += std::any_of(cands.begin(), cands.end(), [&](const Candidate& c) {
        return std::hypot(c.center.row - t.center.row, c.center.col - t.center.col) <= reach;
      });
    }
  }
  json js = json::object();
  for (const auto& [split, v] : summary)
    js[split] = {{"candidates", v[0]}, {"positive_candidates", v[1]}, {"lesions", v[2]}, {"lesions_detected", v[3]}};
  write_json(ws.path("detector/summary.json"), js);
  write_json(ws.path("detector/candidates.json"), {{"candidates", records}});
  fs::remove(ws.path("mapped_candidates.json"));
  ws.invalidate();
  timer.note(std::to_string(records.size()) + " candidates");
}

void stage_map(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  StageTimer timer("map");
  std::vector<CandidateRecord> records = ws.candidates();
  std::ofstream pairs = open_out(ws.path("pairs.csv"));
  pairs << "candidate_id,split,label,secondary_kind,secondary_image,imputation,target_row,target_col,clipped_row,"
           "clipped_col,was_clipped\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    CandidateRecord& rec = records[i];
    const ImageRef src = rec.candidate.image;
    const StudyCase& sc = ws.case_by_id(src.case_id);
    int exam_index = -1;
    for (std::size_t e = 0; e < sc.exams.size(); ++e)
      if (sc.exams[e].timestamp == src.timestamp) exam_index = static_cast<int>(e);
    for (SecondaryKind kind : {SecondaryKind::contralateral, SecondaryKind::prior}) {
      const SecondarySource found = find_secondary(sc, exam_index, src.laterality, src.view, kind);
      CounterpartLink link;
      if (found.image) {
        link.available = true;
        link.used = found.used;
        link.image = {src.case_id, found.image->timestamp, found.image->laterality, found.image->view};
        const Image& dst = *found.image;
        link.location = map_location(rec.candidate.center, ws.landmarks(src), ws.landmarks(link.image), dst.rows(),
                                     dst.cols());
        const double sigma = cfg.mapping.jitter_sigma_mm * 1000.0 / dst.spacing_microns;
        link.location.jitter_samples =
            jitter(link.location.clipped, cfg.mapping.jitter_samples, sigma,
                   derive_seed(cfg.seed, {kJitter, i, static_cast<std::uint64_t>(kind)}), dst.rows(), dst.cols());
      }
      rec.links[kind] = link;
      rec.candidate.counterpart_centers[kind] = link.location.jitter_samples;
      const auto& loc = link.location;
      pairs << rec.id << ',' << to_string(rec.split) << ',' << rec.label() << ',' << to_string(kind) << ','
            << (link.available ? image_key(link.image) : "") << ','
            << (link.available ? to_string(link.used) : "missing") << ',' << loc.target.row << ',' << loc.target.col
            << ',' << loc.clipped.row << ',' << loc.clipped.col << ',' << (loc.was_clipped ? 1 : 0) << '\n';
    }
  }
  write_json(ws.path("mapped_candidates.json"), {{"candidates", records}});
  ws.invalidate();
  timer.note(std::to_string(records.size()) + " candidates mapped");
}

void stage_train(Workspace& ws, const ExperimentSpec& exp) {
  const RunConfig& cfg = ws.config();
  const std::string name = exp.name();
  StageTimer timer("train");
  const TrainedNetwork tn = train_network(ws, exp, cfg.train, derive_seed(cfg.seed, {kTraining, name_hash(name)}));
  fs::create_directories(ws.path("models"));
  save_state(tn.state, ws.path("models/" + name + ".asym"));
  std::ofstream log = open_out(ws.path("models/" + name + "_training.csv"));
  log << "epoch,mean_loss,validation_auc,learning_rate\n";
  for (const auto& e : tn.log)
    log << e.epoch << ',' << e.mean_loss << ',' << e.validation_auc << ',' << e.learning_rate << '\n';
  std::ofstream ids = open_out(ws.path("models/" + name + "_train_ids.txt"));
  for (const auto& rec : ws.candidates())
    if (rec.split == SplitTag::train) ids << rec.id << '\n';
  write_json(ws.path("models/" + name + ".json"),
             {{"experiment", name}, {"selected_epoch", tn.selected_epoch}, {"streams", tn.spec.streams},
              {"input_size", tn.spec.input_size}});
  char msg[96];
  std::snprintf(msg, sizeof msg, "%s: %d epochs, selected %d", name.c_str(), cfg.train.epochs, tn.selected_epoch);
  timer.note(msg);
}

void stage_extract_features(Workspace& ws, SecondaryKind kind, ImputationStrategy strategy) {
  const RunConfig& cfg = ws.config();
  StageTimer timer("extract-features");
  const NetworkSpec spec = network_spec(cfg.train, 1, cfg.phantom.spacing_microns);
  const NetworkState state = load_model(ws, "baseline");
  const std::string tag = feature_tag(kind, strategy);
  std::size_t total = 0;
  for (SplitTag split : {SplitTag::train, SplitTag::val, SplitTag::test}) {
    std::vector<std::vector<double>> rows;
    std::ofstream index = open_out(ws.path("features/" + tag + "_" + to_string(split) + ".csv"));
    index << "row,candidate_id,label,rotation,imputation_used\n";
    for (const auto& rec : ws.candidates()) {
      if (rec.split != split) continue;
      const int copies = split == SplitTag::train && rec.label() ? cfg.gbt.positive_rotations : 1;
      for (int r = 0; r < copies; ++r) {
        PatchSpec ps;
        ps.rotation = r;
        const PatchPair pair = build_pair(ws, rec, ps, kind, strategy);
        std::vector<double> row = extract_fc1(spec, state, pair.primary);
        const auto second = extract_fc1(spec, state, pair.secondary);
        row.insert(row.end(), second.begin(), second.end());
        index << rows.size() << ',' << rec.id << ',' << rec.label() << ',' << r << ','
              << to_string(pair.imputation_used) << '\n';
        rows.push_back(std::move(row));
      }
    }
    RowMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(2 * spec.fc1_width()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      m.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), m.cols());
    write_features(ws.path("features/" + tag + "_" + to_string(split) + ".feat"), m);
    total += rows.size();
  }
  timer.note(tag + ": " + std::to_string(total) + " feature rows");
}

void stage_gbt(Workspace& ws, const ExperimentSpec& exp) {
  if (exp.fusion.architecture != Architecture::feature_concat_gbt)
    throw ConfigError("the gbt stage needs a featgbt experiment, got " + exp.name());
  const RunConfig& cfg = ws.config();
  const std::string name = exp.name();
  const std::string tag = feature_tag(exp.fusion.secondary, exp.fusion.imputation);
  StageTimer timer("gbt");
  auto load = [&](SplitTag split, std::vector<std::string>& ids, std::vector<int>& y) {
    const std::string base = ws.path("features/" + tag + "_" + to_string(split));
    if (!fs::exists(base + ".feat")) throw StateError("missing " + base + ".feat; run extract-features first");
    for (const auto& row : read_csv(base + ".csv")) {
      ids.push_back(row.at(1));
      y.push_back(std::stoi(row.at(2)));
    }
    RowMatrix X = read_features(base + ".feat");
    if (static_cast<std::size_t>(X.rows()) != ids.size()) throw IoError(base + ": index and features disagree");
    return X;
  };
  std::vector<std::string> train_ids;
  std::vector<int> ytr;
  RowMatrix Xall = load(SplitTag::train, train_ids, ytr);

  std::vector<int> keep_pos, keep_neg;
  for (std::size_t i = 0; i < ytr.size(); ++i) (ytr[i] ? keep_pos : keep_neg).push_back(static_cast<int>(i));
  if (cfg.gbt.negatives_per_positive > 0.0) {
    const auto cap = static_cast<std::size_t>(std::llround(cfg.gbt.negatives_per_positive * keep_pos.size()));
    if (keep_neg.size() > cap) {
      Rng rng = make_rng(cfg.seed, {kGbtSubsample, name_hash(name)});
      std::shuffle(keep_neg.begin(), keep_neg.end(), rng);
      keep_neg.resize(cap);
    }
  }
  std::vector<int> keep(keep_pos);
  keep.insert(keep.end(), keep_neg.begin(), keep_neg.end());
  std::sort(keep.begin(), keep.end());
  RowMatrix X(static_cast<Eigen::Index>(keep.size()), Xall.cols());
  std::vector<int> y;
  std::ofstream used = open_out(ws.path("models/" + name + "_train_ids.txt"));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    X.row(static_cast<Eigen::Index>(k)) = Xall.row(keep[k]);
    y.push_back(ytr[keep[k]]);
    used << train_ids[keep[k]] << '\n';
  }
  timer.note(std::to_string(keep_pos.size()) + " positive and " + std::to_string(keep_neg.size()) + " negative rows");

  const CvResult cv = cross_validate(X, y, cfg.gbt.grid, cfg.gbt.params, cfg.gbt.folds,
                                     derive_seed(cfg.seed, {kGbtFolds, name_hash(name)}));
  GbtParams p = cfg.gbt.params;
  p.shrinkage = cv.best.shrinkage;
  p.max_depth = cv.best.max_depth;
  const GbtModel model = fit_gbt(X, y, p);
  fs::create_directories(ws.path("models"));
  model.save(ws.path("models/" + name + ".gbtm"));
  json grid = json::array();
  for (std::size_t i = 0; i < cv.grid.size(); ++i)
    grid.push_back({{"shrinkage", cv.grid[i].shrinkage},
                    {"max_depth", cv.grid[i].max_depth},
                    {"mean_logloss", cv.mean_logloss[i]}});
  write_json(ws.path("models/" + name + "_cv.json"),
             {{"folds", cfg.gbt.folds},
              {"grid", grid},
              {"selected", {{"shrinkage", cv.best.shrinkage}, {"max_depth", cv.best.max_depth}}}});
  fs::create_directories(ws.path("predictions"));
  for (SplitTag split : {SplitTag::val, SplitTag::test}) {
    std::vector<std::string> ids;
    std::vector<int> ys;
    const RowMatrix Xs = load(split, ids, ys);
    write_predictions_csv(ws.path("predictions/" + name + "_" + to_string(split) + ".csv"), ids, model.predict(Xs));
  }
  char msg[96];
  std::snprintf(msg, sizeof msg, "%s: eta %.2f depth %d", name.c_str(), cv.best.shrinkage, cv.best.max_depth);
  timer.note(msg);
}

namespace {

std::vector<std::pair<std::string, std::string>> comparisons_for(const std::vector<ExperimentSpec>& exps) {
  std::vector<std::string> names;
  for (const auto& e : exps) names.push_back(e.name());
  auto has = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  std::vector<std::pair<std::string, std::string>> out;
  if (has("baseline"))
    for (const auto& n : names)
      if (n != "baseline") out.emplace_back(n, "baseline");
  for (const auto& n : names)
    if (n.rfind("twostream_", 0) == 0 && has("featgbt_" + n.substr(10))) out.emplace_back(n, "featgbt_" + n.substr(10));
  for (const std::string arch : {"twostream", "featgbt"})
    if (has(arch + "_prior_black") && has(arch + "_prior_copy"))
      out.emplace_back(arch + "_prior_black", arch + "_prior_copy");
  return out;
}

}  // namespace

void stage_evaluate(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  StageTimer timer("evaluate");
  if (cfg.experiments.empty()) throw ConfigError("no experiments configured");
  std::vector<const CandidateRecord*> test;
  for (const auto& rec : ws.candidates())
    if (rec.split == SplitTag::test) test.push_back(&rec);
  ScoredSet base;
  std::set<int> test_cases;
  for (const auto* r : test) {
    base.labels.push_back(r->label());
    base.group_ids.push_back(std::to_string(r->candidate.image.case_id));
    test_cases.insert(r->candidate.image.case_id);
  }

  BootstrapOptions bo;
  bo.n_boot = cfg.eval.n_boot;
  bo.seed = derive_seed(cfg.seed, {kBootstrap});
  bo.unit = cfg.eval.unit;
  bo.pauc_lo = cfg.eval.pauc_lo;
  bo.pauc_hi = cfg.eval.pauc_hi;

  std::map<std::string, ScoredSet> sets;
  std::map<std::string, RocResult> results;
  json experiments = json::object(), curves = json::object();
  for (const auto& exp : cfg.experiments) {
    const std::string name = exp.name();
    ScoredSet set = base;
    if (exp.fusion.architecture == Architecture::feature_concat_gbt) {
      const std::string file = ws.path("predictions/" + name + "_test.csv");
      std::map<std::string, double> post;
      for (const auto& row : read_csv(file)) post[row.at(0)] = std::stod(row.at(1));
      for (const auto* r : test) {
        const auto it = post.find(r->id);
        if (it == post.end()) throw StateError(file + " lacks candidate " + r->id);
        set.scores.push_back(it->second);
      }
    } else {
      const NetworkSpec spec =
          network_spec(cfg.train, exp.fusion.architecture == Architecture::twostream_shared ? 2 : 1,
                       cfg.phantom.spacing_microns);
      set.scores = score_candidates(ws, exp, spec, load_model(ws, name), SplitTag::test);
    }
    std::ofstream out = open_out(ws.path("scores/" + name + ".csv"));
    out << "candidate_id,case,label,score\n";
    for (std::size_t i = 0; i < test.size(); ++i)
      out << test[i]->id << ',' << test[i]->candidate.image.case_id << ',' << set.labels[i] << ',' << set.scores[i]
          << '\n';
    const RocResult r = bootstrap_ci(set, bo);
    experiments[name] = to_json(r, bo);
    curves[name] = {{"fpr", r.curve.fpr},         {"tpr", r.curve.tpr},       {"grid_fpr", r.grid_fpr},
                    {"mean_tpr", r.mean_tpr},     {"tpr_lo", r.tpr_lo},       {"tpr_hi", r.tpr_hi},
                    {"auc", r.auc},               {"ci95", {r.ci_lo, r.ci_hi}}};
    sets.emplace(name, std::move(set));
    results.emplace(name, r);
    timer.note(name + " scored");
  }
  json comparisons = json::array();
  for (const auto& [a, b] : comparisons_for(cfg.experiments)) {
    const auto auc = significance_test(sets.at(a), sets.at(b), Metric::auc, bo);
    const auto pauc = significance_test(sets.at(a), sets.at(b), Metric::pauc, bo);
    comparisons.push_back({{"a", a},
                           {"b", b},
                           {"auc_difference", auc.observed_difference},
                           {"auc_p_value", auc.p_value},
                           {"pauc_difference", pauc.observed_difference},
                           {"pauc_p_value", pauc.p_value}});
  }
  const json metrics{{"seed", cfg.seed},
                     {"test",
                      {{"cases", test_cases.size()},
                       {"candidates", test.size()},
                       {"positives", std::count(base.labels.begin(), base.labels.end(), 1)}}},
                     {"bootstrap",
                      {{"n_boot", bo.n_boot},
                       {"resample_unit", to_string(bo.unit)},
                       {"ci", "percentile 2.5/97.5"},
                       {"p_value", "two-sided, 2 min(#d<=0, #d>=0)/n_boot"}}},
                     {"experiments", experiments},
                     {"comparisons", comparisons}};
  write_json(ws.path("metrics.json"), metrics);
  write_json(ws.path("eval/curves.json"), curves);
  timer.note("metrics written");
}

void stage_report(Workspace& ws) {
  StageTimer timer("report");
  const json metrics = read_json(ws.path("metrics.json"));
  const json curves = read_json(ws.path("eval/curves.json"));
  std::vector<RocResult> results;
  std::vector<std::string> names;
  for (const auto& [name, c] : curves.items()) {
    RocResult r;
    r.curve.fpr = c.at("fpr").get<std::vector<double>>();
    r.curve.tpr = c.at("tpr").get<std::vector<double>>();
    r.grid_fpr = c.at("grid_fpr").get<std::vector<double>>();
    r.mean_tpr = c.at("mean_tpr").get<std::vector<double>>();
    r.tpr_lo = c.at("tpr_lo").get<std::vector<double>>();
    r.tpr_hi = c.at("tpr_hi").get<std::vector<double>>();
    r.auc = c.at("auc");
    r.ci_lo = c.at("ci95").at(0);
    r.ci_hi = c.at("ci95").at(1);
    results.push_back(std::move(r));
    names.push_back(name);
  }
  std::vector<NamedRoc> named;
  for (std::size_t i = 0; i < results.size(); ++i) named.push_back({names[i], &results[i]});
  fs::create_directories(ws.path("report"));
  write_curve_csv(ws.path("report/curves.csv"), named);
  write_roc_svg(ws.path("report/roc.svg"), named, "Candidate classification, test split");

  std::ofstream md = open_out(ws.path("report/summary.md"));
  md.precision(4);
  const json& t = metrics.at("test");
  md << "# Run summary\n\nTest split: " << t.at("cases") << " cases, " << t.at("candidates") << " candidates, "
     << t.at("positives") << " malignant.\n\n| experiment | AUC | 95% CI | pAUC [" << ws.config().eval.pauc_lo << ", "
     << ws.config().eval.pauc_hi << "] |\n|---|---|---|---|\n";
  for (const auto& [name, e] : metrics.at("experiments").items())
    md << "| " << name << " | " << e.at("auc").get<double>() << " | [" << e.at("ci95").at(0).get<double>() << ", "
       << e.at("ci95").at(1).get<double>() << "] | " << e.at("pauc").get<double>() << " |\n";
  md << "\n| comparison | AUC diff | p | pAUC diff | p |\n|---|---|---|---|---|\n";
  for (const auto& c : metrics.at("comparisons"))
    md << "| " << c.at("a").get<std::string>() << " vs " << c.at("b").get<std::string>() << " | "
       << c.at("auc_difference").get<double>() << " | " << c.at("auc_p_value").get<double>() << " | "
       << c.at("pauc_difference").get<double>() << " | " << c.at("pauc_p_value").get<double>() << " |\n";
  timer.note("report/roc.svg, report/curves.csv, report/summary.md");
}

void write_resolved_config(Workspace& ws) {
  write_json(ws.path("resolved_config.json"), json(ws.config()));
}

void run_all(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  run_stage("config", [&] { write_resolved_config(ws); });
  run_stage("generate", [&] { stage_generate(ws); });
  run_stage("detect", [&] { stage_detect(ws); });
  run_stage("map", [&] { stage_map(ws); });
  const ExperimentSpec baseline = ExperimentSpec::parse("baseline");
  bool need_baseline = false;
  for (const auto& e : cfg.experiments)
    need_baseline |= e.fusion.architecture != Architecture::twostream_shared;
  if (need_baseline) run_stage("train", [&] { stage_train(ws, baseline); });
  for (const auto& e : cfg.experiments) {
    if (e.fusion.architecture == Architecture::twostream_shared) run_stage("train", [&] { stage_train(ws, e); });
    if (e.fusion.architecture == Architecture::feature_concat_gbt) {
      run_stage("extract-features", [&] { stage_extract_features(ws, e.fusion.secondary, e.fusion.imputation); });
      run_stage("gbt", [&] { stage_gbt(ws, e); });
    }
  }
  run_stage("evaluate", [&] { stage_evaluate(ws); });
  run_stage("report", [&] { stage_report(ws); });
}

}  // namespace dualroi
