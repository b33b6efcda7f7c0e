#include <doctest.h>

#include "dualroi/errors.hpp"
#include "dualroi/phantom.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

using namespace dualroi;

namespace {

GenConfig small_config(int n = 6) {
  GenConfig c;
  c.n_cases = n;
  return c;
}

bool mask_contains(const Mask& m, Point p) {
  const int r = static_cast<int>(std::lround(p.row)), c = static_cast<int>(std::lround(p.col));
  return in_bounds(m, r, c) && m(r, c) != 0;
}

}  // namespace

TEST_CASE("prevalence 0 gives no lesion truth") {
  GenConfig c = small_config();
  c.lesion_prevalence = 0.0;
  for (const auto& sc : generate_dataset(c, 3))
    for (const auto& ex : sc.exams)
      for (const auto& im : ex.views) {
        CHECK(im.truth.empty());
        for (const auto& s : im.structures) CHECK(s.role == StructureRole::distractor);
      }
}

TEST_CASE("same seed gives bit-identical datasets") {
  const GenConfig c = small_config(3);
  const auto a = generate_dataset(c, 11), b = generate_dataset(c, 11);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].exams.size() == b[i].exams.size());
    for (std::size_t e = 0; e < a[i].exams.size(); ++e)
      for (std::size_t v = 0; v < a[i].exams[e].views.size(); ++v) {
        const Image &x = a[i].exams[e].views[v], &y = b[i].exams[e].views[v];
        CHECK(x.pixels == y.pixels);
        CHECK(x.structures.size() == y.structures.size());
      }
  }
  const auto other = generate_dataset(c, 12);
  CHECK_FALSE(other[0].exams.back().views[0].pixels == a[0].exams.back().views[0].pixels);
}

TEST_CASE("case generation depends only on seed and case id") {
  const GenConfig c = small_config(5);
  const auto all = generate_dataset(c, 5);
  const StudyCase alone = generate_case(c, 5, 3);
  CHECK(alone.exams.back().views[2].pixels == all[3].exams.back().views[2].pixels);
}

TEST_CASE("structural invariants") {
  GenConfig c = small_config(30);
  c.lesion_prevalence = 0.6;
  c.growth_rate = 0.4;  // keeps visible prior counterparts
  c.missing_prior_fraction = 0.2;
  const auto cases = generate_dataset(c, 21);
  int lesions = 0, with_prior = 0, counterparts = 0;
  for (const auto& sc : cases) {
    REQUIRE(!sc.exams.empty());
    for (std::size_t e = 1; e < sc.exams.size(); ++e) {
      const int gap = sc.exams[e].timestamp - sc.exams[e - 1].timestamp;
      CHECK((gap == 1 || gap == 2));
    }
    if (sc.exams.size() > 1) ++with_prior;
    for (const auto& ex : sc.exams) {
      CHECK(ex.views.size() == 4);
      for (std::size_t i = 0; i < ex.views.size(); ++i)
        for (std::size_t j = i + 1; j < ex.views.size(); ++j)
          CHECK_FALSE((ex.views[i].laterality == ex.views[j].laterality && ex.views[i].view == ex.views[j].view));
      for (const auto& im : ex.views) {
        CHECK(im.spacing_microns > 0);
        for (const auto& s : im.structures) {
          CHECK(s.radius_px > 0);
          CHECK(mask_contains(im.true_mask, s.center));
        }
        // front point lies on the mask contour
        const auto& lm = im.true_landmarks;
        const int r = static_cast<int>(std::lround(lm.front.row)), col = static_cast<int>(std::lround(lm.front.col));
        bool near_edge = false;
        for (int dr = -2; dr <= 2; ++dr)
          for (int dc = -2; dc <= 2; ++dc) {
            const int rr = r + dr, cc = col + dc;
            if (!in_bounds(im.true_mask, rr, cc) || im.true_mask(rr, cc) == 0) near_edge = true;
          }
        CHECK(near_edge);
        CHECK(lm.p2 >= 0);
        CHECK(lm.p2 <= im.cols() - 1);
      }
    }
    for (const auto& im : sc.current().views)
      for (const auto& t : im.truth) {
        ++lesions;
        CHECK(t.malignant);
        for (std::size_t e = 0; e + 1 < sc.exams.size(); ++e) {
          const Image* prior = sc.exams[e].find(im.laterality, im.view);
          REQUIRE(prior != nullptr);
          for (const auto& p : prior->structures)
            if (p.id == t.id && p.role == StructureRole::lesion) {
              ++counterparts;
              CHECK(p.radius_px <= t.radius_px);
            }
        }
      }
  }
  CHECK(lesions > 0);
  CHECK(with_prior > 0);
  CHECK(counterparts > 0);
}

TEST_CASE("missing prior fraction is honoured") {
  GenConfig c = small_config(200);
  c.image_size = 64;
  c.missing_prior_fraction = 0.3;
  c.min_distractors = c.max_distractors = 0;
  c.malignant.radius_mm = {1.0, 1.5};
  int missing = 0;
  for (const auto& sc : generate_dataset(c, 2)) missing += sc.exams.size() == 1;
  CHECK(missing > 40);
  CHECK(missing < 80);
}

TEST_CASE("pair oracle beats single-patch oracle") {
  GenConfig c;
  c.asymmetry_strength = 1.0;
  c.growth_rate = 1.0;
  Rng rng = make_rng(99);
  std::vector<double> single, pair;
  std::vector<int> labels;
  for (int i = 0; i < 2000; ++i) {
    const bool m = std::bernoulli_distribution(0.2)(rng);
    const LatentStructure s = sample_latent(c, m, rng);
    single.push_back(oracle_posterior(c, s, false));
    pair.push_back(oracle_posterior(c, s, true));
    labels.push_back(m ? 1 : 0);
  }
  const double a1 = oracle::auc_pairs(single, labels), a2 = oracle::auc_pairs(pair, labels);
  MESSAGE("single-patch oracle AUC " << a1 << ", pair oracle AUC " << a2);
  CHECK(a2 > a1);
}

TEST_CASE("log_transform") {
  SUBCASE("constant image stays constant") {
    Image im;
    im.pixels = Raster16::Constant(8, 8, 1234);
    const Image out = log_transform(im);
    CHECK((out.pixels.array() == out.pixels(0, 0)).all());
  }
  SUBCASE("closed form before rescaling") {
    Raster16 raw(1, 3);
    raw << 0, 2, 6;  // nearest integers to e-1 and e^2-1 are checked below
    const RasterD l = log_attenuation(raw);
    CHECK(l(0, 0) == 0.0);
    CHECK(l(0, 1) == doctest::Approx(std::log(3.0)));
    // exact proportionality needs non-integer inputs
    const double e = std::exp(1.0);
    CHECK(std::log1p(e - 1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::log1p(e * e - 1) == doctest::Approx(2.0).epsilon(1e-15));
  }
  SUBCASE("ordering preserved") {
    Rng rng = make_rng(4);
    Image im;
    im.pixels.resize(16, 16);
    std::vector<int> values(256);
    std::iota(values.begin(), values.end(), 0);
    for (auto& v : values) v *= 15;  // distinct raw values stay distinct below ~5900
    std::shuffle(values.begin(), values.end(), rng);
    for (int i = 0; i < 256; ++i) im.pixels.data()[i] = static_cast<std::uint16_t>(values[i]);
    const Image out = log_transform(im);
    std::vector<int> a(256), b(256);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    std::stable_sort(a.begin(), a.end(), [&](int x, int y) { return im.pixels.data()[x] < im.pixels.data()[y]; });
    std::stable_sort(b.begin(), b.end(), [&](int x, int y) { return out.pixels.data()[x] < out.pixels.data()[y]; });
    CHECK(a == b);
    CHECK(out.pixels.maxCoeff() <= 65535);
  }
  SUBCASE("full range maps to full range") {
    Image im;
    im.pixels = Raster16::Constant(1, 1, 65535);
    CHECK(log_transform(im).pixels(0, 0) == 65535);
  }
}

TEST_CASE("invalid config rejected") {
  GenConfig c;
  c.n_cases = 0;
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
  c = GenConfig{};
  c.lesion_prevalence = 1.0;
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
}

TEST_CASE("save and load round trip") {
  const auto cases = generate_dataset(small_config(2), 8);
  const auto dir = std::filesystem::temp_directory_path() / "dualroi_phantom_rt";
  std::filesystem::remove_all(dir);
  save_dataset(cases, dir.string());
  const auto back = load_dataset(dir.string());
  REQUIRE(back.size() == cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    CHECK(back[i].case_id == cases[i].case_id);
    REQUIRE(back[i].exams.size() == cases[i].exams.size());
    for (std::size_t e = 0; e < cases[i].exams.size(); ++e)
      for (std::size_t v = 0; v < 4; ++v) {
        const Image &x = cases[i].exams[e].views[v], &y = back[i].exams[e].views[v];
        CHECK(x.pixels == y.pixels);
        CHECK(x.laterality == y.laterality);
        CHECK(x.view == y.view);
        CHECK(x.truth.size() == y.truth.size());
        CHECK(x.structures.size() == y.structures.size());
        CHECK(x.true_landmarks.p1 == y.true_landmarks.p1);
      }
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
}
