#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lmloc/evalsuite.hpp"

using namespace lmloc;
namespace fs = std::filesystem;

namespace {

PhantomSpec smoke_spec() {
  PhantomSpec s;
  s.extent_mm = {48, 48, 48};
  s.base_spacing_mm = 1.5;
  return s;
}

LandmarkSample make_sample(std::uint64_t seed, const std::vector<double>& scales) {
  auto ph = generate_phantom(smoke_spec(), seed);
  LandmarkSample s;
  s.id = "s" + std::to_string(seed);
  for (auto& v : build_pyramid(ph.volume, scales))
    s.pyramid.push_back(PyramidLevel::from_volume(std::move(v)));
  s.landmarks = ph.landmarks;
  s.split = "test";
  return s;
}

CascadeModel tiny_model(const std::vector<double>& scales, double noise_amp) {
  CascadeConfig cc;
  cc.scales_mm = scales;
  cc.patch_dims = {4, 4, 4};
  cc.noise_amplitude_mm = noise_amp;
  cc.locnet.depth = 1;
  cc.locnet.base_channels = 2;
  return build_cascade(cc, 2, 7);
}

void zero_weights(CascadeModel& m) {
  for (auto& scale : m.nets)
    for (auto& net : scale)
      for (auto& t : net.tensors)
        for (auto& v : t->value) v = 0.0f;
}

}  // namespace

TEST_CASE("euclidean_error basics") {
  CHECK(euclidean_error({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(euclidean_error({3, 4, 0}, {0, 0, 0}) == doctest::Approx(5.0));
  CHECK(euclidean_error({1, 1, 1}, {0, 0, 0}) == doctest::Approx(std::sqrt(3.0)));
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(euclidean_error({nan, 0, 0}, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("chi-square(3) closed form matches the tabulated 90% quantile") {
  CHECK(stats::chi2_cdf_3(6.2514) == doctest::Approx(0.9).epsilon(1e-4));
  CHECK(std::abs(stats::chi2_quantile_3(0.9) - 6.2514) < 1e-4);
  CHECK(stats::chi2_cdf_3(0.0) == 0.0);
  CHECK_THROWS_AS(stats::chi2_quantile_3(1.5), std::invalid_argument);
}

TEST_CASE("confidence_volume examples") {
  CHECK(std::abs(confidence_volume({1, 1, 1}) - 65.47) < 0.1);
  CHECK(confidence_volume({0, 1, 1}) == 0.0);
  const double v1 = confidence_volume({1.0, 1.5, 2.0});
  CHECK(confidence_volume({2.0, 3.0, 4.0}) == doctest::Approx(8.0 * v1));
  // monotone in each component
  CHECK(confidence_volume({1.1, 1.5, 2.0}) > v1);
  CHECK_THROWS_AS(confidence_volume({1, 1, 1}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(confidence_volume({1, 1, 1}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(confidence_volume({-1, 1, 1}), std::invalid_argument);
}

TEST_CASE("pearson examples and error paths") {
  {
    std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9};  // y = 2x + 1
    auto r = pearson(x, y);
    CHECK(r.r == doctest::Approx(1.0));
    CHECK(r.p <= 1e-12);
  }
  {
    std::vector<double> x{0, 1, 2, 5}, y{0, -1, -2, -5};
    CHECK(pearson(x, y).r == doctest::Approx(-1.0));
  }
  {
    std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
    auto r = pearson(x, y);
    CHECK(r.r == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(0.2).epsilon(0.01));
  }
  CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(pearson({1, 2}, {1, 2}), std::invalid_argument);

  // property: r in [-1, 1], p in (0, 1] on random data
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x, y;
    for (int i = 0; i < 12; ++i) {
      x.push_back(rng.normal());
      y.push_back(rng.normal());
    }
    auto r = pearson(x, y);
    CHECK(std::abs(r.r) <= 1.0);
    CHECK(r.p > 0.0);
    CHECK(r.p <= 1.0);
  }
}

TEST_CASE("summarize_passes: unbiased std and permutation invariance") {
  std::vector<Vec3> pts{{1, 0, 2}, {3, 0, 2}, {5, 0, 2}};
  auto s = detail::summarize_passes(pts);
  CHECK(s.mean.x == doctest::Approx(3.0));
  CHECK(s.std.x == doctest::Approx(2.0));  // sqrt(((2)^2+(0)^2+(2)^2)/2)
  CHECK(s.std.y == 0.0);
  CHECK(s.std.z == 0.0);
  CHECK(s.n_passes == 3);

  Rng rng(9);
  std::vector<Vec3> a;
  for (int i = 0; i < 20; ++i) a.push_back({rng.normal(), rng.normal(), rng.normal()});
  std::vector<Vec3> b = a;
  std::vector<std::size_t> idx(b.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  std::vector<Vec3> shuffled;
  for (auto i : idx) shuffled.push_back(b[i]);
  auto sa = detail::summarize_passes(a), sb = detail::summarize_passes(shuffled);
  CHECK(sa.mean.x == sb.mean.x);
  CHECK(sa.std.x == sb.std.x);
  CHECK(sa.confidence_vol == sb.confidence_vol);

  CHECK_THROWS_AS(detail::summarize_passes({{0, 0, 0}}), std::invalid_argument);
}

TEST_CASE("mc_predict: zero-weight stub recovers the noise distribution") {
  const std::vector<double> scales{6.0, 3.0};
  auto sample = make_sample(1, scales);
  auto pyr = detail::select_levels(sample.pyramid, scales);

  // zero weights make every Loc-Net emit a uniform heatmap, so each fine
  // stage returns its crop center verbatim and the final prediction is
  // (coarse center) + Uniform(-5, 5) noise per axis
  auto model = tiny_model(scales, 5.0);
  zero_weights(model);
  auto preds = mc_predict(model, pyr, 50, 99);
  REQUIRE(preds.size() == 2);
  const double expect = 5.0 / std::sqrt(3.0);
  for (const auto& p : preds) {
    CHECK(p.n_passes == 50);
    for (int d = 0; d < 3; ++d)
      CHECK(std::abs(p.std[d] - expect) < 0.15 * expect);
  }

  // determinism
  auto again = mc_predict(model, pyr, 50, 99);
  CHECK(again[0].mean.x == preds[0].mean.x);
  CHECK(again[0].std.x == preds[0].std.x);

  // zero amplitude: identical passes, zero std
  auto quiet = tiny_model(scales, 0.0);
  zero_weights(quiet);
  auto qp = mc_predict(quiet, pyr, 10, 99);
  CHECK(qp[0].std.x == 0.0);
  CHECK(qp[0].std.y == 0.0);
  CHECK(qp[0].std.z == 0.0);
  CHECK(qp[0].confidence_vol == 0.0);

  CHECK_THROWS_AS(mc_predict(model, pyr, 1, 99), std::invalid_argument);
}

TEST_CASE("evaluate: row counts, consistency, and report files") {
  const std::vector<double> scales{6.0, 3.0};
  std::vector<LandmarkSample> test_set{make_sample(1, scales),
                                       make_sample(2, scales),
                                       make_sample(3, scales)};
  auto det = tiny_model(scales, 5.0);
  auto noisy = tiny_model(scales, 5.0);

  auto report = evaluate({{"multiscale_e2e", &det}, {"multiscale_e2e_noise", &noisy}},
                         test_set, 10, 7);
  // rows = modes x samples x landmarks
  CHECK(report.cases.size() == 2 * 3 * 2);

  for (const auto& [mode, s] : report.summaries) {
    double mean = 0;
    int n = 0;
    for (const auto& c : report.cases)
      if (c.mode == mode) {
        mean += c.error_mm;
        ++n;
      }
    CHECK(n == s.n);
    CHECK(std::abs(mean / n - s.mean) < 1e-12);
    CHECK(s.q25 <= s.median);
    CHECK(s.median <= s.q75);
  }
  CHECK(!report.summaries["multiscale_e2e"].has_pearson);
  // sigma populated only for the noise mode
  for (const auto& c : report.cases) {
    if (c.mode == "multiscale_e2e_noise")
      CHECK(c.conf_vol > 0.0);
    else
      CHECK(c.conf_vol == 0.0);
  }

  CHECK_THROWS_AS(evaluate({{"ghost_mode", nullptr}}, test_set, 10, 7),
                  std::invalid_argument);
  CHECK_THROWS_AS(evaluate({{"multiscale_e2e", &det}}, {}, 10, 7),
                  std::invalid_argument);

  const fs::path dir = fs::temp_directory_path() / "lmloc_test_report";
  fs::create_directories(dir);
  write_report_csv(report, dir / "report.csv");
  write_summary_json(report, dir / "summary.json");
  std::ifstream csv(dir / "report.csv");
  std::string line;
  int rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 1 + static_cast<int>(report.cases.size()));
  nlohmann::json j;
  std::ifstream(dir / "summary.json") >> j;
  CHECK(j.at("modes").size() == 2);
  CHECK(j["modes"]["multiscale_e2e"]["n"] == 6);
  fs::remove_all(dir);
}
