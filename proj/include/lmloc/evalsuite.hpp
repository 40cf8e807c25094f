#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmloc/cascade.hpp"
#include "lmloc/phantom.hpp"
#include "lmloc/rng.hpp"

namespace lmloc {

inline double euclidean_error(const WorldPoint& pred, const WorldPoint& gt) {
  if (!pred.finite() || !gt.finite())
    throw std::invalid_argument("euclidean_error: non-finite point");
  return (pred - gt).norm();
}

// ---------------------------------------------------------------------------
// Small numerics: chi-square(3) CDF/quantile, regularized incomplete beta
// ---------------------------------------------------------------------------

namespace stats {

// closed form for k = 3: P(x) = erf(sqrt(x/2)) - sqrt(2/pi) * sqrt(x) * e^{-x/2}
inline double chi2_cdf_3(double x) {
  if (x <= 0) return 0.0;
  return std::erf(std::sqrt(0.5 * x)) -
         std::sqrt(2.0 / 3.14159265358979323846) * std::sqrt(x) * std::exp(-0.5 * x);
}

inline double chi2_quantile_3(double p) {
  if (!(p > 0 && p < 1))
    throw std::invalid_argument("chi2_quantile_3: p must be in (0, 1)");
  double lo = 0.0, hi = 1.0;
  while (chi2_cdf_3(hi) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (chi2_cdf_3(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// regularized incomplete beta I_x(a, b) via the Lentz continued fraction
inline double betacf(double a, double b, double x) {
  const double eps = 1e-15, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

inline double incbeta(double a, double b, double x) {
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
               a * std::log(x) + b * std::log(1.0 - x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

// two-sided p-value of a t statistic with nu degrees of freedom
inline double t_two_sided_p(double t, double nu) {
  const double x = nu / (nu + t * t);
  double p = incbeta(0.5 * nu, 0.5, x);
  return std::clamp(p, 1e-300, 1.0);
}

}  // namespace stats

// V = (4/3) pi sx sy sz chi^{3/2}: volume of the `level` ellipsoid of an
// uncorrelated trivariate Gaussian. chi2_3(0.9) is pinned to the tabulated
// 6.2514; other levels fall back to the numeric quantile.
inline double confidence_volume(const Vec3& sigma, double level = 0.9) {
  if (!(level > 0 && level < 1))
    throw std::invalid_argument("confidence_volume: level must be in (0, 1)");
  if (sigma.x < 0 || sigma.y < 0 || sigma.z < 0)
    throw std::invalid_argument("confidence_volume: sigma must be >= 0");
  const double chi = level == 0.9 ? 6.2514 : stats::chi2_quantile_3(level);
  return (4.0 / 3.0) * 3.14159265358979323846 * sigma.x * sigma.y * sigma.z *
         std::pow(chi, 1.5);
}

struct PearsonResult {
  double r = 0;
  double p = 1;
};

inline PearsonResult pearson(const std::vector<double>& x,
                             const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 3)
    throw std::invalid_argument("pearson: need matched inputs of length >= 3");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0)
    throw std::invalid_argument("pearson: constant input has undefined correlation");
  PearsonResult res;
  res.r = sxy / std::sqrt(sxx * syy);
  const double nu = static_cast<double>(n) - 2.0;
  if (std::abs(res.r) >= 1.0) {
    res.p = 1e-300;
  } else {
    const double t = res.r * std::sqrt(nu / (1.0 - res.r * res.r));
    res.p = stats::t_two_sided_p(t, nu);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Monte-Carlo uncertainty
// ---------------------------------------------------------------------------

struct PredictionWithUncertainty {
  WorldPoint mean{0, 0, 0};
  Vec3 std{0, 0, 0};
  double confidence_vol = 0;
  int n_passes = 0;
};

namespace detail {

// Mean and unbiased per-axis std; values are sorted per axis first so the
// result is exactly permutation-invariant over pass order.
inline PredictionWithUncertainty summarize_passes(std::vector<Vec3> pts) {
  if (pts.size() < 2)
    throw std::invalid_argument("mc_predict: need at least 2 passes");
  PredictionWithUncertainty out;
  out.n_passes = static_cast<int>(pts.size());
  const double n = static_cast<double>(pts.size());
  for (int d = 0; d < 3; ++d) {
    std::vector<double> v;
    for (const auto& p : pts) v.push_back(p[d]);
    std::sort(v.begin(), v.end());
    double m = 0;
    for (double x : v) m += x;
    m /= n;
    double s2 = 0;
    for (double x : v) s2 += (x - m) * (x - m);
    (d == 0 ? out.mean.x : d == 1 ? out.mean.y : out.mean.z) = m;
    (d == 0 ? out.std.x : d == 1 ? out.std.y : out.std.z) =
        std::sqrt(s2 / (n - 1.0));
  }
  out.confidence_vol = confidence_volume(out.std);
  return out;
}

}  // namespace detail

// n noisy forward passes (test-time shift at the finest crop); per landmark:
// MC mean, unbiased per-axis std, and the 90% confidence volume.
inline std::vector<PredictionWithUncertainty> mc_predict(
    const CascadeModel& model, const std::vector<PyramidLevel>& pyramid,
    int n = 50, std::uint64_t base_seed = 0) {
  if (n < 2) throw std::invalid_argument("mc_predict: n must be >= 2");
  std::vector<std::vector<Vec3>> per_landmark(
      static_cast<std::size_t>(model.n_landmarks));
  for (int pass = 0; pass < n; ++pass) {
    Rng rng(substream(base_seed, "mc", static_cast<std::uint64_t>(pass)));
    Tape<float> tape;
    auto out = cascade_forward(tape, model, pyramid, NoiseSpec::train(), &rng);
    for (int k = 0; k < model.n_landmarks; ++k)
      per_landmark[static_cast<std::size_t>(k)].push_back(out.final_pred(k));
  }
  std::vector<PredictionWithUncertainty> res;
  for (auto& pts : per_landmark)
    res.push_back(detail::summarize_passes(std::move(pts)));
  return res;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct EvalCase {
  std::string id;
  int landmark = 0;
  std::string mode;
  double error_mm = 0;
  Vec3 sigma{0, 0, 0};
  double conf_vol = 0;
};

struct ModeSummary {
  double mean = 0, std = 0, median = 0, q25 = 0, q75 = 0;
  int n = 0;
  bool has_pearson = false;
  PearsonResult corr;
};

struct EvalReport {
  std::vector<EvalCase> cases;
  std::map<std::string, ModeSummary> summaries;
};

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(i);
  return v[i] * (1.0 - frac) + v[i + 1] * frac;
}

inline ModeSummary summarize_errors(const std::vector<double>& errs) {
  ModeSummary s;
  s.n = static_cast<int>(errs.size());
  for (double e : errs) s.mean += e;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double acc = 0;
    for (double e : errs) acc += (e - s.mean) * (e - s.mean);
    s.std = std::sqrt(acc / static_cast<double>(s.n - 1));
  }
  s.median = quantile(errs, 0.5);
  s.q25 = quantile(errs, 0.25);
  s.q75 = quantile(errs, 0.75);
  return s;
}

}  // namespace detail

// `mc_passes` applies to modes whose name contains "noise": their reported
// prediction is the MC mean and their (confidence volume, error) pairs feed a
// pooled Pearson test. Other modes run one deterministic pass.
inline EvalReport evaluate(
    const std::vector<std::pair<std::string, const CascadeModel*>>& models,
    const std::vector<LandmarkSample>& test_set, int mc_passes = 50,
    std::uint64_t seed = 0) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalReport report;
  for (const auto& [mode, model] : models) {
    if (model == nullptr)
      throw std::invalid_argument("evaluate: missing model for mode " + mode);
    const bool noisy = mode.find("noise") != std::string::npos;
    std::vector<double> errs, vols;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      const auto& sample = test_set[i];
      auto pyr = detail::select_levels(sample.pyramid, model->cfg.scales_mm);
      std::vector<EvalCase> rows;
      if (noisy) {
        auto preds = mc_predict(*model, pyr, mc_passes,
                                substream(seed, "eval", i));
        for (int k = 0; k < model->n_landmarks; ++k) {
          const auto& p = preds[static_cast<std::size_t>(k)];
          rows.push_back(EvalCase{
              sample.id, k, mode,
              euclidean_error(p.mean, sample.landmarks[static_cast<std::size_t>(k)]),
              p.std, p.confidence_vol});
        }
      } else {
        Tape<float> tape;
        auto out = cascade_forward(tape, *model, pyr, NoiseSpec::off());
        for (int k = 0; k < model->n_landmarks; ++k)
          rows.push_back(EvalCase{
              sample.id, k, mode,
              euclidean_error(out.final_pred(k),
                              sample.landmarks[static_cast<std::size_t>(k)]),
              Vec3{0, 0, 0}, 0});
      }
      for (auto& row : rows) {
        errs.push_back(row.error_mm);
        if (noisy) vols.push_back(row.conf_vol);
        report.cases.push_back(std::move(row));
      }
    }
    ModeSummary s = detail::summarize_errors(errs);
    if (noisy && vols.size() >= 3) {
      try {
        s.corr = pearson(vols, errs);
        s.has_pearson = true;
      } catch (const std::invalid_argument&) {
        s.has_pearson = false;  // degenerate (constant) inputs
      }
    }
    report.summaries[mode] = s;
  }
  return report;
}

inline void write_report_csv(const EvalReport& report,
                             const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_csv: cannot write " + path.string());
  f.precision(17);
  f << "id,landmark,mode,error_mm,sigma_x_mm,sigma_y_mm,sigma_z_mm,conf_vol_mm3\n";
  for (const auto& c : report.cases)
    f << c.id << "," << c.landmark << "," << c.mode << "," << c.error_mm << ","
      << c.sigma.x << "," << c.sigma.y << "," << c.sigma.z << "," << c.conf_vol
      << "\n";
}

inline void write_summary_json(const EvalReport& report,
                               const std::filesystem::path& path) {
  nlohmann::json j;
  j["pearson_pooling"] = "per-landmark cases pooled across samples";
  for (const auto& [mode, s] : report.summaries) {
    nlohmann::json m{{"mean", s.mean}, {"std", s.std},   {"median", s.median},
                     {"q25", s.q25},   {"q75", s.q75},   {"n", s.n}};
    if (s.has_pearson) m["pearson"] = {{"r", s.corr.r}, {"p", s.corr.p}};
    j["modes"][mode] = m;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f)
    throw std::runtime_error("write_summary_json: cannot write " + path.string());
  f << j.dump(2) << "\n";
}

}  // namespace lmloc
