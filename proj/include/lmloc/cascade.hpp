#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmloc/locnet.hpp"
#include "lmloc/rng.hpp"
#include "lmloc/volume.hpp"

namespace lmloc {

// One level of a resolution pyramid. The voxel data may live in memory or
// stay on disk, in which case only the crop windows actually sampled are
// ever materialized.
struct PyramidLevel {
  std::shared_ptr<const Volume> vol;  // null when file-backed
  std::string path;                   // non-empty when file-backed
  Dims3 dims;
  Vec3 spacing, origin;

  static PyramidLevel from_volume(Volume v) {
    PyramidLevel lv;
    lv.dims = v.dims;
    lv.spacing = v.spacing;
    lv.origin = v.origin;
    lv.vol = std::make_shared<const Volume>(std::move(v));
    return lv;
  }

  static PyramidLevel from_file(const std::string& path) {
    PyramidLevel lv;
    Volume hdr;
    detail::read_vol_header(path, hdr);
    lv.dims = hdr.dims;
    lv.spacing = hdr.spacing;
    lv.origin = hdr.origin;
    lv.path = path;
    return lv;
  }

  Vec3 world_center() const {
    return {origin.x + 0.5 * (dims.nx - 1) * spacing.x,
            origin.y + 0.5 * (dims.ny - 1) * spacing.y,
            origin.z + 0.5 * (dims.nz - 1) * spacing.z};
  }
  double extent_mm(int d) const { return dims[d] * spacing[d]; }

  // Materializes the voxel window [lo, hi).
  Volume window(Dims3 lo, Dims3 hi) const {
    if (vol) {
      Dims3 od{hi.nx - lo.nx, hi.ny - lo.ny, hi.nz - lo.nz};
      Volume out(od, spacing,
                 voxel_to_world(*vol, {double(lo.nx), double(lo.ny), double(lo.nz)}),
                 1);
      for (int z = 0; z < od.nz; ++z)
        for (int y = 0; y < od.ny; ++y)
          for (int x = 0; x < od.nx; ++x)
            out.at(x, y, z) = vol->at(lo.nx + x, lo.ny + y, lo.nz + z);
      return out;
    }
    return read_volume_region(path, lo, hi);
  }
};

struct CascadeConfig {
  std::vector<double> scales_mm{4.0, 2.0, 1.0, 0.5};  // coarse to fine
  Dims3 patch_dims{56, 56, 56};
  double noise_amplitude_mm = 5.0;
  bool share_fine_weights = true;      // one fine net applied per landmark
  bool inject_noise_all_scales = false;  // ablation switch
  bool stream_finest = false;          // keep the finest level on disk
  LocNetConfig locnet;

  std::size_t n_scales() const { return scales_mm.size(); }

  void validate() const {
    if (scales_mm.size() < 1)
      throw std::invalid_argument("cascade: at least one scale required");
    for (std::size_t s = 1; s < scales_mm.size(); ++s)
      if (!(scales_mm[s] < scales_mm[s - 1]))
        throw std::invalid_argument("cascade: scales must be strictly decreasing");
    const int f = locnet.pool_factor();
    if (patch_dims.nx % f || patch_dims.ny % f || patch_dims.nz % f)
      throw std::invalid_argument("cascade: patch dims must be divisible by 2^depth");
    if (noise_amplitude_mm < 0)
      throw std::invalid_argument("cascade: noise amplitude must be >= 0");
  }
};

// Scale-specific Loc-Nets. Scale 0 predicts all landmarks from the full
// coarsest volume through a K-channel head; finer scales run one
// single-channel net per landmark patch (weights shared across landmarks
// unless share_fine_weights is off).
struct CascadeModel {
  CascadeConfig cfg;
  int n_landmarks = 1;
  std::vector<std::vector<ParamSet>> nets;  // [scale][net]

  LocNetConfig scale_cfg(std::size_t s) const {
    LocNetConfig c = cfg.locnet;
    c.out_channels = s == 0 ? n_landmarks : 1;
    return c;
  }
  ParamSet& net_for(std::size_t s, int landmark) {
    return nets[s][s == 0 || cfg.share_fine_weights ? 0 : static_cast<std::size_t>(landmark)];
  }
  const ParamSet& net_for(std::size_t s, int landmark) const {
    return nets[s][s == 0 || cfg.share_fine_weights ? 0 : static_cast<std::size_t>(landmark)];
  }
};

inline CascadeModel build_cascade(const CascadeConfig& cfg, int n_landmarks,
                                  std::uint64_t seed) {
  cfg.validate();
  CascadeModel m;
  m.cfg = cfg;
  m.n_landmarks = n_landmarks;
  for (std::size_t s = 0; s < cfg.n_scales(); ++s) {
    std::vector<ParamSet> nets;
    const int copies = (s == 0 || cfg.share_fine_weights) ? 1 : n_landmarks;
    for (int i = 0; i < copies; ++i)
      nets.push_back(build_locnet(m.scale_cfg(s), 1,
                                  substream(seed, "scale", s * 16 + i)));
    m.nets.push_back(std::move(nets));
  }
  return m;
}

struct NoiseSpec {
  enum class Mode { off, random, fixed } mode = Mode::off;
  Vec3 fixed_offset{0, 0, 0};

  static NoiseSpec off() { return {}; }
  static NoiseSpec train() { return {Mode::random, {}}; }
  static NoiseSpec fixed(Vec3 v) { return {Mode::fixed, v}; }
};

struct CascadeOutput {
  std::vector<std::vector<Node<float>*>> preds;     // [scale][landmark]
  std::vector<std::vector<Node<float>*>> heatmaps;  // [scale][landmark]
  std::vector<std::vector<Vec3>> crop_centers;      // [scale][landmark], scale>=1

  Vec3 final_pred(int landmark) const {
    return point_value(preds.back()[static_cast<std::size_t>(landmark)]);
  }
};

namespace detail {

inline void check_pyramid(const CascadeConfig& cfg,
                          const std::vector<PyramidLevel>& pyr) {
  if (pyr.size() != cfg.n_scales())
    throw std::invalid_argument("cascade: pyramid level count mismatch");
  for (std::size_t s = 0; s < pyr.size(); ++s) {
    for (int d = 0; d < 3; ++d) {
      if (std::abs(pyr[s].spacing[d] - cfg.scales_mm[s]) > 1e-9)
        throw std::invalid_argument("cascade: pyramid spacing does not match scale " +
                                    std::to_string(s));
      if (std::abs(pyr[s].extent_mm(d) - pyr[0].extent_mm(d)) > 1e-6 ||
          std::abs(pyr[s].world_center()[d] - pyr[0].world_center()[d]) > 1e-6)
        throw std::invalid_argument("cascade: pyramid levels do not share a world frame");
    }
  }
  const int f = cfg.locnet.pool_factor();
  if (pyr[0].dims.nx % f || pyr[0].dims.ny % f || pyr[0].dims.nz % f)
    throw std::invalid_argument("cascade: coarsest dims must be divisible by 2^depth");
}

// Materializes a leaf node holding the source window needed to sample a
// patch_dims patch centered at `center`, plus a margin voxel on each side.
inline Node<float>* crop_window_leaf(Tape<float>& tape, const PyramidLevel& lv,
                                     const Vec3& center, Dims3 patch,
                                     Vec3 spacing, GridGeometry& geom_out) {
  Dims3 lo, hi;
  for (int d = 0; d < 3; ++d) {
    const double half = 0.5 * (patch[d] - 1) * spacing[d];
    const double vmin = (center[d] - half - lv.origin[d]) / lv.spacing[d];
    const double vmax = (center[d] + half - lv.origin[d]) / lv.spacing[d];
    int l = static_cast<int>(std::floor(vmin)) - 1;
    int h = static_cast<int>(std::ceil(vmax)) + 2;
    l = std::max(0, std::min(l, lv.dims[d] - 1));
    h = std::max(l + 1, std::min(h, lv.dims[d]));
    (d == 0 ? lo.nx : d == 1 ? lo.ny : lo.nz) = l;
    (d == 0 ? hi.nx : d == 1 ? hi.ny : hi.nz) = h;
  }
  Volume win = lv.window(lo, hi);
  std::vector<float> vals(win.data.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<float>(win.data[i]);
  geom_out = GridGeometry{win.spacing, win.origin};
  return tape.leaf({1, win.dims.nx, win.dims.ny, win.dims.nz}, vals.data(),
                   false);
}

}  // namespace detail

// Picks the pyramid levels matching `scales` (mm) out of a larger pyramid.
namespace detail {
inline std::vector<PyramidLevel> select_levels(
    const std::vector<PyramidLevel>& pyramid, const std::vector<double>& scales) {
  std::vector<PyramidLevel> out;
  for (double s : scales) {
    bool found = false;
    for (const auto& lv : pyramid)
      if (std::abs(lv.spacing.x - s) < 1e-9) {
        out.push_back(lv);
        found = true;
        break;
      }
    if (!found)
      throw std::invalid_argument("cascade: sample pyramid has no level at " +
                                  std::to_string(s) + " mm");
  }
  return out;
}
}  // namespace detail

// Runs the coarse-to-fine chain. Gradients flow across scales through both
// the crop source samples and the crop centers unless `detach_centers` is
// set (the multi-step training ablation). `max_scale` < 0 runs all scales.
inline CascadeOutput cascade_forward(Tape<float>& tape, const CascadeModel& model,
                                     const std::vector<PyramidLevel>& pyramid,
                                     const NoiseSpec& noise, Rng* rng = nullptr,
                                     bool detach_centers = false,
                                     int max_scale = -1) {
  const CascadeConfig& cfg = model.cfg;
  detail::check_pyramid(cfg, pyramid);
  if (noise.mode == NoiseSpec::Mode::random && rng == nullptr)
    throw std::invalid_argument("cascade_forward: random noise requires an rng");
  const std::size_t last =
      max_scale < 0 ? cfg.n_scales() - 1
                    : static_cast<std::size_t>(std::min<int>(max_scale, int(cfg.n_scales()) - 1));
  const int K = model.n_landmarks;

  CascadeOutput out;
  // scale 0: full coarsest volume, K-channel head
  {
    const PyramidLevel& lv = pyramid[0];
    Volume full = lv.window({0, 0, 0}, lv.dims);
    std::vector<float> vals(full.data.size());
    for (std::size_t i = 0; i < vals.size(); ++i)
      vals[i] = static_cast<float>(full.data[i]);
    Node<float>* in =
        tape.leaf({1, lv.dims.nx, lv.dims.ny, lv.dims.nz}, vals.data(), false);
    LocNetOutput o = locnet_forward(tape, model.net_for(0, 0), model.scale_cfg(0),
                                    in, GridGeometry{lv.spacing, lv.origin});
    out.preds.push_back(o.preds);
    out.heatmaps.push_back(o.heatmaps);
    out.crop_centers.push_back({});
  }

  for (std::size_t s = 1; s <= last; ++s) {
    const PyramidLevel& lv = pyramid[s];
    const Vec3 sp{cfg.scales_mm[s], cfg.scales_mm[s], cfg.scales_mm[s]};
    const Vec3 half{0.5 * (cfg.patch_dims.nx - 1) * sp.x,
                    0.5 * (cfg.patch_dims.ny - 1) * sp.y,
                    0.5 * (cfg.patch_dims.nz - 1) * sp.z};
    const bool noisy_scale =
        noise.mode != NoiseSpec::Mode::off &&
        (s == cfg.n_scales() - 1 || cfg.inject_noise_all_scales);
    std::vector<Node<float>*> preds, heatmaps;
    std::vector<Vec3> centers;
    for (int l = 0; l < K; ++l) {
      Node<float>* center = out.preds[s - 1][static_cast<std::size_t>(l)];
      if (detach_centers) center = point_leaf<float>(tape, point_value(center));
      if (noisy_scale) {
        Vec3 off = noise.fixed_offset;
        if (noise.mode == NoiseSpec::Mode::random) {
          const double a = cfg.noise_amplitude_mm;
          off = {rng->uniform(-a, a), rng->uniform(-a, a), rng->uniform(-a, a)};
        }
        center = add_const_point(tape, center, off);
      }
      centers.push_back(point_value(center));
      GridGeometry win_geom;
      Node<float>* src = detail::crop_window_leaf(tape, lv, point_value(center),
                                                  cfg.patch_dims, sp, win_geom);
      Node<float>* patch = diff_crop_resample(tape, src, win_geom, center,
                                              cfg.patch_dims, sp, 0.0f);
      // run the net in the patch-local frame, then shift by the (still
      // differentiable) patch origin so gradients reach the crop center
      LocNetOutput o =
          locnet_forward(tape, model.net_for(s, l), model.scale_cfg(s), patch,
                         GridGeometry{sp, {0, 0, 0}});
      Node<float>* origin =
          add_const_point(tape, center, Vec3{-half.x, -half.y, -half.z});
      preds.push_back(add_nodes(tape, o.preds[0], origin));
      heatmaps.push_back(o.heatmaps[0]);
    }
    out.preds.push_back(preds);
    out.heatmaps.push_back(heatmaps);
    out.crop_centers.push_back(centers);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scheduled multi-scale loss
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int total_epochs = 500;
  // per scale, sorted (epoch, weight) breakpoints
  std::vector<std::vector<std::pair<double, double>>> breakpoints;

  void validate() const {
    if (breakpoints.empty())
      throw std::invalid_argument("schedule: no breakpoints");
    for (const auto& bp : breakpoints) {
      if (bp.empty()) throw std::invalid_argument("schedule: empty scale schedule");
      for (std::size_t i = 0; i < bp.size(); ++i) {
        if (bp[i].second < 0)
          throw std::invalid_argument("schedule: weights must be >= 0");
        if (i > 0 && bp[i].first <= bp[i - 1].first)
          throw std::invalid_argument("schedule: breakpoint epochs must increase");
      }
    }
  }
};

// Coarsest weight ramps 1 -> 0 over training, finest 0 -> 1, middle scales
// rise to a unit peak at the midpoint and fall back to 0.
inline ScheduleConfig default_schedule(std::size_t n_scales, int total_epochs = 500,
                                       double middle_peak = 1.0) {
  ScheduleConfig s;
  s.total_epochs = total_epochs;
  const double T = total_epochs;
  for (std::size_t i = 0; i < n_scales; ++i) {
    if (n_scales == 1) {
      s.breakpoints.push_back({{0.0, 1.0}});
    } else if (i == 0) {
      s.breakpoints.push_back({{0.0, 1.0}, {T, 0.0}});
    } else if (i == n_scales - 1) {
      s.breakpoints.push_back({{0.0, 0.0}, {T, 1.0}});
    } else {
      s.breakpoints.push_back({{0.0, 0.0}, {T / 2, middle_peak}, {T, 0.0}});
    }
  }
  return s;
}

// Piecewise-linear interpolation of the per-scale breakpoints; epochs beyond
// the last breakpoint clamp to its value.
inline std::vector<double> loss_weights(double epoch, const ScheduleConfig& sched) {
  sched.validate();
  if (epoch < 0) throw std::invalid_argument("loss_weights: epoch must be >= 0");
  std::vector<double> w;
  for (const auto& bp : sched.breakpoints) {
    if (epoch <= bp.front().first) {
      w.push_back(bp.front().second);
    } else if (epoch >= bp.back().first) {
      w.push_back(bp.back().second);
    } else {
      double val = bp.back().second;
      for (std::size_t i = 1; i < bp.size(); ++i)
        if (epoch <= bp[i].first) {
          const double t =
              (epoch - bp[i - 1].first) / (bp[i].first - bp[i - 1].first);
          val = bp[i - 1].second + t * (bp[i].second - bp[i - 1].second);
          break;
        }
      w.push_back(val);
    }
  }
  return w;
}

// Weighted sum over scales of the landmark-averaged squared Euclidean error
// (mm^2).
inline Node<float>* cascade_loss(Tape<float>& tape, const CascadeOutput& out,
                                 const std::vector<WorldPoint>& gt,
                                 const std::vector<double>& weights) {
  if (weights.size() < out.preds.size())
    throw std::invalid_argument("cascade_loss: weight per scale required");
  std::vector<Node<float>*> terms;
  std::vector<double> coeffs;
  const double invK = 1.0 / static_cast<double>(gt.size());
  for (std::size_t s = 0; s < out.preds.size(); ++s)
    for (std::size_t l = 0; l < gt.size(); ++l) {
      terms.push_back(squared_distance(tape, out.preds[s][l], gt[l]));
      coeffs.push_back(weights[s] * invK);
    }
  return weighted_sum(tape, terms, coeffs);
}

// Gaussian blob target for the heatmap-regression baseline: peak 1 at the
// ground-truth point, std sigma in mm, unnormalized.
inline Volume heatmap_target(const GridGeometry& geom, Dims3 dims,
                             const WorldPoint& gt, double sigma_mm = 6.0) {
  if (!(sigma_mm > 0)) throw std::invalid_argument("heatmap_target: sigma must be > 0");
  Volume out(dims, geom.spacing, geom.origin, 1);
  const double inv2s2 = 1.0 / (2.0 * sigma_mm * sigma_mm);
  for (int z = 0; z < dims.nz; ++z)
    for (int y = 0; y < dims.ny; ++y)
      for (int x = 0; x < dims.nx; ++x) {
        const WorldPoint p = voxel_to_world(out, {double(x), double(y), double(z)});
        const double d2 = (p - gt).norm() * (p - gt).norm();
        out.at(x, y, z) = std::exp(-d2 * inv2s2);
      }
  return out;
}

}  // namespace lmloc
