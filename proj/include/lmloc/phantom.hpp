#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmloc/cascade.hpp"
#include "lmloc/rng.hpp"
#include "lmloc/volume.hpp"

namespace lmloc {

// Procedural bifurcating-tube phantom: a parent tube splits into two child
// tubes at an exactly known junction point. Two mirrored junctions per
// volume stand in for the left/right vessel pair.
struct PhantomSpec {
  Vec3 extent_mm{48, 48, 48};
  double base_spacing_mm = 1.5;
  double radius_min_mm = 3.0;
  double radius_max_mm = 5.0;
  double branch_angle_min_deg = 35.0;
  double branch_angle_max_deg = 70.0;
  double bifurcation_jitter_mm = 3.0;
  double intensity_background = 0.0;
  double intensity_vessel = 1.0;
  double noise_std = 0.05;

  static constexpr double kFaceMargin = 10.0;  // min landmark-to-face distance

  Dims3 base_dims() const {
    auto n = [&](double e) {
      const double d = e / base_spacing_mm;
      const int r = static_cast<int>(std::llround(d));
      if (std::abs(d - r) > 1e-9)
        throw std::invalid_argument("phantom: extent must be a multiple of base spacing");
      return r;
    };
    return {n(extent_mm.x), n(extent_mm.y), n(extent_mm.z)};
  }

  void validate() const {
    if (!(base_spacing_mm > 0))
      throw std::invalid_argument("phantom: base spacing must be > 0");
    if (radius_min_mm < 2.0 * base_spacing_mm)
      throw std::invalid_argument("phantom: tube radius must be >= 2 * base spacing");
    if (radius_max_mm < radius_min_mm)
      throw std::invalid_argument("phantom: radius range inverted");
    if (bifurcation_jitter_mm < 0 || noise_std < 0)
      throw std::invalid_argument("phantom: negative jitter or noise std");
    base_dims();
    // nominal junction positions; jitter must keep them >= 10mm from faces
    const double bx[2] = {0.3 * extent_mm.x, 0.7 * extent_mm.x};
    const double by = 0.5 * extent_mm.y, bz = 0.55 * extent_mm.z;
    const double j = bifurcation_jitter_mm;
    for (double x : bx) {
      if (x - j < kFaceMargin || x + j > extent_mm.x - kFaceMargin ||
          by - j < kFaceMargin || by + j > extent_mm.y - kFaceMargin ||
          bz - j < kFaceMargin || bz + j > extent_mm.z - kFaceMargin)
        throw std::invalid_argument(
            "phantom: bifurcation jitter violates the 10mm face margin");
    }
  }
};

namespace detail {

struct TubeSegment {
  Vec3 a, b;
  double radius;
};

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y + ab.z * ab.z;
  double t = 0.0;
  if (len2 > 0) {
    t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y + (p.z - a.z) * ab.z) / len2;
    t = std::clamp(t, 0.0, 1.0);
  }
  return (p - (a + ab * t)).norm();
}

// quadratic Bezier sampled as a short polyline
inline void add_curve(std::vector<TubeSegment>& segs, const Vec3& p0,
                      const Vec3& mid, const Vec3& p1, double radius, int n = 4) {
  Vec3 prev = p0;
  for (int i = 1; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const double u = 1.0 - t;
    Vec3 q = p0 * (u * u) + mid * (2 * u * t) + p1 * (t * t);
    segs.push_back({prev, q, radius});
    prev = q;
  }
}

}  // namespace detail

struct Phantom {
  Volume volume;  // base-spacing image
  std::vector<WorldPoint> landmarks;
};

inline Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(substream(seed, "phantom"));
  const Vec3 E = spec.extent_mm;

  std::vector<detail::TubeSegment> segs;
  std::vector<WorldPoint> landmarks;
  for (int side = 0; side < 2; ++side) {
    const double j = spec.bifurcation_jitter_mm;
    const Vec3 B{(side == 0 ? 0.3 : 0.7) * E.x + rng.uniform(-j, j),
                 0.5 * E.y + rng.uniform(-j, j),
                 0.55 * E.z + rng.uniform(-j, j)};
    const double r = rng.uniform(spec.radius_min_mm, spec.radius_max_mm);
    const double theta =
        rng.uniform(spec.branch_angle_min_deg, spec.branch_angle_max_deg) *
        (3.14159265358979323846 / 180.0);

    // parent rises from near the bottom face with gentle lateral curvature
    const Vec3 p0{B.x + rng.uniform(-4, 4), B.y + rng.uniform(-4, 4), 2.0};
    const Vec3 pmid{0.5 * (p0.x + B.x) + rng.uniform(-3, 3),
                    0.5 * (p0.y + B.y) + rng.uniform(-3, 3), 0.5 * (p0.z + B.z)};
    detail::add_curve(segs, p0, pmid, B, r);

    // two children diverge upward at +-theta/2 around vertical, in a plane
    // rotated by a random azimuth
    const double az = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double child_len = E.z - 2.0 - B.z;
    const double cr = 0.75 * r;
    for (int c = 0; c < 2; ++c) {
      const double ang = (c == 0 ? 0.5 : -0.5) * theta;
      const Vec3 dir{std::sin(ang) * std::cos(az), std::sin(ang) * std::sin(az),
                     std::cos(ang)};
      const double scale = child_len / dir.z;
      const Vec3 p1 = B + dir * scale;
      const Vec3 cmid = B + dir * (0.5 * scale) +
                        Vec3{rng.uniform(-2, 2), rng.uniform(-2, 2), 0.0};
      detail::add_curve(segs, B, cmid, p1, cr);
    }
    landmarks.push_back(B);
  }

  Volume vol(spec.base_dims(),
             {spec.base_spacing_mm, spec.base_spacing_mm, spec.base_spacing_mm},
             {0, 0, 0}, 1);
  const double h = spec.base_spacing_mm;
  for (int z = 0; z < vol.dims.nz; ++z)
    for (int y = 0; y < vol.dims.ny; ++y)
      for (int x = 0; x < vol.dims.nx; ++x) {
        const WorldPoint p = voxel_to_world(vol, {double(x), double(y), double(z)});
        double f = 0.0;
        for (const auto& s : segs) {
          const double d = detail::point_segment_distance(p, s.a, s.b);
          // one-voxel linear falloff at the tube wall
          f = std::max(f, std::clamp((s.radius + 0.5 * h - d) / h, 0.0, 1.0));
          if (f >= 1.0) break;
        }
        vol.at(x, y, z) = spec.intensity_background +
                          (spec.intensity_vessel - spec.intensity_background) * f;
      }
  Rng noise(substream(seed, "phantom-noise"));
  if (spec.noise_std > 0)
    for (auto& v : vol.data) v += noise.normal(0.0, spec.noise_std);
  return {std::move(vol), std::move(landmarks)};
}

// Repeated box-average downsampling of one base volume; all levels share the
// base world frame.
inline std::vector<Volume> build_pyramid(const Volume& base,
                                         const std::vector<double>& scales_mm) {
  std::vector<Volume> pyr;
  for (double s : scales_mm) {
    const double fd = s / base.spacing.x;
    const int f = static_cast<int>(std::llround(fd));
    if (f < 1 || std::abs(fd - f) > 1e-9)
      throw std::invalid_argument(
          "build_pyramid: scale must be an integer multiple of base spacing");
    pyr.push_back(f == 1 ? base : downsample(base, f));
  }
  return pyr;
}

struct LandmarkSample {
  std::string id;
  std::vector<PyramidLevel> pyramid;
  std::vector<WorldPoint> landmarks;
  std::string split;
};

struct DatasetSplit {
  int train = 0, val = 0, test = 0;
};

inline nlohmann::json spec_to_json(const PhantomSpec& s) {
  return {{"extent_mm", {s.extent_mm.x, s.extent_mm.y, s.extent_mm.z}},
          {"base_spacing_mm", s.base_spacing_mm},
          {"radius_range_mm", {s.radius_min_mm, s.radius_max_mm}},
          {"branch_angle_range_deg", {s.branch_angle_min_deg, s.branch_angle_max_deg}},
          {"bifurcation_jitter_mm", s.bifurcation_jitter_mm},
          {"intensity_background", s.intensity_background},
          {"intensity_vessel", s.intensity_vessel},
          {"noise_std", s.noise_std}};
}

// Generates n phantoms with derived per-sample seeds, writes one .vol per
// pyramid level per sample, and a dataset.json manifest.
inline std::filesystem::path generate_dataset(
    const PhantomSpec& spec, int n, DatasetSplit split,
    const std::vector<double>& scales_mm, std::uint64_t master_seed,
    const std::filesystem::path& out_dir, bool force = false) {
  spec.validate();
  if (split.train + split.val + split.test != n)
    throw std::invalid_argument("generate_dataset: split counts must sum to n");
  namespace fs = std::filesystem;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
    throw std::runtime_error("generate_dataset: output directory " +
                             out_dir.string() + " not empty (use force)");
  fs::create_directories(out_dir);

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["spec"] = spec_to_json(spec);
  manifest["scales_mm"] = scales_mm;
  manifest["master_seed"] = master_seed;
  manifest["samples"] = nlohmann::json::array();

  for (int i = 0; i < n; ++i) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "phantom_%04d", i);
    const std::string id = idbuf;
    const std::uint64_t sample_seed = substream(master_seed, "sample", i);
    Phantom ph = generate_phantom(spec, sample_seed);
    auto pyr = build_pyramid(ph.volume, scales_mm);
    fs::create_directories(out_dir / id);
    nlohmann::json js;
    js["id"] = id;
    js["split"] = i < split.train            ? "train"
                  : i < split.train + split.val ? "val"
                                                : "test";
    js["volumes"] = nlohmann::json::array();
    for (std::size_t s = 0; s < pyr.size(); ++s) {
      char name[32];
      std::snprintf(name, sizeof name, "scale%zu.vol", s);
      const std::string rel = id + std::string("/") + name;
      write_volume(pyr[s], (out_dir / rel).string());
      js["volumes"].push_back(rel);
    }
    js["landmarks_mm"] = nlohmann::json::array();
    for (const auto& lm : ph.landmarks)
      js["landmarks_mm"].push_back({lm.x, lm.y, lm.z});
    manifest["samples"].push_back(js);
  }
  const fs::path mpath = out_dir / "dataset.json";
  std::ofstream f(mpath, std::ios::trunc);
  f << manifest.dump(2) << "\n";
  return mpath;
}

// Loads samples from a manifest. `split` empty loads everything. When
// `stream_finest` is set the finest level stays file-backed.
inline std::vector<LandmarkSample> load_dataset(
    const std::filesystem::path& manifest_path, const std::string& split = "",
    bool stream_finest = false) {
  std::ifstream f(manifest_path);
  if (!f)
    throw std::runtime_error("load_dataset: cannot open " + manifest_path.string());
  nlohmann::json manifest;
  f >> manifest;
  const auto dir = manifest_path.parent_path();
  std::vector<LandmarkSample> out;
  for (const auto& js : manifest.at("samples")) {
    if (!split.empty() && js.at("split").get<std::string>() != split) continue;
    LandmarkSample s;
    s.id = js.at("id").get<std::string>();
    s.split = js.at("split").get<std::string>();
    const auto& vols = js.at("volumes");
    for (std::size_t i = 0; i < vols.size(); ++i) {
      const std::string path = (dir / vols[i].get<std::string>()).string();
      if (stream_finest && i + 1 == vols.size())
        s.pyramid.push_back(PyramidLevel::from_file(path));
      else
        s.pyramid.push_back(PyramidLevel::from_volume(read_volume(path)));
    }
    for (const auto& lm : js.at("landmarks_mm"))
      s.landmarks.push_back({lm[0].get<double>(), lm[1].get<double>(),
                             lm[2].get<double>()});
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lmloc
