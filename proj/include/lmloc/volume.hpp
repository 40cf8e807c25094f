#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lmloc/memtrack.hpp"

namespace lmloc {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double operator[](int d) const { return d == 0 ? x : d == 1 ? y : z; }
  double& operator[](int d) { return d == 0 ? x : d == 1 ? y : z; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }

  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

// A landmark position in physical mm coordinates.
using WorldPoint = Vec3;

struct Dims3 {
  int nx = 1, ny = 1, nz = 1;

  int operator[](int d) const { return d == 0 ? nx : d == 1 ? ny : nz; }
  bool operator==(const Dims3&) const = default;
  std::size_t numel() const {
    return static_cast<std::size_t>(nx) * ny * nz;
  }
};

// Dense 3D scalar grid with physical geometry. The center of voxel (0,0,0)
// sits at `origin`; data is laid out x-fastest, then y, then z, then channel.
struct Volume {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};  // mm per voxel
  Vec3 origin{0, 0, 0};   // mm, world position of voxel (0,0,0) center
  int channels = 1;
  Buffer<double> data;

  Volume() = default;
  Volume(Dims3 d, Vec3 sp, Vec3 org, int ch = 1)
      : dims(d), spacing(sp), origin(org), channels(ch) {
    validate_geometry();
    data.assign(dims.numel() * channels, 0.0f);
  }

  void validate_geometry() const {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
      throw std::invalid_argument("volume: all dims must be >= 1");
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0))
      throw std::invalid_argument("volume: all spacings must be > 0");
    if (channels < 1)
      throw std::invalid_argument("volume: channels must be >= 1");
    if (!origin.finite() || !spacing.finite())
      throw std::invalid_argument("volume: non-finite geometry");
  }

  std::size_t index(int x, int y, int z, int c = 0) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims.nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims.ny) *
                    (static_cast<std::size_t>(z) +
                     static_cast<std::size_t>(dims.nz) * c));
  }

  double at(int x, int y, int z, int c = 0) const {
    return data[index(x, y, z, c)];
  }
  double& at(int x, int y, int z, int c = 0) { return data[index(x, y, z, c)]; }

  double extent_mm(int d) const { return dims[d] * spacing[d]; }
};

inline Vec3 world_to_voxel(const Volume& vol, const WorldPoint& p) {
  if (!p.finite()) throw std::invalid_argument("world_to_voxel: non-finite point");
  return {(p.x - vol.origin.x) / vol.spacing.x,
          (p.y - vol.origin.y) / vol.spacing.y,
          (p.z - vol.origin.z) / vol.spacing.z};
}

inline WorldPoint voxel_to_world(const Volume& vol, const Vec3& v) {
  if (!v.finite()) throw std::invalid_argument("voxel_to_world: non-finite coords");
  return {vol.origin.x + v.x * vol.spacing.x,
          vol.origin.y + v.y * vol.spacing.y,
          vol.origin.z + v.z * vol.spacing.z};
}

// Box-average pooling by an integer factor per axis. Output voxel centers
// stay geometrically consistent: origin' = origin + (factor-1)/2 * spacing.
inline Volume downsample(const Volume& vol, Dims3 factor) {
  for (int d = 0; d < 3; ++d) {
    if (factor[d] < 1)
      throw std::invalid_argument("downsample: factor must be >= 1");
    if (vol.dims[d] % factor[d] != 0)
      throw std::invalid_argument(
          "downsample: dims not divisible by factor (pad first)");
  }
  Dims3 od{vol.dims.nx / factor.nx, vol.dims.ny / factor.ny,
           vol.dims.nz / factor.nz};
  Vec3 osp{vol.spacing.x * factor.nx, vol.spacing.y * factor.ny,
           vol.spacing.z * factor.nz};
  Vec3 oorg{vol.origin.x + 0.5 * (factor.nx - 1) * vol.spacing.x,
            vol.origin.y + 0.5 * (factor.ny - 1) * vol.spacing.y,
            vol.origin.z + 0.5 * (factor.nz - 1) * vol.spacing.z};
  Volume out(od, osp, oorg, vol.channels);
  const double inv = 1.0 / (static_cast<double>(factor.nx) * factor.ny * factor.nz);
  for (int c = 0; c < vol.channels; ++c)
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y)
        for (int x = 0; x < od.nx; ++x) {
          double acc = 0.0;
          for (int dz = 0; dz < factor.nz; ++dz)
            for (int dy = 0; dy < factor.ny; ++dy)
              for (int dx = 0; dx < factor.nx; ++dx)
                acc += vol.at(x * factor.nx + dx, y * factor.ny + dy,
                              z * factor.nz + dz, c);
          out.at(x, y, z, c) = acc * inv;
        }
  return out;
}

inline Volume downsample(const Volume& vol, int factor) {
  return downsample(vol, Dims3{factor, factor, factor});
}

// ---------------------------------------------------------------------------
// .vol file format: raw little-endian f32 payload plus a JSON sidecar
// <name>.vol.json carrying dims/spacing/origin/channels/dtype/version.
// ---------------------------------------------------------------------------

inline std::string sidecar_path(const std::string& path) {
  return path + ".json";
}

inline void write_volume(const Volume& vol, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "f32le writer assumes a little-endian host");
  nlohmann::json j;
  j["dims"] = {vol.dims.nx, vol.dims.ny, vol.dims.nz};
  j["spacing"] = {vol.spacing.x, vol.spacing.y, vol.spacing.z};
  j["origin"] = {vol.origin.x, vol.origin.y, vol.origin.z};
  j["channels"] = vol.channels;
  j["dtype"] = "f32le";
  j["version"] = 1;
  {
    std::ofstream hdr(sidecar_path(path), std::ios::trunc);
    if (!hdr) throw std::runtime_error("write_volume: cannot open " + sidecar_path(path));
    hdr << j.dump(2) << "\n";
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_volume: cannot open " + path);
  Buffer<float> payload(vol.data.size());
  for (std::size_t i = 0; i < vol.data.size(); ++i)
    payload[i] = static_cast<float>(vol.data[i]);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write_volume: short write to " + path);
}

namespace detail {

inline nlohmann::json read_vol_header(const std::string& path, Volume& vol) {
  std::ifstream hdr(sidecar_path(path));
  if (!hdr)
    throw std::runtime_error("read_volume: missing sidecar " + sidecar_path(path));
  nlohmann::json j;
  try {
    hdr >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("read_volume: malformed header: " + std::string(e.what()));
  }
  if (!j.contains("dims") || !j.contains("spacing") || !j.contains("origin"))
    throw std::runtime_error("read_volume: malformed header (missing keys) in " +
                             sidecar_path(path));
  if (j.value("dtype", "") != "f32le")
    throw std::runtime_error("read_volume: unsupported dtype '" +
                             j.value("dtype", std::string("?")) + "'");
  if (j.value("version", 0) != 1)
    throw std::runtime_error("read_volume: unsupported format version");
  auto d = j["dims"];
  auto sp = j["spacing"];
  auto org = j["origin"];
  if (d.size() != 3 || sp.size() != 3 || org.size() != 3)
    throw std::runtime_error("read_volume: malformed header arrays in " +
                             sidecar_path(path));
  vol.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
  vol.spacing = {sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
  vol.origin = {org[0].get<double>(), org[1].get<double>(), org[2].get<double>()};
  vol.channels = j.value("channels", 1);
  vol.validate_geometry();
  return j;
}

}  // namespace detail

inline Volume read_volume(const std::string& path) {
  Volume vol;
  detail::read_vol_header(path, vol);
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("read_volume: cannot open " + path);
  const auto bytes = static_cast<std::size_t>(f.tellg());
  const std::size_t expect = vol.dims.numel() * vol.channels * sizeof(float);
  if (bytes != expect)
    throw std::runtime_error("read_volume: payload size mismatch in " + path +
                             " (have " + std::to_string(bytes) + " bytes, header implies " +
                             std::to_string(expect) + ")");
  Buffer<float> payload(vol.dims.numel() * vol.channels);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(expect));
  if (!f) throw std::runtime_error("read_volume: short read from " + path);
  vol.data.assign(payload.begin(), payload.end());
  return vol;
}

// Reads only the voxel window [lo, hi) from a .vol file; the result is a
// standalone Volume whose origin is shifted to the window corner. This is
// what lets the finest pyramid level stay on disk during cascade training.
inline Volume read_volume_region(const std::string& path, Dims3 lo, Dims3 hi) {
  Volume full;  // geometry only
  detail::read_vol_header(path, full);
  for (int d = 0; d < 3; ++d) {
    if (lo[d] < 0 || hi[d] > full.dims[d] || lo[d] >= hi[d])
      throw std::invalid_argument("read_volume_region: window out of range");
  }
  if (full.channels != 1)
    throw std::invalid_argument("read_volume_region: single-channel files only");
  Dims3 od{hi.nx - lo.nx, hi.ny - lo.ny, hi.nz - lo.nz};
  Vec3 oorg = voxel_to_world(full, {double(lo.nx), double(lo.ny), double(lo.nz)});
  Volume out(od, full.spacing, oorg, 1);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_volume_region: cannot open " + path);
  Buffer<float> row(static_cast<std::size_t>(od.nx));
  for (int z = 0; z < od.nz; ++z)
    for (int y = 0; y < od.ny; ++y) {
      const std::size_t src = full.index(lo.nx, lo.ny + y, lo.nz + z);
      f.seekg(static_cast<std::streamoff>(src * sizeof(float)));
      f.read(reinterpret_cast<char*>(row.data()),
             static_cast<std::streamsize>(od.nx * sizeof(float)));
      if (!f) throw std::runtime_error("read_volume_region: short read from " + path);
      for (int x = 0; x < od.nx; ++x) out.at(x, y, z) = row[static_cast<std::size_t>(x)];
    }
  return out;
}

}  // namespace lmloc
