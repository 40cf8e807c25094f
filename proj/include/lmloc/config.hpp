#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmloc/cascade.hpp"
#include "lmloc/phantom.hpp"
#include "lmloc/trainer.hpp"

namespace lmloc {

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!obj.is_object())
    throw std::invalid_argument("config: section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "' in section '" +
                                  section + "'");
}

inline Vec3 vec3_of(const nlohmann::json& a, const std::string& key) {
  if (!a.is_array() || a.size() != 3)
    throw std::invalid_argument("config: key '" + key + "' must be a 3-array");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

inline Dims3 dims3_of(const nlohmann::json& a, const std::string& key) {
  if (!a.is_array() || a.size() != 3)
    throw std::invalid_argument("config: key '" + key + "' must be a 3-array");
  return {a[0].get<int>(), a[1].get<int>(), a[2].get<int>()};
}

}  // namespace detail

// Merged experiment configuration: one JSON file drives dataset generation,
// model construction, scheduling, and training.
struct RunConfig {
  PhantomSpec phantom;
  CascadeConfig cascade;
  TrainConfig train;
  double schedule_middle_peak = 1.0;
  int n_landmarks = 2;
  double single_scale_mm = 0;  // resolution of the single-scale baselines
  int dataset_n = 10;
  std::vector<int> dataset_split{6, 2, 2};

  ScheduleConfig schedule() const {
    return default_schedule(cascade.n_scales(), train.epochs, schedule_middle_peak);
  }

  // one-scale view of the cascade config for the single-scale baselines
  CascadeConfig single_scale_cascade() const {
    CascadeConfig c = cascade;
    c.scales_mm = {single_scale_mm};
    c.stream_finest = false;
    return c;
  }

  DatasetSplit split() const {
    return {dataset_split[0], dataset_split[1], dataset_split[2]};
  }

  // Rescales the configured split to a different sample count.
  DatasetSplit split_for(int n) const {
    if (n == dataset_n) return split();
    const double total = dataset_split[0] + dataset_split[1] + dataset_split[2];
    int val = std::max(1, (int)std::lround(n * dataset_split[1] / total));
    int test = std::max(1, (int)std::lround(n * dataset_split[2] / total));
    if (val + test >= n)
      throw std::invalid_argument("config: dataset too small for a 3-way split");
    return {n - val - test, val, test};
  }

  void validate() const {
    phantom.validate();
    cascade.validate();
    train.validate();
    if (n_landmarks < 1)
      throw std::invalid_argument("config: key 'landmarks' must be >= 1");
    if (!(schedule_middle_peak >= 0))
      throw std::invalid_argument("config: key 'schedule.middle_peak' must be >= 0");
    if (dataset_split.size() != 3 || dataset_split[0] < 1 || dataset_split[1] < 1 ||
        dataset_split[2] < 1 ||
        dataset_split[0] + dataset_split[1] + dataset_split[2] != dataset_n)
      throw std::invalid_argument(
          "config: key 'dataset.split' must be 3 positive counts summing to "
          "'dataset.n'");

    // each scale an integer multiple of the base spacing
    for (double s : cascade.scales_mm) {
      const double f = s / phantom.base_spacing_mm;
      if (std::abs(f - std::llround(f)) > 1e-9)
        throw std::invalid_argument(
            "config: key 'cascade.scales_mm' must hold integer multiples of "
            "'phantom.base_spacing_mm'");
    }
    // coarsest volume must coincide with the patch grid
    const Dims3 base = phantom.base_dims();
    const int f0 = (int)std::llround(cascade.scales_mm[0] / phantom.base_spacing_mm);
    const Dims3 coarse{base.nx / f0, base.ny / f0, base.nz / f0};
    if (coarse.nx != cascade.patch_dims.nx || coarse.ny != cascade.patch_dims.ny ||
        coarse.nz != cascade.patch_dims.nz)
      throw std::invalid_argument(
          "config: key 'cascade.patch_dims' must equal the coarsest volume dims");

    bool found = false;
    for (double s : cascade.scales_mm) found |= std::abs(s - single_scale_mm) < 1e-9;
    if (!found)
      throw std::invalid_argument(
          "config: key 'train.single_scale_mm' must be one of 'cascade.scales_mm'");
    const int fs = (int)std::llround(single_scale_mm / phantom.base_spacing_mm);
    const int pool = cascade.locnet.pool_factor();
    if ((base.nx / fs) % pool || (base.ny / fs) % pool || (base.nz / fs) % pool)
      throw std::invalid_argument(
          "config: single-scale volume dims must be divisible by 2^depth");
  }

  static RunConfig from_json(const nlohmann::json& j) {
    detail::check_keys(
        j, {"phantom", "cascade", "schedule", "train", "dataset", "landmarks"},
        "<root>");
    RunConfig c;

    if (j.contains("phantom")) {
      const auto& p = j["phantom"];
      detail::check_keys(p,
                         {"extent_mm", "base_spacing_mm", "radius_range_mm",
                          "branch_angle_range_deg", "bifurcation_jitter_mm",
                          "intensity_background", "intensity_vessel", "noise_std"},
                         "phantom");
      if (p.contains("extent_mm"))
        c.phantom.extent_mm = detail::vec3_of(p["extent_mm"], "phantom.extent_mm");
      if (p.contains("base_spacing_mm"))
        c.phantom.base_spacing_mm = p["base_spacing_mm"].get<double>();
      if (p.contains("radius_range_mm")) {
        c.phantom.radius_min_mm = p["radius_range_mm"][0].get<double>();
        c.phantom.radius_max_mm = p["radius_range_mm"][1].get<double>();
      }
      if (p.contains("branch_angle_range_deg")) {
        c.phantom.branch_angle_min_deg = p["branch_angle_range_deg"][0].get<double>();
        c.phantom.branch_angle_max_deg = p["branch_angle_range_deg"][1].get<double>();
      }
      if (p.contains("bifurcation_jitter_mm"))
        c.phantom.bifurcation_jitter_mm = p["bifurcation_jitter_mm"].get<double>();
      if (p.contains("intensity_background"))
        c.phantom.intensity_background = p["intensity_background"].get<double>();
      if (p.contains("intensity_vessel"))
        c.phantom.intensity_vessel = p["intensity_vessel"].get<double>();
      if (p.contains("noise_std")) c.phantom.noise_std = p["noise_std"].get<double>();
    }

    if (j.contains("cascade")) {
      const auto& q = j["cascade"];
      detail::check_keys(q,
                         {"scales_mm", "patch_dims", "noise_amplitude_mm",
                          "share_fine_weights", "inject_noise_all_scales",
                          "stream_finest", "locnet"},
                         "cascade");
      if (q.contains("scales_mm"))
        c.cascade.scales_mm = q["scales_mm"].get<std::vector<double>>();
      if (q.contains("patch_dims"))
        c.cascade.patch_dims = detail::dims3_of(q["patch_dims"], "cascade.patch_dims");
      if (q.contains("noise_amplitude_mm"))
        c.cascade.noise_amplitude_mm = q["noise_amplitude_mm"].get<double>();
      if (q.contains("share_fine_weights"))
        c.cascade.share_fine_weights = q["share_fine_weights"].get<bool>();
      if (q.contains("inject_noise_all_scales"))
        c.cascade.inject_noise_all_scales = q["inject_noise_all_scales"].get<bool>();
      if (q.contains("stream_finest"))
        c.cascade.stream_finest = q["stream_finest"].get<bool>();
      if (q.contains("locnet")) {
        const auto& l = q["locnet"];
        detail::check_keys(l, {"depth", "base_channels", "kernel", "temperature"},
                           "cascade.locnet");
        if (l.contains("depth")) c.cascade.locnet.depth = l["depth"].get<int>();
        if (l.contains("base_channels"))
          c.cascade.locnet.base_channels = l["base_channels"].get<int>();
        if (l.contains("kernel")) c.cascade.locnet.kernel = l["kernel"].get<int>();
        if (l.contains("temperature"))
          c.cascade.locnet.temperature = l["temperature"].get<double>();
      }
    }

    if (j.contains("schedule")) {
      detail::check_keys(j["schedule"], {"middle_peak"}, "schedule");
      if (j["schedule"].contains("middle_peak"))
        c.schedule_middle_peak = j["schedule"]["middle_peak"].get<double>();
    }

    if (j.contains("train")) {
      const auto& t = j["train"];
      detail::check_keys(t,
                         {"epochs", "lr", "mode", "seed", "heatmap_sigma_mm",
                          "single_scale_mm"},
                         "train");
      if (t.contains("epochs")) c.train.epochs = t["epochs"].get<int>();
      if (t.contains("lr")) c.train.lr = t["lr"].get<double>();
      if (t.contains("mode")) c.train.mode = parse_mode(t["mode"].get<std::string>());
      if (t.contains("seed")) c.train.seed = t["seed"].get<std::uint64_t>();
      if (t.contains("heatmap_sigma_mm"))
        c.train.heatmap_sigma_mm = t["heatmap_sigma_mm"].get<double>();
      if (t.contains("single_scale_mm"))
        c.single_scale_mm = t["single_scale_mm"].get<double>();
    }

    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      detail::check_keys(d, {"n", "split"}, "dataset");
      if (d.contains("n")) c.dataset_n = d["n"].get<int>();
      if (d.contains("split")) c.dataset_split = d["split"].get<std::vector<int>>();
    }

    if (j.contains("landmarks")) c.n_landmarks = j["landmarks"].get<int>();

    if (c.single_scale_mm == 0)  // default: second-finest scale
      c.single_scale_mm =
          c.cascade.scales_mm[c.cascade.scales_mm.size() > 1
                                  ? c.cascade.scales_mm.size() - 2
                                  : 0];
    c.validate();
    return c;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f)
      throw std::runtime_error("config: cannot open " + path.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: malformed JSON in " + path.string() +
                                  ": " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace lmloc
