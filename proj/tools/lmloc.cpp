// lmloc: dataset generation, training, evaluation, prediction, and gradient
// verification for the multi-scale landmark localization cascade.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmloc/config.hpp"
#include "lmloc/evalsuite.hpp"
#include "lmloc/gradcheck_suite.hpp"
#include "lmloc/phantom.hpp"
#include "lmloc/trainer.hpp"

namespace fs = std::filesystem;
using namespace lmloc;

namespace {

constexpr const char* kVersion = "lmloc 1.0.0 (config-format 1, checkpoint-format 1)";

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  f >> j;
  return j;
}

CascadeModel model_for_mode(const RunConfig& rc, TrainMode mode,
                            std::uint64_t seed) {
  const CascadeConfig cc =
      is_multiscale(mode) ? rc.cascade : rc.single_scale_cascade();
  return build_cascade(cc, rc.n_landmarks, substream(seed, "init"));
}

// Rebuilds the model a checkpoint was trained as, from its config echo.
CascadeModel model_from_checkpoint(const fs::path& ckpt, TrainMode* mode_out) {
  std::ifstream f(ckpt, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + ckpt.string());
  // reuse the loader: build a throwaway model after peeking at the meta block
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "LMCK", 4) != 0)
    throw std::runtime_error("bad checkpoint magic in " + ckpt.string());
  f.ignore(4);  // version
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string hs(hlen, '\0');
  if (!f.read(hs.data(), static_cast<std::streamsize>(hlen)))
    throw std::runtime_error("truncated checkpoint header in " + ckpt.string());
  const nlohmann::json meta = nlohmann::json::parse(hs).at("meta");
  if (!meta.contains("config"))
    throw std::runtime_error("checkpoint " + ckpt.string() +
                             " carries no config echo");
  const RunConfig rc = RunConfig::from_json(meta.at("config"));
  const TrainMode mode = parse_mode(meta.at("mode").get<std::string>());
  if (mode_out) *mode_out = mode;
  CascadeModel model = model_for_mode(rc, mode, rc.train.seed);
  load_checkpoint(ckpt, model);
  return model;
}

int cmd_gen(const fs::path& config, const fs::path& out, int n,
            std::uint64_t seed, bool force) {
  RunConfig rc = RunConfig::from_file(config);
  if (n <= 0) n = rc.dataset_n;
  const auto manifest =
      generate_dataset(rc.phantom, n, rc.split_for(n), rc.cascade.scales_mm,
                       substream(seed, "data"), out, force);
  std::cout << manifest.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& config, const fs::path& data, const std::string& mode,
              const fs::path& out, const fs::path& resume, std::int64_t seed) {
  RunConfig rc = RunConfig::from_file(config);
  if (!mode.empty()) rc.train.mode = parse_mode(mode);
  if (seed >= 0) rc.train.seed = static_cast<std::uint64_t>(seed);
  const bool stream = rc.cascade.stream_finest && is_multiscale(rc.train.mode);
  auto tr = load_dataset(data / "dataset.json", "train", stream);
  auto val = load_dataset(data / "dataset.json", "val", stream);
  CascadeModel model = model_for_mode(rc, rc.train.mode, rc.train.seed);

  nlohmann::json extra{{"config", read_json_file(config)}};
  auto res = train(model, tr, val, rc.train, rc.schedule(), out, resume, extra);
  nlohmann::json summary{{"mode", mode_name(rc.train.mode)},
                         {"epochs", rc.train.epochs},
                         {"steps", res.steps},
                         {"best_epoch", res.best_epoch},
                         {"best_val_error_mm", res.best_val_error},
                         {"last_ckpt", res.last_ckpt.string()},
                         {"best_ckpt", res.best_ckpt.string()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const fs::path& data, const std::vector<std::string>& ckpts, int mc,
             const fs::path& out, std::uint64_t seed) {
  std::vector<std::pair<std::string, CascadeModel>> models;
  for (const auto& spec : ckpts) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--ckpt expects MODE=PATH, got '" + spec + "'");
    const std::string mode = spec.substr(0, eq);
    const fs::path path = spec.substr(eq + 1);
    if (!fs::exists(path))
      throw std::runtime_error("missing checkpoint for mode " + mode + ": " +
                               path.string());
    TrainMode m{};
    models.emplace_back(mode, model_from_checkpoint(path, &m));
  }
  auto test = load_dataset(data / "dataset.json", "test");
  std::vector<std::pair<std::string, const CascadeModel*>> views;
  for (auto& [mode, model] : models) views.emplace_back(mode, &model);
  auto report = evaluate(views, test, mc, substream(seed, "mc"));
  fs::create_directories(out);
  write_report_csv(report, out / "report.csv");
  write_summary_json(report, out / "summary.json");
  std::cout << (out / "summary.json").string() << "\n";
  return 0;
}

int cmd_predict(const fs::path& ckpt, const fs::path& volume, int mc,
                std::uint64_t seed) {
  TrainMode mode{};
  CascadeModel model = model_from_checkpoint(ckpt, &mode);
  Volume base = read_volume(volume.string());
  std::vector<PyramidLevel> pyr;
  for (auto& v : build_pyramid(base, model.cfg.scales_mm))
    pyr.push_back(PyramidLevel::from_volume(std::move(v)));

  nlohmann::json out;
  out["n_passes"] = mc;
  out["landmarks"] = nlohmann::json::array();
  if (mc >= 2) {
    for (const auto& p : mc_predict(model, pyr, mc, substream(seed, "mc")))
      out["landmarks"].push_back(
          {{"mean_mm", {p.mean.x, p.mean.y, p.mean.z}},
           {"std_mm", {p.std.x, p.std.y, p.std.z}},
           {"conf_vol_mm3", p.confidence_vol}});
  } else {
    Tape<float> tape;
    auto fwd = cascade_forward(tape, model, pyr, NoiseSpec::off());
    for (int k = 0; k < model.n_landmarks; ++k) {
      const Vec3 p = fwd.final_pred(k);
      out["landmarks"].push_back({{"mean_mm", {p.x, p.y, p.z}},
                                  {"std_mm", {0.0, 0.0, 0.0}},
                                  {"conf_vol_mm3", 0.0}});
    }
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(int seeds) {
  auto cases = run_gradcheck_suite(seeds);
  double worst = 0;
  std::string worst_op;
  for (const auto& c : cases)
    if (c.max_rel_err > worst) {
      worst = c.max_rel_err;
      worst_op = c.op;
    }
  std::printf("gradcheck: %zu cases over %d seeds, worst %.3e (%s)\n",
              cases.size(), seeds, worst, worst_op.c_str());
  if (worst >= 1e-5) {
    std::fprintf(stderr, "error[runtime]: gradcheck worst %.3e in %s >= 1e-5\n",
                 worst, worst_op.c_str());
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale 3D landmark localization on synthetic phantoms"};
  app.set_version_flag("--version", kVersion);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (0 = hardware default)");
  app.require_subcommand(1);

  fs::path config, out, data, resume, ckpt, volume;
  std::vector<std::string> ckpts;
  std::string mode;
  int n = 0, mc = 50, seeds = 20;
  std::int64_t seed = -1;
  bool force = false;

  auto* gen = app.add_subcommand("gen", "generate a phantom dataset");
  gen->add_option("--config", config, "run config JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--n", n, "sample count (default: dataset.n from config)");
  gen->add_option("--seed", seed, "master seed (default: train.seed from config)");
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* tr = app.add_subcommand("train", "train one mode");
  tr->add_option("--config", config, "run config JSON")->required();
  tr->add_option("--data", data, "dataset directory (holds dataset.json)")->required();
  tr->add_option("--mode", mode,
                 "multiscale_e2e | multiscale_e2e_noise | multiscale_multistep | "
                 "single_scale_com | single_scale_heatmap");
  tr->add_option("--out", out, "checkpoint/metrics directory")->required();
  tr->add_option("--resume", resume, "checkpoint to resume from");
  tr->add_option("--seed", seed, "seed override");

  auto* ev = app.add_subcommand("eval", "evaluate checkpoints on the test split");
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--ckpt", ckpts, "MODE=PATH (repeatable)")->required();
  ev->add_option("--mc", mc, "Monte-Carlo passes for noise modes [50]");
  ev->add_option("--out", out, "report directory")->required();
  ev->add_option("--seed", seed, "evaluation seed");

  auto* pr = app.add_subcommand("predict", "predict landmarks in one volume");
  pr->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  pr->add_option("--volume", volume, "base-spacing .vol file")->required();
  pr->add_option("--mc", mc, "Monte-Carlo passes (< 2 = single pass)");
  pr->add_option("--seed", seed, "prediction seed");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient oracle");
  gc->add_option("--seeds", seeds, "random seeds per op [20]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return 0;
    std::fprintf(stderr, "error[usage]: %s\n", e.what());
    return 1;
  }

  try {
    if (*gen) {
      std::uint64_t s = seed >= 0
                            ? static_cast<std::uint64_t>(seed)
                            : RunConfig::from_file(config).train.seed;
      return cmd_gen(config, out, n, s, force);
    }
    if (*tr) return cmd_train(config, data, mode, out, resume, seed);
    if (*ev)
      return cmd_eval(data, ckpts, mc, out,
                      seed >= 0 ? static_cast<std::uint64_t>(seed) : 0);
    if (*pr)
      return cmd_predict(ckpt, volume, mc,
                         seed >= 0 ? static_cast<std::uint64_t>(seed) : 0);
    if (*gc) return cmd_gradcheck(seeds);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error[validation]: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[runtime]: %s\n", e.what());
    return 3;
  }
  return 1;
}
