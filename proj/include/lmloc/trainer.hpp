#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmloc/cascade.hpp"
#include "lmloc/phantom.hpp"
#include "lmloc/rng.hpp"

namespace lmloc {

enum class TrainMode {
  multiscale_e2e,
  multiscale_e2e_noise,
  multiscale_multistep,
  single_scale_com,
  single_scale_heatmap,
};

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::multiscale_e2e: return "multiscale_e2e";
    case TrainMode::multiscale_e2e_noise: return "multiscale_e2e_noise";
    case TrainMode::multiscale_multistep: return "multiscale_multistep";
    case TrainMode::single_scale_com: return "single_scale_com";
    case TrainMode::single_scale_heatmap: return "single_scale_heatmap";
  }
  throw std::invalid_argument("mode_name: invalid mode");
}

inline TrainMode parse_mode(const std::string& s) {
  for (TrainMode m : {TrainMode::multiscale_e2e, TrainMode::multiscale_e2e_noise,
                      TrainMode::multiscale_multistep, TrainMode::single_scale_com,
                      TrainMode::single_scale_heatmap})
    if (s == mode_name(m)) return m;
  throw std::invalid_argument("parse_mode: unknown training mode '" + s + "'");
}

inline bool is_multiscale(TrainMode m) {
  return m == TrainMode::multiscale_e2e || m == TrainMode::multiscale_e2e_noise ||
         m == TrainMode::multiscale_multistep;
}

struct TrainConfig {
  int epochs = 500;
  double lr = 0.0005;  // batch size fixed at 1
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  TrainMode mode = TrainMode::multiscale_e2e;
  std::uint64_t seed = 0;
  double heatmap_sigma_mm = 6.0;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0))
      throw std::invalid_argument("train: invalid Adam constants");
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct NamedParam {
  std::string name;
  Node<float>* node;
  int scale;
};

inline std::vector<NamedParam> named_params(const CascadeModel& model) {
  std::vector<NamedParam> out;
  for (std::size_t s = 0; s < model.nets.size(); ++s)
    for (std::size_t i = 0; i < model.nets[s].size(); ++i) {
      const ParamSet& net = model.nets[s][i];
      for (std::size_t j = 0; j < net.size(); ++j)
        out.push_back({"s" + std::to_string(s) + ".n" + std::to_string(i) + "." +
                           net.names[j],
                       net.tensors[j].get(), static_cast<int>(s)});
    }
  return out;
}

struct AdamState {
  std::vector<Buffer<float>> m, v;
  std::int64_t t = 0;

  static AdamState init(const std::vector<NamedParam>& params) {
    AdamState st;
    for (const auto& p : params) {
      st.m.emplace_back(p.node->value.size(), 0.0f);
      st.v.emplace_back(p.node->value.size(), 0.0f);
    }
    return st;
  }
};

// One Adam step with bias correction over the accumulated gradients.
// `active` (when given) masks which tensors participate; the rest keep both
// their values and their moments.
inline void adam_step(const std::vector<NamedParam>& params, AdamState& st,
                      const TrainConfig& cfg,
                      const std::vector<bool>* active = nullptr) {
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw std::logic_error("adam_step: moment/parameter count mismatch");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (active && !(*active)[i]) continue;
    Node<float>* n = params[i].node;
    n->ensure_grad();
    for (std::size_t e = 0; e < n->value.size(); ++e) {
      const double g = n->grad[e];
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in parameter " +
                                 params[i].name);
      const double m = cfg.beta1 * st.m[i][e] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * st.v[i][e] + (1.0 - cfg.beta2) * g * g;
      st.m[i][e] = static_cast<float>(m);
      st.v[i][e] = static_cast<float>(v);
      n->value[e] = static_cast<float>(
          n->value[e] - cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "LMCK", version u32, length-prefixed JSON header, f32 payloads
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_le(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const CascadeModel& model, const AdamState& adam,
                            const nlohmann::json& meta) {
  auto params = named_params(model);
  if (adam.m.size() != params.size())
    throw std::logic_error("save_checkpoint: adam state does not match model");

  std::vector<std::pair<std::string, const Buffer<float>*>> entries;
  std::vector<Shape4> shapes;
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back({params[i].name, &params[i].node->value});
    shapes.push_back(params[i].node->shape);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back({"adam.m." + params[i].name, &adam.m[i]});
    entries.push_back({"adam.v." + params[i].name, &adam.v[i]});
    shapes.push_back(params[i].node->shape);
    shapes.push_back(params[i].node->shape);
  }

  nlohmann::json header;
  header["meta"] = meta;
  header["adam_t"] = adam.t;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape4& s = shapes[i];
    header["tensors"].push_back({{"name", entries[i].first},
                                 {"shape", {s.c, s.nx, s.ny, s.nz}},
                                 {"offset", offset},
                                 {"count", entries[i].second->size()}});
    offset += entries[i].second->size() * sizeof(float);
  }
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path.string());
  f.write("LMCK", 4);
  detail::write_le<std::uint32_t>(f, 1);
  detail::write_le<std::uint64_t>(f, hs.size());
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& e : entries)
    f.write(reinterpret_cast<const char*>(e.second->data()),
            static_cast<std::streamsize>(e.second->size() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

// Loads parameters (and, when `adam` is non-null, optimizer moments) into an
// already-built model of matching architecture. Returns the meta block.
inline nlohmann::json load_checkpoint(const std::filesystem::path& path,
                                      CascadeModel& model,
                                      AdamState* adam = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "LMCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  if (detail::read_le<std::uint32_t>(f) != 1)
    throw std::runtime_error("checkpoint: unsupported version in " + path.string());
  const auto hlen = detail::read_le<std::uint64_t>(f);
  std::string hs(hlen, '\0');
  if (!f.read(hs.data(), static_cast<std::streamsize>(hlen)))
    throw std::runtime_error("checkpoint: truncated header in " + path.string());
  const nlohmann::json header = nlohmann::json::parse(hs);
  const std::streampos payload = f.tellg();

  auto params = named_params(model);
  if (adam && adam->m.size() != params.size()) *adam = AdamState::init(params);

  auto read_into = [&](const std::string& name, Buffer<float>& dst) {
    for (const auto& t : header.at("tensors")) {
      if (t.at("name") != name) continue;
      if (t.at("count").get<std::size_t>() != dst.size())
        throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
      f.seekg(payload + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
      if (!f.read(reinterpret_cast<char*>(dst.data()),
                  static_cast<std::streamsize>(dst.size() * sizeof(float))))
        throw std::runtime_error("checkpoint: truncated payload for tensor " + name);
      return;
    }
    throw std::runtime_error("checkpoint: missing tensor " + name);
  };

  for (std::size_t i = 0; i < params.size(); ++i) {
    read_into(params[i].name, params[i].node->value);
    if (adam) {
      read_into("adam.m." + params[i].name, adam->m[i]);
      read_into("adam.v." + params[i].name, adam->v[i]);
    }
  }
  if (adam) adam->t = header.at("adam_t").get<std::int64_t>();
  return header.at("meta");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_error_mm = 0;
  std::vector<double> weights;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::int64_t steps = 0;
  int best_epoch = -1;
  double best_val_error = std::numeric_limits<double>::infinity();
  std::filesystem::path best_ckpt, last_ckpt, metrics_csv;
};

namespace detail {

inline Node<float>* volume_leaf(Tape<float>& tape, const PyramidLevel& lv) {
  Volume full = lv.window({0, 0, 0}, lv.dims);
  std::vector<float> vals(full.data.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<float>(full.data[i]);
  return tape.leaf({1, lv.dims.nx, lv.dims.ny, lv.dims.nz}, vals.data(), false);
}

}  // namespace detail

// Mean Euclidean error (mm) of the final-scale predictions over a split,
// noise off.
inline double validation_error(const CascadeModel& model,
                               const std::vector<LandmarkSample>& split) {
  if (split.empty()) throw std::invalid_argument("validation_error: empty split");
  double sum = 0;
  std::size_t count = 0;
  for (const auto& sample : split) {
    Tape<float> tape;
    auto pyr = detail::select_levels(sample.pyramid, model.cfg.scales_mm);
    auto out = cascade_forward(tape, model, pyr, NoiseSpec::off());
    for (int k = 0; k < model.n_landmarks; ++k) {
      const Vec3 d = out.final_pred(k) - sample.landmarks[static_cast<std::size_t>(k)];
      sum += d.norm();
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

// Runs the per-sample Adam loop with seeded shuffling and per-mode losses,
// logging metrics.csv and writing best/last checkpoints into out_dir. Passing
// `resume_from` continues an interrupted run; derived RNG streams depend only
// on (seed, epoch, step), so the resumed trajectory is bitwise identical.
inline TrainResult train(CascadeModel& model,
                         const std::vector<LandmarkSample>& train_set,
                         const std::vector<LandmarkSample>& val_set,
                         const TrainConfig& cfg, const ScheduleConfig& sched,
                         const std::filesystem::path& out_dir,
                         const std::filesystem::path& resume_from = {},
                         const nlohmann::json& extra_meta = nlohmann::json::object()) {
  cfg.validate();
  sched.validate();
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train: empty train or val split");
  const std::size_t n_scales = model.cfg.n_scales();
  if (!is_multiscale(cfg.mode) && n_scales != 1)
    throw std::invalid_argument("train: single-scale modes need a 1-scale model");

  auto params = named_params(model);
  AdamState adam = AdamState::init(params);
  TrainResult res;
  int start_epoch = 0;
  if (!resume_from.empty()) {
    const nlohmann::json meta = load_checkpoint(resume_from, model, &adam);
    start_epoch = meta.at("epoch").get<int>() + 1;
    res.best_epoch = meta.at("best_epoch").get<int>();
    res.best_val_error = meta.at("best_val_error").get<double>();
    res.steps = adam.t;
  }

  std::filesystem::create_directories(out_dir);
  res.metrics_csv = out_dir / "metrics.csv";
  res.best_ckpt = out_dir / "best.ckpt";
  res.last_ckpt = out_dir / "last.ckpt";
  std::ofstream csv(res.metrics_csv,
                    start_epoch > 0 ? std::ios::app : std::ios::trunc);
  csv.precision(17);
  if (start_epoch == 0) {
    csv << "epoch,train_loss,val_error_mm";
    for (std::size_t s = 0; s < n_scales; ++s) csv << ",w" << s;
    csv << "\n";
  }

  // heatmap regression targets are fixed per sample
  std::vector<Buffer<double>> hm_targets;
  if (cfg.mode == TrainMode::single_scale_heatmap) {
    for (const auto& sample : train_set) {
      auto pyr = detail::select_levels(sample.pyramid, model.cfg.scales_mm);
      const GridGeometry geom{pyr[0].spacing, pyr[0].origin};
      Buffer<double> tgt;
      for (const auto& lm : sample.landmarks) {
        Volume h = heatmap_target(geom, pyr[0].dims, lm, cfg.heatmap_sigma_mm);
        tgt.insert(tgt.end(), h.data.begin(), h.data.end());
      }
      hm_targets.push_back(std::move(tgt));
    }
  }

  std::vector<std::size_t> order(train_set.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const bool multistep = cfg.mode == TrainMode::multiscale_multistep;
    const std::size_t stage =
        multistep ? std::min(n_scales - 1, static_cast<std::size_t>(epoch) *
                                               n_scales /
                                               static_cast<std::size_t>(cfg.epochs))
                  : n_scales - 1;
    std::vector<double> weights;
    if (multistep) {
      weights.assign(n_scales, 0.0);
      weights[stage] = 1.0;
    } else if (is_multiscale(cfg.mode)) {
      weights = loss_weights(epoch, sched);
    } else {
      weights = {1.0};
    }
    std::vector<bool> active;
    if (multistep) {
      active.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        active[i] = params[i].scale == static_cast<int>(stage);
    }

    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(substream(cfg.seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const LandmarkSample& sample = train_set[order[pos]];
      auto pyr = detail::select_levels(sample.pyramid, model.cfg.scales_mm);
      Tape<float> tape;
      for (auto& p : params) p.node->zero_grad();

      Node<float>* loss = nullptr;
      if (cfg.mode == TrainMode::single_scale_heatmap) {
        Node<float>* in = detail::volume_leaf(tape, pyr[0]);
        LocNetOutput o =
            locnet_forward(tape, model.net_for(0, 0), model.scale_cfg(0), in,
                           GridGeometry{pyr[0].spacing, pyr[0].origin}, false);
        loss = l2_loss(tape, o.raw, hm_targets[order[pos]]);
      } else {
        const bool noisy = cfg.mode == TrainMode::multiscale_e2e_noise;
        Rng noise_rng(substream(
            cfg.seed, "noise",
            static_cast<std::size_t>(epoch) * train_set.size() + pos));
        auto out = cascade_forward(tape, model, pyr,
                                   noisy ? NoiseSpec::train() : NoiseSpec::off(),
                                   noisy ? &noise_rng : nullptr, multistep,
                                   multistep ? static_cast<int>(stage) : -1);
        std::vector<double> w(weights.begin(),
                              weights.begin() + static_cast<std::ptrdiff_t>(
                                                    out.preds.size()));
        loss = cascade_loss(tape, out, sample.landmarks, w);
      }
      tape.backward(loss);
      loss_sum += loss->value[0];
      adam_step(params, adam, cfg, multistep ? &active : nullptr);
      ++res.steps;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(train_set.size());
    em.val_error_mm = validation_error(model, val_set);
    em.weights = weights;
    res.history.push_back(em);
    csv << epoch << "," << em.train_loss << "," << em.val_error_mm;
    for (double w : weights) csv << "," << w;
    csv << "\n";
    csv.flush();

    if (em.val_error_mm < res.best_val_error) {
      res.best_val_error = em.val_error_mm;
      res.best_epoch = epoch;
    }
    nlohmann::json meta{{"mode", mode_name(cfg.mode)},
                        {"epoch", epoch},
                        {"epochs", cfg.epochs},
                        {"lr", cfg.lr},
                        {"seed", cfg.seed},
                        {"best_epoch", res.best_epoch},
                        {"best_val_error", res.best_val_error}};
    for (const auto& [k, v] : extra_meta.items()) meta[k] = v;
    save_checkpoint(res.last_ckpt, model, adam, meta);
    if (res.best_epoch == epoch) save_checkpoint(res.best_ckpt, model, adam, meta);
  }
  return res;
}

}  // namespace lmloc
