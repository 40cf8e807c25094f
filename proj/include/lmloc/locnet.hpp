#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmloc/diffgraph.hpp"
#include "lmloc/rng.hpp"

namespace lmloc {

// Named parameter tensors living outside any tape, so they persist across
// training steps while their gradients accumulate per step.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<std::unique_ptr<Node<float>>> tensors;

  Node<float>* add(const std::string& name, Shape4 shape) {
    auto n = std::make_unique<Node<float>>();
    n->alloc(shape);
    n->requires_grad = true;
    names.push_back(name);
    tensors.push_back(std::move(n));
    return tensors.back().get();
  }

  Node<float>* find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i].get();
    throw std::out_of_range("ParamSet: no parameter named " + name);
  }

  std::size_t size() const { return tensors.size(); }

  void zero_grad() {
    for (auto& t : tensors) t->zero_grad();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& t : tensors)
      for (float g : t->grad) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }
};

struct LocNetConfig {
  int depth = 3;          // number of pooling levels
  int base_channels = 8;  // doubled per level
  int kernel = 3;
  double temperature = 1.0;
  int out_channels = 1;  // one heatmap channel per landmark

  int pool_factor() const { return 1 << depth; }
};

// Encoder-decoder backbone: per level two conv3d(k, pad k/2) + relu with
// maxpool2 between encoder levels; trilinear upsample + skip concat + two
// convs per decoder level; a final 1x1x1 conv to out_channels.
inline ParamSet build_locnet(const LocNetConfig& cfg, int in_channels,
                             std::uint64_t seed) {
  if (cfg.depth < 1 || cfg.base_channels < 1 || cfg.kernel % 2 == 0 ||
      cfg.out_channels < 1)
    throw std::invalid_argument("build_locnet: invalid config");
  ParamSet p;
  Rng rng(substream(seed, "locnet-init"));
  const int k = cfg.kernel;
  auto add_conv = [&](const std::string& name, int cin, int cout, int kk) {
    Node<float>* w = p.add(name + ".w", Shape4{cout * cin, kk, kk, kk});
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * kk * kk * kk));
    for (auto& v : w->value) v = static_cast<float>(rng.normal(0.0, std));
    p.add(name + ".b", Shape4{cout, 1, 1, 1});  // zero-initialized
  };
  int cin = in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const int c = cfg.base_channels << l;
    add_conv("enc" + std::to_string(l) + ".conv0", cin, c, k);
    add_conv("enc" + std::to_string(l) + ".conv1", c, c, k);
    cin = c;
  }
  const int cb = cfg.base_channels << cfg.depth;
  add_conv("bott.conv0", cin, cb, k);
  add_conv("bott.conv1", cb, cb, k);
  cin = cb;
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const int c = cfg.base_channels << l;
    add_conv("dec" + std::to_string(l) + ".conv0", cin + c, c, k);
    add_conv("dec" + std::to_string(l) + ".conv1", c, c, k);
    cin = c;
  }
  add_conv("head", cin, cfg.out_channels, 1);
  return p;
}

struct LocNetOutput {
  Node<float>* raw = nullptr;              // pre-softmax map, out_channels wide
  std::vector<Node<float>*> heatmaps;      // one normalized map per landmark
  std::vector<Node<float>*> preds;         // (3,1,1,1) world-mm point nodes
};

// Runs the backbone on `input` (shape (cin, nx, ny, nz)). When `with_com` is
// set, each output channel goes through spatial_softmax + center_of_mass in
// the frame given by `geom`; otherwise only `raw` is produced (the heatmap
// regression baseline head).
inline LocNetOutput locnet_forward(Tape<float>& tape, const ParamSet& params,
                                   const LocNetConfig& cfg, Node<float>* input,
                                   const GridGeometry& geom,
                                   bool with_com = true) {
  const int f = cfg.pool_factor();
  if (input->shape.nx % f || input->shape.ny % f || input->shape.nz % f)
    throw std::invalid_argument(
        "locnet_forward: input dims must be divisible by 2^depth");
  const int pad = cfg.kernel / 2;
  auto block = [&](Node<float>* x, const std::string& name) {
    x = relu(tape, conv3d(tape, x, params.find(name + ".conv0.w"),
                          params.find(name + ".conv0.b"), 1, pad));
    x = relu(tape, conv3d(tape, x, params.find(name + ".conv1.w"),
                          params.find(name + ".conv1.b"), 1, pad));
    return x;
  };

  std::vector<Node<float>*> skips;
  Node<float>* x = input;
  for (int l = 0; l < cfg.depth; ++l) {
    x = block(x, "enc" + std::to_string(l));
    skips.push_back(x);
    x = maxpool2(tape, x);
  }
  x = block(x, "bott");
  for (int l = cfg.depth - 1; l >= 0; --l) {
    x = trilinear_upsample2(tape, x);
    x = concat_channels(tape, x, skips[static_cast<std::size_t>(l)]);
    x = block(x, "dec" + std::to_string(l));
  }
  LocNetOutput out;
  out.raw = conv3d(tape, x, params.find("head.w"), params.find("head.b"));
  if (with_com) {
    for (int c = 0; c < cfg.out_channels; ++c) {
      Node<float>* ch = cfg.out_channels == 1 ? out.raw
                                              : slice_channel(tape, out.raw, c);
      Node<float>* hm =
          spatial_softmax(tape, ch, static_cast<float>(cfg.temperature));
      out.heatmaps.push_back(hm);
      out.preds.push_back(center_of_mass(tape, hm, geom));
    }
  }
  return out;
}

}  // namespace lmloc
