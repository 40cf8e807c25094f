#pragma once

#include <string>
#include <vector>

#include "lmloc/gradcheck.hpp"

namespace lmloc {

struct GradCheckCase {
  std::string op;
  std::uint64_t seed;
  double max_rel_err;
};

namespace detail {

inline std::vector<double> uniform_vec(Rng& rng, std::size_t n, double lo,
                                       double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// values with |x| bounded away from the ReLU kink so the central difference
// stays on one side
inline std::vector<double> kink_free_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) {
    const double mag = rng.uniform(0.05, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return v;
}

// well-separated values so maxpool argmax cannot flip under the FD step
inline std::vector<double> separated_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.01 * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(i))]);
  return v;
}

}  // namespace detail

// Runs every differentiable op through the finite-difference oracle for one
// seed. Shapes are kept tiny; the oracle cost is quadratic in input size.
inline std::vector<GradCheckCase> gradcheck_ops(std::uint64_t seed) {
  using detail::kink_free_vec;
  using detail::separated_vec;
  using detail::uniform_vec;
  std::vector<GradCheckCase> results;
  auto run = [&](const std::string& name, const GraphBuilder& build,
                 GradCheckSpec spec) {
    results.push_back({name, seed, grad_check(build, spec, seed ^ 0xabcdef)});
  };

  Rng rng(substream(seed, "gradcheck"));

  {
    GradCheckSpec s;
    s.input_shapes = {{2, 4, 4, 4}, {4, 3, 3, 3}, {2, 1, 1, 1}};
    for (auto& sh : s.input_shapes)
      s.input_values.push_back(uniform_vec(rng, sh.numel(), -1.0, 1.0));
    run("conv3d",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return conv3d(t, in[0], in[1], in[2], 1, 1);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{2, 4, 4, 4}};
    s.input_values = {kink_free_vec(rng, s.input_shapes[0].numel())};
    run("relu",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return relu(t, in[0]);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{2, 4, 4, 4}};
    s.input_values = {separated_vec(rng, s.input_shapes[0].numel())};
    run("maxpool2",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return maxpool2(t, in[0]);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{2, 3, 3, 3}};
    s.input_values = {uniform_vec(rng, s.input_shapes[0].numel(), -1.0, 1.0)};
    run("trilinear_upsample2",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return trilinear_upsample2(t, in[0]);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{2, 3, 3, 3}, {1, 3, 3, 3}};
    for (auto& sh : s.input_shapes)
      s.input_values.push_back(uniform_vec(rng, sh.numel(), -1.0, 1.0));
    run("concat_channels",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return concat_channels(t, in[0], in[1]);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{1, 4, 4, 4}};
    s.input_values = {uniform_vec(rng, s.input_shapes[0].numel(), -1.0, 1.0)};
    run("spatial_softmax",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return spatial_softmax(t, in[0], 0.7);
        },
        s);
  }
  {
    GradCheckSpec s;
    s.input_shapes = {{1, 4, 4, 4}};
    s.input_values = {uniform_vec(rng, s.input_shapes[0].numel(), 0.5, 1.5)};
    run("center_of_mass",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          GridGeometry g{{1.5, 1.0, 0.75}, {-2.0, 3.0, 0.0}};
          return center_of_mass(t, in[0], g);
        },
        s);
  }
  {
    // interior crop: center fractional part in [0.2, 0.8] and unit output
    // spacing keep every sample >= 0.1 voxel from integer grid coordinates
    GradCheckSpec s;
    s.input_shapes = {{1, 6, 6, 6}, {3, 1, 1, 1}};
    s.input_values.push_back(uniform_vec(rng, s.input_shapes[0].numel(), -1.0, 1.0));
    s.input_values.push_back({2.0 + rng.uniform(0.2, 0.8),
                              2.0 + rng.uniform(0.2, 0.8),
                              2.0 + rng.uniform(0.2, 0.8)});
    run("diff_crop_resample",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return diff_crop_resample(t, in[0], GridGeometry{{1, 1, 1}, {0, 0, 0}},
                                    in[1], Dims3{3, 3, 3}, Vec3{1, 1, 1}, 0.25);
        },
        s);
  }
  {
    // crop partially outside the source: exercises the fill path
    GradCheckSpec s;
    s.input_shapes = {{1, 6, 6, 6}, {3, 1, 1, 1}};
    s.input_values.push_back(uniform_vec(rng, s.input_shapes[0].numel(), -1.0, 1.0));
    s.input_values.push_back({rng.uniform(0.2, 0.8), 2.0 + rng.uniform(0.2, 0.8),
                              4.0 + rng.uniform(0.2, 0.8)});
    run("diff_crop_resample_border",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          return diff_crop_resample(t, in[0], GridGeometry{{1, 1, 1}, {0, 0, 0}},
                                    in[1], Dims3{3, 3, 3}, Vec3{1, 1, 1}, 0.25);
        },
        s);
  }
  {
    // composite readout: softmax feeding the CoM
    GradCheckSpec s;
    s.input_shapes = {{1, 4, 4, 4}};
    s.input_values = {uniform_vec(rng, s.input_shapes[0].numel(), -1.0, 1.0)};
    run("center_of_mass(spatial_softmax)",
        [](Tape<double>& t, const std::vector<Node<double>*>& in) {
          GridGeometry g{{2.0, 2.0, 2.0}, {1.0, -1.0, 0.5}};
          return center_of_mass(t, spatial_softmax(t, in[0], 1.0), g);
        },
        s);
  }
  return results;
}

inline std::vector<GradCheckCase> run_gradcheck_suite(int n_seeds) {
  std::vector<GradCheckCase> all;
  for (int s = 0; s < n_seeds; ++s) {
    auto r = gradcheck_ops(static_cast<std::uint64_t>(s) + 1);
    all.insert(all.end(), r.begin(), r.end());
  }
  return all;
}

}  // namespace lmloc
