#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lmloc/diffgraph.hpp"
#include "lmloc/rng.hpp"

namespace lmloc {

// Central finite-difference verification of the analytic backward passes.
// Operates entirely in 64-bit so that the oracle itself is trustworthy.
//
// `build` reconstructs the graph from leaf nodes on a fresh tape and returns
// the output node. The output is contracted with a fixed random cotangent so
// that multi-output ops reduce to one scalar objective per check.
struct GradCheckSpec {
  std::vector<Shape4> input_shapes;
  std::vector<std::vector<double>> input_values;
  std::vector<bool> input_checked;  // empty = check all inputs
  double epsilon = 1e-4;
};

using GraphBuilder = std::function<Node<double>*(
    Tape<double>&, const std::vector<Node<double>*>&)>;

inline double grad_check(const GraphBuilder& build, const GradCheckSpec& spec,
                         std::uint64_t cotangent_seed = 1) {
  auto eval = [&](const std::vector<std::vector<double>>& values,
                  std::vector<Node<double>*>* leaves_out,
                  Tape<double>* tape) -> Node<double>* {
    std::vector<Node<double>*> leaves;
    for (std::size_t i = 0; i < spec.input_shapes.size(); ++i)
      leaves.push_back(
          tape->leaf(spec.input_shapes[i], values[i].data(), true));
    if (leaves_out) *leaves_out = leaves;
    return build(*tape, leaves);
  };

  // analytic gradients
  Tape<double> tape;
  std::vector<Node<double>*> leaves;
  Node<double>* out = eval(spec.input_values, &leaves, &tape);
  Rng rng(cotangent_seed);
  std::vector<double> cot(out->value.size());
  for (double& c : cot) c = rng.uniform(-1.0, 1.0);
  tape.backward(out, cot);

  auto objective = [&](const std::vector<std::vector<double>>& values) {
    Tape<double> t;
    Node<double>* o = eval(values, nullptr, &t);
    double s = 0.0;
    for (std::size_t i = 0; i < o->value.size(); ++i) s += cot[i] * o->value[i];
    return s;
  };

  double max_rel = 0.0;
  std::vector<std::vector<double>> values = spec.input_values;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!spec.input_checked.empty() && !spec.input_checked[i]) continue;
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      const double orig = values[i][j];
      values[i][j] = orig + spec.epsilon;
      const double fp = objective(values);
      values[i][j] = orig - spec.epsilon;
      const double fm = objective(values);
      values[i][j] = orig;
      const double numeric = (fp - fm) / (2.0 * spec.epsilon);
      const double analytic = leaves[i]->grad[j];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace lmloc
