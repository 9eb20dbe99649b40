#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "crosspoint/autograd.hpp"

namespace crosspoint {

// Builds a scalar loss on `graph` from leaves bound to the given parameters.
using LossBuilder = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates checked per parameter tensor, spread evenly; 0 checks all.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double evaluate_loss(const LossBuilder& f, std::span<const Tensor> params) {
  Graph graph;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(graph.constant(p));
  return f(graph, vars).value().item();
}

/// Compares reverse-mode gradients with central differences. The error of a
/// coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult grad_check(const LossBuilder& f, std::vector<Tensor> params,
                                  GradCheckOptions options = {}) {
  std::vector<Tensor> analytic;
  {
    Graph graph;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(graph.parameter(p));
    Var loss = f(graph, vars);
    graph.backward(loss);
    for (Var v : vars) analytic.push_back(graph.grad(v));
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t n = params[t].size();
    const std::size_t count =
        options.max_coords_per_param == 0 ? n : std::min(n, options.max_coords_per_param);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : c * n / count;
      const double saved = params[t][i];
      params[t][i] = saved + options.eps;
      const double plus = evaluate_loss(f, params);
      params[t][i] = saved - options.eps;
      const double minus = evaluate_loss(f, params);
      params[t][i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = t;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace crosspoint
