#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "geostars/experiment.hpp"

namespace geostars::testing {

/// One-watershed family with `coarse` coarse segments, split in two at the fine scale.
inline SynthFamily tiny_family(std::size_t coarse = 3, std::size_t days = 60, std::uint64_t seed = 5) {
  SynthConfig c;
  c.n_watersheds = 1;
  c.coarse_min = c.coarse_max = coarse;
  c.split_factor = 2;
  c.days = days;
  c.coarse_sparsity = 0.8;
  c.fine_sparsity = 0.8;
  c.fine_unobserved = 0.0;
  c.seed = seed;
  return generate_family(c);
}

inline ModelConfig tiny_model(std::size_t H = 4, std::size_t Hc = 4, std::uint64_t seed = 11) {
  ModelConfig m;
  m.H = H;
  m.Hc = Hc;
  m.head_hidden = 4;
  m.init_seed = seed;
  return m;
}

/// Normalized copy of a task plus its adjacency, statistics taken from the task itself.
inline PreparedTask prepare_alone(const TaskDataset& raw) {
  const TaskDataset* p = &raw;
  const Preprocessor prep = Preprocessor::fit(std::span<const TaskDataset* const>(&p, 1), true, 0);
  return prep.prepare(raw);
}

/// Derivative of f at the current value of `slot` by 4-point Richardson
/// extrapolation of central differences.
inline double numeric_derivative(const std::function<double()>& f, double& slot, double h = 1e-3) {
  const double x0 = slot;
  auto central = [&](double e) {
    slot = x0 + e;
    const double fp = f();
    slot = x0 - e;
    const double fm = f();
    slot = x0;
    return (fp - fm) / (2 * e);
  };
  const double d1 = central(h), d2 = central(h / 2);
  return (4 * d2 - d1) / 3;
}

inline double relative_error(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Max relative error between backward() and finite differences for every
/// entry of every leaf in `leaves`; `loss` rebuilds the graph from the leaves.
inline double max_grad_error(std::vector<Tensor>& leaves, const std::function<Tensor()>& loss,
                             double floor = 1e-7) {
  const GradMap g = backward(loss());
  double worst = 0.0;
  auto value = [&] {
    NoGradGuard ng;
    return loss().item();
  };
  for (Tensor& t : leaves) {
    auto it = g.find(t.name());
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double analytic = it == g.end() ? 0.0 : it->second.data()[k];
      const double numeric = numeric_derivative(value, t.mutable_data()[k]);
      worst = std::max(worst, relative_error(analytic, numeric, floor));
    }
  }
  return worst;
}

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0,
                            const std::string& name = {}) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(r * c);
  for (double& x : v) x = g(rng);
  return name.empty() ? Tensor::from_data(r, c, std::move(v)) : Tensor::parameter(name, r, c, std::move(v));
}

}  // namespace geostars::testing
