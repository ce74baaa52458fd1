#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "earshot/autodiff.hpp"

namespace earshot {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates checked per parameter; 0 checks all of them.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Graph RNG seed, reused on every evaluation so stochastic ops repeat.
  std::uint64_t graph_seed = 0;
  bool training = false;
};

/// Compares reverse-mode gradients of a scalar function of the parameters in
/// `store` against central finite differences. Returns the largest
/// |analytic - numeric| / max(1, |numeric|) over the sampled coordinates.
template <typename Scalar>
Scalar grad_check(BasicParameterStore<Scalar>& store,
                  const std::function<BasicVar<Scalar>(BasicGraph<Scalar>&)>& f,
                  const GradCheckOptions& opts = {}) {
  auto evaluate = [&]() {
    BasicGraph<Scalar> g(opts.graph_seed, opts.training);
    const Scalar v = f(g).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return v;
  };

  store.zero_grad();
  {
    BasicGraph<Scalar> g(opts.graph_seed, opts.training);
    auto out = f(g);
    if (!std::isfinite(out.value().item())) {
      throw NumericError("grad_check: function value is not finite");
    }
    g.backward(out);
    g.accumulate_into(store);
  }

  std::mt19937_64 rng(opts.seed);
  Scalar worst = 0;
  for (auto& entry : store.entries()) {
    std::vector<Index> coords(static_cast<std::size_t>(entry.value.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
    }
    for (Index c : coords) {
      Scalar& slot = entry.value[c];
      const Scalar saved = slot;
      slot = saved + static_cast<Scalar>(opts.step);
      const Scalar up = evaluate();
      slot = saved - static_cast<Scalar>(opts.step);
      const Scalar down = evaluate();
      slot = saved;
      const Scalar numeric = (up - down) / (Scalar(2) * static_cast<Scalar>(opts.step));
      const Scalar analytic = entry.grad[c];
      const Scalar err = std::abs(analytic - numeric) / std::max(Scalar(1), std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  store.zero_grad();
  return worst;
}

}  // namespace earshot
