#pragma once

#include <cmath>
#include <random>

#include "earshot/tensor.hpp"

namespace earshot {

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
inline Tensor uniform_fan_in(Shape shape, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

inline Tensor normal_init(Shape shape, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace earshot
