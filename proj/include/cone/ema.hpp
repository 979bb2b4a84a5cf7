#pragma once

#include <cstddef>

#include "cone/model.hpp"

namespace cone {

/// Cosine ramp of the EMA momentum from base_momentum (step 0) to 1 (step
/// total_steps).
struct EmaState {
  double base_momentum = 0.996;
  std::size_t total_steps = 1;

  EmaState() = default;
  EmaState(double base, std::size_t steps);
};

/// m(t) = 1 - (1 - m0) (cos(pi t / T) + 1) / 2, evaluated in the equivalent
/// form m0 + (1 - m0) (1 - cos(pi t / T)) / 2 so that both endpoints are exact.
double momentum_at(const EmaState &state, std::size_t step);

/// target <- m * target + (1 - m) * source, for every parameter tensor.
/// m == 1 leaves target untouched; m == 0 copies source exactly.
void ema_update(ModelParams &target, const ModelParams &source, double momentum);

}  // namespace cone
