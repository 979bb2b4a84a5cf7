#include "cone/ema.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cone {

EmaState::EmaState(double base, std::size_t steps) : base_momentum(base), total_steps(steps) {
  if (!(base >= 0.0 && base <= 1.0)) {
    throw std::invalid_argument("EmaState: base momentum must lie in [0, 1]");
  }
  if (steps == 0) throw std::invalid_argument("EmaState: total_steps must be positive");
}

double momentum_at(const EmaState &state, std::size_t step) {
  if (step > state.total_steps) {
    throw std::out_of_range("momentum_at: step " + std::to_string(step) + " beyond " +
                            std::to_string(state.total_steps));
  }
  const double m0 = state.base_momentum;
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(state.total_steps);
  const double m = m0 + (1.0 - m0) * (1.0 - std::cos(phase)) / 2.0;
  return std::clamp(m, m0, 1.0);
}

void ema_update(ModelParams &target, const ModelParams &source, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
  }
  if (target.shape != source.shape) {
    throw DimensionError("ema_update: parameter trees have different shapes");
  }
  if (momentum == 1.0) return;

  std::vector<std::span<const double>> src;
  for_each_tensor(source, [&](const std::string &, std::span<const double> v, bool) {
    src.push_back(v);
  });
  std::size_t b = 0;
  for_each_tensor(target, [&](const std::string &name, std::span<double> v, bool) {
    if (v.size() != src[b].size()) {
      throw DimensionError("ema_update: tensor " + name + " size mismatch");
    }
    if (momentum == 0.0) {
      std::copy(src[b].begin(), src[b].end(), v.begin());
    } else {
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = momentum * v[i] + (1.0 - momentum) * src[b][i];
    }
    ++b;
  });
}

}  // namespace cone
