#pragma once

#include <filesystem>
#include <concepts>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cone/numeric.hpp"

namespace cone {

/// Affine map y = x * weight + bias, weight stored (fan_in x fan_out).
struct Linear {
  Matrix weight;
  Vector bias;

  std::size_t fan_in() const { return weight.rows(); }
  std::size_t fan_out() const { return weight.cols(); }
  bool operator==(const Linear &) const = default;
};

/// Layer shapes of the network.
///
/// The backbone maps input_dim through backbone_dims with ReLU between layers
/// (none after the last), giving the feature h. The projection head maps h
/// through [proj_hidden, proj_dim] with one hidden ReLU, and its output u is
/// normalized to z = u / ||u||. The classifier W (num_classes rows) reads h,
/// or z when classifier_on_projection is set.
struct ModelShape {
  std::size_t input_dim = 2;
  std::vector<std::size_t> backbone_dims{16, 16};
  std::size_t proj_hidden = 8;
  std::size_t proj_dim = 8;
  std::size_t num_classes = 4;
  bool classifier_on_projection = false;

  std::size_t feature_dim() const { return backbone_dims.back(); }
  std::size_t classifier_dim() const {
    return classifier_on_projection ? proj_dim : feature_dim();
  }
  void validate() const;
  bool operator==(const ModelShape &) const = default;
};

struct ModelParams {
  ModelShape shape;
  std::vector<Linear> backbone;
  std::vector<Linear> projection;  // exactly two layers
  Matrix classifier;               // num_classes x classifier_dim

  std::size_t parameter_count() const;
  bool all_finite() const;
  bool operator==(const ModelParams &) const = default;
};

/// Gradients share the parameter tree layout.
using ParamGrads = ModelParams;

/// Visit every parameter tensor in a fixed order. `decays` is true for
/// weight matrices (including the classifier) and false for biases.
template <typename Params, typename Fn>
  requires std::same_as<std::remove_const_t<Params>, ModelParams>
void for_each_tensor(Params &params, Fn &&fn) {
  auto visit_stack = [&](auto &layers, std::string_view prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string base = std::string(prefix) + "." + std::to_string(i);
      fn(base + ".weight", layers[i].weight.values(), true);
      fn(base + ".bias", std::span(layers[i].bias), false);
    }
  };
  visit_stack(params.backbone, "backbone");
  visit_stack(params.projection, "projection");
  fn(std::string("classifier"), params.classifier.values(), true);
}

/// Pre-activations and activations of every layer of one forward pass.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> backbone_pre;   // per backbone layer, before ReLU
  std::vector<Matrix> backbone_act;   // per backbone layer, after ReLU (last = h)
  Matrix proj_hidden_pre;
  Matrix proj_hidden_act;
  Matrix projection;                  // u, unnormalized
  Vector projection_norm;             // ||u|| per row
  Matrix embedding;                   // z = u / ||u||
  Matrix logits;                      // h W^T (or z W^T)

  std::size_t batch_size() const { return input.rows(); }
  const Matrix &feature() const { return backbone_act.back(); }
  FeatureVec z(std::size_t row) const;
  bool operator==(const ForwardTrace &) const = default;
};

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
ModelParams init_params(const ModelShape &shape, SeededRng &rng);

/// Zero-valued gradient tree congruent with `params`.
ParamGrads zeros_like(const ModelParams &params);

ForwardTrace forward(const ModelParams &params, const Matrix &batch);

/// Backpropagates dL/dlogits and dL/dz (both batch-major) through the
/// network, including the normalization Jacobian (I - z z^T) / ||u||.
ParamGrads backward(const ModelParams &params, const ForwardTrace &trace,
                    const Matrix &grad_logits, const Matrix &grad_z);

/// A scalar loss of a forward trace together with its partials with respect
/// to the logits and the normalized embedding.
struct LossEval {
  double value = 0.0;
  Matrix grad_logits;
  Matrix grad_z;
};
using TraceLoss = std::function<LossEval(const ForwardTrace &)>;

struct TensorCheck {
  std::string name;
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Relative error between two gradient blocks: max |a - n| scaled by the
/// larger of the two blocks' max magnitudes (absolute when both are ~0).
double block_relative_error(std::span<const double> analytic,
                            std::span<const double> numeric);

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Applied to the analytic gradients before comparison; lets tests and the
  /// CLI inject a deliberate fault as a negative control.
  std::function<void(ParamGrads &)> corrupt;
};

/// Compares backward() against central finite differences of `loss`.
GradCheckReport grad_check(const ModelParams &params, const Matrix &batch,
                           const TraceLoss &loss, const GradCheckOptions &options = {});

/// Checkpoint file: JSON document
///   { "magic": "CONE-CKPT", "version": 1, "shape": {...},
///     "tensors": [ {"name", "shape": [rows, cols], "values": [...]}, ... ] }
/// with tensors in for_each_tensor order (biases as 1 x n).
inline constexpr std::string_view kCheckpointMagic = "CONE-CKPT";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const ModelParams &params, const std::filesystem::path &path);
ModelParams load_checkpoint(const std::filesystem::path &path);

}  // namespace cone
