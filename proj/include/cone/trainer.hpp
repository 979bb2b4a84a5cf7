#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cone/data.hpp"
#include "cone/ema.hpp"
#include "cone/losses.hpp"
#include "cone/memory_bank.hpp"
#include "cone/model.hpp"

namespace cone {

/// Every knob of a training run. Field names double as the JSON config keys.
struct TrainConfig {
  // objective
  double lambda_sup = 0.7;
  double lambda_dc = 0.4;
  double tau_sup = 0.1;
  double tau_dc = 0.07;
  std::size_t bank_capacity = 4096;
  std::size_t top_n = 32;

  // optimization
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 3;
  double base_lr = 0.1;  // peak lr = base_lr * batch_size / 256
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  double ema_base_momentum = 0.996;
  std::uint64_t seed = 0;

  // ablation switches
  bool use_ce = true;
  bool use_sup_in = true;
  bool use_sup_out = false;
  bool use_dc = true;
  bool classifier_on_projection = false;
  /// Feed the EMA network an independently jittered copy of the batch.
  bool contrastive_view = false;
  /// Gaussian input jitter applied to training batches (0 disables).
  double jitter_std = 0.0;

  // network widths
  std::vector<std::size_t> backbone_dims{32, 32};
  std::size_t proj_hidden = 32;
  std::size_t proj_dim = 8;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  ModelShape model_shape(std::size_t input_dim, std::size_t num_classes) const;
  bool operator==(const TrainConfig &) const = default;
};

struct SgdState {
  ParamGrads velocity;
};

/// Everything a run mutates: the query network, its EMA twin, the optimizer
/// buffers and the memory bank.
struct TrainState {
  ModelParams query;
  ModelParams ema;
  SgdState sgd;
  MemoryBank bank;
};

/// Fresh state: query drawn with `rng`, EMA an exact copy, zero velocity,
/// empty bank.
TrainState init_state(const TrainConfig &config, const ModelShape &shape, SeededRng &rng);

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double l_ce = 0.0;
  double l_sup = 0.0;
  double l_dc = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;
  double ema_momentum = 0.0;
  double masked_fraction = 0.0;
  bool operator==(const MetricsRow &) const = default;
};

/// Step counts of a run.
struct Schedule {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
};
Schedule make_schedule(const TrainConfig &config, std::size_t train_size);

/// Linear warmup from 0 to base_lr * batch_size / 256, then half-cosine decay
/// to 0 at total_steps.
double lr_at(const TrainConfig &config, std::size_t step, const Schedule &schedule);

/// Raised when a step produces a non-finite loss; carries the batch.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(const std::string &what, Matrix batch, std::vector<std::size_t> labels)
      : std::runtime_error(what), batch_(std::move(batch)), labels_(std::move(labels)) {}
  const Matrix &batch() const { return batch_; }
  const std::vector<std::size_t> &labels() const { return labels_; }

 private:
  Matrix batch_;
  std::vector<std::size_t> labels_;
};

/// Distributional-consistency targets p_dc, one row per batch sample, built
/// entirely from the EMA network and the bank. nullopt while the bank is
/// empty or when the term is disabled.
std::optional<Matrix> dc_targets(const TrainConfig &config, const ForwardTrace &ema_trace,
                                 const MemoryBank &bank);

struct Objective {
  LossBreakdown breakdown;
  Matrix grad_logits;
  Matrix grad_z;
};

/// The batch objective l_ce + lambda_sup l_sup + lambda_dc l_dc of a query
/// trace, and its partials with respect to logits and z. Per-sample terms
/// are averaged over the batch, except l_sup which averages over samples that
/// have at least one bank positive.
Objective compute_objective(const TrainConfig &config, const ForwardTrace &query_trace,
                            std::span<const std::size_t> labels, const MemoryBank &bank,
                            const std::optional<Matrix> &targets);

/// One iteration of the training loop on (batch, labels) at global `step`:
/// dual forward, objective, SGD with momentum and weight decay on the query
/// network, EMA update, then the EMA features and class distributions are
/// pushed into the bank. `key_batch` overrides the EMA network's input (a
/// second view); by default both networks see `batch`.
LossBreakdown train_step(TrainState &state, const Matrix &batch,
                         std::span<const std::size_t> labels, const TrainConfig &config,
                         std::size_t step, const Schedule &schedule,
                         const Matrix *key_batch = nullptr);

struct FitResult {
  std::vector<MetricsRow> metrics;
  TrainState state;
};

/// Called after every epoch with the row just logged.
using EpochCallback = std::function<void(const MetricsRow &)>;

/// Seeded run of config.epochs epochs. Batches come from a per-epoch
/// Fisher-Yates shuffle; the last partial batch is kept.
FitResult fit(const TrainConfig &config, const Dataset &train, const Dataset &test,
              const EpochCallback &on_epoch = {});

/// Fraction of samples whose arg-max logit equals the label (ties go to the
/// lowest class index).
double evaluate(const ModelParams &params, const Dataset &data);

/// Nearest-centroid accuracy in the normalized projection space: class means
/// of z over `train`, Euclidean nearest mean for every `test` sample.
double centroid_probe(const ModelParams &params, const Dataset &train, const Dataset &test);

void write_metrics_csv(const std::vector<MetricsRow> &rows, const std::filesystem::path &path);
void write_metrics_jsonl(const std::vector<MetricsRow> &rows,
                         const std::filesystem::path &path);

}  // namespace cone
