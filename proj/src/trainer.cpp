#include "cone/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "format.hpp"

namespace cone {
namespace {

void require(bool ok, const char *field, const char *rule) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + rule);
}

Matrix gather_rows(const Matrix &source, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.set_row(i, source.row(rows[i]));
  return out;
}

Matrix jittered(const Matrix &batch, double noise_std, SeededRng &rng) {
  Matrix out(batch.rows(), batch.cols());
  for (std::size_t r = 0; r < batch.rows(); ++r)
    out.set_row(r, augment_jitter(batch.row(r), noise_std, rng));
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  require(lambda_sup >= 0.0, "lambda_sup", "must be >= 0");
  require(lambda_dc >= 0.0, "lambda_dc", "must be >= 0");
  require(tau_sup > 0.0, "tau_sup", "must be > 0");
  require(tau_dc > 0.0, "tau_dc", "must be > 0");
  require(bank_capacity > 0, "bank_capacity", "must be > 0");
  require(top_n > 0, "top_n", "must be > 0");
  require(batch_size > 0, "batch_size", "must be > 0");
  require(warmup_epochs <= epochs, "warmup_epochs", "must not exceed epochs");
  require(base_lr >= 0.0, "base_lr", "must be >= 0");
  require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(sgd_momentum >= 0.0 && sgd_momentum < 1.0, "sgd_momentum", "must lie in [0, 1)");
  require(ema_base_momentum >= 0.0 && ema_base_momentum <= 1.0, "ema_base_momentum",
          "must lie in [0, 1]");
  require(use_ce || use_sup_in || use_sup_out || use_dc, "use_ce",
          "at least one of use_ce, use_sup_in, use_sup_out, use_dc must be enabled");
  require(!(use_sup_in && use_sup_out), "use_sup_out",
          "use_sup_in and use_sup_out are mutually exclusive");
  require(jitter_std >= 0.0, "jitter_std", "must be >= 0");
  require(!backbone_dims.empty(), "backbone_dims", "needs at least one layer");
  for (auto d : backbone_dims) require(d > 0, "backbone_dims", "widths must be > 0");
  require(proj_hidden > 0, "proj_hidden", "must be > 0");
  require(proj_dim > 0, "proj_dim", "must be > 0");
}

ModelShape TrainConfig::model_shape(std::size_t input_dim, std::size_t num_classes) const {
  ModelShape s;
  s.input_dim = input_dim;
  s.backbone_dims = backbone_dims;
  s.proj_hidden = proj_hidden;
  s.proj_dim = proj_dim;
  s.num_classes = num_classes;
  s.classifier_on_projection = classifier_on_projection;
  s.validate();
  return s;
}

TrainState init_state(const TrainConfig &config, const ModelShape &shape, SeededRng &rng) {
  ModelParams query = init_params(shape, rng);
  return TrainState{query, query, SgdState{zeros_like(query)},
                    MemoryBank(config.bank_capacity, shape.proj_dim, shape.num_classes)};
}

Schedule make_schedule(const TrainConfig &config, std::size_t train_size) {
  const std::size_t per_epoch = (train_size + config.batch_size - 1) / config.batch_size;
  Schedule s;
  s.total_steps = config.epochs * per_epoch;
  s.warmup_steps = std::min(config.warmup_epochs * per_epoch, s.total_steps);
  return s;
}

double lr_at(const TrainConfig &config, std::size_t step, const Schedule &schedule) {
  if (step > schedule.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond " +
                            std::to_string(schedule.total_steps));
  }
  const double peak = config.base_lr * static_cast<double>(config.batch_size) / 256.0;
  if (step < schedule.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
  }
  const std::size_t decay_steps = schedule.total_steps - schedule.warmup_steps;
  if (decay_steps == 0) return peak;
  const double progress = static_cast<double>(step - schedule.warmup_steps) /
                          static_cast<double>(decay_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::optional<Matrix> dc_targets(const TrainConfig &config, const ForwardTrace &ema_trace,
                                 const MemoryBank &bank) {
  if (!config.use_dc || bank.empty()) return std::nullopt;
  const BankSnapshot snap = bank.snapshot();
  Matrix targets(ema_trace.batch_size(), bank.num_classes());
  for (std::size_t i = 0; i < ema_trace.batch_size(); ++i) {
    Vector p_instance = dc_instance_dist(ema_trace.z(i), snap.features, config.tau_dc);
    targets.set_row(i, dc_target(p_instance, snap.dists));
  }
  return targets;
}

Objective compute_objective(const TrainConfig &config, const ForwardTrace &query_trace,
                            std::span<const std::size_t> labels, const MemoryBank &bank,
                            const std::optional<Matrix> &targets) {
  const std::size_t batch = query_trace.batch_size();
  if (labels.size() != batch) {
    throw DimensionError("compute_objective: " + std::to_string(labels.size()) +
                         " labels for a batch of " + std::to_string(batch));
  }
  const auto inv_batch = 1.0 / static_cast<double>(batch);
  const bool use_sup = config.use_sup_in || config.use_sup_out;

  Objective obj;
  obj.grad_logits = Matrix(batch, query_trace.logits.cols());
  obj.grad_z = Matrix(batch, query_trace.embedding.cols());

  double l_ce = 0.0, l_sup = 0.0, l_dc = 0.0;
  std::size_t masked = 0;
  std::vector<std::optional<Vector>> sup_grads(batch);

  for (std::size_t i = 0; i < batch; ++i) {
    auto logits = query_trace.logits.row(i);
    auto g_logits = obj.grad_logits.row(i);

    if (config.use_ce) {
      CrossEntropy ce = cross_entropy(logits, labels[i]);
      l_ce += ce.loss;
      for (std::size_t c = 0; c < g_logits.size(); ++c) g_logits[c] += ce.grad_logits[c] * inv_batch;
    }

    if (use_sup) {
      auto z = query_trace.embedding.row(i);
      NeighborSet nbrs = bank.query_neighbors(z, labels[i], config.top_n);
      if (nbrs.positives.rows() == 0) {
        ++masked;
      } else if (config.use_sup_in) {
        l_sup += *supcon_in(z, nbrs, config.tau_sup);
        sup_grads[i] = std::move(supcon_in_grad(z, nbrs, config.tau_sup)->grad_z);
      } else {
        l_sup += *supcon_out(z, nbrs, config.tau_sup);
        sup_grads[i] = supcon_out_grad(z, nbrs, config.tau_sup);
      }
    }

    if (targets) {
      KlDivergence kl = dc_kl_from_logits(targets->row(i), logits);
      l_dc += kl.loss;
      const double w = config.lambda_dc * inv_batch;
      for (std::size_t c = 0; c < g_logits.size(); ++c) g_logits[c] += w * kl.grad_logits[c];
    }
  }

  const std::size_t unmasked = use_sup ? batch - masked : 0;
  if (unmasked > 0) {
    l_sup /= static_cast<double>(unmasked);
    const double w = config.lambda_sup / static_cast<double>(unmasked);
    for (std::size_t i = 0; i < batch; ++i) {
      if (!sup_grads[i]) continue;
      auto gz = obj.grad_z.row(i);
      for (std::size_t k = 0; k < gz.size(); ++k) gz[k] = w * (*sup_grads[i])[k];
    }
  }
  obj.breakdown = combine(l_ce * inv_batch, l_sup, l_dc * inv_batch, config.lambda_sup,
                          config.lambda_dc, masked, batch);
  return obj;
}

LossBreakdown train_step(TrainState &state, const Matrix &batch,
                         std::span<const std::size_t> labels, const TrainConfig &config,
                         std::size_t step, const Schedule &schedule, const Matrix *key_batch) {
  const auto abort_batch = [&](const std::string &why) {
    return NumericAbort(why + " at step " + std::to_string(step), batch,
                        std::vector<std::size_t>(labels.begin(), labels.end()));
  };
  // An overflowing projection cannot be normalized; l2_normalize reports it as a domain error.
  std::optional<ForwardTrace> query_trace, ema_trace;
  try {
    query_trace = forward(state.query, batch);
    ema_trace = forward(state.ema, key_batch ? *key_batch : batch);
  } catch (const std::domain_error &e) {
    throw abort_batch(std::string("forward pass failed (") + e.what() + ")");
  }
  if (ema_trace->batch_size() != batch.rows()) {
    throw DimensionError("train_step: key batch size differs from query batch size");
  }

  const std::optional<Matrix> targets = dc_targets(config, *ema_trace, state.bank);
  Objective obj = compute_objective(config, *query_trace, labels, state.bank, targets);

  const LossBreakdown &b = obj.breakdown;
  if (!std::isfinite(b.total) || !obj.grad_logits.all_finite() || !obj.grad_z.all_finite()) {
    throw abort_batch("non-finite loss (l_ce=" + detail::format_double(b.l_ce) +
                      " l_sup=" + detail::format_double(b.l_sup) +
                      " l_dc=" + detail::format_double(b.l_dc) + ")");
  }

  // SGD with momentum; weight decay on weight matrices only.
  const ParamGrads grads = backward(state.query, *query_trace, obj.grad_logits, obj.grad_z);
  const double lr = lr_at(config, step, schedule);
  std::vector<std::span<const double>> grad_blocks;
  for_each_tensor(grads, [&](const std::string &, std::span<const double> g, bool) {
    grad_blocks.push_back(g);
  });
  std::vector<std::span<double>> velocity_blocks;
  for_each_tensor(state.sgd.velocity, [&](const std::string &, std::span<double> v, bool) {
    velocity_blocks.push_back(v);
  });
  std::size_t block = 0;
  for_each_tensor(state.query, [&](const std::string &, std::span<double> theta, bool decays) {
    auto g = grad_blocks[block];
    auto v = velocity_blocks[block];
    const double wd = decays ? config.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = config.sgd_momentum * v[i] + g[i] + wd * theta[i];
      theta[i] -= lr * v[i];
    }
    ++block;
  });
  if (!state.query.all_finite()) {
    throw abort_batch("parameters became non-finite");
  }

  const EmaState ema_schedule(config.ema_base_momentum, std::max<std::size_t>(schedule.total_steps, 1));
  ema_update(state.ema, state.query, momentum_at(ema_schedule, std::min(step, ema_schedule.total_steps)));

  for (std::size_t i = 0; i < batch.rows(); ++i) {
    state.bank.push({ema_trace->z(i), stable_softmax(ema_trace->logits.row(i)), labels[i]});
  }
  return obj.breakdown;
}

FitResult fit(const TrainConfig &config, const Dataset &train, const Dataset &test,
              const EpochCallback &on_epoch) {
  config.validate();
  train.validate();
  test.validate();
  if (train.size() == 0 || test.size() == 0) {
    throw std::invalid_argument("fit: train and test sets must be non-empty");
  }
  if (train.dim() != test.dim() || train.num_classes != test.num_classes) {
    throw std::invalid_argument("fit: train and test sets disagree on dims or classes");
  }

  SeededRng init_rng(derive_seed(config.seed, "init"));
  SeededRng shuffle_rng(derive_seed(config.seed, "shuffle"));
  SeededRng augment_rng(derive_seed(config.seed, "augment"));

  const ModelShape shape = config.model_shape(train.dim(), train.num_classes);
  FitResult result{{}, init_state(config, shape, init_rng)};
  if (config.epochs == 0) return result;

  const Schedule schedule = make_schedule(config, train.size());
  const EmaState ema_schedule(config.ema_base_momentum, schedule.total_steps);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double sum_ce = 0.0, sum_sup = 0.0, sum_dc = 0.0, sum_total = 0.0;
    std::size_t masked = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix raw = gather_rows(train.samples, idx);
      std::vector<std::size_t> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(train.labels[i]);

      const Matrix batch =
          config.jitter_std > 0.0 ? jittered(raw, config.jitter_std, augment_rng) : raw;
      std::optional<Matrix> key;
      if (config.contrastive_view) key = jittered(raw, config.jitter_std, augment_rng);

      const LossBreakdown b = train_step(result.state, batch, labels, config, step, schedule,
                                         key ? &*key : nullptr);
      const auto weight = static_cast<double>(idx.size());
      sum_ce += b.l_ce * weight;
      sum_sup += b.l_sup * weight;
      sum_dc += b.l_dc * weight;
      sum_total += b.total * weight;
      masked += b.masked_count;
      ++step;
    }

    const auto n = static_cast<double>(train.size());
    MetricsRow row;
    row.epoch = epoch;
    row.step = step;
    row.l_ce = sum_ce / n;
    row.l_sup = sum_sup / n;
    row.l_dc = sum_dc / n;
    row.total = sum_total / n;
    row.train_acc = evaluate(result.state.query, train);
    row.test_acc = evaluate(result.state.query, test);
    row.lr = lr_at(config, step - 1, schedule);
    row.ema_momentum = momentum_at(ema_schedule, step - 1);
    row.masked_fraction = static_cast<double>(masked) / n;
    result.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

double evaluate(const ModelParams &params, const Dataset &data) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  const ForwardTrace t = forward(params, data.samples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (argmax(t.logits.row(i)) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double centroid_probe(const ModelParams &params, const Dataset &train, const Dataset &test) {
  if (test.size() == 0) throw std::invalid_argument("centroid_probe: empty test set");
  const std::size_t classes = params.shape.num_classes;
  const ForwardTrace tr = forward(params, train.samples);
  Matrix centroids(classes, params.shape.proj_dim);
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const std::size_t y = train.labels.at(i);
    if (y >= classes) throw std::out_of_range("centroid_probe: label out of range");
    auto z = tr.embedding.row(i);
    auto c = centroids.row(y);
    for (std::size_t k = 0; k < z.size(); ++k) c[k] += z[k];
    ++counts[y];
  }
  for (std::size_t y = 0; y < classes; ++y) {
    if (counts[y] == 0) {
      throw std::invalid_argument("centroid_probe: class " + std::to_string(y) +
                                  " has no training samples");
    }
    for (double &v : centroids.row(y)) v /= static_cast<double>(counts[y]);
  }

  const ForwardTrace te = forward(params, test.samples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto z = te.embedding.row(i);
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < classes; ++y) {
      double d2 = 0.0;
      auto c = centroids.row(y);
      for (std::size_t k = 0; k < z.size(); ++k) d2 += (z[k] - c[k]) * (z[k] - c[k]);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = y;
      }
    }
    if (best == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {

nlohmann::json row_to_json(const MetricsRow &r) {
  return {{"epoch", r.epoch},         {"step", r.step},
          {"l_ce", r.l_ce},           {"l_sup", r.l_sup},
          {"l_dc", r.l_dc},           {"total", r.total},
          {"train_acc", r.train_acc}, {"test_acc", r.test_acc},
          {"lr", r.lr},               {"ema_momentum", r.ema_momentum},
          {"masked_fraction", r.masked_fraction}};
}

}  // namespace

void write_metrics_csv(const std::vector<MetricsRow> &rows, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "epoch,step,l_ce,l_sup,l_dc,total,train_acc,test_acc,lr,ema_momentum,masked_fraction\n";
  using detail::format_double;
  for (const auto &r : rows) {
    out << r.epoch << ',' << r.step << ',' << format_double(r.l_ce) << ','
        << format_double(r.l_sup) << ',' << format_double(r.l_dc) << ','
        << format_double(r.total) << ',' << format_double(r.train_acc) << ','
        << format_double(r.test_acc) << ',' << format_double(r.lr) << ','
        << format_double(r.ema_momentum) << ',' << format_double(r.masked_fraction) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_metrics_jsonl(const std::vector<MetricsRow> &rows,
                         const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto &r : rows) out << row_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace cone
