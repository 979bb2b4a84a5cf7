#include "cone/verify.hpp"

#include <numeric>

namespace cone {

GradCheckFixture make_gradcheck_fixture(const TrainConfig &config, const Dataset &pool,
                                        std::size_t batch_size, std::size_t bank_fill) {
  if (pool.size() < batch_size + bank_fill) {
    throw std::invalid_argument("gradcheck fixture needs " +
                                std::to_string(batch_size + bank_fill) + " samples, pool has " +
                                std::to_string(pool.size()));
  }
  const ModelShape shape = config.model_shape(pool.dim(), pool.num_classes);
  SeededRng query_rng(derive_seed(config.seed, "gradcheck-query"));
  SeededRng ema_rng(derive_seed(config.seed, "gradcheck-ema"));
  ModelParams query = init_params(shape, query_rng);
  const ModelParams ema = init_params(shape, ema_rng);

  std::vector<std::size_t> idx(batch_size + bank_fill);
  std::iota(idx.begin(), idx.end(), 0);
  const Dataset head = subset(pool, std::span(idx).first(batch_size));
  const Dataset fill = subset(pool, std::span(idx).subspan(batch_size));

  MemoryBank bank(std::max(config.bank_capacity, bank_fill), shape.proj_dim, shape.num_classes);
  const ForwardTrace fill_trace = forward(ema, fill.samples);
  for (std::size_t i = 0; i < fill.size(); ++i)
    bank.push({fill_trace.z(i), stable_softmax(fill_trace.logits.row(i)), fill.labels[i]});

  TrainConfig dc_config = config;
  dc_config.use_dc = true;
  std::optional<Matrix> targets = dc_targets(dc_config, forward(ema, head.samples), bank);
  return GradCheckFixture{std::move(query), head.samples, head.labels, std::move(bank),
                          std::move(targets)};
}

TraceLoss objective_loss(const TrainConfig &config, const GradCheckFixture &fixture) {
  return [config, &fixture](const ForwardTrace &trace) {
    const std::optional<Matrix> none;
    Objective obj = compute_objective(config, trace, fixture.labels, fixture.bank,
                                      config.use_dc ? fixture.dc_targets : none);
    return LossEval{obj.breakdown.total, std::move(obj.grad_logits), std::move(obj.grad_z)};
  };
}

std::vector<ComponentCheck> gradcheck_suite(const TrainConfig &config,
                                            const GradCheckFixture &fixture,
                                            const GradCheckOptions &options) {
  auto only = [&](bool ce, bool sup_in, bool sup_out, bool dc) {
    TrainConfig c = config;
    c.use_ce = ce;
    c.use_sup_in = sup_in;
    c.use_sup_out = sup_out;
    c.use_dc = dc;
    c.lambda_sup = 1.0;
    c.lambda_dc = 1.0;
    return c;
  };
  const std::vector<std::pair<std::string, TrainConfig>> components{
      {"ce", only(true, false, false, false)},
      {"sup_in", only(false, true, false, false)},
      {"sup_out", only(false, false, true, false)},
      {"dc", only(false, false, false, true)},
      {"total", config},
  };
  std::vector<ComponentCheck> out;
  for (const auto &[name, c] : components) {
    out.push_back({name, grad_check(fixture.params, fixture.batch, objective_loss(c, fixture),
                                    options)});
  }
  return out;
}

}  // namespace cone
