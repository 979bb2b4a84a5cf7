#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cone/data.hpp"
#include "cone/memory_bank.hpp"
#include "cone/model.hpp"
#include "cone/trainer.hpp"

namespace cone {

/// A frozen batch, a network and a bank filled by a second (EMA-like)
/// network: everything needed to differentiate the full objective.
struct GradCheckFixture {
  ModelParams params;
  Matrix batch;
  std::vector<std::size_t> labels;
  MemoryBank bank;
  std::optional<Matrix> dc_targets;
};

/// The first `batch_size` samples of `pool` form the batch, the next
/// `bank_fill` go through the EMA network into the bank. Deterministic in
/// config.seed.
GradCheckFixture make_gradcheck_fixture(const TrainConfig &config, const Dataset &pool,
                                        std::size_t batch_size = 8,
                                        std::size_t bank_fill = 64);

/// The objective of `config` (with the fixture's bank and frozen targets) as a
/// function of the query trace.
TraceLoss objective_loss(const TrainConfig &config, const GradCheckFixture &fixture);

struct ComponentCheck {
  std::string component;  // ce, sup_in, sup_out, dc, total
  GradCheckReport report;
};

/// Finite-difference check of each loss term alone (weight 1) and of the
/// configured total, through the whole network.
std::vector<ComponentCheck> gradcheck_suite(const TrainConfig &config,
                                            const GradCheckFixture &fixture,
                                            const GradCheckOptions &options = {});

}  // namespace cone
