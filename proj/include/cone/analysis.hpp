#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "cone/data.hpp"
#include "cone/memory_bank.hpp"
#include "cone/model.hpp"
#include "cone/trainer.hpp"

namespace cone {

/// One bank anchor's contribution to a sample's supervised contrastive
/// gradient. anchor_idx is the bank's chronological position.
struct CoefficientRow {
  std::size_t anchor_idx = 0;
  bool is_positive = false;
  double cos_sim = 0.0;
  double alpha = 0.0;
};

/// Rows sorted by cos_sim descending (ties by anchor_idx ascending). Empty
/// when the sample has no positive in the bank.
struct CoefficientTable {
  std::size_t sample_id = 0;
  std::vector<CoefficientRow> rows;
};

struct MarginSample {
  std::size_t sample_id = 0;
  double m_pos = 0.0;
  double m_neg = 0.0;
  std::size_t pos_pool = 0;
  std::size_t neg_pool = 0;
};

struct MarginSummary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct MarginStats {
  std::vector<MarginSample> samples;
  MarginSummary m_pos;
  MarginSummary m_neg;
  /// Samples with an empty positive or negative pool.
  std::size_t skipped = 0;
};

/// Throws DimensionError when the bank was not produced by a network of
/// this shape.
void check_compatible(const ModelParams &params, const MemoryBank &bank);

/// Coefficients for each requested sample, in request order. Positives are
/// the bank's top-n same-label entries, negatives all others.
std::vector<CoefficientTable> coefficient_report(const ModelParams &params,
                                                 const Dataset &data, const MemoryBank &bank,
                                                 std::span<const std::size_t> sample_ids,
                                                 const TrainConfig &config);

/// LogSumExp biases of the positive and negative pools of every sample, at
/// temperature config.tau_sup.
MarginStats margin_report(const ModelParams &params, const Dataset &data,
                          const MemoryBank &bank, const TrainConfig &config);

/// Header "sample_id,anchor_idx,is_positive,cos_sim,alpha".
void write_coefficients_csv(const std::vector<CoefficientTable> &tables,
                            const std::filesystem::path &path);
/// Header "sample_id,m_pos,m_neg".
void write_margins_csv(const MarginStats &stats, const std::filesystem::path &path);

/// Header "label,z_0,...,z_{d-1}", one row per sample of `data`.
void export_features(const ModelParams &params, const Dataset &data,
                     const std::filesystem::path &path);

}  // namespace cone
