#include "cone/analysis.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "format.hpp"

namespace cone {
namespace {

void check_data(const ModelParams &params, const Dataset &data) {
  if (data.dim() != params.shape.input_dim) {
    throw DimensionError("dataset has " + std::to_string(data.dim()) +
                         " features, checkpoint expects " +
                         std::to_string(params.shape.input_dim));
  }
}

std::ofstream open_out(const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

MarginSummary summarize(const std::vector<MarginSample> &samples, double MarginSample::*field) {
  MarginSummary s;
  if (samples.empty()) return s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (const auto &m : samples) {
    const double v = m.*field;
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.mean = sum / static_cast<double>(samples.size());
  return s;
}

}  // namespace

void check_compatible(const ModelParams &params, const MemoryBank &bank) {
  if (bank.feature_dim() != params.shape.proj_dim ||
      bank.num_classes() != params.shape.num_classes) {
    throw DimensionError("bank (dim " + std::to_string(bank.feature_dim()) + ", " +
                         std::to_string(bank.num_classes()) +
                         " classes) does not match checkpoint (dim " +
                         std::to_string(params.shape.proj_dim) + ", " +
                         std::to_string(params.shape.num_classes) + " classes)");
  }
}

std::vector<CoefficientTable> coefficient_report(const ModelParams &params,
                                                 const Dataset &data, const MemoryBank &bank,
                                                 std::span<const std::size_t> sample_ids,
                                                 const TrainConfig &config) {
  check_compatible(params, bank);
  check_data(params, data);
  for (auto id : sample_ids) {
    if (id >= data.size()) {
      throw std::out_of_range("unknown sample id " + std::to_string(id) + " (dataset has " +
                              std::to_string(data.size()) + " samples)");
    }
  }

  Matrix batch(sample_ids.size(), data.dim());
  for (std::size_t i = 0; i < sample_ids.size(); ++i)
    batch.set_row(i, data.samples.row(sample_ids[i]));
  const ForwardTrace trace = forward(params, batch);

  std::vector<CoefficientTable> tables;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    CoefficientTable table{sample_ids[i], {}};
    auto z = trace.embedding.row(i);
    const NeighborSet nbrs =
        bank.query_neighbors(z, data.labels[sample_ids[i]], config.top_n);
    if (auto g = supcon_in_grad(z, nbrs, config.tau_sup)) {
      const CoefficientReport &r = g->report;
      for (std::size_t p = 0; p < nbrs.positive_ids.size(); ++p)
        table.rows.push_back({nbrs.positive_ids[p], true, r.pos_similarity[p], r.alpha_pos[p]});
      for (std::size_t n = 0; n < nbrs.negative_ids.size(); ++n)
        table.rows.push_back({nbrs.negative_ids[n], false, r.neg_similarity[n], r.alpha_neg[n]});
      std::sort(table.rows.begin(), table.rows.end(),
                [](const CoefficientRow &a, const CoefficientRow &b) {
                  if (a.cos_sim != b.cos_sim) return a.cos_sim > b.cos_sim;
                  return a.anchor_idx < b.anchor_idx;
                });
    }
    tables.push_back(std::move(table));
  }
  return tables;
}

MarginStats margin_report(const ModelParams &params, const Dataset &data,
                          const MemoryBank &bank, const TrainConfig &config) {
  check_compatible(params, bank);
  check_data(params, data);
  MarginStats stats;
  if (data.size() == 0) return stats;
  const ForwardTrace trace = forward(params, data.samples);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto z = trace.embedding.row(i);
    const NeighborSet nbrs = bank.query_neighbors(z, data.labels[i], config.top_n);
    if (nbrs.positives.rows() == 0 || nbrs.negatives.rows() == 0) {
      ++stats.skipped;
      continue;
    }
    const MarginReport r = margin_analysis(z, nbrs, config.tau_sup);
    stats.samples.push_back({i, r.m_pos, r.m_neg, nbrs.positives.rows(), nbrs.negatives.rows()});
  }
  stats.m_pos = summarize(stats.samples, &MarginSample::m_pos);
  stats.m_neg = summarize(stats.samples, &MarginSample::m_neg);
  return stats;
}

void write_coefficients_csv(const std::vector<CoefficientTable> &tables,
                            const std::filesystem::path &path) {
  using detail::format_double;
  auto out = open_out(path);
  out << "sample_id,anchor_idx,is_positive,cos_sim,alpha\n";
  for (const auto &t : tables)
    for (const auto &r : t.rows)
      out << t.sample_id << ',' << r.anchor_idx << ',' << (r.is_positive ? 1 : 0) << ','
          << format_double(r.cos_sim) << ',' << format_double(r.alpha) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_margins_csv(const MarginStats &stats, const std::filesystem::path &path) {
  using detail::format_double;
  auto out = open_out(path);
  out << "sample_id,m_pos,m_neg\n";
  for (const auto &m : stats.samples)
    out << m.sample_id << ',' << format_double(m.m_pos) << ',' << format_double(m.m_neg) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void export_features(const ModelParams &params, const Dataset &data,
                     const std::filesystem::path &path) {
  check_data(params, data);
  const ForwardTrace trace = forward(params, data.samples);
  auto out = open_out(path);
  out << "label";
  for (std::size_t k = 0; k < params.shape.proj_dim; ++k) out << ",z_" << k;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (double v : trace.embedding.row(i)) out << ',' << detail::format_double(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace cone
