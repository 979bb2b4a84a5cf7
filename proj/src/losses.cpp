#include "cone/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cone {
namespace {

Vector similarities(std::span<const double> z, const Matrix &anchors) {
  if (anchors.rows() > 0 && anchors.cols() != z.size()) {
    throw DimensionError("anchor dim " + std::to_string(anchors.cols()) +
                         " does not match query dim " + std::to_string(z.size()));
  }
  Vector sims(anchors.rows());
  for (std::size_t i = 0; i < anchors.rows(); ++i)
    sims[i] = cosine_similarity(z, anchors.row(i));
  return sims;
}

Vector scaled(const Vector &sims, double tau) {
  Vector out(sims.size());
  for (std::size_t i = 0; i < sims.size(); ++i) out[i] = sims[i] / tau;
  return out;
}

double max_of(const Vector &v) {
  return v.empty() ? -std::numeric_limits<double>::infinity()
                   : *std::max_element(v.begin(), v.end());
}

void require_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
}

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Exponentials of both pools, shifted by the joint maximum logit.
struct ShiftedPools {
  Vector pos_sims, neg_sims;
  Vector pos_exp, neg_exp;
  double shift = 0.0;
  double s_pos = 0.0, s_neg = 0.0;  // shifted sums
};

ShiftedPools shifted_pools(std::span<const double> z, const NeighborSet &nbrs, double tau) {
  ShiftedPools p;
  p.pos_sims = similarities(z, nbrs.positives);
  p.neg_sims = similarities(z, nbrs.negatives);
  p.shift = std::max(max_of(p.pos_sims), max_of(p.neg_sims)) / tau;
  auto fill = [&](const Vector &sims, Vector &out, double &sum) {
    out.resize(sims.size());
    for (std::size_t i = 0; i < sims.size(); ++i) {
      out[i] = std::exp(sims[i] / tau - p.shift);
      sum += out[i];
    }
  };
  fill(p.pos_sims, p.pos_exp, p.s_pos);
  fill(p.neg_sims, p.neg_exp, p.s_neg);
  return p;
}

}  // namespace

NeighborSet NeighborSet::from_features(const std::vector<FeatureVec> &positives,
                                       const std::vector<FeatureVec> &negatives) {
  auto stack = [](const std::vector<FeatureVec> &v) {
    if (v.empty()) return Matrix();
    Matrix m(v.size(), v.front().dim());
    for (std::size_t i = 0; i < v.size(); ++i) m.set_row(i, v[i].values());
    return m;
  };
  NeighborSet n;
  n.positives = stack(positives);
  n.negatives = stack(negatives);
  return n;
}

CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.size()) +
                            " classes");
  }
  CrossEntropy ce;
  ce.loss = log_sum_exp(logits) - logits[label];
  ce.grad_logits = stable_softmax(logits);
  ce.grad_logits[label] -= 1.0;
  return ce;
}

std::optional<double> supcon_in(std::span<const double> z, const NeighborSet &nbrs,
                                double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0) return std::nullopt;
  auto pools = shifted_pools(z, nbrs, tau);
  // -log(S_p / (S_p + S_n)) = log1p(S_n / S_p)
  return std::log1p(pools.s_neg / pools.s_pos);
}

std::optional<double> supcon_in_reformulated(std::span<const double> z,
                                             const NeighborSet &nbrs, double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0) return std::nullopt;
  if (nbrs.negatives.rows() == 0) {
    throw std::invalid_argument("supcon_in_reformulated: negative pool is empty");
  }
  const double lse_pos = log_sum_exp(scaled(similarities(z, nbrs.positives), tau));
  const double lse_neg = log_sum_exp(scaled(similarities(z, nbrs.negatives), tau));
  return softplus(lse_neg - lse_pos);
}

std::optional<SupConGrad> supcon_in_grad(std::span<const double> z, const NeighborSet &nbrs,
                                         double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0) return std::nullopt;
  auto pools = shifted_pools(z, nbrs, tau);
  const double s_all = pools.s_pos + pools.s_neg;

  SupConGrad out;
  auto &rep = out.report;
  rep.pos_similarity = pools.pos_sims;
  rep.neg_similarity = pools.neg_sims;
  rep.s_pos = pools.s_pos * std::exp(pools.shift);
  rep.s_neg = pools.s_neg * std::exp(pools.shift);

  // alpha_p = e_p / S_p - e_p / (S_p + S_n) = e_p * S_n / (S_p (S_p + S_n)).
  // The factored form is monotone in e_p and exactly zero when S_n == 0.
  const double pos_scale = pools.s_neg / (pools.s_pos * s_all);
  rep.alpha_pos.resize(pools.pos_exp.size());
  for (std::size_t i = 0; i < pools.pos_exp.size(); ++i)
    rep.alpha_pos[i] = pools.pos_exp[i] * pos_scale;
  rep.alpha_neg.resize(pools.neg_exp.size());
  for (std::size_t i = 0; i < pools.neg_exp.size(); ++i)
    rep.alpha_neg[i] = -pools.neg_exp[i] / s_all;

  out.grad_z.assign(z.size(), 0.0);
  auto accumulate = [&](const Matrix &anchors, const Vector &alpha) {
    for (std::size_t a = 0; a < anchors.rows(); ++a) {
      auto row = anchors.row(a);
      for (std::size_t k = 0; k < z.size(); ++k) out.grad_z[k] -= alpha[a] * row[k] / tau;
    }
  };
  accumulate(nbrs.positives, rep.alpha_pos);
  accumulate(nbrs.negatives, rep.alpha_neg);
  return out;
}

std::optional<double> supcon_out(std::span<const double> z, const NeighborSet &nbrs,
                                 double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0) return std::nullopt;
  Vector pos = scaled(similarities(z, nbrs.positives), tau);
  Vector all = pos;
  Vector neg = scaled(similarities(z, nbrs.negatives), tau);
  all.insert(all.end(), neg.begin(), neg.end());
  const double lse_all = log_sum_exp(all);
  double total = 0.0;
  for (double p : pos) total += lse_all - p;
  return total / static_cast<double>(pos.size());
}

std::optional<Vector> supcon_out_grad(std::span<const double> z, const NeighborSet &nbrs,
                                      double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0) return std::nullopt;
  auto pools = shifted_pools(z, nbrs, tau);
  const double s_all = pools.s_pos + pools.s_neg;
  const double inv_count = 1.0 / static_cast<double>(nbrs.positives.rows());

  // dL/dz = (1/tau) [ sum_a softmax_a z_a - (1/|P|) sum_p z_p ]
  Vector grad(z.size(), 0.0);
  for (std::size_t a = 0; a < nbrs.positives.rows(); ++a) {
    const double w = (pools.pos_exp[a] / s_all - inv_count) / tau;
    auto row = nbrs.positives.row(a);
    for (std::size_t k = 0; k < z.size(); ++k) grad[k] += w * row[k];
  }
  for (std::size_t a = 0; a < nbrs.negatives.rows(); ++a) {
    const double w = pools.neg_exp[a] / s_all / tau;
    auto row = nbrs.negatives.row(a);
    for (std::size_t k = 0; k < z.size(); ++k) grad[k] += w * row[k];
  }
  return grad;
}

MarginReport margin_analysis(std::span<const double> z, const NeighborSet &nbrs,
                             double tau) {
  require_tau(tau);
  if (nbrs.positives.rows() == 0 || nbrs.negatives.rows() == 0) {
    throw std::invalid_argument("margin_analysis: both anchor pools must be non-empty");
  }
  auto bias = [tau](const Vector &sims) {
    const double peak = max_of(sims) / tau;
    double sum = 0.0;
    for (double s : sims) sum += std::exp(s / tau - peak);
    return std::log(sum);
  };
  Vector pos = similarities(z, nbrs.positives);
  Vector neg = similarities(z, nbrs.negatives);
  MarginReport r;
  r.m_pos = bias(pos);
  r.m_neg = bias(neg);
  r.max_pos_sim = max_of(pos);
  r.max_neg_sim = max_of(neg);
  r.objective_gap = (r.max_neg_sim - r.max_pos_sim) / tau + r.m_neg - r.m_pos;
  return r;
}

Vector dc_class_dist(const Matrix &classifier, std::span<const double> feature) {
  if (classifier.cols() != feature.size()) {
    throw DimensionError("dc_class_dist: classifier has " + std::to_string(classifier.cols()) +
                         " columns, feature has " + std::to_string(feature.size()));
  }
  Vector logits(classifier.rows());
  for (std::size_t c = 0; c < classifier.rows(); ++c) logits[c] = dot(classifier.row(c), feature);
  return stable_softmax(logits);
}

Vector dc_instance_dist(const FeatureVec &z, const Matrix &bank_features, double tau_dc) {
  require_tau(tau_dc);
  if (bank_features.rows() == 0) throw std::invalid_argument("dc_instance_dist: empty bank");
  if (bank_features.cols() != z.dim()) {
    throw DimensionError("dc_instance_dist: bank dim " + std::to_string(bank_features.cols()) +
                         " vs query dim " + std::to_string(z.dim()));
  }
  Vector sims(bank_features.rows());
  for (std::size_t j = 0; j < sims.size(); ++j)
    sims[j] = cosine_similarity(z.values(), bank_features.row(j));
  return stable_softmax(sims, tau_dc);
}

Vector dc_target(std::span<const double> p_instance, const Matrix &bank_dists) {
  if (p_instance.size() != bank_dists.rows()) {
    throw DimensionError("dc_target: " + std::to_string(p_instance.size()) +
                         " instance weights for " + std::to_string(bank_dists.rows()) +
                         " bank rows");
  }
  Vector target(bank_dists.cols(), 0.0);
  for (std::size_t j = 0; j < p_instance.size(); ++j) {
    auto row = bank_dists.row(j);
    for (std::size_t c = 0; c < target.size(); ++c) target[c] += p_instance[j] * row[c];
  }
  return target;
}

KlDivergence dc_kl(std::span<const double> p_dc, std::span<const double> p_class) {
  if (p_dc.size() != p_class.size()) {
    throw DimensionError("dc_kl: distributions over " + std::to_string(p_dc.size()) + " and " +
                         std::to_string(p_class.size()) + " classes");
  }
  KlDivergence kl;
  kl.grad_logits.resize(p_class.size());
  for (std::size_t c = 0; c < p_dc.size(); ++c) {
    if (p_dc[c] > 0.0) kl.loss += p_dc[c] * (std::log(p_dc[c]) - std::log(p_class[c]));
    kl.grad_logits[c] = p_class[c] - p_dc[c];
  }
  // Rounding can leave a tiny negative residue near the minimum.
  kl.loss = std::max(kl.loss, 0.0);
  return kl;
}

KlDivergence dc_kl_from_logits(std::span<const double> p_dc,
                               std::span<const double> class_logits) {
  if (p_dc.size() != class_logits.size()) {
    throw DimensionError("dc_kl_from_logits: distributions over " + std::to_string(p_dc.size()) +
                         " and " + std::to_string(class_logits.size()) + " classes");
  }
  const double lse = log_sum_exp(class_logits);
  KlDivergence kl;
  kl.grad_logits = stable_softmax(class_logits);
  for (std::size_t c = 0; c < p_dc.size(); ++c) {
    if (p_dc[c] > 0.0) kl.loss += p_dc[c] * (std::log(p_dc[c]) - (class_logits[c] - lse));
    kl.grad_logits[c] -= p_dc[c];
  }
  kl.loss = std::max(kl.loss, 0.0);
  return kl;
}

LossBreakdown combine(double l_ce, double l_sup, double l_dc, double lambda_sup,
                      double lambda_dc, std::size_t masked_count, std::size_t batch_size) {
  if (lambda_sup < 0.0 || lambda_dc < 0.0) {
    throw std::invalid_argument("combine: loss weights must be non-negative");
  }
  LossBreakdown b;
  b.l_ce = l_ce;
  b.l_sup = l_sup;
  b.l_dc = l_dc;
  b.total = l_ce + lambda_sup * l_sup + lambda_dc * l_dc;
  b.masked_count = masked_count;
  b.batch_size = batch_size;
  return b;
}

}  // namespace cone
