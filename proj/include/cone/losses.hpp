#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cone/numeric.hpp"

namespace cone {

// Query embeddings are taken as plain spans: the model guarantees unit norm,
// while finite-difference checks evaluate these losses off the sphere.

/// Anchors for one query: same-label positives and different-label negatives,
/// one unit-norm anchor per row. Either pool may have zero rows. Ids are
/// optional back-references into the store the anchors came from (bank
/// chronological positions).
struct NeighborSet {
  Matrix positives;
  Matrix negatives;
  std::vector<std::size_t> positive_ids;
  std::vector<std::size_t> negative_ids;

  static NeighborSet from_features(const std::vector<FeatureVec> &positives,
                                   const std::vector<FeatureVec> &negatives);
};

/// Per-anchor gradient coefficients of the summed-inside supervised
/// contrastive loss. With S_p = sum_p exp(z.z_p / tau) and S_n the negative
/// counterpart:
///   alpha_p =  exp(z.z_p / tau) / S_p - exp(z.z_p / tau) / (S_p + S_n)
///   alpha_n = -exp(z.z_n / tau) / (S_p + S_n)
/// so that -dL/dz = (1 / tau) [ sum_p alpha_p z_p + sum_n alpha_n z_n ].
///
/// S_p and S_n are reported unshifted and can overflow for very small tau;
/// the coefficients themselves are computed from max-shifted exponentials.
struct CoefficientReport {
  Vector alpha_pos;
  Vector alpha_neg;
  Vector pos_similarity;
  Vector neg_similarity;
  double s_pos = 0.0;
  double s_neg = 0.0;
};

/// LogSumExp bias of each anchor pool, in logit units (similarity / tau):
///   margin_bias = logsumexp(s / tau) - max(s / tau),  0 <= margin_bias <= ln |pool|.
/// objective_gap = (max_neg_sim - max_pos_sim) / tau + m_neg - m_pos, which
/// equals logsumexp_neg - logsumexp_pos, so supcon_in == log(1 + exp(gap)).
struct MarginReport {
  double m_pos = 0.0;
  double m_neg = 0.0;
  double max_pos_sim = 0.0;
  double max_neg_sim = 0.0;
  double objective_gap = 0.0;
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_sup = 0.0;
  double l_dc = 0.0;
  double total = 0.0;
  std::size_t masked_count = 0;
  std::size_t batch_size = 0;

  double masked_fraction() const {
    return batch_size == 0 ? 0.0
                           : static_cast<double>(masked_count) /
                                 static_cast<double>(batch_size);
  }
};

struct CrossEntropy {
  double loss = 0.0;
  Vector grad_logits;
};

/// -log softmax(logits)[label]; gradient softmax(logits) - onehot(label).
CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label);

/// Summed-inside supervised contrastive loss, -log(S_p / (S_p + S_n)).
/// Returns nullopt (masked) when there are no positives.
std::optional<double> supcon_in(std::span<const double> z, const NeighborSet &nbrs, double tau);

/// The same loss written as softplus(logsumexp_neg - logsumexp_pos).
/// Requires non-empty negatives; nullopt when there are no positives.
std::optional<double> supcon_in_reformulated(std::span<const double> z, const NeighborSet &nbrs,
                                             double tau);

struct SupConGrad {
  Vector grad_z;  // dL/dz, before the unit-norm Jacobian
  CoefficientReport report;
};

/// Gradient of supcon_in with respect to z; nullopt when masked.
std::optional<SupConGrad> supcon_in_grad(std::span<const double> z, const NeighborSet &nbrs,
                                         double tau);

/// Summed-outside variant: -(1/|P|) sum_p log( exp(z.z_p/tau) / sum_{a in P u N} exp(z.z_a/tau) ).
std::optional<double> supcon_out(std::span<const double> z, const NeighborSet &nbrs, double tau);
std::optional<Vector> supcon_out_grad(std::span<const double> z, const NeighborSet &nbrs,
                                      double tau);

/// Throws when either pool is empty.
MarginReport margin_analysis(std::span<const double> z, const NeighborSet &nbrs, double tau);

/// softmax(W h): the classifier's class distribution for one feature.
Vector dc_class_dist(const Matrix &classifier, std::span<const double> feature);

/// softmax over the bank of z . bank_j / tau_dc.
Vector dc_instance_dist(const FeatureVec &z, const Matrix &bank_features, double tau_dc);

/// p_dc = sum_j p_instance[j] * bank_dists[j]; a constant target.
Vector dc_target(std::span<const double> p_instance, const Matrix &bank_dists);

struct KlDivergence {
  double loss = 0.0;
  Vector grad_logits;  // w.r.t. the logits producing p_class: p_class - p_dc
};

/// KL(p_dc || p_class), with 0 log 0 = 0.
KlDivergence dc_kl(std::span<const double> p_dc, std::span<const double> p_class);

/// Same divergence with p_class = softmax(class_logits), taking log p_class as
/// logit - LSE so saturated classifiers keep a finite loss.
KlDivergence dc_kl_from_logits(std::span<const double> p_dc, std::span<const double> class_logits);

/// total = l_ce + lambda_sup * l_sup + lambda_dc * l_dc.
LossBreakdown combine(double l_ce, double l_sup, double l_dc, double lambda_sup,
                      double lambda_dc, std::size_t masked_count, std::size_t batch_size = 0);

}  // namespace cone
