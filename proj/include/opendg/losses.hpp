#pragma once

#include "opendg/tensor.hpp"

#include <vector>

namespace opendg::losses {

struct LossWeights {
  double ce = 1.0;
  double disc = 1.0;
  double sm = 1.0;
};

// Row-wise softmax over logits.
Matrix row_softmax(const Matrix& logits);

// Mean over the batch of -log(posterior at the true index). Labels are
// 0-based; the open class is the last column. A posterior of exactly zero at
// the true index is clamped to 1e-12 and flagged.
double loss_ce(const Matrix& posteriors, const std::vector<int>& labels,
               bool* clamped = nullptr);

// Mean open-sample Shannon entropy minus mean closed-sample margin
// |p_open - p_top| where p_top is the largest known-class posterior.
// An empty side contributes 0 with a warning.
double loss_disc(const Matrix& open_posteriors, const Matrix& closed_posteriors,
                 bool* empty_side = nullptr);

double loss_total(double ce, double disc, double sm, const LossWeights& w);

// ---- fused logit-side forms used by training and the gradient checker ----

// Mean cross-entropy of softmax(logits); accumulates weight * d/d logits.
double ce_softmax_backward(const Matrix& logits, const std::vector<int>& labels,
                           double weight, Matrix& d_logits);

// Mean Shannon entropy of softmax(logits); accumulates weight * d/d logits.
double entropy_mean_backward(const Matrix& logits, double weight,
                             Matrix& d_logits);

// Mean |p_open - p_top| of softmax(logits); accumulates weight * d/d logits.
// Ties take subgradient 0.
double closed_margin_mean_backward(const Matrix& logits, double weight,
                                   Matrix& d_logits);

// Per-sample helpers shared with the evaluation path.
double shannon_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& p);

}  // namespace opendg::losses
