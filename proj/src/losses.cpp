#include "opendg/losses.hpp"

#include "opendg/log.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace opendg {

void log_info(const std::string& msg) {
  std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

void log_warn(const std::string& msg) {
  std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

}  // namespace opendg

namespace opendg::losses {

namespace {

constexpr double kPosteriorFloor = 1e-12;
constexpr double kSimplexTol = 1e-6;

void require_simplex(const Matrix& p, const char* what) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const double v = p(i, k);
      if (!std::isfinite(v) || v < -kSimplexTol || v > 1.0 + kSimplexTol)
        throw std::invalid_argument(std::string(what) + ": invalid posterior entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > kSimplexTol)
      throw std::invalid_argument(std::string(what) + ": posterior row does not sum to 1");
  }
}

}  // namespace

Matrix row_softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

double shannon_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) h -= p[k] * std::log(p[k]);
  return h;
}

double loss_ce(const Matrix& posteriors, const std::vector<int>& labels,
               bool* clamped) {
  if (posteriors.rows() == 0) throw std::invalid_argument("loss_ce: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != posteriors.rows())
    throw std::invalid_argument("loss_ce: label count mismatch");
  require_simplex(posteriors, "loss_ce");
  if (clamped) *clamped = false;

  double total = 0.0;
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= posteriors.cols())
      throw std::invalid_argument("loss_ce: label out of range");
    double p = posteriors(i, y);
    if (p < kPosteriorFloor) {
      p = kPosteriorFloor;
      if (clamped) *clamped = true;
      log_warn("loss_ce: posterior at true index clamped to 1e-12");
    }
    total -= std::log(p);
  }
  return total / static_cast<double>(posteriors.rows());
}

double loss_disc(const Matrix& open_posteriors, const Matrix& closed_posteriors,
                 bool* empty_side) {
  if (empty_side) *empty_side = false;
  double term1 = 0.0;
  if (open_posteriors.rows() > 0) {
    require_simplex(open_posteriors, "loss_disc(open)");
    for (Eigen::Index i = 0; i < open_posteriors.rows(); ++i)
      term1 += shannon_entropy(open_posteriors.row(i));
    term1 /= static_cast<double>(open_posteriors.rows());
  } else {
    if (empty_side) *empty_side = true;
    log_warn("loss_disc: no open samples, entropy term is 0");
  }

  double term2 = 0.0;
  if (closed_posteriors.rows() > 0) {
    require_simplex(closed_posteriors, "loss_disc(closed)");
    const Eigen::Index open_col = closed_posteriors.cols() - 1;
    for (Eigen::Index i = 0; i < closed_posteriors.rows(); ++i) {
      const double p_top = closed_posteriors.row(i).head(open_col).maxCoeff();
      term2 += std::abs(closed_posteriors(i, open_col) - p_top);
    }
    term2 /= static_cast<double>(closed_posteriors.rows());
  } else {
    if (empty_side) *empty_side = true;
    log_warn("loss_disc: no closed samples, margin term is 0");
  }
  return term1 - term2;
}

double loss_total(double ce, double disc, double sm, const LossWeights& w) {
  return w.ce * ce + w.disc * disc + w.sm * sm;
}

double ce_softmax_backward(const Matrix& logits, const std::vector<int>& labels,
                           double weight, Matrix& d_logits) {
  if (logits.rows() == 0) throw std::invalid_argument("ce_softmax: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
    throw std::invalid_argument("ce_softmax: label count mismatch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= logits.cols())
      throw std::invalid_argument("ce_softmax: label out of range");
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd shifted = logits.row(i).array() - m;
    const double lse = std::log(shifted.array().exp().sum());
    total += lse - shifted[y];
    // d/dz of -log softmax(z)[y] is p - onehot(y)
    Eigen::RowVectorXd p = (shifted.array() - lse).exp();
    p[y] -= 1.0;
    d_logits.row(i) += weight * inv_n * p;
  }
  return total * inv_n;
}

double entropy_mean_backward(const Matrix& logits, double weight,
                             Matrix& d_logits) {
  if (logits.rows() == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    Eigen::RowVectorXd p = e / e.sum();
    const double h = shannon_entropy(p);
    total += h;
    // dH/dz_j = -p_j (log p_j + H)
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double logp = p[j] > 0.0 ? std::log(p[j]) : -745.0;
      d_logits(i, j) += weight * inv_n * (-p[j] * (logp + h));
    }
  }
  return total * inv_n;
}

double closed_margin_mean_backward(const Matrix& logits, double weight,
                                   Matrix& d_logits) {
  if (logits.rows() == 0) return 0.0;
  const Eigen::Index open_col = logits.cols() - 1;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    Eigen::RowVectorXd p = e / e.sum();
    Eigen::Index top = 0;
    p.head(open_col).maxCoeff(&top);
    const double diff = p[open_col] - p[top];
    total += std::abs(diff);
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    if (sign != 0.0) {
      // d(p_a - p_b)/dz_j = p_a(1[j==a] - p_j) - p_b(1[j==b] - p_j)
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        double g = p[open_col] * ((j == open_col ? 1.0 : 0.0) - p[j]) -
                   p[top] * ((j == top ? 1.0 : 0.0) - p[j]);
        d_logits(i, j) += weight * inv_n * sign * g;
      }
    }
  }
  return total * inv_n;
}

}  // namespace opendg::losses
