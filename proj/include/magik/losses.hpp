#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "magik/rng.hpp"

namespace magik::losses {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kSimplexTol = 1e-6;
inline constexpr double kProbFloor = 1e-8;

/// Weights of the training objective, defaults per the tuned configuration:
/// reconstruction 2, label 5, KL 0.01, HSIC 0.10.
struct ElboWeights {
  double recon = 2.0;
  double label = 5.0;
  double kl = 0.01;
  double hsic = 0.10;
};

/// Per-term view of one objective evaluation. `total` is the quantity the
/// trainer minimizes, excluding the HSIC penalty unless it was filled in.
struct ElboBreakdown {
  double reconstruction = 0.0;
  double supervision = 0.0;
  double kl_z = 0.0;
  double kl_c = 0.0;
  double hsic = 0.0;
  double total = 0.0;
};

template <class S>
void check_finite(std::span<const S> xs, const char* what) {
  for (S x : xs)
    if (!std::isfinite(static_cast<double>(x))) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

// ---------------------------------------------------------------------------
// Gaussian KL
// ---------------------------------------------------------------------------

/// KL(N(mu, diag(exp(log_var))) || N(0, I)) = 1/2 sum(sigma^2 + mu^2 - 1 - log sigma^2).
template <class S>
S gaussian_kl(std::span<const S> mu, std::span<const S> log_var) {
  if (mu.size() != log_var.size()) throw std::invalid_argument("gaussian_kl: size mismatch");
  check_finite(mu, "gaussian_kl");
  check_finite(log_var, "gaussian_kl");
  S acc = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    S var = std::exp(log_var[i]);
    acc += var + mu[i] * mu[i] - S(1) - log_var[i];
  }
  return S(0.5) * acc;
}

/// Accumulates d(kl)/d(mu) = mu and d(kl)/d(log_var) = (sigma^2 - 1)/2, scaled by `upstream`.
template <class S>
void gaussian_kl_grad(std::span<const S> mu, std::span<const S> log_var, S upstream,
                      std::span<S> d_mu, std::span<S> d_log_var) {
  for (std::size_t i = 0; i < mu.size(); ++i) {
    d_mu[i] += upstream * mu[i];
    d_log_var[i] += upstream * S(0.5) * (std::exp(log_var[i]) - S(1));
  }
}

// ---------------------------------------------------------------------------
// Categorical KL
// ---------------------------------------------------------------------------

template <class S>
void check_simplex(std::span<const S> p, const char* what) {
  S sum = 0;
  for (S v : p) {
    if (v < S(-kSimplexTol)) throw std::invalid_argument(std::string(what) + ": negative probability");
    sum += v;
  }
  if (std::abs(static_cast<double>(sum) - 1.0) > kSimplexTol)
    throw std::invalid_argument(std::string(what) + ": probabilities do not sum to 1");
}

/// KL(p || prior) = sum p_i log(p_i / prior_i), with 0 log 0 = 0.
template <class S>
S categorical_kl(std::span<const S> probs, std::span<const S> prior) {
  if (probs.size() != prior.size()) throw std::invalid_argument("categorical_kl: size mismatch");
  check_simplex(probs, "categorical_kl");
  check_simplex(prior, "categorical_kl");
  S acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > S(0)) acc += probs[i] * (std::log(probs[i]) - std::log(std::max(prior[i], S(kProbFloor))));
  }
  return acc;
}

/// Unconstrained partials d/dp_i = log(p_i/prior_i) + 1; the caller chains
/// them through its softmax, which restores the simplex constraint.
template <class S>
void categorical_kl_grad(std::span<const S> probs, std::span<const S> prior, S upstream,
                         std::span<S> d_probs) {
  for (std::size_t i = 0; i < probs.size(); ++i) {
    S p = std::max(probs[i], S(kProbFloor));
    d_probs[i] += upstream * (std::log(p) - std::log(std::max(prior[i], S(kProbFloor))) + S(1));
  }
}

template <class S>
std::vector<S> uniform_prior(std::size_t k) {
  return std::vector<S>(k, S(1) / static_cast<S>(k));
}

// ---------------------------------------------------------------------------
// Softmax / Gumbel-Softmax
// ---------------------------------------------------------------------------

template <class S>
void softmax(std::span<const S> logits, std::span<S> out) {
  S m = *std::max_element(logits.begin(), logits.end());
  S sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= sum;
}

/// Backward of y = softmax(x): dx_i = y_i * (dy_i - sum_j dy_j y_j).
template <class S>
void softmax_grad(std::span<const S> y, std::span<const S> d_y, std::span<S> d_logits) {
  S dot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += d_y[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) d_logits[i] += y[i] * (d_y[i] - dot);
}

/// Deterministic part of the Gumbel-Softmax draw: softmax((logits + noise)/tau).
template <class S>
void gumbel_softmax_from_noise(std::span<const S> logits, std::span<const S> noise, S tau,
                               std::span<S> out) {
  if (tau <= S(0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  std::vector<S> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = (logits[i] + noise[i]) / tau;
  softmax<S>(scaled, out);
}

/// Draws y = softmax((logits + Gumbel noise)/tau); differentiable w.r.t. logits.
template <class S>
std::vector<S> gumbel_softmax_sample(std::span<const S> logits, S tau, Rng& rng) {
  std::vector<S> noise(logits.size());
  for (auto& g : noise) g = static_cast<S>(rng.gumbel());
  std::vector<S> out(logits.size());
  gumbel_softmax_from_noise<S>(logits, noise, tau, out);
  return out;
}

/// Chain rule through the draw, given the realized sample y.
template <class S>
void gumbel_softmax_grad(std::span<const S> y, S tau, std::span<const S> d_y,
                         std::span<S> d_logits) {
  S dot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += d_y[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) d_logits[i] += y[i] * (d_y[i] - dot) / tau;
}

// ---------------------------------------------------------------------------
// Supervision term
// ---------------------------------------------------------------------------

/// log q(c = y | x), the negative cross-entropy of the classification head.
/// `label` is 1-based. Floored at log(1e-8) so an over-confident wrong head
/// cannot produce -inf.
template <class S>
S supervision_term(std::span<const S> class_probs, int label) {
  if (label < 1 || static_cast<std::size_t>(label) > class_probs.size())
    throw std::invalid_argument("supervision_term: label out of range");
  check_simplex(class_probs, "supervision_term");
  return std::log(std::max(class_probs[static_cast<std::size_t>(label - 1)], S(kProbFloor)));
}

/// d/dp[label-1] = 1/p (zero below the floor, where the term is constant).
template <class S>
void supervision_term_grad(std::span<const S> class_probs, int label, S upstream,
                           std::span<S> d_probs) {
  std::size_t idx = static_cast<std::size_t>(label - 1);
  if (class_probs[idx] >= S(kProbFloor)) d_probs[idx] += upstream / class_probs[idx];
}

// ---------------------------------------------------------------------------
// HSIC
// ---------------------------------------------------------------------------

enum class HsicKernel {
  rbf_median,  // Gaussian RBF, bandwidth = median pairwise distance (floored at 1e-6)
  linear,      // K = X X^T, used by the brute-force oracle tests
};

template <class S>
S median_pairwise_distance(const MatX<S>& x) {
  const int n = static_cast<int>(x.rows());
  std::vector<S> d;
  d.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d.push_back((x.row(i) - x.row(j)).norm());
  std::sort(d.begin(), d.end());
  S med = d.empty() ? S(0) : d[d.size() / 2];
  return std::max(med, S(1e-6));
}

template <class S>
MatX<S> kernel_matrix_linear(const MatX<S>& x) {
  return x * x.transpose();
}

template <class S>
MatX<S> kernel_matrix_rbf(const MatX<S>& x, S sigma) {
  const int n = static_cast<int>(x.rows());
  MatX<S> k(n, n);
  S inv = S(1) / (S(2) * sigma * sigma);
  for (int i = 0; i < n; ++i) {
    k(i, i) = S(1);
    for (int j = i + 1; j < n; ++j) {
      S d2 = (x.row(i) - x.row(j)).squaredNorm();
      k(i, j) = k(j, i) = std::exp(-d2 * inv);
    }
  }
  return k;
}

template <class S>
MatX<S> center_kernel(const MatX<S>& k) {
  const int n = static_cast<int>(k.rows());
  MatX<S> h = MatX<S>::Identity(n, n) - MatX<S>::Constant(n, n, S(1) / static_cast<S>(n));
  return h * k * h;
}

template <class S>
void hsic_check_batches(const MatX<S>& z, const MatX<S>& c) {
  if (z.rows() < 2) throw std::invalid_argument("hsic: need at least 2 samples");
  if (c.rows() != z.rows()) throw std::invalid_argument("hsic: batch size mismatch");
}

/// Tr(Kz~ Kc~) / (n-1)^2 for two precomputed kernel matrices.
template <class S>
S hsic_from_kernels(const MatX<S>& kz, const MatX<S>& kc) {
  const int n = static_cast<int>(kz.rows());
  MatX<S> az = center_kernel(kz);
  MatX<S> ac = center_kernel(kc);
  S tr = (az.array() * ac.array()).sum();  // Tr(A B) for symmetric A, B
  S denom = static_cast<S>(n - 1) * static_cast<S>(n - 1);
  return tr / denom;
}

/// Differentiable core: HSIC with RBF kernels at fixed bandwidths. The
/// per-batch objective the trainer optimizes is exactly this function with
/// the bandwidths frozen at the batch medians.
template <class S>
S hsic_rbf(const MatX<S>& z, const MatX<S>& c, S sigma_z, S sigma_c) {
  hsic_check_batches(z, c);
  return hsic_from_kernels(kernel_matrix_rbf(z, sigma_z), kernel_matrix_rbf(c, sigma_c));
}

template <class S>
S hsic_linear(const MatX<S>& z, const MatX<S>& c) {
  hsic_check_batches(z, c);
  return hsic_from_kernels(kernel_matrix_linear(z), kernel_matrix_linear(c));
}

/// HSIC(z, c) = Tr(Kz~ Kc~) / (n-1)^2 with Kz~, Kc~ the doubly centered
/// kernel matrices. Non-negative (up to roundoff) for PSD kernels; zero when
/// either batch is constant, since centering annihilates a constant kernel.
template <class S>
S hsic(const MatX<S>& z, const MatX<S>& c, HsicKernel kind = HsicKernel::rbf_median) {
  hsic_check_batches(z, c);
  if (kind == HsicKernel::linear) return hsic_linear(z, c);
  return hsic_rbf(z, c, median_pairwise_distance(z), median_pairwise_distance(c));
}

/// Gradient of hsic_rbf w.r.t. both batches, scaled by `upstream` and
/// accumulated into d_z / d_c. Bandwidths are constants of the batch.
template <class S>
void hsic_rbf_grad(const MatX<S>& z, const MatX<S>& c, S sigma_z, S sigma_c, S upstream,
                   MatX<S>& d_z, MatX<S>& d_c) {
  hsic_check_batches(z, c);
  const int n = static_cast<int>(z.rows());
  S denom = static_cast<S>(n - 1) * static_cast<S>(n - 1);
  MatX<S> kz = kernel_matrix_rbf(z, sigma_z);
  MatX<S> kc = kernel_matrix_rbf(c, sigma_c);
  // d HSIC / d Kz = H Kc~ H / (n-1)^2 (and symmetrically for Kc).
  MatX<S> gz = center_kernel(kc) / denom;
  MatX<S> gc = center_kernel(kz) / denom;
  S inv_z = S(1) / (sigma_z * sigma_z);
  S inv_c = S(1) / (sigma_c * sigma_c);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      S wz = S(2) * gz(i, j) * kz(i, j) * inv_z;
      d_z.row(i) += upstream * wz * (z.row(j) - z.row(i));
      S wc = S(2) * gc(i, j) * kc(i, j) * inv_c;
      d_c.row(i) += upstream * wc * (c.row(j) - c.row(i));
    }
  }
}

template <class S>
void hsic_linear_grad(const MatX<S>& z, const MatX<S>& c, S upstream, MatX<S>& d_z,
                      MatX<S>& d_c) {
  hsic_check_batches(z, c);
  const int n = static_cast<int>(z.rows());
  S denom = static_cast<S>(n - 1) * static_cast<S>(n - 1);
  MatX<S> gz = center_kernel(kernel_matrix_linear(c)) / denom;
  MatX<S> gc = center_kernel(kernel_matrix_linear(z)) / denom;
  d_z.noalias() += upstream * S(2) * gz * z;
  d_c.noalias() += upstream * S(2) * gc * c;
}

// ---------------------------------------------------------------------------
// ELBO assembly
// ---------------------------------------------------------------------------

inline void check_finite_terms(std::initializer_list<double> terms) {
  for (double t : terms)
    if (!std::isfinite(t)) throw std::invalid_argument("elbo: non-finite term");
}

/// Loss contribution of a labelled batch:
///   total = -(w_r * recon_ll + w_l * supervision) + w_kl * (kl_z + kl_c).
/// The HSIC penalty is batch-global and added by the trainer.
inline ElboBreakdown elbo_labelled(double recon_ll, double supervision, double kl_z, double kl_c,
                                   const ElboWeights& w) {
  check_finite_terms({recon_ll, supervision, kl_z, kl_c});
  ElboBreakdown b;
  b.reconstruction = recon_ll;
  b.supervision = supervision;
  b.kl_z = kl_z;
  b.kl_c = kl_c;
  b.total = -(w.recon * recon_ll + w.label * supervision) + w.kl * (kl_z + kl_c);
  return b;
}

/// Unlabelled variant: the supervision term is absent.
inline ElboBreakdown elbo_unlabelled(double recon_ll, double kl_z, double kl_c,
                                     const ElboWeights& w) {
  ElboWeights wu = w;
  wu.label = 0.0;
  ElboBreakdown b = elbo_labelled(recon_ll, 0.0, kl_z, kl_c, wu);
  b.supervision = 0.0;
  return b;
}

}  // namespace magik::losses
