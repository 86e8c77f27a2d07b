// SPDX-License-Identifier: Apache-2.0
#pragma once

// Linear-probe leakage: probe accuracy on the private label minus chance,
// with and without residualising out the teacher's public logits.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace sublab {

struct ProbeModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double l2 = 0.0;
  std::size_t iterations = 0;
  double grad_norm = 0.0;

  Eigen::VectorXd decision(const Eigen::MatrixXd& X) const;
  std::vector<int> predict(const Eigen::MatrixXd& X) const;
  double accuracy(const Eigen::MatrixXd& X, std::span<const int> labels) const;
};

struct FitOptions {
  double l2 = 1e-3;
  double tolerance = 1e-6;
  std::size_t max_iterations = 2000;
};

/// Minimises mean logistic loss + l2 ||w||^2 / 2 (bias unpenalised) by
/// full-batch gradient descent from zero with step 1 / L, L the smoothness
/// constant of the objective. Features are centered internally; the returned
/// model acts on raw features. Throws DegenerateInputError for single-class
/// labels.
ProbeModel fit_logistic(const Eigen::MatrixXd& X, std::span<const int> labels, const FitOptions& opts);
inline ProbeModel fit_logistic(const Eigen::MatrixXd& X, std::span<const int> labels, double l2 = 1e-3) {
  return fit_logistic(X, labels, FitOptions{l2});
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

/// Seeded 50/50 split of 0..n-1 into probe-train and probe-test indices.
Fold probe_fold(std::size_t n, std::uint64_t seed);

struct TauEstimate {
  double probe_acc = 0.0;
  double tau = 0.0;
  /// 1 where the probe is right on the corresponding probe-test row.
  std::vector<int> test_correct;
};

TauEstimate leakage_tau(const Eigen::MatrixXd& features, std::span<const int> labels, const Fold& fold,
                        double l2 = 1e-3);

/// Removes the least-squares projection of every feature column onto
/// [covariates, 1]. A ridge on the normal equations absorbs rank deficiency.
Eigen::MatrixXd residualize(const Eigen::MatrixXd& features, const Eigen::MatrixXd& covariates,
                            double ridge = 1e-8);
/// Same, with the regression fitted on `fit_rows` only and applied to every
/// row. Fitting on the evaluation rows as well would force their residuals to
/// be exactly uncorrelated with the covariates, biasing held-out accuracy
/// below chance.
Eigen::MatrixXd residualize(const Eigen::MatrixXd& features, const Eigen::MatrixXd& covariates,
                            std::span<const std::size_t> fit_rows, double ridge = 1e-8);

/// Covariates derived from teacher public logits: the margin l1 - l0, its
/// softmax probability, and the argmax indicator.
Eigen::MatrixXd public_logit_covariates(const Eigen::MatrixXd& teacher_logits);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return lo <= x && x <= hi; }
};

/// Linear-interpolated percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Percentile interval of `metric` over `n_boot` seeded resamples with
/// replacement of 0..n-1.
Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric, std::size_t n,
                      std::size_t n_boot, std::uint64_t seed, double level = 0.95);

/// Bootstrap interval of tau from per-row correctness on the probe-test fold.
/// The probe is fixed by the probe-train fold, so refitting per resample
/// would reproduce it exactly.
Interval tau_bootstrap_ci(std::span<const int> test_correct, std::size_t n_boot, std::uint64_t seed);

struct LeakageOptions {
  double l2 = 1e-3;
  std::size_t n_boot = 200;
  std::uint64_t fold_seed = 0;
  std::uint64_t bootstrap_seed = 0;
};

struct LeakageReport {
  double probe_acc = 0.0;
  double tau = 0.0;
  Interval tau_ci;
  std::optional<double> probe_acc_resid;
  std::optional<double> tau_resid;
  std::optional<Interval> tau_resid_ci;
  LeakageOptions options;
};

/// tau (and tau_resid when covariates are given) on one seeded fold with
/// bootstrap intervals. The residualiser is fitted on the probe-train fold.
LeakageReport leakage_report(const Eigen::MatrixXd& features, std::span<const int> labels,
                             const std::optional<Eigen::MatrixXd>& covariates, const LeakageOptions& opts);

}  // namespace sublab
