// SPDX-License-Identifier: Apache-2.0
#include "sublab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sublab/errors.hpp"
#include "sublab/rng.hpp"

namespace sublab {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<int> take(std::span<const int> v, std::span<const std::size_t> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

}  // namespace

Eigen::VectorXd ProbeModel::decision(const Eigen::MatrixXd& X) const {
  return (X * weights).array() + bias;
}

std::vector<int> ProbeModel::predict(const Eigen::MatrixXd& X) const {
  const Eigen::VectorXd z = decision(X);
  std::vector<int> out(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) out[static_cast<std::size_t>(i)] = z(i) > 0.0 ? 1 : 0;
  return out;
}

double ProbeModel::accuracy(const Eigen::MatrixXd& X, std::span<const int> labels) const {
  const auto pred = predict(X);
  if (pred.size() != labels.size()) throw ShapeError("probe accuracy: label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

ProbeModel fit_logistic(const Eigen::MatrixXd& X, std::span<const int> labels, const FitOptions& opts) {
  const Eigen::Index n = X.rows();
  if (n < 2) throw DegenerateInputError("fit_logistic needs at least two rows");
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("fit_logistic: label count mismatch");
  if (opts.l2 < 0.0) throw InputError("l2 must be >= 0");
  Eigen::VectorXd y(n);
  std::size_t ones = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l != 0 && l != 1) throw InputError("fit_logistic labels must be 0/1");
    y(i) = l;
    ones += static_cast<std::size_t>(l);
  }
  if (ones == 0 || ones == static_cast<std::size_t>(n)) throw DegenerateInputError("fit_logistic: single-class labels");

  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd xc = X.rowwise() - mu;
  const double nd = static_cast<double>(n);
  // Centered columns are orthogonal to the intercept, so the Hessian bound
  // splits into the feature block and the intercept block.
  double lam = 0.0;
  if (X.cols() > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xc.transpose() * xc, Eigen::EigenvaluesOnly);
    lam = es.eigenvalues().maxCoeff();
  }
  const double smooth = std::max(lam, nd) / (4.0 * nd) + opts.l2;
  const double step = 1.0 / smooth;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(X.cols());
  double b = 0.0;
  ProbeModel model;
  model.l2 = opts.l2;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    Eigen::VectorXd r = (xc * w).array() + b;
    for (Eigen::Index i = 0; i < n; ++i) r(i) = sigmoid(r(i)) - y(i);
    const Eigen::VectorXd gw = xc.transpose() * r / nd + opts.l2 * w;
    const double gb = r.mean();
    model.grad_norm = std::sqrt(gw.squaredNorm() + gb * gb);
    model.iterations = it;
    if (model.grad_norm < opts.tolerance) break;
    w -= step * gw;
    b -= step * gb;
    model.iterations = it + 1;
  }
  model.weights = w;
  model.bias = b - mu.dot(w);
  return model;
}

Fold probe_fold(std::size_t n, std::uint64_t seed) {
  if (n < 4) throw DegenerateInputError("probe fold needs at least four rows");
  Rng rng(seed);
  auto order = permutation(n, rng);
  Fold f;
  f.seed = seed;
  const std::size_t half = n / 2;
  f.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
  f.test.assign(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());
  return f;
}

TauEstimate leakage_tau(const Eigen::MatrixXd& features, std::span<const int> labels, const Fold& fold, double l2) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) throw ShapeError("leakage_tau: label count mismatch");
  const Eigen::MatrixXd xtr = take_rows(features, fold.train);
  const Eigen::MatrixXd xte = take_rows(features, fold.test);
  const auto ytr = take(labels, fold.train);
  const auto yte = take(labels, fold.test);
  const ProbeModel probe = fit_logistic(xtr, ytr, l2);
  const auto pred = probe.predict(xte);
  TauEstimate est;
  est.test_correct.resize(pred.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    est.test_correct[i] = pred[i] == yte[i] ? 1 : 0;
    hit += static_cast<std::size_t>(est.test_correct[i]);
  }
  est.probe_acc = static_cast<double>(hit) / static_cast<double>(pred.size());
  est.tau = est.probe_acc - 0.5;
  return est;
}

Eigen::MatrixXd residualize(const Eigen::MatrixXd& features, const Eigen::MatrixXd& covariates,
                            std::span<const std::size_t> fit_rows, double ridge) {
  if (covariates.cols() < 1) throw InputError("residualize needs at least one covariate");
  if (covariates.rows() != features.rows()) throw ShapeError("residualize: row counts differ");
  if (fit_rows.empty()) throw InputError("residualize needs at least one fitting row");
  Eigen::MatrixXd c(covariates.rows(), covariates.cols() + 1);
  c << covariates, Eigen::VectorXd::Ones(covariates.rows());
  const Eigen::MatrixXd cf = take_rows(c, fit_rows);
  Eigen::MatrixXd gram = cf.transpose() * cf;
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd beta = gram.ldlt().solve(cf.transpose() * take_rows(features, fit_rows));
  return features - c * beta;
}

Eigen::MatrixXd residualize(const Eigen::MatrixXd& features, const Eigen::MatrixXd& covariates, double ridge) {
  std::vector<std::size_t> all(static_cast<std::size_t>(features.rows()));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return residualize(features, covariates, all, ridge);
}

Eigen::MatrixXd public_logit_covariates(const Eigen::MatrixXd& teacher_logits) {
  if (teacher_logits.cols() != 2) throw ShapeError("public logits must have two columns");
  // Only the margin reaches the softmax; l0 + l1 is unconstrained by the
  // public loss and is free to carry the trait.
  Eigen::MatrixXd out(teacher_logits.rows(), 3);
  for (Eigen::Index i = 0; i < teacher_logits.rows(); ++i) {
    const double margin = teacher_logits(i, 1) - teacher_logits(i, 0);
    out(i, 0) = margin;
    out(i, 1) = sigmoid(margin);
    out(i, 2) = margin > 0.0 ? 1.0 : 0.0;
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric, std::size_t n,
                      std::size_t n_boot, std::uint64_t seed, double level) {
  if (n == 0) throw InputError("bootstrap over an empty evaluation set");
  if (n_boot == 0) throw InputError("bootstrap needs at least one resample");
  Rng rng(seed);
  std::vector<double> stats;
  stats.reserve(n_boot);
  std::vector<std::size_t> idx(n);
  for (std::size_t b = 0; b < n_boot; ++b) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_index(n));
    stats.push_back(metric(idx));
  }
  const double alpha = (1.0 - level) / 2.0;
  return {percentile(stats, alpha), percentile(stats, 1.0 - alpha)};
}

Interval tau_bootstrap_ci(std::span<const int> test_correct, std::size_t n_boot, std::uint64_t seed) {
  return bootstrap_ci(
      [&](std::span<const std::size_t> idx) {
        std::size_t hit = 0;
        for (std::size_t i : idx) hit += static_cast<std::size_t>(test_correct[i]);
        return static_cast<double>(hit) / static_cast<double>(idx.size()) - 0.5;
      },
      test_correct.size(), n_boot, seed);
}

LeakageReport leakage_report(const Eigen::MatrixXd& features, std::span<const int> labels,
                             const std::optional<Eigen::MatrixXd>& covariates, const LeakageOptions& opts) {
  const Fold fold = probe_fold(static_cast<std::size_t>(features.rows()), opts.fold_seed);
  LeakageReport rep;
  rep.options = opts;
  const TauEstimate plain = leakage_tau(features, labels, fold, opts.l2);
  rep.probe_acc = plain.probe_acc;
  rep.tau = plain.tau;
  rep.tau_ci = tau_bootstrap_ci(plain.test_correct, opts.n_boot, opts.bootstrap_seed);
  if (covariates) {
    const TauEstimate resid = leakage_tau(residualize(features, *covariates, fold.train), labels, fold, opts.l2);
    rep.probe_acc_resid = resid.probe_acc;
    rep.tau_resid = resid.tau;
    rep.tau_resid_ci = tau_bootstrap_ci(resid.test_correct, opts.n_boot, opts.bootstrap_seed);
  }
  return rep;
}

}  // namespace sublab
