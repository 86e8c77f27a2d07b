// SPDX-License-Identifier: Apache-2.0
#include "sublab/similarity.hpp"

#include <algorithm>
#include <cmath>

#include "sublab/errors.hpp"
#include "sublab/probes.hpp"

namespace sublab {

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& X) { return X.rowwise() - X.colwise().mean(); }

double linear_cka(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows()) throw ShapeError("linear_cka: row counts differ");
  if (X.rows() < 2) throw ContractError("linear_cka needs at least two rows");
  const Eigen::MatrixXd xc = center_columns(X);
  const Eigen::MatrixXd yc = center_columns(Y);
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  if (xx == 0.0 || yy == 0.0) throw UndefinedSimilarityError("linear_cka: matrix is zero after centering");
  const double xy = (xc.transpose() * yc).squaredNorm();
  return xy / (xx * yy);
}

TraitBasis basis_from_weights(const Eigen::VectorXd& w, std::size_t k, std::string source) {
  const auto d = static_cast<std::size_t>(w.size());
  if (k == 0 || k > d) throw InputError("trait basis k must be in 1..d");
  if (w.norm() == 0.0) throw DegenerateInputError("trait basis from a zero weight vector");
  const Eigen::MatrixXd wm = w;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(wm);
  Eigen::MatrixXd q = qr.householderQ();
  if (q.col(0).dot(w) < 0.0) q.col(0) = -q.col(0);
  return TraitBasis{q.leftCols(static_cast<Eigen::Index>(k)), std::move(source)};
}

TraitBasis trait_basis(const Eigen::MatrixXd& teacher_cls, std::span<const int> y_priv, std::size_t k, double l2) {
  const ProbeModel probe = fit_logistic(teacher_cls, y_priv, l2);
  return basis_from_weights(probe.weights, k, "teacher");
}

double subspace_cka(const Eigen::MatrixXd& teacher, const Eigen::MatrixXd& student, const TraitBasis& basis) {
  if (teacher.cols() != basis.U.rows() || student.cols() != basis.U.rows()) {
    throw ShapeError("subspace_cka: embedding width does not match basis");
  }
  return linear_cka(teacher * basis.U, student * basis.U);
}

namespace {

Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!(ev(i) > 0.0)) throw ContractError("cca: covariance is not positive definite; raise the ridge");
    ev(i) = 1.0 / std::sqrt(ev(i));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double cca_rho_max(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double ridge) {
  if (X.rows() != Y.rows()) throw ShapeError("cca_rho_max: row counts differ");
  const Eigen::Index n = X.rows();
  if (n <= std::max(X.cols(), Y.cols())) throw ContractError("cca_rho_max needs n > max(p, q)");
  if (ridge < 0.0) throw InputError("cca ridge must be >= 0");
  const Eigen::MatrixXd xc = center_columns(X);
  const Eigen::MatrixXd yc = center_columns(Y);
  const double inv = 1.0 / static_cast<double>(n - 1);
  Eigen::MatrixXd cxx = xc.transpose() * xc * inv;
  Eigen::MatrixXd cyy = yc.transpose() * yc * inv;
  cxx.diagonal().array() += ridge;
  cyy.diagonal().array() += ridge;
  const Eigen::MatrixXd cxy = xc.transpose() * yc * inv;
  const Eigen::MatrixXd t = inverse_sqrt(cxx) * cxy * inverse_sqrt(cyy);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(t);
  return std::clamp(svd.singularValues()(0), 0.0, 1.0);
}

SimilarityReport similarity_report(const Eigen::MatrixXd& teacher, const Eigen::MatrixXd& student,
                                   const TraitBasis& basis, double ridge) {
  return {linear_cka(teacher, student), subspace_cka(teacher, student, basis),
          cca_rho_max(teacher, student, ridge)};
}

}  // namespace sublab
