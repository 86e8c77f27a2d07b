// SPDX-License-Identifier: Apache-2.0
#pragma once

// Representation similarity: global linear CKA, CKA restricted to a
// teacher-estimated trait subspace, and the top canonical correlation.

#include <span>
#include <string>

#include <Eigen/Dense>

namespace sublab {

/// Orthonormal d x k basis of the teacher's trait-discriminative subspace.
struct TraitBasis {
  Eigen::MatrixXd U;
  std::string source = "teacher";

  std::size_t dim() const { return static_cast<std::size_t>(U.rows()); }
  std::size_t k() const { return static_cast<std::size_t>(U.cols()); }
};

struct SimilarityReport {
  double global_cka = 0.0;
  double subspace_cka = 0.0;
  double rho_max = 0.0;
};

/// Columns are zero-meaned first, then
///   ||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F).
/// Throws UndefinedSimilarityError if either centered matrix is zero.
double linear_cka(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y);

/// First k columns of the Householder Q of the weight vector, with the sign
/// chosen so the first column points along w.
TraitBasis basis_from_weights(const Eigen::VectorXd& w, std::size_t k = 1, std::string source = "teacher");

/// Fits a logistic probe of y_priv on the teacher CLS and orthonormalises its
/// weight vector.
TraitBasis trait_basis(const Eigen::MatrixXd& teacher_cls, std::span<const int> y_priv, std::size_t k = 1,
                       double l2 = 1e-3);

/// linear_cka(Z_t U, Z_s U). For k = 1 this is the squared Pearson
/// correlation of the two projected coordinates.
double subspace_cka(const Eigen::MatrixXd& teacher, const Eigen::MatrixXd& student, const TraitBasis& basis);

/// Largest canonical correlation via ridge-whitened covariances
/// (C + ridge * I)^{-1/2}, clipped to [0, 1]. Requires n > max(p, q).
double cca_rho_max(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double ridge = 1e-6);

SimilarityReport similarity_report(const Eigen::MatrixXd& teacher, const Eigen::MatrixXd& student,
                                   const TraitBasis& basis, double ridge = 1e-6);

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& X);

}  // namespace sublab
