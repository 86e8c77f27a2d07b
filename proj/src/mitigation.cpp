// SPDX-License-Identifier: Apache-2.0
#include "sublab/mitigation.hpp"

#include <string>

#include "sublab/errors.hpp"

namespace sublab {

std::string_view to_string(MitigationMode m) {
  switch (m) {
    case MitigationMode::None: return "NONE";
    case MitigationMode::Projection: return "PROJECTION";
    case MitigationMode::Adversarial: return "ADVERSARIAL";
    case MitigationMode::Rrr: return "RRR";
  }
  return "NONE";
}

MitigationMode parse_mitigation(std::string_view s) {
  if (s == "NONE") return MitigationMode::None;
  if (s == "PROJECTION") return MitigationMode::Projection;
  if (s == "ADVERSARIAL") return MitigationMode::Adversarial;
  if (s == "RRR") return MitigationMode::Rrr;
  throw InputError("unknown mitigation mode: " + std::string(s));
}

void MitigationConfig::validate() const {
  if (alpha < 0.0 || lambda_adv < 0.0 || lambda_rrr < 0.0) throw InputError("mitigation coefficients must be >= 0");
  if (needs_basis() && !basis) throw InputError(std::string(to_string(mode)) + " requires a trait basis");
}

Tensor basis_tensor(const TraitBasis& basis) {
  Tensor u({basis.dim(), basis.k()});
  u.as_matrix() = basis.U;
  return u;
}

namespace {

ad::Var mean_row_sq_norm(ad::Var x) {
  const double n = static_cast<double>(x.value().rows());
  return ad::scale(ad::sum(ad::mul(x, x)), 1.0 / n);
}

}  // namespace

ad::Var projection_penalty(ad::Var cls, const TraitBasis& basis, double alpha) {
  if (cls.value().cols() != basis.dim()) throw ShapeError("projection_penalty: CLS width does not match basis");
  ad::Var u = cls.tape->constant(basis_tensor(basis));
  return ad::scale(mean_row_sq_norm(ad::matmul(cls, u)), alpha);
}

Discriminator Discriminator::zeros(std::size_t d) { return {Tensor({d, 2}, 0.0), Tensor({2}, 0.0)}; }

DiscriminatorVars bind(ad::Tape& tape, const Discriminator& disc) {
  return {tape.variable(disc.weight), tape.variable(disc.bias)};
}

ad::Var adversarial_loss(ad::Var cls, std::span<const int> y_priv, const DiscriminatorVars& disc, double lambda_adv) {
  if (disc.weight.value().rows() != cls.value().cols()) throw ShapeError("discriminator width does not match CLS");
  bool has0 = false, has1 = false;
  for (int y : y_priv) {
    has0 = has0 || y == 0;
    has1 = has1 || y == 1;
  }
  if (!(has0 && has1)) throw DegenerateInputError("adversarial_loss: single-class private labels");
  ad::Var rev = ad::grad_reverse(cls, lambda_adv);
  ad::Var logits = ad::add_row(ad::matmul(rev, disc.weight), disc.bias);
  return ad::softmax_cross_entropy(logits, y_priv);
}

ad::Var rrr_penalty(ad::Var pub_logits, ad::Var w_pub, std::span<const int> targets, const TraitBasis& basis,
                    double lambda_rrr) {
  const Tensor& lv = pub_logits.value();
  if (lv.cols() != w_pub.value().cols() || w_pub.value().rows() != basis.dim()) {
    throw ShapeError("rrr_penalty: head, logits and basis shapes disagree");
  }
  if (targets.size() != lv.rows()) throw ShapeError("rrr_penalty: target count mismatch");
  ad::Tape& tape = *pub_logits.tape;
  ad::Var residual = ad::sub(ad::softmax_rows(pub_logits), tape.constant(ad::one_hot(targets, lv.cols())));
  ad::Var input_grad = ad::matmul(residual, ad::transpose(w_pub));  // rows are g_i^T
  ad::Var proj = ad::matmul(input_grad, tape.constant(basis_tensor(basis)));
  return ad::scale(mean_row_sq_norm(proj), lambda_rrr);
}

}  // namespace sublab
