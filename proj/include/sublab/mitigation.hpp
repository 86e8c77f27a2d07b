// SPDX-License-Identifier: Apache-2.0
#pragma once

// Leakage-suppression terms added to student distillation.

#include <optional>
#include <span>
#include <string_view>

#include "sublab/autodiff.hpp"
#include "sublab/similarity.hpp"

namespace sublab {

enum class MitigationMode { None, Projection, Adversarial, Rrr };

std::string_view to_string(MitigationMode m);
MitigationMode parse_mitigation(std::string_view s);

struct MitigationConfig {
  MitigationMode mode = MitigationMode::None;
  double alpha = 1e-2;
  double lambda_adv = 0.1;
  double lambda_rrr = 1e-2;
  std::optional<TraitBasis> basis;

  bool needs_basis() const { return mode == MitigationMode::Projection || mode == MitigationMode::Rrr; }
  void validate() const;
};

/// alpha * mean_i ||U^T cls_i||^2.
ad::Var projection_penalty(ad::Var cls, const TraitBasis& basis, double alpha);

/// Linear d -> 2 classifier of the private label from student CLS.
struct Discriminator {
  Tensor weight;  // d x 2
  Tensor bias;    // 2

  static Discriminator zeros(std::size_t d);
};

struct DiscriminatorVars {
  ad::Var weight;
  ad::Var bias;
};

DiscriminatorVars bind(ad::Tape& tape, const Discriminator& disc);

/// Cross-entropy of disc(grad_reverse(cls, lambda_adv)) against y_priv. The
/// discriminator gets the ordinary minimising gradient; the encoder gets it
/// scaled by -lambda_adv. Throws DegenerateInputError on single-class labels.
ad::Var adversarial_loss(ad::Var cls, std::span<const int> y_priv, const DiscriminatorVars& disc,
                         double lambda_adv);

/// lambda_rrr * mean_i ||U^T g_i||^2 with g_i = W_pub (softmax(logits_i) -
/// onehot(target_i)), the closed-form gradient of the public cross-entropy
/// with respect to CLS under a linear head.
ad::Var rrr_penalty(ad::Var pub_logits, ad::Var w_pub, std::span<const int> targets, const TraitBasis& basis,
                    double lambda_rrr);

Tensor basis_tensor(const TraitBasis& basis);

}  // namespace sublab
