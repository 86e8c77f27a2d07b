// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tiny pre-norm transformer encoder with a pooled CLS vector and linear
// (bias-free) task heads.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sublab/autodiff.hpp"
#include "sublab/corpus.hpp"
#include "sublab/tensor.hpp"

namespace sublab {

struct ModelConfig {
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = vocab::kSize;
  std::size_t max_len = kSequenceLength;
  std::uint64_t seed = 0;
  ad::Activation activation = ad::Activation::Gelu;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ModelRole { Teacher, Student };
std::string_view to_string(ModelRole r);

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_in, ffn_out;
};

struct ModelParams {
  ModelConfig config;
  ModelRole role = ModelRole::Teacher;
  Tensor tok_emb;  // vocab x d
  Tensor pos_emb;  // max_len x d
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor w_pub;                  // d x 2
  std::optional<Tensor> w_priv;  // d x 2, teacher only

  bool has_private_head() const { return w_priv.has_value(); }

  /// Calls f(name, tensor) for every parameter in checkpoint order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("tok_emb", self.tok_emb);
    f("pos_emb", self.pos_emb);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1_gain", l.ln1_gain);
      f(p + "ln1_bias", l.ln1_bias);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "ln2_gain", l.ln2_gain);
      f(p + "ln2_bias", l.ln2_bias);
      f(p + "ffn_in", l.ffn_in);
      f(p + "ffn_out", l.ffn_out);
    }
    f("final_gain", self.final_gain);
    f("final_bias", self.final_bias);
    f("w_pub", self.w_pub);
    if (self.w_priv) f("w_priv", *self.w_priv);
  }

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
};

/// Scaled-normal init (std config.init_std) from the module PRNG seeded
/// with config.seed; norms start at gain 1, bias 0.
ModelParams init_params(const ModelConfig& config, ModelRole role = ModelRole::Teacher);

/// Deep copy of backbone and public head; the private head is dropped.
ModelParams clone_student_from_teacher(const ModelParams& teacher);

/// Parameters bound to a tape, in the same order as ModelParams::visit.
struct ModelVars {
  struct Layer {
    ad::Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, ffn_in, ffn_out;
  };
  ad::Var tok_emb, pos_emb;
  std::vector<Layer> layers;
  ad::Var final_gain, final_bias;
  ad::Var w_pub;
  std::optional<ad::Var> w_priv;
  std::vector<ad::Var> all;
};

ModelVars bind(ad::Tape& tape, const ModelParams& params, bool trainable);

/// Gradients for every bound parameter, ordered like ModelParams::visit.
std::vector<Tensor> collect_grads(const ad::Tape& tape, const ModelVars& vars);

struct ForwardVars {
  ad::Var cls;
  ad::Var logits_pub;
  std::optional<ad::Var> logits_priv;
};

/// Encoder forward on a tape. The last block evaluates only the CLS rows;
/// other positions of the final layer never reach an output.
ForwardVars forward(const ModelVars& vars, const ModelConfig& config, std::span<const TokenIds> batch);

struct ForwardOut {
  Tensor cls;         // n x d
  Tensor logits_pub;  // n x 2
  std::optional<Tensor> logits_priv;
};

ForwardOut forward(const ModelParams& params, std::span<const TokenIds> batch);

/// Forward over a dataset in chunks of `batch_size` rows.
ForwardOut forward_dataset(const ModelParams& params, std::span<const Example> examples,
                           std::size_t batch_size = 128);

std::vector<TokenIds> token_batch(std::span<const Example> examples);

/// Checkpoint: 8-byte magic "SUBLABCK", little-endian u64 header length,
/// JSON header {config, seed, role, params:[{name, shape}]}, then each
/// parameter as raw little-endian float64 in header order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace sublab
