// SPDX-License-Identifier: Apache-2.0
#pragma once

// AdamW, multi-task teacher training and student distillation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sublab/corpus.hpp"
#include "sublab/mitigation.hpp"
#include "sublab/model.hpp"

namespace sublab {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  double lr = 3e-4;
  std::size_t epochs = 15;
  std::size_t student_epochs = 15;
  std::size_t batch_size = 128;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double kd_temperature = 1.0;
  ad::KlOrder kl_order = ad::KlOrder::StudentTeacher;
  /// Adds hard-label public CE to the student loss (sensitivity studies).
  bool student_hard_label_ce = false;
  std::size_t eval_batch_size = 128;

  AdamWConfig adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }
  void validate() const;
};

struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update plus decoupled decay lr * wd * theta.
/// Moments are sized on the first call; later shape changes are contract
/// errors.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimState& state,
                const AdamWConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double pub_acc = 0.0;  // validation accuracy against y_pub
  std::optional<double> priv_acc;
  std::optional<double> public_match;
  std::optional<double> train_pub_acc;
  std::optional<double> train_priv_acc;
  std::optional<double> disc_acc;
};

using History = std::vector<EpochRecord>;

struct TeacherResult {
  ModelParams params;
  History history;
};

/// Minimises CE(pub) + CE(priv) over shuffled mini-batches. Throws RunError
/// if the loss stops being finite.
TeacherResult train_teacher(std::span<const Example> train, std::span<const Example> val,
                            const ModelConfig& model_config, const TrainConfig& train_config,
                            std::uint64_t shuffle_seed);

enum class BaseInit { SameBase, DiffBase };
enum class DataRegime { Same, DiffData };

struct Condition {
  BaseInit base = BaseInit::SameBase;
  DataRegime data = DataRegime::Same;
  std::uint64_t student_seed = 0;  // DiffBase only

  std::string name() const;
  bool operator==(const Condition&) const = default;
};

Condition parse_condition(std::string_view name);

struct StudentResult {
  ModelParams params;
  History history;
};

/// Initialises a student per condition (teacher clone or fresh seed) and
/// trains it on the KD loss against frozen teacher public logits plus any
/// active mitigation term. `train` is the condition's dataset; history
/// public match is measured on `val`.
StudentResult distill_student(const ModelParams& teacher, const Condition& condition,
                              const MitigationConfig& mitigation, std::span<const Example> train,
                              std::span<const Example> val, const TrainConfig& train_config,
                              std::uint64_t shuffle_seed);

/// Row argmax with ties to the lower index.
std::vector<int> argmax_rows(const Tensor& logits);

double public_match(const Tensor& student_logits, const Tensor& teacher_logits);
double public_match(const ModelParams& student, const ModelParams& teacher, std::span<const Example> data,
                    std::size_t batch_size = 128);

double accuracy(const Tensor& logits, std::span<const int> labels);

std::vector<int> public_labels(std::span<const Example> data);
std::vector<int> private_labels(std::span<const Example> data);

}  // namespace sublab
