// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end experiment runs: configuration, seeded orchestration of one
// teacher and its students, reports and figure data.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "sublab/corpus.hpp"
#include "sublab/mitigation.hpp"
#include "sublab/model.hpp"
#include "sublab/probes.hpp"
#include "sublab/training.hpp"

namespace sublab {

struct CorpusSettings {
  std::size_t size = 10000;
  bool balance_public = true;
};

struct ProbeSettings {
  double l2 = 1e-3;
  std::size_t n_boot = 200;
  std::size_t basis_k = 1;
  double cca_ridge = 1e-6;
};

/// One student run: a KD condition plus an optional mitigation mode.
/// Written as "SAME_BASE" or "SAME_BASE+PROJECTION".
struct RunSpec {
  Condition condition;
  MitigationMode mitigation = MitigationMode::None;

  std::string name() const;
  bool operator==(const RunSpec&) const = default;
};

RunSpec parse_run_spec(std::string_view s);

struct RunConfig {
  std::string profile = "default";
  std::uint64_t master_seed = 0;
  CorpusSettings corpus;
  ModelConfig model;
  TrainConfig train;
  std::vector<RunSpec> conditions;
  /// Coefficients shared by every mitigated run; the mode comes from the
  /// run spec and the basis from the teacher.
  MitigationConfig mitigation;
  ProbeSettings probe;
  std::string output_dir;

  void validate() const;
};

/// Named profiles: "default" (corpus 10000, d = 128) and "fast" (corpus
/// 2000, d = 64).
RunConfig profile_config(std::string_view name);

nlohmann::json to_json(const RunConfig& c);
/// Missing keys fall back to the profile named by "profile" (default
/// "default").
RunConfig run_config_from_json(const nlohmann::json& j);
/// A profile name or a path to a JSON config file.
RunConfig load_run_config(const std::string& name_or_path);

/// FNV-1a of the canonical JSON serialisation, as 16 hex digits.
std::string config_hash(const RunConfig& c);

/// Named PRNG streams derived from the master seed.
struct SeedStreams {
  std::uint64_t corpus = 0;
  std::uint64_t split = 0;
  std::uint64_t teacher_init = 0;
  std::uint64_t student_init = 0;
  std::uint64_t teacher_shuffle = 0;
  std::uint64_t student_shuffle = 0;
  std::uint64_t probe_fold = 0;
  std::uint64_t bootstrap = 0;
  std::uint64_t permutation = 0;

  static SeedStreams derive(std::uint64_t master);
};

nlohmann::json to_json(const SeedStreams& s);

struct StageError {
  std::string stage;
  std::string kind;
  std::string message;
};

struct ConditionMetrics {
  double global_cka = 0.0;
  double subspace_cka = 0.0;
  double rho_max = 0.0;
  double tau = 0.0;
  Interval tau_ci;
  double tau_resid = 0.0;
  Interval tau_resid_ci;
  double public_match = 0.0;
  double teacher_private_probe_acc = 0.0;
  /// y_priv replaced by y_pub.
  double control_tau = 0.0;
  double control_tau_resid = 0.0;
  /// y_priv randomly permuted.
  double null_tau = 0.0;
  Interval null_tau_ci;
};

struct ConditionReport {
  std::string name;
  std::string condition;
  std::string mitigation;
  std::uint64_t student_seed = 0;
  std::optional<ConditionMetrics> metrics;
  std::optional<StageError> error;
  std::size_t epochs = 0;
  double seconds = 0.0;
};

struct TeacherReport {
  double val_pub_acc = 0.0;
  double val_priv_acc = 0.0;
  double private_probe_acc = 0.0;
  double seconds = 0.0;
};

struct RunReport {
  std::string config_hash;
  std::string profile;
  std::uint64_t master_seed = 0;
  SeedStreams seeds;
  std::string eval_split = "val";
  std::size_t eval_rows = 0;
  std::size_t eval_batch_size = 128;
  std::optional<TeacherReport> teacher;
  std::vector<ConditionReport> conditions;
  std::vector<StageError> errors;
  double wall_seconds = 0.0;

  bool partial() const;
  const ConditionReport* find(std::string_view name) const;
};

// Pipeline stages, each a pure function of the config and its inputs.
// run_experiment chains them; the CLI exposes them one at a time.

Corpus experiment_corpus(const RunConfig& config, CorpusVariant variant);
Splits experiment_splits(const RunConfig& config, const Corpus& corpus);
TeacherResult train_experiment_teacher(const RunConfig& config, const Splits& base);
/// Trait basis for mitigation terms, fitted on the teacher's training-split
/// CLS so no evaluation rows reach student training.
TraitBasis mitigation_basis(const RunConfig& config, const ModelParams& teacher, const Splits& base);
/// `diff` is required for DIFFDATA conditions, `basis` for PROJECTION and
/// RRR.
StudentResult train_experiment_student(const RunConfig& config, const ModelParams& teacher, const RunSpec& spec,
                                       const Splits& base, const Splits* diff,
                                       const std::optional<TraitBasis>& basis);

/// `timing` false drops every wall-clock field, leaving the part of the
/// report that is a pure function of the config.
nlohmann::json to_json(const RunReport& r, bool timing = true);
RunReport run_report_from_json(const nlohmann::json& j);

/// Trains the teacher, then each configured student (as parallel jobs capped
/// by SUBLAB_THREADS), and evaluates every student on the validation split.
/// Stage failures are recorded in the report rather than thrown. Writes
/// artefacts under config.output_dir when it is non-empty.
RunReport run_experiment(const RunConfig& config);

struct FigureRow {
  std::string condition;
  double subspace_cka = 0.0;
  double tau_resid = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

struct FigureData {
  std::vector<FigureRow> rows;
  std::vector<std::string> warnings;
};

/// One row per evaluated condition per report; conditions without metrics
/// are skipped with a warning. With a non-empty directory, writes
/// figure.csv and figure.svg there.
FigureData emit_figure_data(std::span<const RunReport> reports, const std::filesystem::path& dir = {});

/// Job parallelism: SUBLAB_THREADS when set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
std::size_t job_threads();

}  // namespace sublab
