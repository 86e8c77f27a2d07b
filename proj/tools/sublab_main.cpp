// SPDX-License-Identifier: Apache-2.0
// sublab: command-line front end for corpus generation, training, probing,
// similarity and full experiment runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sublab/corpus.hpp"
#include "sublab/errors.hpp"
#include "sublab/harness.hpp"
#include "sublab/matrix_io.hpp"
#include "sublab/model.hpp"
#include "sublab/probes.hpp"
#include "sublab/rng.hpp"
#include "sublab/similarity.hpp"
#include "sublab/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sublab;

namespace {

constexpr int kUsageExit = 2;

void error_record(std::string_view kind, std::string_view message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

json interval(const Interval& i) { return json::array({i.lo, i.hi}); }

json leakage_json(const LeakageReport& r) {
  json j = {{"probe_acc", r.probe_acc},
            {"tau", r.tau},
            {"tau_ci", interval(r.tau_ci)},
            {"l2", r.options.l2},
            {"n_boot", r.options.n_boot},
            {"fold_seed", r.options.fold_seed},
            {"bootstrap_seed", r.options.bootstrap_seed}};
  if (r.tau_resid) {
    j["probe_acc_resid"] = *r.probe_acc_resid;
    j["tau_resid"] = *r.tau_resid;
    j["tau_resid_ci"] = interval(*r.tau_resid_ci);
  }
  return j;
}

void write_history(const fs::path& path, const History& h) {
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path.string());
  for (const auto& r : h) {
    json j = {{"epoch", r.epoch}, {"loss", r.loss}, {"pub_acc", r.pub_acc}};
    if (r.priv_acc) j["priv_acc"] = *r.priv_acc;
    if (r.public_match) j["public_match"] = *r.public_match;
    out << j.dump() << '\n';
  }
}

struct Common {
  std::string config = "default";
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    RunConfig c = load_run_config(config);
    if (seed) c.master_seed = *seed;
    c.validate();
    return c;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "profile name (default, fast) or JSON config path");
  sub->add_option("--seed", c.seed, "override the master seed");
}

// Resolves the trait basis for `similarity`: "teacher" fits it from the first
// embedding set and a label file, anything else is read as a d x k CSV.
TraitBasis resolve_basis(const std::string& spec, const Eigen::MatrixXd& teacher, const fs::path& teacher_path,
                         const std::string& labels_path, std::size_t k, double l2) {
  if (spec != "teacher") {
    TraitBasis b;
    b.U = read_matrix_csv(spec);
    b.source = spec;
    return b;
  }
  fs::path labels = labels_path;
  if (labels.empty()) labels = teacher_path.parent_path() / "labels_val.csv";
  if (!fs::exists(labels)) throw InputError("--basis teacher needs --labels (no " + labels.string() + ")");
  const LabelColumns cols = load_labels(labels);
  return trait_basis(teacher, cols.y_priv, k, l2);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subliminal-transfer lab: teachers, distilled students, probes and similarity"};
  app.require_subcommand(1);

  Common gen_c, teach_c, dist_c, run_c;

  auto* gen = app.add_subcommand("gen-corpus", "generate a corpus CSV (with JSON sidecar)");
  add_common(gen, gen_c);
  std::string gen_out, gen_variant = "BASE";
  std::optional<std::size_t> gen_size;
  gen->add_option("--out", gen_out, "output CSV path")->required();
  gen->add_option("--variant", gen_variant, "BASE or DIFFDATA");
  gen->add_option("--size", gen_size, "override corpus size");

  auto* teach = app.add_subcommand("train-teacher", "train the teacher and dump its validation features");
  add_common(teach, teach_c);
  std::string teach_out;
  teach->add_option("--out", teach_out, "output directory")->required();

  auto* dist = app.add_subcommand("distill", "distill one student from a saved teacher");
  add_common(dist, dist_c);
  std::string dist_teacher, dist_cond, dist_out;
  dist->add_option("--teacher", dist_teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  dist->add_option("--condition", dist_cond, "e.g. DIFF_BASE or SAME_BASE+PROJECTION")->required();
  dist->add_option("--out", dist_out, "output directory")->required();

  auto* probe = app.add_subcommand("probe", "linear-probe leakage on an embedding dump");
  std::string probe_emb, probe_labels, probe_resid;
  double probe_l2 = 1e-3;
  std::size_t probe_boot = 200;
  std::uint64_t probe_seed = 0;
  probe->add_option("--embeddings", probe_emb, "embedding CSV")->required()->check(CLI::ExistingFile);
  probe->add_option("--labels", probe_labels, "label CSV")->required()->check(CLI::ExistingFile);
  probe->add_option("--residualize", probe_resid, "teacher public logits CSV (n x 2)")->check(CLI::ExistingFile);
  probe->add_option("--l2", probe_l2, "probe L2 strength");
  probe->add_option("--n-boot", probe_boot, "bootstrap resamples");
  probe->add_option("--seed", probe_seed, "seed for the probe fold and bootstrap");

  auto* sim = app.add_subcommand("similarity", "CKA, subspace CKA and CCA between two embedding dumps");
  std::vector<std::string> sim_emb;
  std::string sim_basis = "teacher", sim_labels;
  std::size_t sim_k = 1;
  double sim_ridge = 1e-6;
  sim->add_option("--embeddings", sim_emb, "teacher CSV then student CSV")->required()->expected(2)->check(CLI::ExistingFile);
  sim->add_option("--basis", sim_basis, "'teacher' or a d x k basis CSV");
  sim->add_option("--labels", sim_labels, "labels for --basis teacher (default: labels_val.csv beside the teacher dump)");
  sim->add_option("--k", sim_k, "trait subspace dimension");
  sim->add_option("--ridge", sim_ridge, "CCA covariance ridge");

  auto* run = app.add_subcommand("run-all", "teacher, all configured students, report and figure data");
  add_common(run, run_c);
  std::string run_out;
  run->add_option("--output-dir", run_out, "write artefacts here (overrides the config)");

  auto* fig = app.add_subcommand("figure", "figure CSV and SVG from one or more reports");
  std::vector<std::string> fig_reports;
  std::string fig_out;
  fig->add_option("--reports", fig_reports, "report JSON files")->required()->check(CLI::ExistingFile);
  fig->add_option("--out", fig_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_record("usage_error", e.what());
    std::cerr << app.help();
    return kUsageExit;
  }

  try {
    if (*gen) {
      RunConfig c = gen_c.load();
      if (gen_size) c.corpus.size = *gen_size;
      const Corpus corpus = experiment_corpus(c, parse_variant(gen_variant));
      save_corpus(corpus, gen_out);
      std::cout << json{{"path", gen_out}, {"size", corpus.examples.size()}, {"seed", corpus.seed},
                        {"variant", to_string(corpus.variant)}}
                       .dump(2)
                << '\n';
    } else if (*teach) {
      const RunConfig c = teach_c.load();
      const fs::path out = teach_out;
      fs::create_directories(out);
      const Splits base = experiment_splits(c, experiment_corpus(c, CorpusVariant::Base));
      const TeacherResult t = train_experiment_teacher(c, base);
      save_checkpoint(t.params, out / "checkpoint.bin");
      write_history(out / "history.jsonl", t.history);
      const ForwardOut v = forward_dataset(t.params, base.val, c.train.eval_batch_size);
      save_embeddings(out / "cls_val.csv", v.cls.to_eigen(), "teacher", "val");
      write_matrix_csv(out / "logits_val.csv", v.logits_pub.to_eigen());
      save_labels(out / "labels_val.csv", public_labels(base.val), private_labels(base.val));
      const auto& last = t.history.back();
      std::cout << json{{"checkpoint", (out / "checkpoint.bin").string()},
                        {"config_hash", config_hash(c)},
                        {"val_pub_acc", last.pub_acc},
                        {"val_priv_acc", last.priv_acc.value_or(0.0)}}
                       .dump(2)
                << '\n';
    } else if (*dist) {
      const RunConfig c = dist_c.load();
      const RunSpec spec = parse_run_spec(dist_cond);
      const ModelParams teacher = load_checkpoint(dist_teacher);
      const Splits base = experiment_splits(c, experiment_corpus(c, CorpusVariant::Base));
      std::optional<Splits> diff;
      if (spec.condition.data == DataRegime::DiffData) {
        diff = experiment_splits(c, experiment_corpus(c, CorpusVariant::DiffData));
      }
      std::optional<TraitBasis> basis;
      if (spec.mitigation == MitigationMode::Projection || spec.mitigation == MitigationMode::Rrr) {
        basis = mitigation_basis(c, teacher, base);
      }
      const StudentResult s = train_experiment_student(c, teacher, spec, base, diff ? &*diff : nullptr, basis);
      const fs::path out = dist_out;
      fs::create_directories(out);
      save_checkpoint(s.params, out / "checkpoint.bin");
      write_history(out / "history.jsonl", s.history);
      const ForwardOut v = forward_dataset(s.params, base.val, c.train.eval_batch_size);
      save_embeddings(out / "cls_val.csv", v.cls.to_eigen(), spec.name(), "val");
      write_matrix_csv(out / "logits_val.csv", v.logits_pub.to_eigen());
      std::cout << json{{"checkpoint", (out / "checkpoint.bin").string()},
                        {"condition", spec.name()},
                        {"public_match", public_match(s.params, teacher, base.val, c.train.eval_batch_size)}}
                       .dump(2)
                << '\n';
    } else if (*probe) {
      const Embeddings e = load_embeddings(probe_emb);
      const LabelColumns labels = load_labels(probe_labels);
      if (labels.y_priv.size() != static_cast<std::size_t>(e.values.rows())) {
        throw ShapeError("labels and embeddings have different row counts");
      }
      std::optional<Eigen::MatrixXd> cov;
      if (!probe_resid.empty()) cov = public_logit_covariates(read_matrix_csv(probe_resid));
      const LeakageOptions opts{probe_l2, probe_boot, derive_seed(probe_seed, "probe_folds"),
                                derive_seed(probe_seed, "bootstrap")};
      std::cout << leakage_json(leakage_report(e.values, labels.y_priv, cov, opts)).dump(2) << '\n';
    } else if (*sim) {
      const Embeddings a = load_embeddings(sim_emb[0]);
      const Embeddings b = load_embeddings(sim_emb[1]);
      const TraitBasis basis = resolve_basis(sim_basis, a.values, sim_emb[0], sim_labels, sim_k, 1e-3);
      const SimilarityReport r = similarity_report(a.values, b.values, basis, sim_ridge);
      std::cout << json{{"global_cka", r.global_cka}, {"subspace_cka", r.subspace_cka}, {"rho_max", r.rho_max},
                        {"basis", basis.source}, {"k", basis.k()}}
                       .dump(2)
                << '\n';
    } else if (*run) {
      RunConfig c = run_c.load();
      if (!run_out.empty()) c.output_dir = run_out;
      const RunReport r = run_experiment(c);
      std::cout << to_json(r).dump(2) << '\n';
      if (r.partial()) {
        error_record("run_error", "run is partial; see errors in the report");
        return 1;
      }
    } else if (*fig) {
      std::vector<RunReport> reports;
      for (const auto& p : fig_reports) {
        std::ifstream in(p);
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw FormatError(p + ": " + e.what());
        }
        reports.push_back(run_report_from_json(j));
      }
      const FigureData f = emit_figure_data(reports, fig_out);
      for (const auto& w : f.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << json{{"rows", f.rows.size()}, {"csv", (fs::path(fig_out) / "figure.csv").string()}}.dump(2) << '\n';
    }
  } catch (const Error& e) {
    error_record(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    error_record("internal_error", e.what());
    return 1;
  }
  return 0;
}
