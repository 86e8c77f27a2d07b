// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion. Criteria 3-7, 9 and
// 10 share one multi-seed experiment.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "sublab/corpus.hpp"
#include "sublab/harness.hpp"
#include "sublab/mitigation.hpp"
#include "sublab/similarity.hpp"
#include "sublab/training.hpp"

using namespace sublab;
using sublab::testing::gradcheck;
using sublab::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1: gradients ---------------------------------------------------------

ad::Var contract(ad::Tape& t, ad::Var x) {
  Rng rng(99);
  Tensor w(x.shape());
  for (auto& v : w.data()) v = rng.normal();
  return ad::sum(ad::mul(x, t.constant(w)));
}

ModelParams spread(ModelParams p, double factor) {
  const auto names = p.parameter_names();
  auto ptrs = p.parameters();
  Rng rng(5);
  for (std::size_t k = 0; k < ptrs.size(); ++k) {
    const bool norm = names[k].find("gain") != std::string::npos || names[k].find("bias") != std::string::npos;
    for (auto& x : ptrs[k]->data()) x = norm ? x + 0.3 * rng.normal() : x * factor;
  }
  return p;
}

Outcome gradient_integrity() {
  using namespace sublab::ad;
  Rng rng(1);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), m = random_tensor(4, 5, rng);
  const Tensor bias = testing::random_vector(4, rng);
  Tensor kinked = a;
  for (auto& x : kinked.data()) x += x >= 0 ? 0.1 : -0.1;

  double elementwise = 0.0;
  const auto ew = [&](const testing::LossFn& f, std::vector<Tensor> in, double scale = 1.0) {
    elementwise = std::max(elementwise, gradcheck(f, std::move(in), 1e-5, scale).rel_err);
  };
  ew([](Tape& t, auto v) { return contract(t, add(v[0], v[1])); }, {a, b});
  ew([](Tape& t, auto v) { return contract(t, sub(v[0], v[1])); }, {a, b});
  ew([](Tape& t, auto v) { return contract(t, mul(v[0], v[1])); }, {a, b});
  ew([](Tape& t, auto v) { return contract(t, scale(v[0], -2.5)); }, {a});
  ew([](Tape& t, auto v) { return contract(t, gelu(v[0])); }, {a});
  ew([](Tape& t, auto v) { return contract(t, relu(v[0])); }, {kinked});
  ew([](Tape& t, auto v) { return contract(t, grad_reverse(v[0], 0.7)); }, {a}, -0.7);

  double structured = 0.0;
  const auto st = [&](const testing::LossFn& f, std::vector<Tensor> in) {
    structured = std::max(structured, gradcheck(f, std::move(in)).rel_err);
  };
  st([](Tape& t, auto v) { return contract(t, matmul(v[0], v[1])); }, {a, m});
  st([](Tape& t, auto v) { return contract(t, transpose(v[0])); }, {a});
  st([](Tape& t, auto v) { return contract(t, add_row(v[0], v[1])); }, {a, bias});
  st([](Tape& t, auto v) { return contract(t, softmax_rows(v[0])); }, {a});
  st([](Tape& t, auto v) { return mean(v[0]); }, {a});
  st([](Tape& t, auto v) { return contract(t, layer_norm(v[0], v[1], v[2])); },
     {a, testing::random_vector(4, rng), testing::random_vector(4, rng)});
  const std::vector<std::size_t> idx = {2, 0, 2};
  st([&](Tape& t, auto v) { return contract(t, gather_rows(v[0], idx)); }, {a});
  const std::vector<int> labels = {0, 1, 1};
  const Tensor s2 = random_tensor(3, 2, rng, 2.0), t2 = random_tensor(3, 2, rng, 2.0);
  st([&](Tape&, auto v) { return softmax_cross_entropy(v[0], labels); }, {s2});
  for (double temp : {1.0, 2.0})
    for (KlOrder order : {KlOrder::StudentTeacher, KlOrder::TeacherStudent})
      st([&](Tape& t, auto v) { return kl_divergence(v[0], t.constant(t2), temp, order); }, {s2});
  const Tensor q = random_tensor(6, 4, rng), k = random_tensor(6, 4, rng), vv = random_tensor(6, 4, rng);
  st([](Tape& t, auto x) { return contract(t, attention(x[0], x[1], x[2], 2, 2)); }, {q, k, vv});
  st([](Tape& t, auto x) { return contract(t, attention(x[0], x[1], x[2], 2, 2)); }, {random_tensor(2, 4, rng), k, vv});

  ModelConfig tc;
  tc.hidden = 8;
  tc.ffn_mult = 2;
  tc.seed = 3;
  const ModelParams teacher = spread(init_params(tc), 10.0);
  const Corpus c = generate_corpus(8, 4, CorpusVariant::Base);
  const auto batch = token_batch(c.examples);
  const auto yp = public_labels(c.examples), yq = private_labels(c.examples);
  const double model_err = testing::model_gradcheck(
      teacher,
      [&](ad::Tape&, const ModelVars& v) {
        const ForwardVars f = forward(v, tc, batch);
        return add(softmax_cross_entropy(f.logits_pub, yp), softmax_cross_entropy(*f.logits_priv, yq));
      },
      1e-4);
  ModelConfig sc = tc;
  sc.seed = 4;
  const ModelParams student = spread(init_params(sc, ModelRole::Student), 10.0);
  const ForwardOut to = forward(teacher, batch);
  const auto targets = argmax_rows(to.logits_pub);
  Eigen::VectorXd w(8);
  for (auto& x : w) x = rng.normal();
  const TraitBasis basis = basis_from_weights(w, 2);
  const double student_err = testing::model_gradcheck(
      student,
      [&](ad::Tape& tape, const ModelVars& v) {
        const ForwardVars f = forward(v, sc, batch);
        ad::Var loss = kl_divergence(f.logits_pub, tape.constant(to.logits_pub), 1.0, KlOrder::TeacherStudent);
        loss = add(loss, projection_penalty(f.cls, basis, 0.3));
        return add(loss, rrr_penalty(f.logits_pub, v.w_pub, targets, basis, 0.5));
      },
      1e-4);
  const double worst = std::max({structured, model_err, student_err});
  return {elementwise < 1e-6 && worst < 1e-4,
          fmt("elementwise %.2e (<1e-6), ops/model %.2e (<1e-4)", elementwise, worst)};
}

// ---- 2: corpus ------------------------------------------------------------

Outcome corpus_soundness() {
  const auto all = enumerate_all_triples();
  double sp = 0, sq = 0, spp = 0, sqq = 0, spq = 0;
  for (const auto& e : all) {
    sp += e.y_pub;
    sq += e.y_priv;
    spp += e.y_pub * e.y_pub;
    sqq += e.y_priv * e.y_priv;
    spq += e.y_pub * e.y_priv;
  }
  const double n = static_cast<double>(all.size());
  const double cov = spq / n - sp / n * sq / n;
  const double corr = cov / std::sqrt((spp / n - sp * sp / n / n) * (sqq / n - sq * sq / n / n));
  const double mean_priv = sq / n;
  const fs::path dir = fs::temp_directory_path() / "sublab_acceptance_corpus";
  fs::create_directories(dir);
  save_corpus(generate_corpus(11, 3000, CorpusVariant::Base), dir / "a.csv");
  save_corpus(generate_corpus(11, 3000, CorpusVariant::Base), dir / "b.csv");
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const bool same = slurp(dir / "a.csv") == slurp(dir / "b.csv");
  return {all.size() == 1000 && std::abs(corr) < 0.1 && mean_priv >= 0.45 && mean_priv <= 0.55 && same,
          fmt("n=%zu corr=%.4f mean(y_priv)=%.3f bit-identical=%s", all.size(), corr, mean_priv,
              same ? "yes" : "no")};
}

// ---- 8: metric algebra ----------------------------------------------------

Outcome metric_algebra() {
  Rng rng(8);
  const auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
  };
  const Eigen::MatrixXd x = gauss(300, 12), y = gauss(300, 7);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss(12, 12));
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(12, 12);
  const double self = std::abs(linear_cka(x, x) - 1.0);
  const double inv = std::max({std::abs(linear_cka(3.7 * x, y) - linear_cka(x, y)),
                               std::abs(linear_cka(x * q, y) - linear_cka(x, y))});
  const double sym = std::abs(linear_cka(x, y) - linear_cka(y, x));
  const Eigen::MatrixXd zt = gauss(500, 16), zs = gauss(500, 16);
  const TraitBasis b = basis_from_weights(gauss(16, 1).col(0), 1);
  const Eigen::VectorXd pt = (zt * b.U).col(0).array() - (zt * b.U).mean();
  const Eigen::VectorXd ps = (zs * b.U).col(0).array() - (zs * b.U).mean();
  const double cos2 = std::pow(pt.dot(ps), 2) / (pt.squaredNorm() * ps.squaredNorm());
  const double sub = std::abs(subspace_cka(zt, zs, b) - cos2);
  const Eigen::MatrixXd u = gauss(400, 1), v = 0.5 * u + gauss(400, 1);
  const Eigen::VectorXd uc = u.col(0).array() - u.mean(), vc = v.col(0).array() - v.mean();
  const double pearson = std::abs(uc.dot(vc)) / std::sqrt(uc.squaredNorm() * vc.squaredNorm());
  const double rho = std::abs(cca_rho_max(u, v, 0.0) - pearson);
  return {self <= 1e-10 && inv <= 1e-8 && sym <= 1e-12 && sub <= 1e-10 && rho <= 1e-8,
          fmt("self %.1e, invariance %.1e, symmetry %.1e, k=1 cos2 %.1e, 1-D rho %.1e", self, inv, sym, sub, rho)};
}

// ---- 11: determinism ------------------------------------------------------

Outcome end_to_end_determinism(const std::string& cli, const fs::path& work) {
  fs::create_directories(work);
  RunConfig c = profile_config("fast");
  c.corpus.size = 400;
  c.model.hidden = 16;
  c.model.layers = 1;
  c.train.epochs = 2;
  c.train.student_epochs = 1;
  c.probe.n_boot = 50;
  c.conditions = {parse_run_spec("SAME_BASE"), parse_run_spec("DIFF_BASE"), parse_run_spec("SAME_BASE+ADVERSARIAL")};
  c.master_seed = 21;
  const fs::path cfg = work / "config.json";
  std::ofstream(cfg) << to_json(c).dump(2);
  std::vector<nlohmann::json> reports;
  for (const char* run : {"run1", "run2"}) {
    const fs::path out = work / run;
    fs::remove_all(out);
    const std::string cmd =
        "\"" + cli + "\" run-all --config \"" + cfg.string() + "\" --output-dir \"" + out.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "run-all failed: " + cmd};
    std::ifstream in(out / "report.json");
    reports.push_back(to_json(run_report_from_json(nlohmann::json::parse(in)), false));
  }
  const bool same = reports[0] == reports[1];
  return {same, same ? "two run-all invocations gave identical reports (timing fields excluded)"
                     : "reports differ"};
}

// ---- experiment-backed criteria -------------------------------------------

struct Experiment {
  std::vector<RunReport> reports;

  std::vector<double> values(const std::string& cond, double ConditionMetrics::*field) const {
    std::vector<double> out;
    for (const auto& r : reports)
      if (const ConditionReport* c = r.find(cond); c && c->metrics) out.push_back((*c->metrics).*field);
    return out;
  }
  double med(const std::string& cond, double ConditionMetrics::*field) const { return median(values(cond, field)); }
};

const char* kBase[] = {"SAME_BASE", "SAME_BASE_DIFFDATA", "DIFF_BASE", "DIFF_BASE_DIFFDATA"};

Outcome teacher_encodes_trait(const Experiment& e) {
  double worst_probe = 1.0, worst_pub = 1.0;
  for (const auto& r : e.reports) {
    if (!r.teacher) return {false, "teacher stage failed for seed " + std::to_string(r.master_seed)};
    worst_probe = std::min(worst_probe, r.teacher->private_probe_acc);
    worst_pub = std::min(worst_pub, r.teacher->val_pub_acc);
  }
  return {worst_probe >= 0.65 && worst_pub >= 0.95,
          fmt("min over seeds: private probe %.3f (>=0.65), public val %.3f (>=0.95)", worst_probe, worst_pub)};
}

Outcome kd_fidelity(const Experiment& e) {
  double worst = 1.0;
  std::string who;
  std::size_t missing = 0;
  for (const auto& r : e.reports)
    for (const auto& c : r.conditions) {
      if (!c.metrics) {
        ++missing;
        continue;
      }
      if (c.metrics->public_match < worst) {
        worst = c.metrics->public_match;
        who = c.name + "/seed" + std::to_string(r.master_seed);
      }
    }
  return {missing == 0 && worst >= 0.99,
          fmt("min public match %.4f at %s (>=0.99), %zu failed runs", worst, who.c_str(), missing)};
}

Outcome core_dissociation(const Experiment& e) {
  const double ts = e.med("SAME_BASE", &ConditionMetrics::tau_resid);
  const double td = e.med("DIFF_BASE", &ConditionMetrics::tau_resid);
  const double cs = e.med("SAME_BASE", &ConditionMetrics::subspace_cka);
  const double cd = e.med("DIFF_BASE", &ConditionMetrics::subspace_cka);
  double gmin = 1.0;
  std::ostringstream g;
  for (const char* c : kBase) {
    const double v = e.med(c, &ConditionMetrics::global_cka);
    gmin = std::min(gmin, v);
    g << " " << c << "=" << fmt("%.3f", v);
  }
  const bool ok = ts - td >= 0.05 && ts >= 0.10 && cs - cd >= 0.15 && gmin >= 0.8;
  return {ok, fmt("tau_resid SAME %.3f DIFF %.3f (diff>=0.05, SAME>=0.10); CKA_sub SAME %.3f DIFF %.3f (diff>=0.15); "
                  "global CKA (>=0.8):",
                  ts, td, cs, cd) +
                  g.str()};
}

Outcome init_dominance(const Experiment& e) {
  const double tsd = e.med("SAME_BASE_DIFFDATA", &ConditionMetrics::tau_resid);
  const double td = e.med("DIFF_BASE", &ConditionMetrics::tau_resid);
  const double csd = e.med("SAME_BASE_DIFFDATA", &ConditionMetrics::subspace_cka);
  const double cs = e.med("SAME_BASE", &ConditionMetrics::subspace_cka);
  return {tsd >= td && std::abs(csd - cs) <= 0.1,
          fmt("tau_resid SAME_DIFFDATA %.3f >= DIFF %.3f; CKA_sub SAME_DIFFDATA %.3f vs SAME %.3f (|diff|<=0.1)", tsd,
              td, csd, cs)};
}

Outcome mitigation_direction(const Experiment& e) {
  std::vector<double> dcka, dtau;
  double min_match = 1.0;
  std::map<std::string, int> reduced;
  std::size_t paired = 0;
  for (const auto& r : e.reports) {
    const ConditionReport* none = r.find("SAME_BASE");
    if (!none || !none->metrics) continue;
    ++paired;
    if (const ConditionReport* p = r.find("SAME_BASE+PROJECTION"); p && p->metrics) {
      dcka.push_back(p->metrics->subspace_cka - none->metrics->subspace_cka);
      dtau.push_back(p->metrics->tau_resid - none->metrics->tau_resid);
      min_match = std::min(min_match, p->metrics->public_match);
    }
    for (const char* m : {"ADVERSARIAL", "RRR"}) {
      const ConditionReport* c = r.find(std::string("SAME_BASE+") + m);
      if (c && c->metrics && c->metrics->tau_resid < none->metrics->tau_resid) ++reduced[m];
    }
  }
  const double mc = median(dcka), mt = median(dtau);
  // 4 of 5, scaled to the seed count.
  const int need = static_cast<int>(std::ceil(0.8 * static_cast<double>(paired)));
  const bool ok = dcka.size() == paired && mc < 0 && mt < 0 && min_match >= 0.99 && reduced["ADVERSARIAL"] >= need &&
                  reduced["RRR"] >= need;
  return {ok, fmt("PROJECTION median paired delta CKA_sub %+.3f, tau_resid %+.3f (both <0), min match %.4f; "
                  "tau_resid reduced in %d/%zu (ADV), %d/%zu (RRR), need %d",
                  mc, mt, min_match, reduced["ADVERSARIAL"], paired, reduced["RRR"], paired, need)};
}

Outcome residualizer_control(const Experiment& e) {
  double min_ctl_tau = 1.0, max_ctl_resid = 0.0, max_gap = 0.0;
  std::string gap_at;
  for (const auto& r : e.reports)
    for (const auto& c : r.conditions)
      if (c.metrics) {
        min_ctl_tau = std::min(min_ctl_tau, c.metrics->control_tau);
        max_ctl_resid = std::max(max_ctl_resid, std::abs(c.metrics->control_tau_resid));
      }
  std::set<std::string> names;
  for (const auto& r : e.reports)
    for (const auto& c : r.conditions) names.insert(c.name);
  for (const auto& n : names) {
    const double gap = std::abs(e.med(n, &ConditionMetrics::tau) - e.med(n, &ConditionMetrics::tau_resid));
    if (gap > max_gap) {
      max_gap = gap;
      gap_at = n;
    }
  }
  return {min_ctl_tau >= 0.3 && max_ctl_resid <= 0.05 && max_gap <= 0.02,
          fmt("control: min tau %.3f (>=0.3), max |tau_resid| %.3f (<=0.05); max median |tau - tau_resid| %.3f at %s "
              "(<=0.02)",
              min_ctl_tau, max_ctl_resid, max_gap, gap_at.c_str())};
}

Outcome bootstrap_coverage(const Experiment& e) {
  std::size_t checked = 0, bad = 0, null_bad = 0;
  for (const auto& r : e.reports)
    for (const auto& c : r.conditions)
      if (c.metrics) {
        const ConditionMetrics& m = *c.metrics;
        checked += 2;
        bad += !m.tau_ci.contains(m.tau);
        bad += !m.tau_resid_ci.contains(m.tau_resid);
        null_bad += !m.null_tau_ci.contains(m.null_tau);
      }
  return {checked > 0 && bad == 0 && null_bad == 0,
          fmt("%zu/%zu intervals bracket their estimate; permutation-null tau outside its CI in %zu runs",
              checked - bad, checked, null_bad)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string config = "default", cli, out = "acceptance_runs";
  std::size_t n_seeds = 5;
  app.add_option("--config", config, "profile name or JSON config for the multi-seed experiment");
  app.add_option("--seeds", n_seeds, "master seeds 0..N-1")->check(CLI::PositiveNumber);
  app.add_option("--cli", cli, "path to the sublab executable")->required();
  app.add_option("--out", out, "directory for run artefacts");
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  const auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += o.pass ? 0 : 1;
    std::printf("[%s] %2d %-24s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "gradient-integrity", gradient_integrity);
  report(2, "corpus-soundness", corpus_soundness);

  Experiment exp;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    RunConfig base = load_run_config(config);
    base.conditions.clear();
    for (const char* c : kBase) base.conditions.push_back(parse_run_spec(c));
    for (const char* m : {"PROJECTION", "ADVERSARIAL", "RRR"})
      base.conditions.push_back(parse_run_spec(std::string("SAME_BASE+") + m));
    for (std::size_t s = 0; s < n_seeds; ++s) {
      RunConfig c = base;
      c.master_seed = s;
      c.output_dir = (fs::path(out) / ("seed" + std::to_string(s))).string();
      exp.reports.push_back(run_experiment(c));
      std::fprintf(stderr, "seed %zu done (%.0fs)\n", s,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    emit_figure_data(exp.reports, out);
  } catch (const std::exception& ex) {
    std::printf("experiment failed: %s\n", ex.what());
  }
  std::printf("multi-seed experiment: profile %s, %zu seeds, %.0fs\n", config.c_str(), exp.reports.size(),
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  report(3, "teacher-encodes-trait", [&] { return teacher_encodes_trait(exp); });
  report(4, "kd-fidelity", [&] { return kd_fidelity(exp); });
  report(5, "core-dissociation", [&] { return core_dissociation(exp); });
  report(6, "init-dominance", [&] { return init_dominance(exp); });
  report(7, "mitigation-direction", [&] { return mitigation_direction(exp); });
  report(8, "metric-algebra", metric_algebra);
  report(9, "residualizer-control", [&] { return residualizer_control(exp); });
  report(10, "bootstrap", [&] { return bootstrap_coverage(exp); });
  report(11, "determinism", [&] { return end_to_end_determinism(cli, fs::path(out) / "determinism"); });

  // Figure ordering, reported but not a criterion.
  std::size_t up_right = 0, compared = 0;
  for (const auto& r : exp.reports) {
    const ConditionReport* same = r.find("SAME_BASE");
    if (!same || !same->metrics) continue;
    for (const char* d : {"DIFF_BASE", "DIFF_BASE_DIFFDATA"}) {
      const ConditionReport* diff = r.find(d);
      if (!diff || !diff->metrics) continue;
      ++compared;
      up_right += same->metrics->subspace_cka > diff->metrics->subspace_cka &&
                  same->metrics->tau_resid > diff->metrics->tau_resid;
    }
  }
  std::printf("[INFO] figure: SAME_BASE up-and-right of DIFF rows in %zu/%zu same-seed pairs\n", up_right, compared);
  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
