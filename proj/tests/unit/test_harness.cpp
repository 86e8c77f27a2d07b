// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>

#include "doctest.h"
#include "sublab/errors.hpp"
#include "sublab/harness.hpp"

using namespace sublab;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c = profile_config("fast");
  c.corpus.size = 400;
  c.model.hidden = 16;
  c.model.layers = 1;
  c.train.epochs = 3;
  c.train.student_epochs = 1;
  c.probe.n_boot = 20;
  c.conditions = {parse_run_spec("SAME_BASE"), parse_run_spec("DIFF_BASE_DIFFDATA"),
                  parse_run_spec("SAME_BASE+PROJECTION")};
  c.master_seed = 3;
  return c;
}

const RunReport& tiny_report() {
  static const RunReport r = run_experiment(tiny_run());
  return r;
}

}  // namespace

TEST_CASE("run specs") {
  const RunSpec r = parse_run_spec("SAME_BASE+PROJECTION");
  CHECK(r.mitigation == MitigationMode::Projection);
  CHECK(r.name() == "SAME_BASE+PROJECTION");
  CHECK(parse_run_spec("DIFF_BASE").name() == "DIFF_BASE");
  CHECK_THROWS_AS(parse_run_spec("DIFF_BASE+NOPE"), InputError);
}

TEST_CASE("config JSON round trip and hashing") {
  for (const char* p : {"default", "fast"}) {
    const RunConfig c = profile_config(p);
    const RunConfig back = run_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
  }
  CHECK(config_hash(profile_config("default")) != config_hash(profile_config("fast")));
  RunConfig a = profile_config("fast");
  a.output_dir = "/tmp/elsewhere";
  CHECK(config_hash(a) == config_hash(profile_config("fast")));
  a.master_seed = 1;
  CHECK(config_hash(a) != config_hash(profile_config("fast")));
  CHECK(config_hash(a).size() == 16);
}

TEST_CASE("partial JSON falls back to the named profile") {
  const RunConfig c = run_config_from_json(nlohmann::json{{"profile", "fast"}, {"master_seed", 7}});
  CHECK(c.master_seed == 7);
  CHECK(c.model.hidden == 64);
  CHECK(c.corpus.size == 2000);
}

TEST_CASE("invalid configs are rejected") {
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"bogus", 1}}), InputError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"model", {{"depth", 3}}}}), InputError);
  CHECK_THROWS_AS(profile_config("huge"), InputError);
  RunConfig c = profile_config("fast");
  c.conditions.clear();
  CHECK_THROWS_AS(c.validate(), InputError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), InputError);
}

TEST_CASE("seed streams are distinct and stable") {
  const SeedStreams a = SeedStreams::derive(0), b = SeedStreams::derive(0), c = SeedStreams::derive(1);
  CHECK(to_json(a) == to_json(b));
  CHECK(a.corpus != c.corpus);
  const std::vector<std::uint64_t> all = {a.corpus,          a.split,           a.teacher_init,
                                          a.student_init,    a.teacher_shuffle, a.student_shuffle,
                                          a.probe_fold,      a.bootstrap,       a.permutation};
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) CHECK(all[i] != all[j]);
}

TEST_CASE("job threads from the environment") {
  ::setenv("SUBLAB_THREADS", "3", 1);
  CHECK(job_threads() == 3);
  ::setenv("SUBLAB_THREADS", "0", 1);
  CHECK_THROWS_AS(job_threads(), InputError);
  ::setenv("SUBLAB_THREADS", "two", 1);
  CHECK_THROWS_AS(job_threads(), InputError);
  ::unsetenv("SUBLAB_THREADS");
  CHECK(job_threads() >= 1);
}

TEST_CASE("a tiny run produces a complete report") {
  const RunReport& r = tiny_report();
  CHECK_FALSE(r.partial());
  REQUIRE(r.teacher.has_value());
  REQUIRE(r.conditions.size() == 3);
  CHECK(r.eval_split == "val");
  CHECK(r.eval_rows == 60);
  for (const auto& c : r.conditions) {
    REQUIRE(c.metrics.has_value());
    const ConditionMetrics& m = *c.metrics;
    CHECK(m.tau_ci.contains(m.tau));
    CHECK(m.tau_resid_ci.contains(m.tau_resid));
    CHECK(m.null_tau_ci.contains(m.null_tau));
    for (double v : {m.global_cka, m.subspace_cka, m.rho_max, m.public_match}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  REQUIRE(r.find("SAME_BASE+PROJECTION") != nullptr);
  CHECK(r.find("SAME_BASE+PROJECTION")->mitigation == "PROJECTION");
  CHECK(r.find("DIFF_BASE") == nullptr);
}

TEST_CASE("reports are a pure function of the config") {
  const RunReport again = run_experiment(tiny_run());
  CHECK(to_json(again, false) == to_json(tiny_report(), false));
  const RunReport back = run_report_from_json(to_json(tiny_report()));
  CHECK(to_json(back) == to_json(tiny_report()));
}

TEST_CASE("figure data skips failed conditions with a warning") {
  RunReport r = tiny_report();
  r.conditions[1].metrics.reset();
  r.conditions[1].error = StageError{"distill", "run_error", "diverged"};
  const fs::path dir = fs::temp_directory_path() / "sublab_figure_test";
  fs::remove_all(dir);
  const FigureData f = emit_figure_data(std::span<const RunReport>(&r, 1), dir);
  CHECK(f.rows.size() == 2);
  CHECK(f.warnings.size() == 1);
  CHECK(fs::exists(dir / "figure.csv"));
  CHECK(fs::exists(dir / "figure.svg"));
  for (const auto& row : f.rows) {
    CHECK(row.ci_lo <= row.tau_resid);
    CHECK(row.tau_resid <= row.ci_hi);
  }
}
