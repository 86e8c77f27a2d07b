// SPDX-License-Identifier: Apache-2.0
#include "sublab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "sublab/corpus.hpp"
#include "sublab/errors.hpp"
#include "sublab/matrix_io.hpp"
#include "sublab/model_json.hpp"
#include "sublab/rng.hpp"
#include "sublab/similarity.hpp"

namespace sublab {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, std::string_view where) {
  if (!j.is_object()) throw InputError(std::string(where) + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.contains(k)) throw InputError("unknown key '" + k + "' in " + std::string(where));
  }
}

std::string_view kl_order_name(ad::KlOrder o) {
  return o == ad::KlOrder::StudentTeacher ? "student_teacher" : "teacher_student";
}

ad::KlOrder parse_kl_order(const std::string& s) {
  if (s == "student_teacher") return ad::KlOrder::StudentTeacher;
  if (s == "teacher_student") return ad::KlOrder::TeacherStudent;
  throw InputError("unknown kl_order: " + s);
}

json train_to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"epochs", t.epochs},
          {"student_epochs", t.student_epochs},
          {"batch_size", t.batch_size},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"weight_decay", t.weight_decay},
          {"kd_temperature", t.kd_temperature},
          {"kl_order", kl_order_name(t.kl_order)},
          {"student_hard_label_ce", t.student_hard_label_ce},
          {"eval_batch_size", t.eval_batch_size}};
}

TrainConfig train_from_json(const json& j, TrainConfig t) {
  reject_unknown_keys(j,
                      {"lr", "epochs", "student_epochs", "batch_size", "beta1", "beta2", "eps", "weight_decay",
                       "kd_temperature", "kl_order", "student_hard_label_ce", "eval_batch_size"},
                      "train");
  t.lr = j.value("lr", t.lr);
  t.epochs = j.value("epochs", t.epochs);
  t.student_epochs = j.value("student_epochs", t.student_epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.eps = j.value("eps", t.eps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.kd_temperature = j.value("kd_temperature", t.kd_temperature);
  if (j.contains("kl_order")) t.kl_order = parse_kl_order(j.at("kl_order").get<std::string>());
  t.student_hard_label_ce = j.value("student_hard_label_ce", t.student_hard_label_ce);
  t.eval_batch_size = j.value("eval_batch_size", t.eval_batch_size);
  return t;
}

json interval_json(const Interval& i) { return json::array({i.lo, i.hi}); }

Interval interval_from_json(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json error_json(const StageError& e) { return {{"stage", e.stage}, {"kind", e.kind}, {"message", e.message}}; }

StageError error_from_json(const json& j) {
  return {j.at("stage").get<std::string>(), j.at("kind").get<std::string>(), j.at("message").get<std::string>()};
}

json history_record(const EpochRecord& r) {
  json j = {{"epoch", r.epoch}, {"loss", r.loss}, {"pub_acc", r.pub_acc}};
  if (r.priv_acc) j["priv_acc"] = *r.priv_acc;
  if (r.public_match) j["public_match"] = *r.public_match;
  if (r.train_pub_acc) j["train_pub_acc"] = *r.train_pub_acc;
  if (r.train_priv_acc) j["train_priv_acc"] = *r.train_priv_acc;
  if (r.disc_acc) j["disc_acc"] = *r.disc_acc;
  return j;
}

void write_history(const std::filesystem::path& path, const History& h) {
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path.string());
  for (const auto& r : h) out << history_record(r).dump() << '\n';
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path.string());
  out << text;
}

StageError capture(std::string stage, const std::exception& e) {
  if (const auto* se = dynamic_cast<const Error*>(&e)) return {std::move(stage), std::string(se->kind()), se->what()};
  return {std::move(stage), "internal_error", e.what()};
}

template <class F>
void run_jobs(std::size_t count, std::size_t threads, F&& job) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  }
}

}  // namespace

std::string RunSpec::name() const {
  std::string n = condition.name();
  if (mitigation != MitigationMode::None) n += "+" + std::string(to_string(mitigation));
  return n;
}

RunSpec parse_run_spec(std::string_view s) {
  RunSpec r;
  const auto plus = s.find('+');
  r.condition = parse_condition(s.substr(0, plus));
  if (plus != std::string_view::npos) r.mitigation = parse_mitigation(s.substr(plus + 1));
  return r;
}

void RunConfig::validate() const {
  if (corpus.size < 20) throw InputError("corpus size must be at least 20");
  model.validate();
  train.validate();
  mitigation.validate();
  if (conditions.empty()) throw InputError("conditions list is empty");
  std::set<std::string> seen;
  for (const auto& c : conditions) {
    if (!seen.insert(c.name()).second) throw InputError("duplicate condition " + c.name());
  }
  if (probe.n_boot == 0) throw InputError("probe.n_boot must be positive");
  if (probe.basis_k == 0 || probe.basis_k > model.hidden) throw InputError("probe.basis_k must be in 1..hidden");
  if (probe.l2 < 0.0 || probe.cca_ridge < 0.0) throw InputError("probe regularisers must be >= 0");
}

RunConfig profile_config(std::string_view name) {
  RunConfig c;
  c.profile = std::string(name);
  for (const char* n : {"SAME_BASE", "SAME_BASE_DIFFDATA", "DIFF_BASE", "DIFF_BASE_DIFFDATA"}) {
    c.conditions.push_back(parse_run_spec(n));
  }
  c.train.kl_order = ad::KlOrder::TeacherStudent;
  if (name == "default") return c;
  if (name == "fast") {
    c.corpus.size = 2000;
    c.model.hidden = 64;
    c.train.batch_size = 16;
    c.train.epochs = 60;
    c.train.student_epochs = 15;
    return c;
  }
  throw InputError("unknown profile: " + std::string(name));
}

json to_json(const RunConfig& c) {
  json model = model_config_to_json(c.model);
  model.erase("seed");  // always derived from the master seed
  json conds = json::array();
  for (const auto& r : c.conditions) conds.push_back(r.name());
  return {{"profile", c.profile},
          {"master_seed", c.master_seed},
          {"corpus", {{"size", c.corpus.size}, {"balance_public", c.corpus.balance_public}}},
          {"model", model},
          {"train", train_to_json(c.train)},
          {"conditions", conds},
          {"mitigation",
           {{"alpha", c.mitigation.alpha}, {"lambda_adv", c.mitigation.lambda_adv}, {"lambda_rrr", c.mitigation.lambda_rrr}}},
          {"probe",
           {{"l2", c.probe.l2},
            {"n_boot", c.probe.n_boot},
            {"basis_k", c.probe.basis_k},
            {"cca_ridge", c.probe.cca_ridge}}},
          {"output_dir", c.output_dir}};
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown_keys(j, {"profile", "master_seed", "corpus", "model", "train", "conditions", "mitigation", "probe", "output_dir"},
                      "config");
  try {
    RunConfig c = profile_config(j.value("profile", std::string("default")));
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("corpus")) {
      const auto& cj = j.at("corpus");
      reject_unknown_keys(cj, {"size", "balance_public"}, "corpus");
      c.corpus.size = cj.value("size", c.corpus.size);
      c.corpus.balance_public = cj.value("balance_public", c.corpus.balance_public);
    }
    if (j.contains("model")) {
      const auto& mj = j.at("model");
      reject_unknown_keys(mj, {"hidden", "layers", "heads", "ffn_mult", "vocab_size", "max_len", "activation", "init_std"},
                          "model");
      c.model = model_config_from_json(mj, c.model);
    }
    if (j.contains("train")) c.train = train_from_json(j.at("train"), c.train);
    if (j.contains("conditions")) {
      c.conditions.clear();
      for (const auto& s : j.at("conditions")) c.conditions.push_back(parse_run_spec(s.get<std::string>()));
    }
    if (j.contains("mitigation")) {
      const auto& mj = j.at("mitigation");
      reject_unknown_keys(mj, {"alpha", "lambda_adv", "lambda_rrr"}, "mitigation");
      c.mitigation.alpha = mj.value("alpha", c.mitigation.alpha);
      c.mitigation.lambda_adv = mj.value("lambda_adv", c.mitigation.lambda_adv);
      c.mitigation.lambda_rrr = mj.value("lambda_rrr", c.mitigation.lambda_rrr);
    }
    if (j.contains("probe")) {
      const auto& pj = j.at("probe");
      reject_unknown_keys(pj, {"l2", "n_boot", "basis_k", "cca_ridge"}, "probe");
      c.probe.l2 = pj.value("l2", c.probe.l2);
      c.probe.n_boot = pj.value("n_boot", c.probe.n_boot);
      c.probe.basis_k = pj.value("basis_k", c.probe.basis_k);
      c.probe.cca_ridge = pj.value("cca_ridge", c.probe.cca_ridge);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed config: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& name_or_path) {
  if (name_or_path == "default" || name_or_path == "fast") return profile_config(name_or_path);
  std::ifstream in(name_or_path);
  if (!in) throw InputError("cannot open config: " + name_or_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("config is not valid JSON: " + std::string(e.what()));
  }
  return run_config_from_json(j);
}

std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");  // where results go does not change them
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

SeedStreams SeedStreams::derive(std::uint64_t master) {
  SeedStreams s;
  s.corpus = derive_seed(master, "corpus");
  s.split = derive_seed(master, "split");
  s.teacher_init = derive_seed(master, "teacher_init");
  s.student_init = derive_seed(master, "student_init");
  s.teacher_shuffle = derive_seed(master, "shuffle/teacher");
  s.student_shuffle = derive_seed(master, "shuffle/student");
  s.probe_fold = derive_seed(master, "probe_folds");
  s.bootstrap = derive_seed(master, "bootstrap");
  s.permutation = derive_seed(master, "permutation_null");
  return s;
}

json to_json(const SeedStreams& s) {
  return {{"corpus", s.corpus},
          {"split", s.split},
          {"teacher_init", s.teacher_init},
          {"student_init", s.student_init},
          {"teacher_shuffle", s.teacher_shuffle},
          {"student_shuffle", s.student_shuffle},
          {"probe_fold", s.probe_fold},
          {"bootstrap", s.bootstrap},
          {"permutation", s.permutation}};
}

bool RunReport::partial() const {
  if (!errors.empty() || !teacher) return true;
  return std::any_of(conditions.begin(), conditions.end(), [](const auto& c) { return !c.metrics; });
}

const ConditionReport* RunReport::find(std::string_view name) const {
  for (const auto& c : conditions) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

json to_json(const RunReport& r, bool timing) {
  json conds = json::array();
  for (const auto& c : r.conditions) {
    json cj = {{"name", c.name},
               {"condition", c.condition},
               {"mitigation", c.mitigation},
               {"student_seed", c.student_seed},
               {"epochs", c.epochs},
               {"status", c.metrics ? "ok" : "failed"},
               {"evaluation",
                {{"split", r.eval_split},
                 {"fold_seed", r.seeds.probe_fold},
                 {"bootstrap_seed", r.seeds.bootstrap},
                 {"permutation_seed", r.seeds.permutation}}}};
    if (c.metrics) {
      const auto& m = *c.metrics;
      cj["metrics"] = {{"global_cka", m.global_cka},
                       {"subspace_cka", m.subspace_cka},
                       {"rho_max", m.rho_max},
                       {"tau", m.tau},
                       {"tau_ci", interval_json(m.tau_ci)},
                       {"tau_resid", m.tau_resid},
                       {"tau_resid_ci", interval_json(m.tau_resid_ci)},
                       {"public_match", m.public_match},
                       {"teacher_private_probe_acc", m.teacher_private_probe_acc},
                       {"control_tau", m.control_tau},
                       {"control_tau_resid", m.control_tau_resid},
                       {"null_tau", m.null_tau},
                       {"null_tau_ci", interval_json(m.null_tau_ci)}};
    } else {
      cj["metrics"] = nullptr;
    }
    if (c.error) cj["error"] = error_json(*c.error);
    if (timing) cj["seconds"] = c.seconds;
    conds.push_back(std::move(cj));
  }
  json errs = json::array();
  for (const auto& e : r.errors) errs.push_back(error_json(e));
  json j = {{"config_hash", r.config_hash},
            {"profile", r.profile},
            {"master_seed", r.master_seed},
            {"seeds", to_json(r.seeds)},
            {"evaluation", {{"split", r.eval_split}, {"rows", r.eval_rows}, {"batch_size", r.eval_batch_size}}},
            {"partial", r.partial()},
            {"errors", errs},
            {"conditions", conds}};
  if (r.teacher) {
    j["teacher"] = {{"val_pub_acc", r.teacher->val_pub_acc},
                    {"val_priv_acc", r.teacher->val_priv_acc},
                    {"private_probe_acc", r.teacher->private_probe_acc}};
    if (timing) j["teacher"]["seconds"] = r.teacher->seconds;
  } else {
    j["teacher"] = nullptr;
  }
  if (timing) j["timing"] = {{"wall_seconds", r.wall_seconds}};
  return j;
}

RunReport run_report_from_json(const json& j) {
  try {
    RunReport r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.profile = j.value("profile", std::string());
    r.master_seed = j.value("master_seed", std::uint64_t{0});
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      r.seeds.corpus = s.value("corpus", std::uint64_t{0});
      r.seeds.split = s.value("split", std::uint64_t{0});
      r.seeds.teacher_init = s.value("teacher_init", std::uint64_t{0});
      r.seeds.student_init = s.value("student_init", std::uint64_t{0});
      r.seeds.teacher_shuffle = s.value("teacher_shuffle", std::uint64_t{0});
      r.seeds.student_shuffle = s.value("student_shuffle", std::uint64_t{0});
      r.seeds.probe_fold = s.value("probe_fold", std::uint64_t{0});
      r.seeds.bootstrap = s.value("bootstrap", std::uint64_t{0});
      r.seeds.permutation = s.value("permutation", std::uint64_t{0});
    }
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      r.eval_split = e.value("split", r.eval_split);
      r.eval_rows = e.value("rows", r.eval_rows);
      r.eval_batch_size = e.value("batch_size", r.eval_batch_size);
    }
    if (j.contains("teacher") && !j.at("teacher").is_null()) {
      const auto& t = j.at("teacher");
      r.teacher = TeacherReport{t.at("val_pub_acc").get<double>(), t.at("val_priv_acc").get<double>(),
                                t.at("private_probe_acc").get<double>(), t.value("seconds", 0.0)};
    }
    for (const auto& e : j.value("errors", json::array())) r.errors.push_back(error_from_json(e));
    for (const auto& cj : j.at("conditions")) {
      ConditionReport c;
      c.name = cj.at("name").get<std::string>();
      c.condition = cj.value("condition", c.name);
      c.mitigation = cj.value("mitigation", std::string("NONE"));
      c.student_seed = cj.value("student_seed", std::uint64_t{0});
      c.epochs = cj.value("epochs", std::size_t{0});
      c.seconds = cj.value("seconds", 0.0);
      if (cj.contains("error")) c.error = error_from_json(cj.at("error"));
      if (cj.contains("metrics") && !cj.at("metrics").is_null()) {
        const auto& m = cj.at("metrics");
        ConditionMetrics x;
        x.global_cka = m.at("global_cka").get<double>();
        x.subspace_cka = m.at("subspace_cka").get<double>();
        x.rho_max = m.at("rho_max").get<double>();
        x.tau = m.at("tau").get<double>();
        x.tau_ci = interval_from_json(m.at("tau_ci"));
        x.tau_resid = m.at("tau_resid").get<double>();
        x.tau_resid_ci = interval_from_json(m.at("tau_resid_ci"));
        x.public_match = m.at("public_match").get<double>();
        x.teacher_private_probe_acc = m.at("teacher_private_probe_acc").get<double>();
        x.control_tau = m.value("control_tau", 0.0);
        x.control_tau_resid = m.value("control_tau_resid", 0.0);
        x.null_tau = m.value("null_tau", 0.0);
        if (m.contains("null_tau_ci")) x.null_tau_ci = interval_from_json(m.at("null_tau_ci"));
        c.metrics = x;
      }
      r.conditions.push_back(std::move(c));
    }
    if (j.contains("timing")) r.wall_seconds = j.at("timing").value("wall_seconds", 0.0);
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed run report: ") + e.what());
  }
}

std::size_t job_threads() {
  if (const char* env = std::getenv("SUBLAB_THREADS"); env && *env) {
    std::size_t n = 0;
    const std::string_view s(env);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    if (ec != std::errc{} || p != s.data() + s.size() || n == 0) {
      throw InputError("SUBLAB_THREADS must be a positive integer, got '" + std::string(s) + "'");
    }
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Corpus experiment_corpus(const RunConfig& config, CorpusVariant variant) {
  return generate_corpus(SeedStreams::derive(config.master_seed).corpus, config.corpus.size, variant,
                         config.corpus.balance_public);
}

Splits experiment_splits(const RunConfig& config, const Corpus& corpus) {
  return split(corpus, {0.70, 0.15, 0.15, SeedStreams::derive(config.master_seed).split});
}

TeacherResult train_experiment_teacher(const RunConfig& config, const Splits& base) {
  const SeedStreams seeds = SeedStreams::derive(config.master_seed);
  ModelConfig mc = config.model;
  mc.seed = seeds.teacher_init;
  return train_teacher(base.train, base.val, mc, config.train, seeds.teacher_shuffle);
}

TraitBasis mitigation_basis(const RunConfig& config, const ModelParams& teacher, const Splits& base) {
  const ForwardOut tt = forward_dataset(teacher, base.train, config.train.eval_batch_size);
  return trait_basis(tt.cls.to_eigen(), private_labels(base.train), config.probe.basis_k, config.probe.l2);
}

StudentResult train_experiment_student(const RunConfig& config, const ModelParams& teacher, const RunSpec& spec,
                                       const Splits& base, const Splits* diff,
                                       const std::optional<TraitBasis>& basis) {
  const SeedStreams seeds = SeedStreams::derive(config.master_seed);
  Condition cond = spec.condition;
  cond.student_seed = cond.base == BaseInit::DiffBase ? seeds.student_init : 0;
  MitigationConfig mit = config.mitigation;
  mit.mode = spec.mitigation;
  if (mit.needs_basis()) {
    if (!basis) throw ContractError(spec.name() + " needs a trait basis");
    mit.basis = basis;
  }
  if (cond.data == DataRegime::DiffData && !diff) throw ContractError(spec.name() + " needs the DIFFDATA splits");
  const auto& train = cond.data == DataRegime::Same ? base.train : diff->train;
  return distill_student(teacher, cond, mit, train, base.val, config.train, seeds.student_shuffle);
}

namespace {

struct StudentJob {
  std::optional<StudentResult> student;
  Eigen::MatrixXd cls;
  Eigen::MatrixXd logits;
  std::optional<ConditionMetrics> metrics;
  std::optional<StageError> error;
  double seconds = 0.0;
};

struct EvalContext {
  const Eigen::MatrixXd* teacher_cls;
  const Eigen::MatrixXd* teacher_logits;
  const Eigen::MatrixXd* covariates;
  const TraitBasis* basis;
  std::span<const int> y_pub;
  std::span<const int> y_priv;
  std::span<const int> y_null;
  double teacher_probe_acc;
  LeakageOptions leak;
  double cca_ridge;
};

ConditionMetrics evaluate_student(const EvalContext& ctx, const Eigen::MatrixXd& cls, const Eigen::MatrixXd& logits) {
  ConditionMetrics m;
  const SimilarityReport sim = similarity_report(*ctx.teacher_cls, cls, *ctx.basis, ctx.cca_ridge);
  m.global_cka = sim.global_cka;
  m.subspace_cka = sim.subspace_cka;
  m.rho_max = sim.rho_max;
  const LeakageReport leak = leakage_report(cls, ctx.y_priv, *ctx.covariates, ctx.leak);
  m.tau = leak.tau;
  m.tau_ci = leak.tau_ci;
  m.tau_resid = *leak.tau_resid;
  m.tau_resid_ci = *leak.tau_resid_ci;
  m.public_match = public_match(Tensor::from_eigen(logits), Tensor::from_eigen(*ctx.teacher_logits));
  m.teacher_private_probe_acc = ctx.teacher_probe_acc;
  const LeakageReport control = leakage_report(cls, ctx.y_pub, *ctx.covariates, ctx.leak);
  m.control_tau = control.tau;
  m.control_tau_resid = *control.tau_resid;
  const LeakageReport null = leakage_report(cls, ctx.y_null, std::nullopt, ctx.leak);
  m.null_tau = null.tau;
  m.null_tau_ci = null.tau_ci;
  return m;
}

}  // namespace

RunReport run_experiment(const RunConfig& config) {
  const auto t_start = Clock::now();
  config.validate();
  const std::size_t threads = job_threads();

  RunReport rep;
  rep.config_hash = config_hash(config);
  rep.profile = config.profile;
  rep.master_seed = config.master_seed;
  rep.seeds = SeedStreams::derive(config.master_seed);
  rep.eval_batch_size = config.train.eval_batch_size;
  const SeedStreams& seeds = rep.seeds;
  const std::filesystem::path out = config.output_dir;
  const bool write = !config.output_dir.empty();

  if (write) std::filesystem::create_directories(out);
  const auto finish = [&]() -> RunReport& {
    rep.wall_seconds = seconds_since(t_start);
    if (write) write_text(out / "report.json", to_json(rep).dump(2) + "\n");
    return rep;
  };
  if (write) write_text(out / "config.json", to_json(config).dump(2) + "\n");

  const bool need_diff = std::any_of(config.conditions.begin(), config.conditions.end(),
                                     [](const RunSpec& r) { return r.condition.data == DataRegime::DiffData; });
  Splits base_splits, diff_splits;
  try {
    const Corpus base = experiment_corpus(config, CorpusVariant::Base);
    base_splits = experiment_splits(config, base);
    if (write) {
      std::filesystem::create_directories(out / "corpus");
      save_corpus(base, out / "corpus" / "base.csv");
    }
    if (need_diff) {
      const Corpus diff = experiment_corpus(config, CorpusVariant::DiffData);
      diff_splits = experiment_splits(config, diff);
      if (write) save_corpus(diff, out / "corpus" / "diffdata.csv");
    }
  } catch (const std::exception& e) {
    rep.errors.push_back(capture("corpus", e));
    return finish();
  }
  const auto& val = base_splits.val;
  rep.eval_rows = val.size();

  std::optional<TeacherResult> teacher;
  Eigen::MatrixXd teacher_cls, teacher_logits, covariates;
  std::optional<TraitBasis> eval_basis, train_basis;
  std::vector<int> y_pub, y_priv, y_null;
  double teacher_probe_acc = 0.0;
  LeakageOptions leak{config.probe.l2, config.probe.n_boot, seeds.probe_fold, seeds.bootstrap};
  try {
    const auto t0 = Clock::now();
    teacher = train_experiment_teacher(config, base_splits);
    const double train_seconds = seconds_since(t0);

    const ForwardOut tv = forward_dataset(teacher->params, val, config.train.eval_batch_size);
    teacher_cls = tv.cls.to_eigen();
    teacher_logits = tv.logits_pub.to_eigen();
    covariates = public_logit_covariates(teacher_logits);
    y_pub = public_labels(val);
    y_priv = private_labels(val);
    y_null = y_priv;
    Rng perm(seeds.permutation);
    perm.shuffle(std::span<int>(y_null));

    eval_basis = trait_basis(teacher_cls, y_priv, config.probe.basis_k, config.probe.l2);
    teacher_probe_acc = leakage_tau(teacher_cls, y_priv, probe_fold(val.size(), seeds.probe_fold), config.probe.l2).probe_acc;
    train_basis = mitigation_basis(config, teacher->params, base_splits);

    rep.teacher = TeacherReport{accuracy(tv.logits_pub, y_pub), accuracy(*tv.logits_priv, y_priv), teacher_probe_acc,
                                train_seconds};
    if (write) {
      std::filesystem::create_directories(out / "teacher");
      std::filesystem::create_directories(out / "eval");
      save_checkpoint(teacher->params, out / "teacher" / "checkpoint.bin");
      write_history(out / "teacher" / "history.jsonl", teacher->history);
      save_embeddings(out / "eval" / "teacher_cls_val.csv", teacher_cls, "teacher", "val");
      write_matrix_csv(out / "eval" / "teacher_logits_val.csv", teacher_logits);
      save_labels(out / "eval" / "labels_val.csv", y_pub, y_priv);
    }
  } catch (const std::exception& e) {
    rep.errors.push_back(capture("teacher", e));
    return finish();
  }

  const EvalContext ctx{&teacher_cls, &teacher_logits, &covariates, &*eval_basis, y_pub, y_priv, y_null,
                        teacher_probe_acc, leak, config.probe.cca_ridge};
  std::vector<StudentJob> jobs(config.conditions.size());
  run_jobs(jobs.size(), threads, [&](std::size_t i) {
    const RunSpec& spec = config.conditions[i];
    StudentJob& job = jobs[i];
    const auto t0 = Clock::now();
    std::string stage = "distill";
    try {
      job.student = train_experiment_student(config, teacher->params, spec, base_splits,
                                             need_diff ? &diff_splits : nullptr, train_basis);
      stage = "evaluate";
      const ForwardOut sv = forward_dataset(job.student->params, val, config.train.eval_batch_size);
      job.cls = sv.cls.to_eigen();
      job.logits = sv.logits_pub.to_eigen();
      job.metrics = evaluate_student(ctx, job.cls, job.logits);
    } catch (const std::exception& e) {
      job.error = capture(stage, e);
    }
    job.seconds = seconds_since(t0);
  });

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const RunSpec& spec = config.conditions[i];
    StudentJob& job = jobs[i];
    ConditionReport c;
    c.name = spec.name();
    c.condition = spec.condition.name();
    c.mitigation = std::string(to_string(spec.mitigation));
    c.student_seed = spec.condition.base == BaseInit::DiffBase ? seeds.student_init : 0;
    c.epochs = config.train.student_epochs;
    c.metrics = job.metrics;
    c.error = job.error;
    c.seconds = job.seconds;
    if (write && job.student) {
      try {
        const auto dir = out / "students" / c.name;
        std::filesystem::create_directories(dir);
        save_checkpoint(job.student->params, dir / "checkpoint.bin");
        write_history(dir / "history.jsonl", job.student->history);
        if (job.metrics) {
          save_embeddings(dir / "cls_val.csv", job.cls, c.name, "val");
          write_matrix_csv(dir / "logits_val.csv", job.logits);
        }
      } catch (const std::exception& e) {
        rep.errors.push_back(capture("write:" + c.name, e));
      }
    }
    rep.conditions.push_back(std::move(c));
  }

  finish();
  if (write) {
    try {
      const RunReport one[] = {rep};
      emit_figure_data(one, out);
    } catch (const std::exception& e) {
      rep.errors.push_back(capture("figure", e));
      finish();
    }
  }
  return rep;
}

namespace {

std::string svg_escape(std::string_view s) {
  std::string o;
  for (char ch : s) {
    switch (ch) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += ch;
    }
  }
  return o;
}

std::string render_svg(const std::vector<FigureRow>& rows) {
  constexpr double W = 640, H = 480, L = 70, R = 170, T = 30, B = 60;
  double ymin = 0.0, ymax = 0.1;
  for (const auto& r : rows) {
    ymin = std::min({ymin, r.ci_lo, r.tau_resid});
    ymax = std::max({ymax, r.ci_hi, r.tau_resid});
  }
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  const auto px = [&](double x) { return L + std::clamp(x, 0.0, 1.0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  const std::map<std::string, std::string> colors = {{"SAME_BASE", "#1f77b4"},
                                                     {"SAME_BASE_DIFFDATA", "#17becf"},
                                                     {"DIFF_BASE", "#ff7f0e"},
                                                     {"DIFF_BASE_DIFFDATA", "#d62728"}};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double x = i / 5.0;
    s << "<text x=\"" << px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << format_double(x) << "</text>\n";
    const double y = ymin + (ymax - ymin) * i / 5.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", y);
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << buf << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">subspace CKA</text>\n";
  s << "<text transform=\"translate(18," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">tau_resid</text>\n";
  for (const auto& r : rows) {
    const std::string base = r.condition.substr(0, r.condition.find('+'));
    const auto it = colors.find(base);
    const std::string color = it == colors.end() ? "#7f7f7f" : it->second;
    const bool mitigated = r.condition.find('+') != std::string::npos;
    s << "<line x1=\"" << px(r.subspace_cka) << "\" y1=\"" << py(r.ci_lo) << "\" x2=\"" << px(r.subspace_cka) << "\" y2=\""
      << py(r.ci_hi) << "\" stroke=\"" << color << "\"/>\n";
    s << "<circle cx=\"" << px(r.subspace_cka) << "\" cy=\"" << py(r.tau_resid) << "\" r=\"4\" fill=\""
      << (mitigated ? "white" : color) << "\" stroke=\"" << color << "\"><title>" << svg_escape(r.condition)
      << "</title></circle>\n";
  }
  double ly = T + 10;
  std::set<std::string> shown;
  for (const auto& r : rows) {
    if (!shown.insert(r.condition).second) continue;
    const std::string base = r.condition.substr(0, r.condition.find('+'));
    const auto it = colors.find(base);
    const std::string color = it == colors.end() ? "#7f7f7f" : it->second;
    const bool mitigated = r.condition.find('+') != std::string::npos;
    s << "<circle cx=\"" << W - R + 15 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << (mitigated ? "white" : color)
      << "\" stroke=\"" << color << "\"/>\n";
    s << "<text x=\"" << W - R + 25 << "\" y=\"" << ly + 4 << "\" font-size=\"10\">" << svg_escape(r.condition) << "</text>\n";
    ly += 16;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

FigureData emit_figure_data(std::span<const RunReport> reports, const std::filesystem::path& dir) {
  FigureData fig;
  for (const auto& rep : reports) {
    for (const auto& c : rep.conditions) {
      if (!c.metrics) {
        fig.warnings.push_back("skipping " + c.name + " (report " + rep.config_hash + "): no metrics");
        continue;
      }
      fig.rows.push_back({c.name, c.metrics->subspace_cka, c.metrics->tau_resid, c.metrics->tau_resid_ci.lo,
                          c.metrics->tau_resid_ci.hi});
    }
  }
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    csv << "condition,subspace_cka,tau_resid,ci_lo,ci_hi\n";
    for (const auto& r : fig.rows) {
      csv << r.condition << ',' << format_double(r.subspace_cka) << ',' << format_double(r.tau_resid) << ','
          << format_double(r.ci_lo) << ',' << format_double(r.ci_hi) << '\n';
    }
    write_text(dir / "figure.csv", csv.str());
    write_text(dir / "figure.svg", render_svg(fig.rows));
  }
  return fig;
}

}  // namespace sublab
