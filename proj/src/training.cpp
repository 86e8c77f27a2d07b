// SPDX-License-Identifier: Apache-2.0
#include "sublab/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sublab/errors.hpp"
#include "sublab/rng.hpp"

namespace sublab {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || epochs == 0 || batch_size == 0 || !(beta1 > 0.0) || !(beta2 > 0.0) || !(eps > 0.0) ||
      !(weight_decay >= 0.0) || !(kd_temperature > 0.0) || eval_batch_size == 0) {
    throw InputError("train config values must be positive (epochs >= 1)");
  }
  if (beta1 >= 1.0 || beta2 >= 1.0) throw InputError("adam betas must be < 1");
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimState& state,
                const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ContractError("adamw_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
      throw ContractError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* theta = params[i]->raw();
    const double* g = grads[i].raw();
    double* m = state.m[i].raw();
    double* v = state.v[i].raw();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      theta[j] *= decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

std::vector<int> public_labels(std::span<const Example> data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back(e.y_pub);
  return out;
}

std::vector<int> private_labels(std::span<const Example> data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back(e.y_priv);
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits(r, j) > logits(r, best)) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

double public_match(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) throw ShapeError("public_match: logit shapes differ");
  const auto s = argmax_rows(student_logits);
  const auto t = argmax_rows(teacher_logits);
  if (s.empty()) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < s.size(); ++i) same += s[i] == t[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(s.size());
}

double public_match(const ModelParams& student, const ModelParams& teacher, std::span<const Example> data,
                    std::size_t batch_size) {
  return public_match(forward_dataset(student, data, batch_size).logits_pub,
                      forward_dataset(teacher, data, batch_size).logits_pub);
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw ShapeError("accuracy: label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

namespace {

template <typename T>
std::vector<T> gather(std::span<const T> v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

Tensor gather_logits(const Tensor& logits, std::span<const std::size_t> idx) {
  Tensor out({idx.size(), logits.cols()});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < logits.cols(); ++j) out(r, j) = logits(idx[r], j);
  return out;
}

void check_finite(double loss, const char* who, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << who << " diverged: loss=" << loss << " at epoch " << epoch << ", step " << step;
    throw RunError(msg.str());
  }
}

std::size_t count_hits(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return hit;
}

}  // namespace

TeacherResult train_teacher(std::span<const Example> train, std::span<const Example> val,
                            const ModelConfig& model_config, const TrainConfig& cfg, std::uint64_t shuffle_seed) {
  cfg.validate();
  if (train.empty() || val.empty()) throw InputError("teacher training needs non-empty train and val splits");
  TeacherResult res{init_params(model_config, ModelRole::Teacher), {}};
  const auto tokens = token_batch(train);
  const auto ypub = public_labels(train);
  const auto ypriv = private_labels(train);
  const auto val_pub = public_labels(val);
  const auto val_priv = private_labels(val);

  Rng shuffle(shuffle_seed);
  OptimState state;
  const AdamWConfig adam = cfg.adamw();
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t hits_pub = 0, hits_priv = 0, step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto bt = gather<TokenIds>(tokens, idx);
      const auto bp = gather<int>(ypub, idx);
      const auto bq = gather<int>(ypriv, idx);

      ad::Tape tape;
      const ModelVars vars = bind(tape, res.params, true);
      const ForwardVars fv = forward(vars, res.params.config, bt);
      ad::Var loss = ad::add(ad::softmax_cross_entropy(fv.logits_pub, bp),
                             ad::softmax_cross_entropy(*fv.logits_priv, bq));
      check_finite(loss.value().item(), "teacher", epoch, step);
      tape.backward(loss);
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      hits_pub += count_hits(fv.logits_pub.value(), bp);
      hits_priv += count_hits(fv.logits_priv->value(), bq);
      const auto grads = collect_grads(tape, vars);
      const auto ps = res.params.parameters();
      adamw_step(ps, grads, state, adam);
    }
    const ForwardOut ev = forward_dataset(res.params, val, cfg.eval_batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(train.size());
    rec.pub_acc = accuracy(ev.logits_pub, val_pub);
    rec.priv_acc = accuracy(*ev.logits_priv, val_priv);
    rec.train_pub_acc = static_cast<double>(hits_pub) / static_cast<double>(train.size());
    rec.train_priv_acc = static_cast<double>(hits_priv) / static_cast<double>(train.size());
    res.history.push_back(rec);
  }
  return res;
}

std::string Condition::name() const {
  std::string s = base == BaseInit::SameBase ? "SAME_BASE" : "DIFF_BASE";
  if (data == DataRegime::DiffData) s += "_DIFFDATA";
  return s;
}

Condition parse_condition(std::string_view name) {
  if (name == "SAME_BASE") return {BaseInit::SameBase, DataRegime::Same, 0};
  if (name == "SAME_BASE_DIFFDATA") return {BaseInit::SameBase, DataRegime::DiffData, 0};
  if (name == "DIFF_BASE") return {BaseInit::DiffBase, DataRegime::Same, 0};
  if (name == "DIFF_BASE_DIFFDATA") return {BaseInit::DiffBase, DataRegime::DiffData, 0};
  throw InputError("unknown condition: " + std::string(name));
}

StudentResult distill_student(const ModelParams& teacher, const Condition& condition,
                              const MitigationConfig& mitigation, std::span<const Example> train,
                              std::span<const Example> val, const TrainConfig& cfg, std::uint64_t shuffle_seed) {
  cfg.validate();
  mitigation.validate();
  if (!teacher.has_private_head()) throw ContractError("distill_student needs a trained teacher");
  if (train.empty() || val.empty()) throw InputError("distillation needs non-empty train and val sets");

  StudentResult res;
  if (condition.base == BaseInit::SameBase) {
    res.params = clone_student_from_teacher(teacher);
  } else {
    ModelConfig sc = teacher.config;
    sc.seed = condition.student_seed;
    res.params = init_params(sc, ModelRole::Student);
  }

  const auto tokens = token_batch(train);
  const Tensor teacher_logits = forward_dataset(teacher, train, cfg.eval_batch_size).logits_pub;
  const auto kd_targets = argmax_rows(teacher_logits);
  const auto ypub = public_labels(train);
  const auto ypriv = private_labels(train);
  const Tensor teacher_val_logits = forward_dataset(teacher, val, cfg.eval_batch_size).logits_pub;
  const auto val_pub = public_labels(val);
  const auto val_priv = private_labels(val);

  Discriminator disc = Discriminator::zeros(teacher.config.hidden);
  OptimState disc_state;
  OptimState state;
  const AdamWConfig adam = cfg.adamw();
  Rng shuffle(shuffle_seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.student_epochs; ++epoch) {
    shuffle.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto bt = gather<TokenIds>(tokens, idx);

      ad::Tape tape;
      const ModelVars vars = bind(tape, res.params, true);
      const ForwardVars fv = forward(vars, res.params.config, bt);
      ad::Var loss = ad::kl_divergence(fv.logits_pub, tape.constant(gather_logits(teacher_logits, idx)),
                                       cfg.kd_temperature, cfg.kl_order);
      if (cfg.student_hard_label_ce) {
        loss = ad::add(loss, ad::softmax_cross_entropy(fv.logits_pub, gather<int>(ypub, idx)));
      }
      std::optional<DiscriminatorVars> dv;
      switch (mitigation.mode) {
        case MitigationMode::None:
          break;
        case MitigationMode::Projection:
          loss = ad::add(loss, projection_penalty(fv.cls, *mitigation.basis, mitigation.alpha));
          break;
        case MitigationMode::Adversarial: {
          const auto bq = gather<int>(ypriv, idx);
          const bool both = std::find(bq.begin(), bq.end(), 0) != bq.end() &&
                            std::find(bq.begin(), bq.end(), 1) != bq.end();
          if (both) {
            dv = bind(tape, disc);
            loss = ad::add(loss, adversarial_loss(fv.cls, bq, *dv, mitigation.lambda_adv));
          }
          break;
        }
        case MitigationMode::Rrr:
          loss = ad::add(loss, rrr_penalty(fv.logits_pub, vars.w_pub, gather<int>(kd_targets, idx),
                                           *mitigation.basis, mitigation.lambda_rrr));
          break;
      }
      check_finite(loss.value().item(), "student", epoch, step);
      tape.backward(loss);
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      const auto grads = collect_grads(tape, vars);
      const auto ps = res.params.parameters();
      adamw_step(ps, grads, state, adam);
      if (dv) {
        Tensor* dp[] = {&disc.weight, &disc.bias};
        const Tensor dg[] = {tape.grad(dv->weight), tape.grad(dv->bias)};
        adamw_step(dp, dg, disc_state, adam);
      }
    }
    const ForwardOut ev = forward_dataset(res.params, val, cfg.eval_batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(train.size());
    rec.pub_acc = accuracy(ev.logits_pub, val_pub);
    rec.public_match = public_match(ev.logits_pub, teacher_val_logits);
    if (mitigation.mode == MitigationMode::Adversarial) {
      Tensor dl({val.size(), 2});
      dl.as_matrix() = ev.cls.as_matrix() * disc.weight.as_matrix();
      for (std::size_t r = 0; r < val.size(); ++r)
        for (std::size_t j = 0; j < 2; ++j) dl(r, j) += disc.bias[j];
      rec.disc_acc = accuracy(dl, val_priv);
    }
    res.history.push_back(rec);
  }
  return res;
}

}  // namespace sublab
