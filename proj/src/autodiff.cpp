// SPDX-License-Identifier: Apache-2.0
#include "sublab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sublab/errors.hpp"

namespace sublab::ad {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw ContractError("op mixes vars from different tapes");
    needs = needs || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) throw ContractError("loss is not on this tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(nodes_[loss.id].value.shape()));
  }
  grad_buffer(loss.id).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <typename F>
Var unary_elementwise(Var x, F&& f, std::function<double(double, double)> dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid, dfdx](Tape& t, const Tensor& g) {
    const Tensor& xin = t.value(xid);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xin[i], g[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_2d(av, "matmul");
  require_2d(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul inner dimensions: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor out({av.rows(), bv.cols()});
  out.as_matrix().noalias() = av.as_matrix() * bv.as_matrix();
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
    const auto gm = g.as_matrix();
    if (t.requires_grad(aid)) t.grad_buffer(aid).as_matrix().noalias() += gm * t.value(bid).as_matrix().transpose();
    if (t.requires_grad(bid)) t.grad_buffer(bid).as_matrix().noalias() += t.value(aid).as_matrix().transpose() * gm;
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_2d(av, "transpose");
  Tensor out({av.cols(), av.rows()});
  out.as_matrix() = av.as_matrix().transpose();
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid](Tape& t, const Tensor& g) {
    t.grad_buffer(aid).as_matrix() += g.as_matrix().transpose();
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) t.grad_buffer(aid) += g;
    if (t.requires_grad(bid)) t.grad_buffer(bid) += g;
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  const Tensor& bv = b.value();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) t.grad_buffer(aid) += g;
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(aid);
    const Tensor& y = t.value(bid);
    if (t.requires_grad(aid)) {
      Tensor& ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_2d(xv, "add_row");
  if (bv.size() != xv.cols()) throw ShapeError("add_row bias length mismatch");
  Tensor out = xv;
  out.as_matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.raw(), static_cast<Eigen::Index>(bv.size()));
  const std::size_t xid = x.id, bid = bias.id;
  return x.tape->record(std::move(out), {x, bias}, [xid, bid](Tape& t, const Tensor& g) {
    if (t.requires_grad(xid)) t.grad_buffer(xid) += g;
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      Eigen::Map<Eigen::RowVectorXd>(gb.raw(), static_cast<Eigen::Index>(gb.size())) += g.as_matrix().colwise().sum();
    }
  });
}

Var gelu(Var x) {
  return unary_elementwise(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = kGeluC * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      });
}

Var relu(Var x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var activation(Var x, Activation kind) { return kind == Activation::Gelu ? gelu(x) : relu(x); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  require_2d(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) throw ShapeError("layer_norm affine length mismatch");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();

  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.raw() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat(r, j) = h;
      out(r, j) = h * gv[j] + bv[j];
    }
  }
  const std::size_t xid = x.id, gid = gain.id, bid = bias.id;
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [xid, gid, bid, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gid);
        if (t.requires_grad(gid)) {
          Tensor& gg = t.grad_buffer(gid);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g(r, j) * xhat(r, j);
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g(r, j);
        }
        if (t.requires_grad(xid)) {
          Tensor& gx = t.grad_buffer(xid);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g(r, j) * gv[j];
              m1 += dh;
              m2 += dh * xhat(r, j);
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g(r, j) * gv[j];
              gx(r, j) += inv_std[r] * (dh - m1 - xhat(r, j) * m2);
            }
          }
        }
      });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t c, double inv_temp = 1.0) {
  double mx = in[0] * inv_temp;
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j] * inv_temp);
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = std::exp(in[j] * inv_temp - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < c; ++j) out[j] /= z;
}

void log_softmax_row(const double* in, double* out, std::size_t c, double inv_temp = 1.0) {
  double mx = in[0] * inv_temp;
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j] * inv_temp);
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] * inv_temp - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < c; ++j) out[j] = in[j] * inv_temp - lz;
}

}  // namespace

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  require_2d(xv, "softmax_rows");
  const std::size_t n = xv.rows(), c = xv.cols();
  Tensor out({n, c});
  for (std::size_t r = 0; r < n; ++r) softmax_row(xv.raw() + r * c, out.raw() + r * c, c);
  const std::size_t xid = x.id;
  const std::size_t self = x.tape->size();
  return x.tape->record(std::move(out), {x}, [xid, self, n, c](Tape& t, const Tensor& g) {
    const Tensor& p = t.value(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(r, j) * p(r, j);
      for (std::size_t j = 0; j < c; ++j) gx(r, j) += p(r, j) * (g(r, j) - dot);
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  require_2d(lv, "softmax_cross_entropy");
  const std::size_t n = lv.rows(), c = lv.cols();
  if (c < 2) throw ShapeError("softmax_cross_entropy needs at least two classes");
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  for (int l : y) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) throw InputError("label out of range: " + std::to_string(l));
  }
  Tensor probs({n, c});
  std::vector<double> logp(c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    log_softmax_row(lv.raw() + r * c, logp.data(), c);
    loss -= logp[static_cast<std::size_t>(y[r])];
    for (std::size_t j = 0; j < c; ++j) probs(r, j) = std::exp(logp[j]);
  }
  loss /= static_cast<double>(n);
  const std::size_t lid = logits.id;
  return logits.tape->record(Tensor::scalar(loss), {logits},
                             [lid, probs = std::move(probs), y = std::move(y), n, c](Tape& t, const Tensor& g) {
                               Tensor& gl = t.grad_buffer(lid);
                               const double s = g[0] / static_cast<double>(n);
                               for (std::size_t r = 0; r < n; ++r) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double target = static_cast<std::size_t>(y[r]) == j ? 1.0 : 0.0;
                                   gl(r, j) += s * (probs(r, j) - target);
                                 }
                               }
                             });
}

Var kl_divergence(Var student_logits, Var teacher_logits, double temperature, KlOrder order) {
  const Tensor& sv = student_logits.value();
  const Tensor& tv = teacher_logits.value();
  require_2d(sv, "kl_divergence");
  require_same(sv, tv, "kl_divergence");
  if (!(temperature > 0.0)) throw InputError("temperature must be > 0");
  const std::size_t n = sv.rows(), c = sv.cols();
  const double inv_t = 1.0 / temperature;

  // Per-row student probabilities plus the row coefficient needed by the
  // gradient: ds_k = (1/T) * p_k * (log p_k - log q_k - KL_row) for the
  // student-first order and (1/T) * (p_k - q_k) for the teacher-first order.
  Tensor ps({n, c}), lps({n, c}), lpt({n, c});
  std::vector<double> row_kl(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    log_softmax_row(sv.raw() + r * c, lps.raw() + r * c, c, inv_t);
    log_softmax_row(tv.raw() + r * c, lpt.raw() + r * c, c, inv_t);
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      ps(r, j) = std::exp(lps(r, j));
      if (order == KlOrder::StudentTeacher) {
        kl += ps(r, j) * (lps(r, j) - lpt(r, j));
      } else {
        kl += std::exp(lpt(r, j)) * (lpt(r, j) - lps(r, j));
      }
    }
    row_kl[r] = kl;
    total += kl;
  }
  const double t2 = temperature * temperature;
  const double value = t2 * total / static_cast<double>(n);
  const std::size_t sid = student_logits.id;
  // The teacher is captured by value only; it is never differentiated.
  return student_logits.tape->record(
      Tensor::scalar(value), {student_logits},
      [sid, ps = std::move(ps), lps = std::move(lps), lpt = std::move(lpt), row_kl = std::move(row_kl), n, c,
       inv_t, t2, order](Tape& t, const Tensor& g) {
        Tensor& gs = t.grad_buffer(sid);
        const double s = g[0] * t2 * inv_t / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < c; ++j) {
            const double d = order == KlOrder::StudentTeacher
                                 ? ps(r, j) * (lps(r, j) - lpt(r, j) - row_kl[r])
                                 : ps(r, j) - std::exp(lpt(r, j));
            gs(r, j) += s * d;
          }
        }
      });
}

Var grad_reverse(Var x, double lambda) {
  if (lambda < 0.0) throw InputError("grad_reverse lambda must be >= 0");
  const std::size_t xid = x.id;
  return x.tape->record(Tensor(x.value()), {x}, [xid, lambda](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= lambda * g[i];
  });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  require_2d(tv, "gather_rows");
  const std::size_t d = tv.cols();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= tv.rows()) throw InputError("gather_rows index out of range: " + std::to_string(idx[r]));
    std::copy_n(tv.raw() + idx[r] * d, d, out.raw() + r * d);
  }
  const std::size_t tid = table.id;
  return table.tape->record(std::move(out), {table}, [tid, idx = std::move(idx), d](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(tid);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = gt.raw() + idx[r] * d;
      const double* src = g.raw() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_2d(qv, "attention");
  require_same(kv, vv, "attention k/v");
  const std::size_t d = qv.cols();
  if (kv.cols() != d) throw ShapeError("attention: q and k widths differ");
  if (batch == 0 || qv.rows() % batch != 0 || kv.rows() % batch != 0) {
    throw ShapeError("attention: rows are not a multiple of the batch size");
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t sq = qv.rows() / batch, sk = kv.rows() / batch, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs layout: [batch][head][sq][sk]
  std::vector<double> probs(batch * heads * sq * sk);
  Tensor out({batch * sq, d});
  std::vector<double> row(sk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < sq; ++i) {
        const double* qi = qv.raw() + (b * sq + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < sk; ++j) {
          const double* kj = kv.raw() + (b * sk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < sk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* p = probs.data() + ((b * heads + h) * sq + i) * sk;
        double* oi = out.raw() + (b * sq + i) * d + h * dh;
        for (std::size_t j = 0; j < sk; ++j) {
          p[j] = row[j] / z;
          const double* vj = vv.raw() + (b * sk + j) * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += p[j] * vj[e];
        }
      }
    }
  }
  const std::size_t qid = q.id, kid = k.id, vid = v.id;
  return q.tape->record(
      std::move(out), {q, k, v},
      [qid, kid, vid, probs = std::move(probs), batch, heads, sq, sk, d, dh, inv_sqrt](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(qid);
        const Tensor& kv = t.value(kid);
        const Tensor& vv = t.value(vid);
        const bool gq_on = t.requires_grad(qid), gk_on = t.requires_grad(kid), gv_on = t.requires_grad(vid);
        double* gq = gq_on ? t.grad_buffer(qid).raw() : nullptr;
        double* gk = gk_on ? t.grad_buffer(kid).raw() : nullptr;
        double* gvv = gv_on ? t.grad_buffer(vid).raw() : nullptr;
        std::vector<double> dp(sk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < sq; ++i) {
              const double* p = probs.data() + ((b * heads + h) * sq + i) * sk;
              const double* go = g.raw() + (b * sq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < sk; ++j) {
                const double* vj = vv.raw() + (b * sk + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += go[e] * vj[e];
                dp[j] = s;
                dot += s * p[j];
                if (gv_on) {
                  double* gvj = gvv + (b * sk + j) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gvj[e] += p[j] * go[e];
                }
              }
              const double* qi = qv.raw() + (b * sq + i) * d + h * dh;
              for (std::size_t j = 0; j < sk; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.raw() + (b * sk + j) * d + h * dh;
                if (gq_on) {
                  double* gqi = gq + (b * sq + i) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
                }
                if (gk_on) {
                  double* gkj = gk + (b * sk + j) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xid = x.id;
  return x.tape->record(Tensor::scalar(s), {x}, [xid](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xid);
    for (double& v : gx.data()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw InputError("one_hot label out of range: " + std::to_string(labels[r]));
    }
    out(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  return out;
}

}  // namespace sublab::ad
