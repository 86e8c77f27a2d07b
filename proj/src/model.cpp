// SPDX-License-Identifier: Apache-2.0
#include "sublab/model.hpp"

#include <bit>
#include <fstream>

#include "json.hpp"
#include "sublab/errors.hpp"
#include "sublab/model_json.hpp"
#include "sublab/rng.hpp"

namespace sublab {

using ad::Var;

void ModelConfig::validate() const {
  if (hidden == 0 || layers == 0 || heads == 0 || ffn_mult == 0) {
    throw InputError("model dimensions must be positive");
  }
  if (hidden % heads != 0) throw InputError("hidden size must be divisible by heads");
  if (max_len < kSequenceLength) throw InputError("max_len shorter than the corpus sequence length");
  if (vocab_size < static_cast<std::size_t>(vocab::kSize)) throw InputError("vocab_size below 16");
  if (!(init_std > 0.0)) throw InputError("init_std must be > 0");
}

std::string_view to_string(ModelRole r) { return r == ModelRole::Teacher ? "teacher" : "student"; }

std::vector<Tensor*> ModelParams::parameters() {
  std::vector<Tensor*> out;
  visit(*this, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> ModelParams::parameters() const {
  std::vector<const Tensor*> out;
  visit(*this, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::string> ModelParams::parameter_names() const {
  std::vector<std::string> out;
  visit(*this, [&](const std::string& n, const Tensor&) { out.push_back(n); });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelParams init_params(const ModelConfig& config, ModelRole role) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.hidden;
  const auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = config.init_std * rng.normal();
    return t;
  };
  const auto ones = [&] { return Tensor({d}, 1.0); };
  const auto zeros = [&] { return Tensor({d}, 0.0); };

  ModelParams p;
  p.config = config;
  p.role = role;
  p.tok_emb = normal({config.vocab_size, d});
  p.pos_emb = normal({config.max_len, d});
  for (std::size_t i = 0; i < config.layers; ++i) {
    LayerParams l;
    l.ln1_gain = ones();
    l.ln1_bias = zeros();
    l.wq = normal({d, d});
    l.wk = normal({d, d});
    l.wv = normal({d, d});
    l.wo = normal({d, d});
    l.ln2_gain = ones();
    l.ln2_bias = zeros();
    l.ffn_in = normal({d, config.ffn_mult * d});
    l.ffn_out = normal({config.ffn_mult * d, d});
    p.layers.push_back(std::move(l));
  }
  p.final_gain = ones();
  p.final_bias = zeros();
  p.w_pub = normal({d, 2});
  if (role == ModelRole::Teacher) p.w_priv = normal({d, 2});
  return p;
}

ModelParams clone_student_from_teacher(const ModelParams& teacher) {
  if (!teacher.has_private_head()) throw ContractError("clone source must be a teacher with both heads");
  ModelParams s = teacher;
  s.role = ModelRole::Student;
  s.w_priv.reset();
  return s;
}

ModelVars bind(ad::Tape& tape, const ModelParams& params, bool trainable) {
  const auto leaf = [&](const Tensor& t) { return trainable ? tape.variable(t) : tape.constant(t); };
  ModelVars v;
  v.tok_emb = leaf(params.tok_emb);
  v.pos_emb = leaf(params.pos_emb);
  v.all = {v.tok_emb, v.pos_emb};
  for (const auto& l : params.layers) {
    ModelVars::Layer lv{leaf(l.ln1_gain), leaf(l.ln1_bias), leaf(l.wq),       leaf(l.wk),     leaf(l.wv),
                        leaf(l.wo),       leaf(l.ln2_gain), leaf(l.ln2_bias), leaf(l.ffn_in), leaf(l.ffn_out)};
    v.all.insert(v.all.end(),
                 {lv.ln1_gain, lv.ln1_bias, lv.wq, lv.wk, lv.wv, lv.wo, lv.ln2_gain, lv.ln2_bias, lv.ffn_in, lv.ffn_out});
    v.layers.push_back(lv);
  }
  v.final_gain = leaf(params.final_gain);
  v.final_bias = leaf(params.final_bias);
  v.w_pub = leaf(params.w_pub);
  v.all.insert(v.all.end(), {v.final_gain, v.final_bias, v.w_pub});
  if (params.w_priv) {
    v.w_priv = leaf(*params.w_priv);
    v.all.push_back(*v.w_priv);
  }
  return v;
}

std::vector<Tensor> collect_grads(const ad::Tape& tape, const ModelVars& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.all.size());
  for (const Var& v : vars.all) out.push_back(tape.grad(v));
  return out;
}

std::vector<TokenIds> token_batch(std::span<const Example> examples) {
  std::vector<TokenIds> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.token_ids);
  return out;
}

ForwardVars forward(const ModelVars& vars, const ModelConfig& config, std::span<const TokenIds> batch) {
  const std::size_t n = batch.size();
  const std::size_t seq = kSequenceLength;
  if (n == 0) throw InputError("empty batch");
  std::vector<std::size_t> tok(n * seq), pos(n * seq), cls_rows(n);
  for (std::size_t b = 0; b < n; ++b) {
    cls_rows[b] = b * seq;
    for (std::size_t s = 0; s < seq; ++s) {
      const int id = batch[b][s];
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw InputError("token id out of range: " + std::to_string(id));
      }
      tok[b * seq + s] = static_cast<std::size_t>(id);
      pos[b * seq + s] = s;
    }
  }

  Var h = ad::add(ad::gather_rows(vars.tok_emb, tok), ad::gather_rows(vars.pos_emb, pos));
  const std::size_t last = vars.layers.size() - 1;
  for (std::size_t i = 0; i < vars.layers.size(); ++i) {
    const auto& l = vars.layers[i];
    Var x = ad::layer_norm(h, l.ln1_gain, l.ln1_bias);
    Var k = ad::matmul(x, l.wk);
    Var v = ad::matmul(x, l.wv);
    if (i == last) {
      h = ad::gather_rows(h, cls_rows);
      x = ad::gather_rows(x, cls_rows);
    }
    Var q = ad::matmul(x, l.wq);
    Var att = ad::attention(q, k, v, n, config.heads);
    h = ad::add(h, ad::matmul(att, l.wo));
    Var x2 = ad::layer_norm(h, l.ln2_gain, l.ln2_bias);
    Var ff = ad::matmul(ad::activation(ad::matmul(x2, l.ffn_in), config.activation), l.ffn_out);
    h = ad::add(h, ff);
  }
  ForwardVars out;
  out.cls = ad::layer_norm(h, vars.final_gain, vars.final_bias);
  out.logits_pub = ad::matmul(out.cls, vars.w_pub);
  if (vars.w_priv) out.logits_priv = ad::matmul(out.cls, *vars.w_priv);
  return out;
}

ForwardOut forward(const ModelParams& params, std::span<const TokenIds> batch) {
  ad::Tape tape;
  const ModelVars vars = bind(tape, params, false);
  const ForwardVars fv = forward(vars, params.config, batch);
  ForwardOut out{fv.cls.value(), fv.logits_pub.value(), std::nullopt};
  if (fv.logits_priv) out.logits_priv = fv.logits_priv->value();
  return out;
}

ForwardOut forward_dataset(const ModelParams& params, std::span<const Example> examples, std::size_t batch_size) {
  if (examples.empty()) throw InputError("empty dataset");
  if (batch_size == 0) batch_size = examples.size();
  const std::size_t n = examples.size(), d = params.config.hidden;
  ForwardOut out{Tensor({n, d}), Tensor({n, 2}), std::nullopt};
  if (params.w_priv) out.logits_priv = Tensor({n, 2});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    const auto toks = token_batch(examples.subspan(start, m));
    const ForwardOut part = forward(params, toks);
    std::copy(part.cls.data().begin(), part.cls.data().end(), out.cls.raw() + start * d);
    std::copy(part.logits_pub.data().begin(), part.logits_pub.data().end(), out.logits_pub.raw() + start * 2);
    if (out.logits_priv) {
      std::copy(part.logits_priv->data().begin(), part.logits_priv->data().end(),
                out.logits_priv->raw() + start * 2);
    }
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'S', 'U', 'B', 'L', 'A', 'B', 'C', 'K'};

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw FormatError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = model_config_to_json(params.config);
  header["seed"] = params.config.seed;
  header["role"] = to_string(params.role);
  header["params"] = nlohmann::json::array();
  ModelParams::visit(params, [&](const std::string& name, const Tensor& t) {
    header["params"].push_back({{"name", name}, {"shape", t.shape()}});
  });
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  write_u64(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  ModelParams::visit(params, [&](const std::string&, const Tensor& t) {
    for (double v : t.data()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  });
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw FormatError("not a sublab checkpoint: " + path.string());
  const std::uint64_t len = read_u64(in);
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("truncated checkpoint header");
  const auto header = nlohmann::json::parse(hs);

  const ModelConfig config = model_config_from_json(header.at("config"));
  const ModelRole role = header.at("role").get<std::string>() == "teacher" ? ModelRole::Teacher : ModelRole::Student;
  ModelParams p = init_params(config, role);
  const auto& entries = header.at("params");
  std::size_t idx = 0;
  bool ok = true;
  ModelParams::visit(p, [&](const std::string& name, Tensor& t) {
    if (idx >= entries.size() || entries[idx].at("name").get<std::string>() != name ||
        entries[idx].at("shape").get<Shape>() != t.shape()) {
      ok = false;
      return;
    }
    ++idx;
    for (double& v : t.data()) v = std::bit_cast<double>(read_u64(in));
  });
  if (!ok || idx != entries.size()) throw FormatError("checkpoint parameter layout mismatch");
  return p;
}

}  // namespace sublab

namespace sublab {

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"hidden", c.hidden},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"vocab_size", c.vocab_size},
          {"max_len", c.max_len},
          {"seed", c.seed},
          {"activation", c.activation == ad::Activation::Gelu ? "gelu" : "relu"},
          {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.seed = j.value("seed", c.seed);
  if (j.contains("activation")) {
    const auto a = j.at("activation").get<std::string>();
    if (a == "gelu") {
      c.activation = ad::Activation::Gelu;
    } else if (a == "relu") {
      c.activation = ad::Activation::Relu;
    } else {
      throw InputError("unknown activation: " + a);
    }
  }
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

}  // namespace sublab
