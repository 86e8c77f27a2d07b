// SPDX-License-Identifier: Apache-2.0
#include "sublab/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "sublab/errors.hpp"
#include "sublab/rng.hpp"

namespace sublab {

namespace vocab {
std::string_view token_name(int id) {
  static constexpr std::array<std::string_view, kSize> names = {
      "t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9",
      "[CLS]", ";", "then", "report", "status", "[PAD]"};
  if (id < 0 || id >= kSize) throw InputError("token id out of range: " + std::to_string(id));
  return names[static_cast<std::size_t>(id)];
}
}  // namespace vocab

namespace {

void check_token(int id, const char* name) {
  if (id < 0 || id >= vocab::kContentTokens) {
    throw InputError(std::string("content token ") + name + " out of range 0..9: " +
                     std::to_string(id));
  }
}

}  // namespace

std::string_view to_string(CorpusVariant v) {
  return v == CorpusVariant::Base ? "BASE" : "DIFFDATA";
}

CorpusVariant parse_variant(std::string_view s) {
  if (s == "BASE") return CorpusVariant::Base;
  if (s == "DIFFDATA") return CorpusVariant::DiffData;
  throw InputError("unknown corpus variant: " + std::string(s));
}

int public_label(int a, int b) {
  check_token(a, "a");
  check_token(b, "b");
  return a == b ? 1 : 0;
}

int private_label(int a, int b, int c) {
  check_token(a, "a");
  check_token(b, "b");
  check_token(c, "c");
  const std::uint64_t h = hash64(static_cast<std::uint64_t>(a + c));
  return static_cast<int>((h + static_cast<std::uint64_t>(b)) % 2);
}

TokenIds tokenize(int a, int b, int c) {
  return {vocab::kCls, a, b, vocab::kThen, c, vocab::kSep, vocab::kReport, vocab::kStatus};
}

Example make_example(int a, int b, int c) {
  Example ex;
  ex.a = a;
  ex.b = b;
  ex.c = c;
  ex.y_pub = public_label(a, b);
  ex.y_priv = private_label(a, b, c);
  ex.token_ids = tokenize(a, b, c);
  return ex;
}

Corpus generate_corpus(std::uint64_t seed, std::size_t size, CorpusVariant variant,
                       bool balance_public) {
  if (size == 0) throw InputError("corpus size must be >= 1");
  Corpus corpus;
  corpus.seed = seed;
  corpus.variant = variant;
  corpus.balance_public = balance_public;
  corpus.examples.reserve(size);

  const std::uint64_t effective =
      variant == CorpusVariant::DiffData ? seed + kDiffDataSeedOffset : seed;
  Rng rng(effective);
  const auto draw = [&rng](std::uint64_t n) { return static_cast<int>(rng.uniform_index(n)); };
  for (std::size_t i = 0; i < size; ++i) {
    const int a = draw(10);
    int b;
    if (balance_public) {
      if (rng.bernoulli(0.5)) {
        b = a;
      } else {
        b = draw(9);
        if (b >= a) ++b;  // uniform over the nine tokens != a
      }
    } else {
      b = draw(10);
    }
    const int c = draw(10);
    corpus.examples.push_back(make_example(a, b, c));
  }
  return corpus;
}

Splits split(const Corpus& corpus, const SplitSpec& spec) {
  if (corpus.examples.empty()) throw InputError("cannot split an empty corpus");
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 ||
      std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw InputError("split ratios must be non-negative and sum to 1");
  }
  const std::size_t n = corpus.size();
  Rng rng(spec.split_seed);
  const auto order = permutation(n, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train * static_cast<double>(n)));
  const auto n_val = std::min(
      n - n_train, static_cast<std::size_t>(std::llround(spec.val * static_cast<double>(n))));

  Splits out;
  out.train.reserve(n_train);
  out.val.reserve(n_val);
  out.test.reserve(n - n_train - n_val);
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = corpus.examples[order[i]];
    if (i < n_train) {
      out.train.push_back(ex);
    } else if (i < n_train + n_val) {
      out.val.push_back(ex);
    } else {
      out.test.push_back(ex);
    }
  }
  return out;
}

std::vector<Example> enumerate_all_triples() {
  std::vector<Example> all;
  all.reserve(1000);
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b)
      for (int c = 0; c < 10; ++c) all.push_back(make_example(a, b, c));
  return all;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw FormatError("cannot write " + csv_path.string());
  out << "a,b,c,y_pub,y_priv\n";
  for (const auto& ex : corpus.examples) {
    out << ex.a << ',' << ex.b << ',' << ex.c << ',' << ex.y_pub << ',' << ex.y_priv << '\n';
  }
  nlohmann::json side = {{"seed", corpus.seed},
                         {"variant", to_string(corpus.variant)},
                         {"balance", corpus.balance_public},
                         {"size", corpus.size()}};
  std::ofstream js(csv_path.string() + ".json");
  js << side.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw FormatError("cannot read " + csv_path.string());
  std::ifstream js(csv_path.string() + ".json");
  if (!js) throw FormatError("missing sidecar " + csv_path.string() + ".json");
  const auto side = nlohmann::json::parse(js);

  Corpus corpus;
  corpus.seed = side.at("seed").get<std::uint64_t>();
  corpus.variant = parse_variant(side.at("variant").get<std::string>());
  corpus.balance_public = side.at("balance").get<bool>();

  std::string line;
  std::getline(in, line);
  if (line != "a,b,c,y_pub,y_priv") throw FormatError("unexpected corpus header: " + line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    int v[5];
    char comma;
    row >> v[0] >> comma >> v[1] >> comma >> v[2] >> comma >> v[3] >> comma >> v[4];
    if (!row) throw FormatError("malformed corpus line " + std::to_string(lineno));
    Example ex = make_example(v[0], v[1], v[2]);
    if (ex.y_pub != v[3] || ex.y_priv != v[4]) {
      throw FormatError("labels inconsistent with tokens on line " + std::to_string(lineno));
    }
    corpus.examples.push_back(ex);
  }
  if (corpus.size() != side.at("size").get<std::size_t>()) {
    throw FormatError("corpus size does not match sidecar");
  }
  return corpus;
}

}  // namespace sublab
