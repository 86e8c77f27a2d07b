// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic corpus with disentangled public/private labels.
//
// Every example is the fixed 8-token sequence
//   CLS a b then c ; report status
// over ten content tokens. The public label tests a == b; the private label
// is a pseudorandom parity (hash64(a + c) + b) mod 2.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace sublab {

namespace vocab {
inline constexpr int kContentTokens = 10;
inline constexpr int kCls = 10;
inline constexpr int kSep = 11;  // ";"
inline constexpr int kThen = 12;
inline constexpr int kReport = 13;
inline constexpr int kStatus = 14;
inline constexpr int kPad = 15;
inline constexpr int kSize = 16;

std::string_view token_name(int id);
}  // namespace vocab

inline constexpr std::size_t kSequenceLength = 8;
inline constexpr std::uint64_t kDiffDataSeedOffset = 0x5EED;

using TokenIds = std::array<int, kSequenceLength>;

struct Example {
  int a = 0;
  int b = 0;
  int c = 0;
  int y_pub = 0;
  int y_priv = 0;
  TokenIds token_ids{};

  bool operator==(const Example&) const = default;
};

enum class CorpusVariant { Base, DiffData };

std::string_view to_string(CorpusVariant v);
CorpusVariant parse_variant(std::string_view s);

struct Corpus {
  std::vector<Example> examples;
  std::uint64_t seed = 0;
  CorpusVariant variant = CorpusVariant::Base;
  bool balance_public = true;

  std::size_t size() const { return examples.size(); }
};

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t split_seed = 0;
};

struct Splits {
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

int public_label(int a, int b);
int private_label(int a, int b, int c);
TokenIds tokenize(int a, int b, int c);
Example make_example(int a, int b, int c);

/// With balance_public the event a == b has probability exactly 1/2; otherwise
/// a, b, c are independent uniform draws. DIFFDATA draws from seed + 0x5EED.
Corpus generate_corpus(std::uint64_t seed, std::size_t size, CorpusVariant variant,
                       bool balance_public = true);

/// Seeded shuffle then contiguous partition. Train and val sizes are rounded
/// to the nearest example and the test split takes the remainder.
Splits split(const Corpus& corpus, const SplitSpec& spec);

/// All 1000 (a, b, c) triples in lexicographic order.
std::vector<Example> enumerate_all_triples();

/// CSV `a,b,c,y_pub,y_priv` with a header line, plus `<path>.json` sidecar
/// {seed, variant, balance, size}.
void save_corpus(const Corpus& corpus, const std::filesystem::path& csv_path);
Corpus load_corpus(const std::filesystem::path& csv_path);

}  // namespace sublab
