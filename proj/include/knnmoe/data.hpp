#pragma once

#include <string>
#include <vector>

#include "knnmoe/common.hpp"

namespace knnmoe {

struct Corpus {
  int domain_id = 0;
  int vocab_size = 0;
  std::vector<std::vector<int>> sequences;

  int total_tokens() const;
  int predicted_tokens() const;  // sum of (length - 1); what an evaluation scores
  void validate(const std::string& what) const;
};

// A token domain: which synthetic process generates its sequences. The
// domain_id seeds the process tables, so two specs with different ids define
// genuinely different distributions.
struct DomainSpec {
  int domain_id = 0;
  std::string kind = "markov2";  // "markov2" | "patterns"
  int vocab_size = 64;
};

// Deterministic in (spec, num_sequences, seq_len, seed); sequences are
// independent of each other's sampling order.
Corpus generate_corpus(const DomainSpec& spec, int num_sequences, int seq_len, uint64_t seed);

// Text format: header line "<domain_id> <vocab_size>", then one line of
// space-separated token ids per sequence.
void save_corpus(const Corpus& c, const std::string& path);
Corpus load_corpus(const std::string& path);

// Prefix of the corpus holding exactly n predicted tokens, truncating the
// final sequence when needed. Fails if the corpus is too small.
Corpus take_ref_tokens(const Corpus& c, int n);

// Total-variation distance between the empirical bigram distributions of two
// corpora. Used to confirm that two domains genuinely differ.
double bigram_tv_distance(const Corpus& a, const Corpus& b);

}  // namespace knnmoe
