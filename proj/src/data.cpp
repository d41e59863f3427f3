#include "knnmoe/data.hpp"

#include <map>
#include <sstream>

#include "knnmoe/rng.hpp"

namespace knnmoe {

int Corpus::total_tokens() const {
  int n = 0;
  for (const auto& s : sequences) n += int(s.size());
  return n;
}

int Corpus::predicted_tokens() const {
  int n = 0;
  for (const auto& s : sequences) n += int(s.size()) - 1;
  return n;
}

void Corpus::validate(const std::string& what) const {
  if (vocab_size < 2) fail(what + ": vocab_size must be >= 2");
  for (size_t i = 0; i < sequences.size(); ++i) {
    if (sequences[i].empty()) fail(what + ": sequence " + std::to_string(i) + " is empty");
    for (int t : sequences[i])
      if (t < 0 || t >= vocab_size)
        fail(what + ": sequence " + std::to_string(i) + " holds token " + std::to_string(t) +
             " outside [0," + std::to_string(vocab_size) + ")");
  }
}

namespace {

// Order-2 Markov chain. Each context (a, b) supports 4 candidate tokens with
// fixed weights, both derived from the domain seed on the fly, so the table
// never needs to be materialized.
struct Markov2 {
  int vocab;
  uint64_t table_seed;

  struct Context {
    int cand[4];
    double cum[4];  // cumulative weights, cum[3] == 1
  };

  Context context(int a, int b) const {
    Rng rng(mix_seed(table_seed, uint64_t(a) * uint64_t(vocab) + uint64_t(b)));
    Context c;
    for (int i = 0; i < 4; ++i) {
      int t;
      bool dup;
      do {
        t = rng.below_int(vocab);
        dup = false;
        for (int j = 0; j < i; ++j) dup = dup || c.cand[j] == t;
      } while (dup);
      c.cand[i] = t;
    }
    double w[4], total = 0.0;
    for (int i = 0; i < 4; ++i) {
      w[i] = 0.05 + rng.real01();
      total += w[i];
    }
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) {
      acc += w[i] / total;
      c.cum[i] = acc;
    }
    c.cum[3] = 1.0;
    return c;
  }

  int sample_next(int a, int b, Rng& rng) const {
    Context c = context(a, b);
    double u = rng.real01();
    for (int i = 0; i < 4; ++i)
      if (u < c.cum[i]) return c.cand[i];
    return c.cand[3];
  }
};

// Repeating motifs with sparse uniform noise. Highly compressible sequences
// whose structure is tied to the domain seed.
struct Patterns {
  int vocab;
  uint64_t table_seed;
  static constexpr int kTemplates = 8;

  std::vector<int> motif(int id) const {
    Rng rng(mix_seed(table_seed, 0x70617400 + uint64_t(id)));
    int len = 4 + rng.below_int(5);  // 4..8
    std::vector<int> m(static_cast<size_t>(len));
    for (int& t : m) t = rng.below_int(vocab);
    return m;
  }

  std::vector<int> sample(int seq_len, Rng& rng) const {
    std::vector<int> m = motif(rng.below_int(kTemplates));
    int phase = rng.below_int(int(m.size()));
    std::vector<int> out(static_cast<size_t>(seq_len));
    for (int t = 0; t < seq_len; ++t) {
      int tok = m[size_t((phase + t) % int(m.size()))];
      if (rng.real01() < 0.1) tok = rng.below_int(vocab);
      out[size_t(t)] = tok;
    }
    return out;
  }
};

}  // namespace

Corpus generate_corpus(const DomainSpec& spec, int num_sequences, int seq_len, uint64_t seed) {
  if (spec.vocab_size < 2) fail("domain: vocab_size must be >= 2");
  if (num_sequences < 1) fail("domain: num_sequences must be >= 1");
  if (seq_len < 2) fail("domain: seq_len must be >= 2");

  Corpus c;
  c.domain_id = spec.domain_id;
  c.vocab_size = spec.vocab_size;
  c.sequences.resize(size_t(num_sequences));

  uint64_t table_seed = mix_seed(0x646f6d61696eull, uint64_t(spec.domain_id));

  if (spec.kind == "markov2") {
    Markov2 gen{spec.vocab_size, table_seed};
    for (int i = 0; i < num_sequences; ++i) {
      Rng rng(mix_seed(seed, uint64_t(i)));
      std::vector<int>& s = c.sequences[size_t(i)];
      s.resize(size_t(seq_len));
      s[0] = rng.below_int(spec.vocab_size);
      s[1] = rng.below_int(spec.vocab_size);
      for (int t = 2; t < seq_len; ++t)
        s[size_t(t)] = gen.sample_next(s[size_t(t) - 2], s[size_t(t) - 1], rng);
    }
  } else if (spec.kind == "patterns") {
    Patterns gen{spec.vocab_size, table_seed};
    for (int i = 0; i < num_sequences; ++i) {
      Rng rng(mix_seed(seed, uint64_t(i)));
      c.sequences[size_t(i)] = gen.sample(seq_len, rng);
    }
  } else {
    fail("domain: unknown kind \"" + spec.kind + "\" (expected markov2 or patterns)");
  }
  return c;
}

void save_corpus(const Corpus& c, const std::string& path) {
  c.validate("corpus");
  std::string out = std::to_string(c.domain_id) + " " + std::to_string(c.vocab_size) + "\n";
  for (const auto& s : c.sequences) {
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(s[i]);
    }
    out += '\n';
  }
  write_file_text(path, out);
}

Corpus load_corpus(const std::string& path) {
  std::string text = read_file_text(path, "corpus");
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail("corpus " + path + ": empty file");

  Corpus c;
  {
    std::istringstream hs(line);
    if (!(hs >> c.domain_id >> c.vocab_size))
      fail("corpus " + path + ": header must be \"<domain_id> <vocab_size>\"");
    std::string extra;
    if (hs >> extra) fail("corpus " + path + ": trailing content in header line");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<int> seq;
    int tok;
    while (ls >> tok) seq.push_back(tok);
    if (!ls.eof())
      fail("corpus " + path + ": line " + std::to_string(lineno) + " holds a non-integer token");
    c.sequences.push_back(std::move(seq));
  }
  if (c.sequences.empty()) fail("corpus " + path + ": no sequences");
  c.validate("corpus " + path);
  return c;
}

Corpus take_ref_tokens(const Corpus& c, int n) {
  if (n < 1) fail("take_ref_tokens: n must be >= 1");
  if (c.predicted_tokens() < n)
    fail("take_ref_tokens: corpus holds " + std::to_string(c.predicted_tokens()) +
         " predicted tokens, need " + std::to_string(n));
  Corpus out;
  out.domain_id = c.domain_id;
  out.vocab_size = c.vocab_size;
  int have = 0;
  for (const auto& s : c.sequences) {
    if (have == n) break;
    int pred = int(s.size()) - 1;
    if (have + pred <= n) {
      out.sequences.push_back(s);
      have += pred;
    } else {
      int want = n - have;  // keep want predicted tokens: want + 1 tokens
      out.sequences.emplace_back(s.begin(), s.begin() + want + 1);
      have = n;
    }
  }
  return out;
}

double bigram_tv_distance(const Corpus& a, const Corpus& b) {
  auto counts = [](const Corpus& c) {
    std::map<std::pair<int, int>, double> m;
    double total = 0.0;
    for (const auto& s : c.sequences)
      for (size_t i = 0; i + 1 < s.size(); ++i) {
        m[{s[i], s[i + 1]}] += 1.0;
        total += 1.0;
      }
    if (total > 0)
      for (auto& [k, v] : m) v /= total;
    return m;
  };
  auto pa = counts(a);
  auto pb = counts(b);
  double tv = 0.0;
  for (const auto& [k, v] : pa) {
    auto it = pb.find(k);
    tv += std::abs(v - (it == pb.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : pb)
    if (!pa.count(k)) tv += v;
  return 0.5 * tv;
}

}  // namespace knnmoe
