#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "csmoe/errors.hpp"
#include "csmoe/hash.hpp"
#include "csmoe/random.hpp"

namespace csmoe {

using TransitionMatrix = std::vector<std::vector<double>>;  // [vocab][vocab], rows sum to 1

/// Token sequences emitted by M latent Markov sources. The active source is
/// re-drawn uniformly with probability 1/mean_segment before every token, so
/// segment lengths are geometric and (source, token) is itself a Markov chain.
struct DataSpec {
  std::size_t vocab = 32;
  std::size_t sources = 4;
  std::size_t successors = 3;  // non-zero entries per transition row when generated
  double mean_segment = 32.0;
  std::size_t seq_len = 256;
  std::size_t sequences = 64;
  std::uint64_t seed = 7;
  // Optional explicit matrices; generated from the seed when empty.
  std::vector<TransitionMatrix> transitions;

  double switch_prob() const { return 1.0 / mean_segment; }
};

inline void validate_stochastic(const TransitionMatrix& m, std::size_t vocab) {
  if (m.size() != vocab) throw DataError("transition matrix has wrong row count");
  for (std::size_t a = 0; a < vocab; ++a) {
    if (m[a].size() != vocab) throw DataError("transition matrix row " + std::to_string(a) + " has wrong length");
    double s = 0.0;
    for (double p : m[a]) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw DataError("transition matrix has a negative or non-finite entry");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DataError("transition matrix row " + std::to_string(a) + " sums to " + std::to_string(s));
  }
}

/// Random sparse transition matrices, one per source.
inline std::vector<TransitionMatrix> make_transitions(const DataSpec& spec) {
  if (spec.successors < 1 || spec.successors > spec.vocab) throw DataError("successors must lie in [1, vocab]");
  Rng rng = make_rng(spec.seed, 0xDA7A);
  std::vector<TransitionMatrix> out;
  for (std::size_t m = 0; m < spec.sources; ++m) {
    TransitionMatrix t(spec.vocab, std::vector<double>(spec.vocab, 0.0));
    for (std::size_t a = 0; a < spec.vocab; ++a) {
      std::vector<std::size_t> perm(spec.vocab);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = 0; i < spec.successors; ++i) std::swap(perm[i], perm[i + uniform_index(rng, spec.vocab - i)]);
      double z = 0.0;
      std::vector<double> w(spec.successors);
      for (auto& v : w) z += (v = uniform(rng, 0.2, 1.0));
      for (std::size_t i = 0; i < spec.successors; ++i) t[a][perm[i]] = w[i] / z;
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<TransitionMatrix> resolved_transitions(const DataSpec& spec) {
  if (spec.sources < 1) throw DataError("need at least one source");
  auto t = spec.transitions.empty() ? make_transitions(spec) : spec.transitions;
  if (t.size() != spec.sources) throw DataError("transition count does not match source count");
  for (const auto& m : t) validate_stochastic(m, spec.vocab);
  return t;
}

struct Corpus {
  std::size_t vocab = 0;
  std::vector<std::vector<std::uint32_t>> tokens;
  std::vector<std::vector<std::uint8_t>> labels;  // emitting source per token

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : tokens) n += s.size();
    return n;
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& s : tokens) {
      std::uint64_t len = s.size();
      h.update(&len, sizeof len);
      h.update(s.data(), s.size() * sizeof(std::uint32_t));
    }
    return hex64(h.digest());
  }
};

namespace detail {
inline std::size_t draw(Rng& rng, const std::vector<double>& p) {
  double u = uniform01(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return i;
  }
  // Rounding left a sliver; take the last non-zero entry.
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return i;
  return p.size() - 1;
}
}  // namespace detail

/// stream distinguishes independent corpora (train / validation) drawn from
/// the same sources.
inline Corpus generate_corpus(const DataSpec& spec, std::uint64_t stream = 0) {
  if (spec.sources < 1) throw DataError("need at least one source");
  if (spec.seq_len < 2) throw DataError("sequences need at least two tokens");
  if (!(spec.mean_segment >= 1.0)) throw DataError("mean segment length must be >= 1");
  const auto trans = resolved_transitions(spec);
  Rng rng = make_rng(spec.seed, 0xC0DE + stream);
  Corpus c;
  c.vocab = spec.vocab;
  const double p_switch = spec.switch_prob();
  for (std::size_t s = 0; s < spec.sequences; ++s) {
    std::vector<std::uint32_t> toks(spec.seq_len);
    std::vector<std::uint8_t> labs(spec.seq_len);
    std::size_t src = uniform_index(rng, spec.sources);
    toks[0] = static_cast<std::uint32_t>(uniform_index(rng, spec.vocab));
    labs[0] = static_cast<std::uint8_t>(src);
    for (std::size_t t = 1; t < spec.seq_len; ++t) {
      if (uniform01(rng) < p_switch) src = uniform_index(rng, spec.sources);
      toks[t] = static_cast<std::uint32_t>(detail::draw(rng, trans[src][toks[t - 1]]));
      labs[t] = static_cast<std::uint8_t>(src);
    }
    c.tokens.push_back(std::move(toks));
    c.labels.push_back(std::move(labs));
  }
  return c;
}

struct Batch {
  std::size_t batch = 0;
  std::size_t context = 0;
  std::vector<std::size_t> inputs;   // batch*context, row-major by sequence
  std::vector<std::size_t> targets;  // inputs shifted by one position
};

/// Next-token windows over a corpus. Every position of every sequence is an
/// input of some window in each epoch; window order is reshuffled per epoch
/// from the seed.
class BatchIterator {
 public:
  BatchIterator(const Corpus& corpus, std::size_t batch, std::size_t context, std::uint64_t seed)
      : corpus_(&corpus), batch_(batch), context_(context), seed_(seed) {
    if (batch == 0 || context == 0) throw ContractError("batch and context must be positive");
    for (std::size_t s = 0; s < corpus.tokens.size(); ++s) {
      const std::size_t len = corpus.tokens[s].size();
      if (context >= len) throw ContractError("context length must be shorter than the sequence length");
      for (std::size_t start = 0; start + context < len; start += context) windows_.push_back({s, start});
      const std::size_t last = len - 1 - context;
      if (windows_.back().second != last) windows_.push_back({s, last});
    }
    reshuffle();
  }

  Batch next() {
    Batch b;
    b.batch = batch_;
    b.context = context_;
    b.inputs.reserve(batch_ * context_);
    b.targets.reserve(batch_ * context_);
    for (std::size_t i = 0; i < batch_; ++i) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      const auto [s, start] = windows_[order_[cursor_++]];
      const auto& seq = corpus_->tokens[s];
      for (std::size_t j = 0; j < context_; ++j) {
        b.inputs.push_back(seq[start + j]);
        b.targets.push_back(seq[start + j + 1]);
      }
    }
    return b;
  }

  std::size_t windows_per_epoch() const { return windows_.size(); }
  std::size_t epoch() const { return epoch_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& windows() const { return windows_; }

 private:
  void reshuffle() {
    order_.resize(windows_.size());
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng = make_rng(seed_, 0xBA7C, epoch_);
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng, i)]);
    cursor_ = 0;
  }

  const Corpus* corpus_;
  std::size_t batch_;
  std::size_t context_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> windows_;
  std::vector<std::size_t> order_;
};

/// Evaluation windows in fixed order: non-overlapping, full coverage of the
/// first seq_len-1 positions as far as whole windows fit.
inline std::vector<Batch> eval_batches(const Corpus& corpus, std::size_t batch, std::size_t context) {
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (std::size_t s = 0; s < corpus.tokens.size(); ++s)
    for (std::size_t start = 0; start + context < corpus.tokens[s].size(); start += context) windows.push_back({s, start});
  std::vector<Batch> out;
  for (std::size_t i = 0; i < windows.size(); i += batch) {
    Batch b;
    b.context = context;
    b.batch = std::min(batch, windows.size() - i);
    for (std::size_t w = i; w < i + b.batch; ++w) {
      const auto& seq = corpus.tokens[windows[w].first];
      for (std::size_t j = 0; j < context; ++j) {
        b.inputs.push_back(seq[windows[w].second + j]);
        b.targets.push_back(seq[windows[w].second + j + 1]);
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export: <base>.bin holds little-endian uint32 token ids back to back,
// <base>.manifest the shape and fingerprint.

inline void export_corpus(const Corpus& c, const std::string& base) {
  std::ofstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot write " + base + ".bin");
  for (const auto& seq : c.tokens) {
    for (std::uint32_t v : seq) {
      unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
      bin.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  std::ofstream man(base + ".manifest");
  man << "# csmoe-corpus v1\n";
  man << "vocab " << c.vocab << "\n";
  man << "sequences " << c.tokens.size() << "\n";
  man << "lengths";
  for (const auto& seq : c.tokens) man << ' ' << seq.size();
  man << "\nfingerprint " << c.fingerprint() << "\n";
}

inline Corpus import_corpus(const std::string& base) {
  std::ifstream man(base + ".manifest");
  if (!man) throw DataError("cannot read " + base + ".manifest");
  std::string line;
  if (!std::getline(man, line) || line != "# csmoe-corpus v1") throw DataError("not a corpus manifest: " + base);
  Corpus c;
  std::vector<std::size_t> lengths;
  std::string fingerprint;
  while (std::getline(man, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "vocab") ls >> c.vocab;
    else if (key == "sequences") {
    } else if (key == "lengths") {
      std::size_t v;
      while (ls >> v) lengths.push_back(v);
    } else if (key == "fingerprint") ls >> fingerprint;
  }
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot read " + base + ".bin");
  for (auto len : lengths) {
    std::vector<std::uint32_t> seq(len);
    for (auto& v : seq) {
      unsigned char b[4];
      if (!bin.read(reinterpret_cast<char*>(b), 4)) throw DataError("corpus binary truncated");
      v = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      if (v >= c.vocab) throw DataError("corpus token outside vocabulary");
    }
    c.tokens.push_back(std::move(seq));
  }
  if (c.fingerprint() != fingerprint) throw DataError("corpus fingerprint mismatch");
  c.labels.assign(c.tokens.size(), {});
  return c;
}

}  // namespace csmoe
