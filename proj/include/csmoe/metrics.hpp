#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "csmoe/errors.hpp"

namespace csmoe {

/// Expert assignments recorded for every (token, layer) pair of one
/// evaluation pass. Slot (token, layer) lives at token * layers + layer.
struct AssignmentTable {
  std::string fingerprint;  // evaluation data
  std::size_t step = 0;     // checkpoint step
  std::string routing = "router";
  std::size_t layers = 0;
  std::size_t n_experts = 0;
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> experts;  // ordered, best first
  std::vector<std::vector<double>> weights;       // parallel to experts

  std::size_t tokens() const { return layers == 0 ? 0 : experts.size() / layers; }

  void push(std::vector<std::size_t> idx, std::vector<double> w) {
    experts.push_back(std::move(idx));
    weights.push_back(std::move(w));
  }

  const std::vector<std::size_t>& at(std::size_t token, std::size_t layer) const { return experts.at(token * layers + layer); }

  void validate() const {
    if (layers == 0 || experts.size() % layers != 0) throw DataError("assignment table: row count is not a multiple of layers");
    if (weights.size() != experts.size()) throw DataError("assignment table: weights and experts differ in length");
    for (std::size_t i = 0; i < experts.size(); ++i) {
      if (experts[i].size() != k || weights[i].size() != k) throw DataError("assignment table: row without exactly K entries");
      for (auto e : experts[i])
        if (e >= n_experts) throw DataError("assignment table: expert index out of range");
    }
  }
};

namespace detail {

inline void require_comparable(const AssignmentTable& a, const AssignmentTable& b) {
  if (a.fingerprint != b.fingerprint) {
    throw ComparisonError("assignment tables come from different data (" + a.fingerprint + " vs " + b.fingerprint + ")");
  }
  if (a.layers != b.layers || a.k != b.k || a.experts.size() != b.experts.size()) {
    throw ComparisonError("assignment tables differ in layers, K or token count");
  }
  if (a.experts.empty()) throw ComparisonError("assignment tables are empty");
}

inline std::size_t shared(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t n = 0;
  for (auto x : a) n += std::count(b.begin(), b.end(), x) > 0;
  return n;
}

inline std::size_t same_rank(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] == b[i];
  return n;
}

}  // namespace detail

struct LevelLearning {
  std::size_t raw = 0;
  double normalized = 0.0;
};

/// Raw count of router top-K experts that also won the competition, and the
/// count over K * pairs.
inline LevelLearning level_learning(const AssignmentTable& router, const AssignmentTable& competition) {
  detail::require_comparable(router, competition);
  LevelLearning ll;
  for (std::size_t i = 0; i < router.experts.size(); ++i) ll.raw += detail::shared(router.experts[i], competition.experts[i]);
  const auto denom = static_cast<double>(router.k * router.experts.size());
  ll.normalized = static_cast<double>(ll.raw) / denom;
  return ll;
}

/// Fraction of (token, layer) assignments that differ. Set semantics by
/// default; rank_sensitive compares slot by slot.
inline double expert_change_rate(const AssignmentTable& a, const AssignmentTable& b, bool rank_sensitive = false) {
  detail::require_comparable(a, b);
  std::size_t mismatch = 0;
  for (std::size_t i = 0; i < a.experts.size(); ++i) {
    const std::size_t same = rank_sensitive ? detail::same_rank(a.experts[i], b.experts[i]) : detail::shared(a.experts[i], b.experts[i]);
    mismatch += a.k - same;
  }
  return static_cast<double>(mismatch) / static_cast<double>(a.k * a.experts.size());
}

inline double entropy_bits(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h == 0.0 ? 0.0 : h;
}

/// Entropy of how often each expert is selected at one layer.
inline double selection_entropy(const AssignmentTable& t, std::size_t layer) {
  if (layer >= t.layers) throw DataError("selection_entropy: layer out of range");
  std::vector<std::size_t> counts(t.n_experts, 0);
  std::size_t total = 0;
  for (std::size_t tok = 0; tok < t.tokens(); ++tok) {
    for (auto e : t.at(tok, layer)) {
      ++counts[e];
      ++total;
    }
  }
  if (total == 0) throw DataError("selection_entropy: empty table");
  std::vector<double> p;
  for (auto c : counts) p.push_back(static_cast<double>(c) / static_cast<double>(total));
  return entropy_bits(p);
}

/// Mean over tokens of the entropy of the K routing weights at one layer.
inline double weight_entropy(const AssignmentTable& t, std::size_t layer) {
  if (layer >= t.layers) throw DataError("weight_entropy: layer out of range");
  if (t.tokens() == 0) throw DataError("weight_entropy: empty table");
  double sum = 0.0;
  for (std::size_t tok = 0; tok < t.tokens(); ++tok) sum += entropy_bits(t.weights[tok * t.layers + layer]);
  return sum / static_cast<double>(t.tokens());
}

// ---------------------------------------------------------------------------
// Files.

inline void write_assignments(std::ostream& os, const AssignmentTable& t) {
  os << "# csmoe-assignments v1\n";
  os << "# fingerprint=" << t.fingerprint << " step=" << t.step << " routing=" << t.routing << " layers=" << t.layers
     << " n_experts=" << t.n_experts << " k=" << t.k << "\n";
  os << "token,layer,experts,weights\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < t.experts.size(); ++i) {
    os << i / t.layers << ',' << i % t.layers << ',';
    for (std::size_t j = 0; j < t.experts[i].size(); ++j) os << (j ? ";" : "") << t.experts[i][j];
    os << ',';
    for (std::size_t j = 0; j < t.weights[i].size(); ++j) os << (j ? ";" : "") << t.weights[i][j];
    os << '\n';
  }
}

inline void save_assignments(const std::string& path, const AssignmentTable& t) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  write_assignments(os, t);
}

inline AssignmentTable read_assignments(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "# csmoe-assignments v1") throw DataError("not an assignment table");
  AssignmentTable t;
  if (!std::getline(is, line) || line.rfind("# ", 0) != 0) throw DataError("assignment table: missing metadata line");
  {
    std::istringstream ls(line.substr(2));
    std::string kv;
    while (ls >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw DataError("assignment table: bad metadata '" + kv + "'");
      std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "fingerprint") t.fingerprint = val;
      else if (key == "step") t.step = std::stoull(val);
      else if (key == "routing") t.routing = val;
      else if (key == "layers") t.layers = std::stoull(val);
      else if (key == "n_experts") t.n_experts = std::stoull(val);
      else if (key == "k") t.k = std::stoull(val);
    }
  }
  if (!std::getline(is, line) || line != "token,layer,experts,weights") throw DataError("assignment table: bad header");
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
  };
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cols = split(line, ',');
    if (cols.size() != 4) throw DataError("assignment table: malformed row " + std::to_string(row));
    if (std::stoull(cols[0]) != row / t.layers || std::stoull(cols[1]) != row % t.layers) {
      throw DataError("assignment table: rows out of order at " + std::to_string(row));
    }
    std::vector<std::size_t> e;
    std::vector<double> w;
    for (const auto& s : split(cols[2], ';')) e.push_back(std::stoull(s));
    for (const auto& s : split(cols[3], ';')) w.push_back(std::stod(s));
    t.push(std::move(e), std::move(w));
    ++row;
  }
  t.validate();
  return t;
}

inline AssignmentTable load_assignments(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  try {
    return read_assignments(is);
  } catch (const std::invalid_argument&) {
    throw DataError("assignment table " + path + ": non-numeric field");
  } catch (const std::out_of_range&) {
    throw DataError("assignment table " + path + ": numeric field out of range");
  }
}

/// Rows of the metrics CSV: metric,layer,checkpoint_step,value. Layer -1
/// marks a whole-model value.
struct MetricRow {
  std::string metric;
  long layer = -1;
  std::size_t checkpoint_step = 0;
  double value = 0.0;
};

inline void write_metric_rows(std::ostream& os, const std::vector<MetricRow>& rows, const std::string& config_hash = {}) {
  if (!config_hash.empty()) os << "# config_hash=" << config_hash << "\n";
  os << "metric,layer,checkpoint_step,value\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.metric << ',' << r.layer << ',' << r.checkpoint_step << ',' << r.value << '\n';
}

}  // namespace csmoe
