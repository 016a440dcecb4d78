#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "csmoe/moe_layer.hpp"
#include "csmoe/ops.hpp"

namespace csmoe {

/// Coefficients of the composed objective.
struct LossWeights {
  double alpha = 0.1;     // winner emphasis inside L_D
  double gamma = 0.01;    // weight of L_D
  double beta = 0.005;    // weight of L_div
  double balance_coeff = 0.01;
  double z_coeff = 0.001;

  void validate() const {
    if (alpha < 0 || gamma < 0 || beta < 0 || balance_coeff < 0 || z_coeff < 0) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

/// Receives non-fatal diagnostics (zero rows in the diversity loss). Defaults
/// to stderr; tests swap it out.
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) {
  if (warning_sink()) warning_sink()(msg);
}

namespace loss {

/// Mean next-token cross-entropy.
inline ad::Var nll(ad::Var logits, const std::vector<std::size_t>& targets) { return ad::cross_entropy(logits, targets); }

/// Distillation loss averaged over tokens:
///   mean_N (s_R - s_C)^2 + alpha/K * sum_{j in I_C} (s_C^j - s_R^j)^2.
/// winners[t] is I_C for token t.
inline ad::Var distill(ad::Var s_r, ad::Var s_c, const std::vector<std::vector<std::size_t>>& winners, double alpha) {
  const std::size_t tokens = s_r.rows();
  const std::size_t n = s_r.cols();
  if (s_c.shape() != s_r.shape()) throw DimensionError("distill: policy shapes differ");
  if (winners.size() != tokens) throw ContractError("distill: one winner set per token required");
  Tensor w({tokens, n}, 1.0 / static_cast<double>(n));
  for (std::size_t t = 0; t < tokens; ++t) {
    const double k = static_cast<double>(winners[t].size());
    for (auto j : winners[t]) {
      if (j >= n) throw ContractError("distill: winner index " + std::to_string(j) + " outside [0, " + std::to_string(n) + ")");
      w.at(t, j) += alpha / k;
    }
  }
  ad::Var d = ad::sub(s_r, s_c);
  ad::Var weighted = ad::mul(ad::mul(d, d), s_r.tape()->constant(std::move(w)));
  return ad::scale(ad::sum(weighted), 1.0 / static_cast<double>(tokens));
}

namespace detail {
inline void warn_zero_rows(const Tensor& t, const char* what) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    bool zero = true;
    for (double v : t.row_span(r)) zero = zero && v == 0.0;
    if (zero) warn(std::string(what) + ": row " + std::to_string(r) + " is all zeros; its similarities are taken as 0");
  }
}
}  // namespace detail

/// Mean off-diagonal cosine similarity between the K rows of O [K x D].
inline ad::Var diversity(ad::Var o) {
  const std::size_t k = o.rows();
  if (k < 2) throw ContractError("diversity loss needs at least two winning experts");
  detail::warn_zero_rows(o.value(), "diversity loss");
  ad::Var u = ad::row_normalize(o);
  ad::Var c = ad::matmul(u, ad::transpose(u));
  Tensor off({k, k}, 1.0);
  for (std::size_t i = 0; i < k; ++i) off.at(i, i) = 0.0;
  ad::Var masked = ad::mul(c, o.tape()->constant(std::move(off)));
  return ad::scale(ad::sum(masked), 1.0 / static_cast<double>(k * (k - 1)));
}

/// Token-batched diversity: slots[r] holds the r-th winner's output for every
/// token [T x D]; result is the mean over tokens of the per-token loss.
inline ad::Var diversity_batched(const std::vector<ad::Var>& slots) {
  const std::size_t k = slots.size();
  if (k < 2) throw ContractError("diversity loss needs at least two winning experts");
  std::vector<ad::Var> units;
  for (const auto& s : slots) units.push_back(ad::row_normalize(s));
  ad::Var acc;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t q = r + 1; q < k; ++q) {
      ad::Var dot = ad::row_sum(ad::mul(units[r], units[q]));
      acc = acc.valid() ? ad::add(acc, dot) : dot;
    }
  }
  return ad::scale(ad::mean(acc), 2.0 / static_cast<double>(k * (k - 1)));
}

/// Switch-style balance: N * sum_i f_i P_i, f_i the fraction of tokens whose
/// top-1 expert is i and P_i the mean router probability of i.
inline ad::Var balance(ad::Var probs, const std::vector<std::size_t>& top1) {
  const std::size_t tokens = probs.rows();
  const std::size_t n = probs.cols();
  if (tokens == 0 || top1.size() != tokens) throw ContractError("balance: need one top-1 index per token");
  std::vector<double> f(n, 0.0);
  for (auto i : top1) {
    if (i >= n) throw ContractError("balance: expert index out of range");
    f[i] += 1.0 / static_cast<double>(tokens);
  }
  Tensor w({tokens, n});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t i = 0; i < n; ++i) w.at(t, i) = static_cast<double>(n) * f[i] / static_cast<double>(tokens);
  return ad::sum(ad::mul(probs, probs.tape()->constant(std::move(w))));
}

/// Router z-loss: mean over tokens of logsumexp(logits)^2.
inline ad::Var z(ad::Var logits) {
  ad::Var l = ad::logsumexp_rows(logits);
  return ad::mean(ad::mul(l, l));
}

}  // namespace loss

// ---------------------------------------------------------------------------
// Plain-value entry points for single tokens / small batches.

inline double nll_loss(const Tensor& logits, const std::vector<std::size_t>& targets) {
  ad::Tape tape;
  return loss::nll(tape.constant(logits), targets).value().item();
}

inline double distill_loss(std::span<const double> s_r, std::span<const double> s_c, std::span<const std::size_t> winners,
                           double alpha) {
  if (s_r.size() != s_c.size()) throw DimensionError("distill_loss: vectors differ in length");
  ad::Tape tape;
  auto a = tape.constant(Tensor({1, s_r.size()}, std::vector<double>(s_r.begin(), s_r.end())));
  auto b = tape.constant(Tensor({1, s_c.size()}, std::vector<double>(s_c.begin(), s_c.end())));
  return loss::distill(a, b, {std::vector<std::size_t>(winners.begin(), winners.end())}, alpha).value().item();
}

/// Distillation loss without the winner term.
inline double distill_loss_wo_reg(std::span<const double> s_r, std::span<const double> s_c) {
  return distill_loss(s_r, s_c, {}, 0.0);
}

inline double diversity_loss(const Tensor& o) {
  ad::Tape tape;
  return loss::diversity(tape.constant(o)).value().item();
}

/// full_scores are router probabilities [T x N]; selections[t][0] is token t's
/// top-1 expert.
inline double balance_loss(const Tensor& probs, const std::vector<std::vector<std::size_t>>& selections) {
  std::vector<std::size_t> top1;
  for (const auto& s : selections) {
    if (s.empty()) throw ContractError("balance_loss: empty selection");
    top1.push_back(s.front());
  }
  ad::Tape tape;
  return loss::balance(tape.constant(probs), top1).value().item();
}

inline double z_loss(const Tensor& logits) {
  ad::Tape tape;
  return loss::z(tape.constant(logits)).value().item();
}

}  // namespace csmoe
