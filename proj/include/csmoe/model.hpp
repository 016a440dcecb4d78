#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csmoe/moe_layer.hpp"
#include "csmoe/ops.hpp"
#include "csmoe/params.hpp"
#include "csmoe/random.hpp"
#include "csmoe/synthdata.hpp"

namespace csmoe {

struct ModelConfig {
  std::size_t vocab = 32;
  std::size_t d_model = 64;
  std::size_t d_hidden = 64;
  std::size_t layers = 2;
  std::size_t context = 16;
  bool attention = true;
  Activation expert_act = Activation::gelu;
  MoEConfig moe;

  void validate() const {
    if (vocab < 2 || d_model == 0 || d_hidden == 0 || layers == 0 || context == 0) {
      throw ConfigError("model dimensions must be positive (vocab >= 2)");
    }
    moe.validate();
  }
};

/// Token embedding -> L blocks of [causal single-head attention] + MoE FFN,
/// pre-norm with residuals -> tied output head.
class LanguageModel {
 public:
  LanguageModel() = default;

  LanguageModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_layers();
    Rng rng = make_rng(seed, 0x30DE1);
    params_.add("embed", normal_tensor({cfg_.vocab, cfg_.d_model}, rng, 0.02));
    params_.add("pos", normal_tensor({cfg_.context, cfg_.d_model}, rng, 0.02));
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (cfg_.attention) {
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
          params_.add(attn_name(l, w), normal_tensor({cfg_.d_model, cfg_.d_model}, rng, s));
        }
      }
      layers_[l].init(params_, rng);
    }
  }

  /// Rebuilds a model around existing parameters (checkpoint load).
  LanguageModel(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    build_layers();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::vector<MoELayer>& layers() const { return layers_; }

  struct Output {
    ad::Var logits;  // [batch*context x vocab]
    std::vector<MoEForward> moe;
  };

  Output forward(const ParamStore::Bound& p, const Batch& batch, const std::vector<RoutingMode>& modes,
                 EvalCounter* counter = nullptr) const {
    if (modes.size() != cfg_.layers) throw ContractError("one routing mode per layer required");
    if (batch.context == 0 || batch.context > cfg_.context) throw ContractError("batch context exceeds model context");
    const std::size_t tokens = batch.batch * batch.context;
    std::vector<std::size_t> pos_idx(tokens);
    for (std::size_t i = 0; i < tokens; ++i) pos_idx[i] = i % batch.context;
    ad::Var h = ad::add(ad::gather_rows(p.at("embed"), batch.inputs), ad::gather_rows(p.at("pos"), pos_idx));

    Output out;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (cfg_.attention) h = ad::add(h, attention(p, ad::rms_norm_rows(h), l, batch));
      MoEForward f = moe_forward(ad::rms_norm_rows(h), layers_[l], p, modes[l], counter);
      h = ad::add(h, f.output);
      out.moe.push_back(std::move(f));
    }
    out.logits = ad::matmul(ad::rms_norm_rows(h), ad::transpose(p.at("embed")));
    return out;
  }

  static std::string attn_name(std::size_t l, const char* w) { return "block" + std::to_string(l) + ".attn." + w; }

 private:
  void build_layers() {
    layers_.clear();
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      layers_.push_back(MoELayer{"block" + std::to_string(l) + ".moe", cfg_.d_model, cfg_.d_hidden, cfg_.expert_act, cfg_.moe});
    }
  }

  ad::Var attention(const ParamStore::Bound& p, ad::Var x, std::size_t l, const Batch& batch) const {
    const std::size_t c = batch.context;
    ad::Var q = ad::matmul(x, p.at(attn_name(l, "wq")));
    ad::Var k = ad::matmul(x, p.at(attn_name(l, "wk")));
    ad::Var v = ad::matmul(x, p.at(attn_name(l, "wv")));
    std::vector<std::uint8_t> causal(c * c, 0);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j <= i; ++j) causal[i * c + j] = 1;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    std::vector<ad::Var> heads;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      ad::Var qb = ad::slice_rows(q, b * c, c);
      ad::Var kb = ad::slice_rows(k, b * c, c);
      ad::Var vb = ad::slice_rows(v, b * c, c);
      ad::Var scores = ad::scale(ad::matmul(qb, ad::transpose(kb)), inv_sqrt_d);
      heads.push_back(ad::matmul(ad::softmax_rows(scores, &causal), vb));
    }
    return ad::matmul(ad::concat_rows(heads), p.at(attn_name(l, "wo")));
  }

  ModelConfig cfg_;
  ParamStore params_;
  std::vector<MoELayer> layers_;
};

}  // namespace csmoe
