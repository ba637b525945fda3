#pragma once

// Functional W8A8 execution of one node's share of a transformer block,
// stage by stage. Stages that end in a ring all-gather return the node's
// int8 chunk; the gathered full vector is handed back with accept().

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "looplynx/attention.hpp"
#include "looplynx/model.hpp"
#include "looplynx/quant.hpp"
#include "looplynx/shard.hpp"

namespace looplynx {

/// The eight stages of one block, in execution order.
enum class StageOp : std::size_t {
  kLnResAttn = 0,  // fused residual + LN1
  kQkv = 1,        // local heads' q, k, v on the MP kernel
  kMha = 2,        // attention over local heads            -> all-gather
  kOutProj = 3,    // output projection rows                -> all-gather
  kLnResFfn = 4,   // fused residual + LN2
  kFc1 = 5,        // FFN-1 rows                            -> all-gather
  kGelu = 6,       // activation on the full FFN vector
  kFc2 = 7,        // FFN-2 rows                            -> all-gather
};
inline constexpr std::size_t kStagesPerBlock = 8;

inline std::string_view stage_name(StageOp op) {
  switch (op) {
    case StageOp::kLnResAttn: return "ln_res_attn";
    case StageOp::kQkv: return "qkv_proj";
    case StageOp::kMha: return "mha";
    case StageOp::kOutProj: return "out_proj";
    case StageOp::kLnResFfn: return "ln_res_ffn";
    case StageOp::kFc1: return "ffn1";
    case StageOp::kGelu: return "gelu";
    case StageOp::kFc2: return "ffn2";
  }
  return "?";
}

inline bool stage_gathers(StageOp op) {
  return op == StageOp::kMha || op == StageOp::kOutProj || op == StageOp::kFc1 || op == StageOp::kFc2;
}

class NodeEngine {
 public:
  NodeEngine(const QuantModel& model, const ShardPlan& plan, std::size_t node_id)
      : m_(&model), plan_(plan), node_(node_id), shard_(plan.node(node_id)) {
    const auto& c = model.cfg;
    x_.assign(c.l_embed, 0.0f);
    res_.assign(c.l_embed, 0.0f);
    for (std::size_t l = 0; l < c.n_layers; ++l) caches_.emplace_back(shard_.heads.size(), c.head_dim, c.max_seq_len);
  }

  std::size_t node_id() const { return node_; }
  const KVCache& cache(std::size_t layer) const { return caches_.at(layer); }
  std::span<const float> residual() const { return res_; }
  std::span<const float> pending() const { return x_; }

  /// Host side: load the token embedding as the first block's input.
  void begin_token(std::size_t token, std::size_t pos) {
    x_ = embed(m_->wte, m_->wpe, token, pos);
    std::fill(res_.begin(), res_.end(), 0.0f);
  }

  std::optional<std::vector<std::int8_t>> execute(StageOp op, std::size_t layer) {
    const auto& L = m_->layers.at(layer);
    const auto& c = m_->cfg;
    switch (op) {
      case StageOp::kLnResAttn:
        ln_res(L.ln1_g, L.ln1_b, L.act.ln1);
        return std::nullopt;
      case StageOp::kQkv: {
        const Range rows = plan_.rows(LinearLayer::kQkv, node_);
        q_ = project(L.w_qkv, L.b_qkv, act_, L.act.ln1, rows.begin, rows.end, L.act.q);
        auto k = project(L.w_qkv, L.b_qkv, act_, L.act.ln1, c.l_embed + rows.begin, c.l_embed + rows.end, L.act.k);
        auto v = project(L.w_qkv, L.b_qkv, act_, L.act.ln1, 2 * c.l_embed + rows.begin, 2 * c.l_embed + rows.end,
                         L.act.v);
        caches_.at(layer).append(k, v);
        return std::nullopt;
      }
      case StageOp::kMha: {
        auto out = mha_decode(caches_.at(layer), q_, default_attn_scale(c.head_dim));
        return quantize_values(out, L.act.attn);
      }
      case StageOp::kOutProj: {
        const Range rows = plan_.rows(LinearLayer::kOut, node_);
        auto acc = matvec_i8_rows(L.w_out.data, c.l_embed, gathered_, rows.begin, rows.end);
        return bias_requant_values(acc, bias_slice(L.b_out, rows), L.act.attn, L.w_out.scale, L.act.out);
      }
      case StageOp::kLnResFfn:
        ln_res(L.ln2_g, L.ln2_b, L.act.ln2);
        return std::nullopt;
      case StageOp::kFc1: {
        const Range rows = plan_.rows(LinearLayer::kFc1, node_);
        auto acc = matvec_i8_rows(L.w_fc1.data, c.l_embed, act_, rows.begin, rows.end);
        return bias_requant_values(acc, bias_slice(L.b_fc1, rows), L.act.ln2, L.w_fc1.scale, L.act.fc1);
      }
      case StageOp::kGelu: {
        auto g = gelu_values(dequantize_values(gathered_, L.act.fc1));
        act_ = quantize_values(g, L.act.gelu);
        return std::nullopt;
      }
      case StageOp::kFc2: {
        const Range rows = plan_.rows(LinearLayer::kFc2, node_);
        auto acc = matvec_i8_rows(L.w_fc2.data, c.ffn_dim, act_, rows.begin, rows.end);
        return bias_requant_values(acc, bias_slice(L.b_fc2, rows), L.act.gelu, L.w_fc2.scale, L.act.fc2);
      }
    }
    return std::nullopt;
  }

  /// Receives the all-gathered vector of a gathering stage.
  void accept(StageOp op, std::size_t layer, std::vector<std::int8_t> full) {
    const auto& L = m_->layers.at(layer);
    switch (op) {
      case StageOp::kMha:
      case StageOp::kFc1:
        gathered_ = std::move(full);
        break;
      case StageOp::kOutProj:
        x_ = dequantize_values(full, L.act.out);
        break;
      case StageOp::kFc2:
        x_ = dequantize_values(full, L.act.fc2);
        break;
      default:
        throw Error("accept: stage " + std::string(stage_name(op)) + " does not gather");
    }
  }

  /// Residual stream after the last executed block: res + pending delta.
  std::vector<float> block_output() const {
    std::vector<float> out(res_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = res_[i] + x_[i];
    return out;
  }

  /// Host side: final residual + LN and the LM head.
  std::vector<float> logits() const {
    const auto& c = m_->cfg;
    auto fin = fused_ln_res(FTensor::vec(x_), FTensor::vec(res_), m_->lnf_g, m_->lnf_b, c.ln_eps);
    auto q = quantize_values(fin.normed.data, m_->lnf_scale);
    auto acc = matvec_i8_rows(m_->lm_head.data, c.l_embed, q, 0, c.vocab_size);
    return dequantize_acc(acc, m_->lnf_scale, m_->lm_head.scale);
  }

 private:
  void ln_res(const FTensor& g, const FTensor& b, float scale) {
    auto out = fused_ln_res(FTensor::vec(x_), FTensor::vec(res_), g, b, m_->cfg.ln_eps);
    res_ = std::move(out.new_res.data);
    act_ = quantize_values(out.normed.data, scale);
  }

  static std::span<const float> bias_slice(const FTensor& b, Range r) {
    return std::span<const float>(b.data).subspan(r.begin, r.size());
  }

  // Rows [begin, end) of the fused QKV weight, requantized then dequantized
  // for the float attention datapath.
  std::vector<float> project(const QTensor& w, const FTensor& bias, std::span<const std::int8_t> in, float in_scale,
                             std::size_t begin, std::size_t end, float out_scale) const {
    auto acc = matvec_i8_rows(w.data, w.cols(), in, begin, end);
    auto q = bias_requant_values(acc, bias_slice(bias, {begin, end}), in_scale, w.scale, out_scale);
    return dequantize_values(q, out_scale);
  }

  const QuantModel* m_;
  ShardPlan plan_;
  std::size_t node_;
  NodeShard shard_;
  std::vector<float> x_;
  std::vector<float> res_;
  std::vector<std::int8_t> act_;
  std::vector<std::int8_t> gathered_;
  std::vector<float> q_;
  std::vector<KVCache> caches_;
};

inline std::size_t argmax(std::span<const float> v) {
  return std::size_t(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Plain lockstep execution of all nodes with direct concatenation in place
/// of the ring. No timing; the reference the simulator is checked against.
class DirectPipeline {
 public:
  DirectPipeline(const QuantModel& model, const ShardPlan& plan) : model_(&model) {
    for (std::size_t n = 0; n < plan.n_nodes; ++n) nodes_.emplace_back(model, plan, n);
  }

  void run_blocks(std::size_t token, std::size_t pos) {
    for (auto& n : nodes_) n.begin_token(token, pos);
    for (std::size_t l = 0; l < model_->cfg.n_layers; ++l) {
      for (std::size_t s = 0; s < kStagesPerBlock; ++s) {
        const auto op = StageOp(s);
        std::vector<std::int8_t> full;
        for (auto& n : nodes_) {
          auto chunk = n.execute(op, l);
          if (chunk) full.insert(full.end(), chunk->begin(), chunk->end());
        }
        if (stage_gathers(op)) {
          for (auto& n : nodes_) n.accept(op, l, full);
        }
      }
    }
  }

  std::vector<float> forward(std::size_t token, std::size_t pos) {
    run_blocks(token, pos);
    return nodes_.front().logits();
  }

  /// Greedy generation. The prompt's last position yields the first decode
  /// input; each of the `gen_len` decode steps then emits one token.
  std::vector<std::size_t> generate(std::span<const std::size_t> prompt, std::size_t gen_len,
                                    std::vector<std::vector<float>>* logits_out = nullptr) {
    if (prompt.empty()) throw Error("generate: empty prompt");
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) run_blocks(prompt[i], pos++);
    auto lg = forward(prompt.back(), pos++);
    std::size_t next = argmax(lg);
    if (logits_out) logits_out->push_back(std::move(lg));
    for (std::size_t g = 0; g < gen_len; ++g) {
      lg = forward(next, pos++);
      next = argmax(lg);
      out.push_back(next);
      if (logits_out) logits_out->push_back(std::move(lg));
    }
    return out;
  }

  const NodeEngine& node(std::size_t i) const { return nodes_.at(i); }
  NodeEngine& node(std::size_t i) { return nodes_.at(i); }

 private:
  const QuantModel* model_;
  std::vector<NodeEngine> nodes_;
};

}  // namespace looplynx
