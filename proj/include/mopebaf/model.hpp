#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mopebaf/errors.hpp"
#include "mopebaf/gradcheck.hpp"
#include "mopebaf/layout.hpp"
#include "mopebaf/ops.hpp"
#include "mopebaf/random.hpp"
#include "mopebaf/sample.hpp"
#include "mopebaf/tensor.hpp"
#include "mopebaf/vocab.hpp"

namespace mopebaf {

enum class HeadType { kClassification, kLmVerbalizer };

/// How soft prompts enter the network.
///   kMoPE: V-Prompt / L-Prompt experts with restricted receptive fields in
///          stage 1, a fresh VL-Prompt at stage 2, block-aware fusion.
///   kSoft: the conventional baseline; L-Prompt rows act as virtual tokens
///          prepended to the text, full attention everywhere, kept into
///          stage 2. Requires vp_len == vlp_len == 0 and one block.
enum class PromptStyle { kMoPE, kSoft };

struct ModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t stage1_layers = 6;
  std::size_t stage2_layers = 2;
  std::size_t vp_len = 10;
  std::size_t lp_len = 10;
  std::size_t vlp_len = 10;
  std::size_t block_count = 2;
  std::size_t vocab_size = 64;
  std::size_t patch_feature_dim = 32;
  std::size_t n_patches = 16;
  std::size_t max_text_len = 12;
  std::size_t n_classes = 2;
  HeadType head = HeadType::kClassification;
  PromptStyle prompt_style = PromptStyle::kMoPE;
  std::uint64_t seed = 0;

  /// Default desk-scale configuration.
  static ModelConfig desk() { return {}; }

  /// Backbone proportions of the 24-layer base-plus model: 21 expert layers,
  /// 3 fusion layers, 196 patches (224x224 image, 16x16 patches), 40 tokens.
  /// Only meant for shape checks.
  static ModelConfig paper_scale() {
    ModelConfig c;
    c.hidden_dim = 64;
    c.n_heads = 4;
    c.ffn_dim = 64;
    c.stage1_layers = 21;
    c.stage2_layers = 3;
    c.n_patches = 196;
    c.max_text_len = 40;
    return c;
  }

  std::size_t head_dim() const { return hidden_dim / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model." + field + ": " + why);
    };
    if (hidden_dim == 0) fail("hidden_dim", "must be positive");
    if (n_heads == 0 || hidden_dim % n_heads != 0) {
      fail("n_heads", std::to_string(n_heads) + " does not divide hidden_dim " +
                          std::to_string(hidden_dim));
    }
    if (ffn_dim == 0) fail("ffn_dim", "must be positive");
    if (stage1_layers == 0) fail("stage1_layers", "must be positive");
    if (block_count < 1 || block_count > stage1_layers) {
      fail("block_count", std::to_string(block_count) + " outside [1, stage1_layers=" +
                              std::to_string(stage1_layers) + "]");
    }
    if (block_count > 1 && vp_len != lp_len) {
      fail("vp_len", "must equal lp_len (" + std::to_string(lp_len) + ") when block_count > 1");
    }
    if (vocab_size < static_cast<std::size_t>(vocab::kMinVocabSize)) {
      fail("vocab_size", "must be at least " + std::to_string(vocab::kMinVocabSize));
    }
    if (patch_feature_dim == 0) fail("patch_feature_dim", "must be positive");
    if (n_patches == 0) fail("n_patches", "must be positive");
    if (max_text_len < 2) fail("max_text_len", "must be at least 2 ([CLS] + polarity token)");
    if (n_classes != 2 && n_classes != 3) fail("n_classes", "must be 2 or 3");
    if (prompt_style == PromptStyle::kSoft) {
      if (vp_len != 0 || vlp_len != 0) fail("prompt_style", "soft prompts need vp_len = vlp_len = 0");
      if (block_count != 1) fail("prompt_style", "soft prompts need block_count = 1");
    }
  }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

/// Two-layer GELU MLP with its own pre-norm: x + W2 gelu(W1 LN(x) + b1) + b2.
struct FfnExpert {
  LayerNormParams norm;
  Tensor w1, b1, w2, b2;
};

/// Shared self-attention plus modality experts. Stage-1 layers hold
/// {V-FFN, L-FFN}; stage-2 layers hold {VL-FFN}.
struct MoMELayer {
  LayerNormParams attn_norm;
  Tensor wq, wk, wv, wo;
  std::vector<FfnExpert> experts;

  static constexpr std::size_t kVision = 0;
  static constexpr std::size_t kLanguage = 1;
};

/// Cross-attention projections at one block boundary, shared by both directions.
struct BafFusionLayer {
  Tensor fq, fk, fv;
};

struct PromptExperts {
  Tensor v_prompt;   // [vp_len, d]
  Tensor l_prompt;   // [lp_len, d]
  Tensor vl_prompt;  // [vlp_len, d]
};

struct Embeddings {
  Tensor patch_w;  // [patch_feature_dim, d]
  Tensor patch_b;  // [d]
  Tensor img_pos;  // [n_patches, d]
  Tensor tok_emb;  // [vocab, d]
  Tensor txt_pos;  // [max_text_len, d]
};

struct Heads {
  Tensor cls_w, cls_b;  // classification over [CLS]
  Tensor lm_w, lm_b;    // language-model head over [MASK]
  std::vector<int> verbalizer;
};

struct Params {
  Embeddings emb;
  PromptExperts prompts;
  std::vector<MoMELayer> stage1;
  std::vector<MoMELayer> stage2;
  std::vector<BafFusionLayer> fusion;
  LayerNormParams final_norm;
  Heads heads;
};

namespace detail {

inline Tensor normal_param(std::uint64_t seed, const std::string& name, Shape shape) {
  Tensor t(std::move(shape), true);
  Rng rng(derive_seed(seed, name));
  std::normal_distribution<double> dist(0.0, 0.02);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor zero_param(Shape shape) { return Tensor(std::move(shape), true); }

inline Tensor ones_param(Shape shape) {
  Tensor t = Tensor::full(std::move(shape), 1.0);
  t.set_requires_grad(true);
  return t;
}

inline LayerNormParams make_norm(std::size_t d) { return {ones_param({d}), zero_param({d})}; }

inline FfnExpert make_expert(const ModelConfig& c, const std::string& name) {
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  return {make_norm(d), normal_param(c.seed, name + ".w1", {d, f}), zero_param({f}),
          normal_param(c.seed, name + ".w2", {f, d}), zero_param({d})};
}

inline MoMELayer make_layer(const ModelConfig& c, const std::string& name, bool stage1) {
  const std::size_t d = c.hidden_dim;
  MoMELayer l;
  l.attn_norm = make_norm(d);
  l.wq = normal_param(c.seed, name + ".wq", {d, d});
  l.wk = normal_param(c.seed, name + ".wk", {d, d});
  l.wv = normal_param(c.seed, name + ".wv", {d, d});
  l.wo = normal_param(c.seed, name + ".wo", {d, d});
  if (stage1) {
    l.experts.push_back(make_expert(c, name + ".v_ffn"));
    l.experts.push_back(make_expert(c, name + ".l_ffn"));
  } else {
    l.experts.push_back(make_expert(c, name + ".vl_ffn"));
  }
  return l;
}

}  // namespace detail

/// Fresh parameters: weights N(0, 0.02^2), biases 0, norm gains 1. Every
/// tensor draws from its own stream seeded by (config seed, tensor name), so
/// configurations that share a tensor name share its initial value.
inline Params init_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_dim;
  const std::uint64_t s = c.seed;
  Params p;
  p.emb.patch_w = detail::normal_param(s, "embed.patch_w", {c.patch_feature_dim, d});
  p.emb.patch_b = detail::zero_param({d});
  p.emb.img_pos = detail::normal_param(s, "embed.img_pos", {c.n_patches, d});
  p.emb.tok_emb = detail::normal_param(s, "embed.tok_emb", {c.vocab_size, d});
  p.emb.txt_pos = detail::normal_param(s, "embed.txt_pos", {c.max_text_len, d});
  p.prompts.v_prompt = detail::normal_param(s, "prompts.v", {c.vp_len, d});
  p.prompts.l_prompt = detail::normal_param(s, "prompts.l", {c.lp_len, d});
  p.prompts.vl_prompt = detail::normal_param(s, "prompts.vl", {c.vlp_len, d});
  for (std::size_t i = 0; i < c.stage1_layers; ++i)
    p.stage1.push_back(detail::make_layer(c, "stage1." + std::to_string(i), true));
  for (std::size_t i = 0; i < c.stage2_layers; ++i)
    p.stage2.push_back(detail::make_layer(c, "stage2." + std::to_string(i), false));
  for (std::size_t b = 0; b + 1 < c.block_count; ++b) {
    const std::string n = "fusion." + std::to_string(b);
    p.fusion.push_back({detail::normal_param(s, n + ".fq", {d, d}),
                        detail::normal_param(s, n + ".fk", {d, d}),
                        detail::normal_param(s, n + ".fv", {d, d})});
  }
  p.final_norm = detail::make_norm(d);
  if (c.head == HeadType::kClassification) {
    p.heads.cls_w = detail::normal_param(s, "head.cls_w", {d, c.n_classes});
    p.heads.cls_b = detail::zero_param({c.n_classes});
  } else {
    p.heads.lm_w = detail::normal_param(s, "head.lm_w", {d, c.vocab_size});
    p.heads.lm_b = detail::zero_param({c.vocab_size});
  }
  p.heads.verbalizer = vocab::verbalizer(static_cast<int>(c.n_classes));
  return p;
}

/// Every learnable tensor with a stable name, in a fixed order. The returned
/// tensors share storage with `p`. Matrices (including embeddings and
/// prompts) are marked for weight decay; biases and norm parameters are not.
inline std::vector<NamedTensor> named_parameters(const Params& p) {
  std::vector<NamedTensor> out;
  auto mat = [&out](std::string n, const Tensor& t) { out.push_back({std::move(n), t, true}); };
  auto vec = [&out](std::string n, const Tensor& t) { out.push_back({std::move(n), t, false}); };
  auto norm = [&vec](const std::string& n, const LayerNormParams& ln) {
    vec(n + ".gamma", ln.gamma);
    vec(n + ".beta", ln.beta);
  };
  auto layer = [&](const std::string& n, const MoMELayer& l, bool stage1) {
    norm(n + ".attn_norm", l.attn_norm);
    mat(n + ".wq", l.wq);
    mat(n + ".wk", l.wk);
    mat(n + ".wv", l.wv);
    mat(n + ".wo", l.wo);
    for (std::size_t e = 0; e < l.experts.size(); ++e) {
      const std::string en =
          n + (stage1 ? (e == MoMELayer::kVision ? ".v_ffn" : ".l_ffn") : ".vl_ffn");
      norm(en + ".norm", l.experts[e].norm);
      mat(en + ".w1", l.experts[e].w1);
      vec(en + ".b1", l.experts[e].b1);
      mat(en + ".w2", l.experts[e].w2);
      vec(en + ".b2", l.experts[e].b2);
    }
  };
  mat("embed.patch_w", p.emb.patch_w);
  vec("embed.patch_b", p.emb.patch_b);
  mat("embed.img_pos", p.emb.img_pos);
  mat("embed.tok_emb", p.emb.tok_emb);
  mat("embed.txt_pos", p.emb.txt_pos);
  mat("prompts.v", p.prompts.v_prompt);
  mat("prompts.l", p.prompts.l_prompt);
  mat("prompts.vl", p.prompts.vl_prompt);
  for (std::size_t i = 0; i < p.stage1.size(); ++i)
    layer("stage1." + std::to_string(i), p.stage1[i], true);
  for (std::size_t i = 0; i < p.stage2.size(); ++i)
    layer("stage2." + std::to_string(i), p.stage2[i], false);
  for (std::size_t b = 0; b < p.fusion.size(); ++b) {
    const std::string n = "fusion." + std::to_string(b);
    mat(n + ".fq", p.fusion[b].fq);
    mat(n + ".fk", p.fusion[b].fk);
    mat(n + ".fv", p.fusion[b].fv);
  }
  norm("final_norm", p.final_norm);
  if (p.heads.cls_w.numel() > 0) {
    mat("head.cls_w", p.heads.cls_w);
    vec("head.cls_b", p.heads.cls_b);
  }
  if (p.heads.lm_w.numel() > 0) {
    mat("head.lm_w", p.heads.lm_w);
    vec("head.lm_b", p.heads.lm_b);
  }
  return out;
}

/// Independent deep copy of every parameter.
inline Params clone_params(const Params& p) {
  Params q = p;
  auto rebind = [](Tensor& t) {
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    t = c;
  };
  auto rebind_norm = [&](LayerNormParams& n) {
    rebind(n.gamma);
    rebind(n.beta);
  };
  auto rebind_layer = [&](MoMELayer& l) {
    rebind_norm(l.attn_norm);
    rebind(l.wq);
    rebind(l.wk);
    rebind(l.wv);
    rebind(l.wo);
    for (auto& e : l.experts) {
      rebind_norm(e.norm);
      rebind(e.w1);
      rebind(e.b1);
      rebind(e.w2);
      rebind(e.b2);
    }
  };
  rebind(q.emb.patch_w);
  rebind(q.emb.patch_b);
  rebind(q.emb.img_pos);
  rebind(q.emb.tok_emb);
  rebind(q.emb.txt_pos);
  rebind(q.prompts.v_prompt);
  rebind(q.prompts.l_prompt);
  rebind(q.prompts.vl_prompt);
  for (auto& l : q.stage1) rebind_layer(l);
  for (auto& l : q.stage2) rebind_layer(l);
  for (auto& f : q.fusion) {
    rebind(f.fq);
    rebind(f.fk);
    rebind(f.fv);
  }
  rebind_norm(q.final_norm);
  rebind(q.heads.cls_w);
  rebind(q.heads.cls_b);
  rebind(q.heads.lm_w);
  rebind(q.heads.lm_b);
  return q;
}

// ---------------------------------------------------------------------------
// Layer building blocks

/// Pre-normalized multi-head self-attention (no residual) over
/// x[batch*len, d] with a shared [len, len] mask.
inline Tensor self_attention(const MoMELayer& layer, const Tensor& x, const BoolMatrix& mask,
                             std::size_t n_heads, std::size_t batch) {
  const std::size_t d = x.dim(1);
  const Tensor q = split_heads(matmul(x, layer.wq), batch, n_heads);
  const Tensor k = split_heads(matmul(x, layer.wk), batch, n_heads);
  const Tensor v = split_heads(matmul(x, layer.wv), batch, n_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / n_heads));
  const Tensor probs = masked_softmax(scale(bmm(q, k, true), inv_sqrt), mask);
  return matmul(merge_heads(bmm(probs, v), batch, n_heads), layer.wo);
}

inline Tensor expert_ffn(const FfnExpert& e, const Tensor& x) {
  const Tensor h = layer_norm(x, e.norm.gamma, e.norm.beta);
  const Tensor inner = gelu(add_bias(matmul(h, e.w1), e.b1));
  return add(x, add_bias(matmul(inner, e.w2), e.b2));
}

namespace detail {

inline void check_packed(const Tensor& hidden, const SequenceLayout& layout, std::size_t batch,
                         const char* op) {
  if (hidden.rank() != 2 || batch == 0 || hidden.dim(0) != batch * layout.total()) {
    throw InternalError(std::string(op) + ": hidden " + shape_str(hidden.shape()) +
                        " does not hold " + std::to_string(batch) + " sequences of length " +
                        std::to_string(layout.total()));
  }
}

}  // namespace detail

/// One modality-expert layer: restricted shared attention with residual,
/// then V-FFN over V-Prompt + image rows and L-FFN over L-Prompt + text rows.
inline Tensor stage1_layer_forward(const MoMELayer& layer, const Tensor& hidden,
                                   const SequenceLayout& layout, const BoolMatrix& mask,
                                   std::size_t n_heads, std::size_t batch = 1) {
  detail::check_packed(hidden, layout, batch, "stage1_layer_forward");
  if (mask.rows() != layout.total() || mask.cols() != layout.total()) {
    throw InternalError("stage1_layer_forward: mask does not match layout length " +
                        std::to_string(layout.total()));
  }
  if (layer.experts.size() != 2) throw InternalError("stage1 layer needs exactly two FFN experts");
  const Tensor normed = layer_norm(hidden, layer.attn_norm.gamma, layer.attn_norm.beta);
  const Tensor h = add(hidden, self_attention(layer, normed, mask, n_heads, batch));

  const std::size_t L = layout.total();
  std::vector<std::size_t> vision_rows, language_rows;
  std::vector<RowRef> back(batch * L);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < L; ++r) {
      const Segment s = layout.segment_of(r);
      auto& rows = (s == Segment::kVPrompt || s == Segment::kImage) ? vision_rows : language_rows;
      const std::uint32_t src = &rows == &vision_rows ? 0 : 1;
      back[b * L + r] = {src, static_cast<std::uint32_t>(rows.size())};
      rows.push_back(b * L + r);
    }
  }
  const Tensor routed[2] = {
      expert_ffn(layer.experts[MoMELayer::kVision], gather_rows(h, vision_rows)),
      expert_ffn(layer.experts[MoMELayer::kLanguage], gather_rows(h, language_rows))};
  return assemble_rows(routed, back);
}

/// One fusion layer: unrestricted attention with residual, then VL-FFN on every row.
inline Tensor stage2_layer_forward(const MoMELayer& layer, const Tensor& hidden,
                                   const SequenceLayout& layout, std::size_t n_heads,
                                   std::size_t batch = 1) {
  detail::check_packed(hidden, layout, batch, "stage2_layer_forward");
  if (layer.experts.size() != 1) throw InternalError("stage2 layer needs exactly one FFN expert");
  const BoolMatrix mask = build_full_mask(layout.total());
  const Tensor normed = layer_norm(hidden, layer.attn_norm.gamma, layer.attn_norm.beta);
  const Tensor h = add(hidden, self_attention(layer, normed, mask, n_heads, batch));
  return expert_ffn(layer.experts[0], h);
}

/// Block-aware prompt fusion over `batch` prompt pairs stored as
/// h_vp, h_lp [batch*p, d]:
///   s_vp = softmax((h_lp Fq)(h_vp Fk)^T / sqrt(d)) (h_vp Fv)
///   s_lp = softmax((h_vp Fq)(h_lp Fk)^T / sqrt(d)) (h_lp Fv)
/// Single head, no residual.
inline std::pair<Tensor, Tensor> baf_fuse_batched(const BafFusionLayer& f, const Tensor& h_vp,
                                                  const Tensor& h_lp, std::size_t batch) {
  if (h_vp.shape() != h_lp.shape() || h_vp.rank() != 2 || batch == 0 ||
      h_vp.dim(0) % batch != 0) {
    throw ConfigError("baf_fuse: prompt shapes " + shape_str(h_vp.shape()) + " and " +
                      shape_str(h_lp.shape()) + " must match");
  }
  const std::size_t p = h_vp.dim(0) / batch, d = h_vp.dim(1);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  const BoolMatrix mask = build_full_mask(p);
  auto cube = [&](const Tensor& t) { return reshape(t, {batch, p, d}); };
  auto attend = [&](const Tensor& queries_from, const Tensor& keys_from) {
    const Tensor q = cube(matmul(queries_from, f.fq));
    const Tensor k = cube(matmul(keys_from, f.fk));
    const Tensor v = cube(matmul(keys_from, f.fv));
    const Tensor probs = masked_softmax(scale(bmm(q, k, true), inv_sqrt), mask);
    return reshape(bmm(probs, v), {batch * p, d});
  };
  Tensor s_vp = attend(h_lp, h_vp);
  Tensor s_lp = attend(h_vp, h_lp);
  return {s_vp, s_lp};
}

inline std::pair<Tensor, Tensor> baf_fuse(const BafFusionLayer& f, const Tensor& h_vp,
                                          const Tensor& h_lp) {
  return baf_fuse_batched(f, h_vp, h_lp, 1);
}

/// Replaces the prompt rows of the packed hidden state by their fused
/// reconstruction; image and text rows pass through unchanged.
inline Tensor apply_fusion(const BafFusionLayer& f, const Tensor& hidden,
                           const SequenceLayout& layout, std::size_t batch) {
  detail::check_packed(hidden, layout, batch, "apply_fusion");
  const std::size_t p = layout.vp.size(), L = layout.total();
  if (layout.lp.size() != p) {
    throw ConfigError("apply_fusion: V-Prompt length " + std::to_string(p) +
                      " != L-Prompt length " + std::to_string(layout.lp.size()));
  }
  if (p == 0) return hidden;
  std::vector<std::size_t> vp_rows, lp_rows;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      vp_rows.push_back(b * L + layout.vp.begin + i);
      lp_rows.push_back(b * L + layout.lp.begin + i);
    }
  auto [s_vp, s_lp] =
      baf_fuse_batched(f, gather_rows(hidden, vp_rows), gather_rows(hidden, lp_rows), batch);
  std::vector<RowRef> map(batch * L);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < L; ++r) {
      const auto row = static_cast<std::uint32_t>(b * L + r);
      if (layout.vp.contains(r)) {
        map[b * L + r] = {1, static_cast<std::uint32_t>(b * p + r - layout.vp.begin)};
      } else if (layout.lp.contains(r)) {
        map[b * L + r] = {2, static_cast<std::uint32_t>(b * p + r - layout.lp.begin)};
      } else {
        map[b * L + r] = {0, row};
      }
    }
  const Tensor sources[3] = {hidden, s_vp, s_lp};
  return assemble_rows(sources, map);
}

// ---------------------------------------------------------------------------
// End-to-end pipeline

struct Embedded {
  Tensor hidden;  // [batch * layout.total(), d]
  SequenceLayout layout;
  std::size_t batch = 0;
};

/// Packs [V-Prompt | L-Prompt | patches W + pos | token emb + pos] for each
/// sample. All samples in a batch must share the text length and [MASK]
/// position.
inline Embedded embed_inputs(const ModelConfig& c, const Params& p,
                             std::span<const Sample> batch) {
  if (batch.empty()) throw InputError("embed_inputs: empty batch");
  const std::size_t n_text = batch[0].tokens.size();
  const auto mask_pos = batch[0].mask_position();
  for (const Sample& s : batch) {
    if (s.tokens.empty() || s.tokens.front() != vocab::kCls) {
      throw InputError("embed_inputs: text must start with [CLS]");
    }
    if (s.tokens.size() > c.max_text_len) {
      throw InputError("embed_inputs: " + std::to_string(s.tokens.size()) +
                       " tokens exceed max_text_len " + std::to_string(c.max_text_len));
    }
    if (s.tokens.size() != n_text || s.mask_position() != mask_pos) {
      throw InputError("embed_inputs: samples in a batch must share text length and [MASK] slot");
    }
    if (s.patches.shape() != Shape{c.n_patches, c.patch_feature_dim}) {
      throw InputError("embed_inputs: patches " + shape_str(s.patches.shape()) + ", expected " +
                       shape_str({c.n_patches, c.patch_feature_dim}));
    }
  }
  const std::size_t B = batch.size(), np = c.n_patches, pf = c.patch_feature_dim;

  Tensor patches({B * np, pf});
  std::vector<int> ids;
  std::vector<std::size_t> img_pos_rows, txt_pos_rows;
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(batch[b].patches.data().begin(), batch[b].patches.data().end(),
              patches.data().begin() + static_cast<std::ptrdiff_t>(b * np * pf));
    ids.insert(ids.end(), batch[b].tokens.begin(), batch[b].tokens.end());
    for (std::size_t i = 0; i < np; ++i) img_pos_rows.push_back(i);
    for (std::size_t i = 0; i < n_text; ++i) txt_pos_rows.push_back(i);
  }
  const Tensor image = add(add_bias(matmul(patches, p.emb.patch_w), p.emb.patch_b),
                           gather_rows(p.emb.img_pos, img_pos_rows));
  const Tensor text = add(embedding(p.emb.tok_emb, ids), gather_rows(p.emb.txt_pos, txt_pos_rows));

  const std::size_t vp = c.vp_len, lp = c.lp_len;
  SequenceLayout layout = build_layout(static_cast<long>(vp), static_cast<long>(lp),
                                       static_cast<long>(np), static_cast<long>(n_text),
                                       static_cast<long>(c.block_count));
  if (mask_pos) layout = with_mask_index(layout, layout.txt.begin + *mask_pos);

  const std::size_t L = layout.total();
  std::vector<RowRef> map;
  map.reserve(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < vp; ++i) map.push_back({0, static_cast<std::uint32_t>(i)});
    for (std::size_t i = 0; i < lp; ++i) map.push_back({1, static_cast<std::uint32_t>(i)});
    for (std::size_t i = 0; i < np; ++i) map.push_back({2, static_cast<std::uint32_t>(b * np + i)});
    for (std::size_t i = 0; i < n_text; ++i)
      map.push_back({3, static_cast<std::uint32_t>(b * n_text + i)});
  }
  const Tensor sources[4] = {p.prompts.v_prompt, p.prompts.l_prompt, image, text};
  return {assemble_rows(sources, map), layout, B};
}

/// Layout of the second stage: [stage-2 prompt | image | text], reported
/// with the prompt rows in the `vp` span and an empty `lp` span.
inline SequenceLayout stage2_layout(const SequenceLayout& s1, std::size_t prompt_rows) {
  SequenceLayout l = build_layout(static_cast<long>(prompt_rows), 0, static_cast<long>(s1.img.size()),
                                  static_cast<long>(s1.txt.size()));
  if (s1.mask_index) l = with_mask_index(l, l.txt.begin + (*s1.mask_index - s1.txt.begin));
  return l;
}

struct ForwardOutput {
  Tensor cls;                 // [batch, d]
  std::optional<Tensor> mask; // [batch, d] when the text carries [MASK]
};

inline void check_compatible(const ModelConfig& c, const Params& p) {
  c.validate();
  const std::size_t d = c.hidden_dim;
  auto expect = [](const Tensor& t, const Shape& s, const char* what) {
    if (t.shape() != s) {
      throw ConfigError(std::string("parameters do not match config: ") + what + " is " +
                        shape_str(t.shape()) + ", expected " + shape_str(s));
    }
  };
  expect(p.emb.patch_w, {c.patch_feature_dim, d}, "embed.patch_w");
  expect(p.emb.img_pos, {c.n_patches, d}, "embed.img_pos");
  expect(p.emb.tok_emb, {c.vocab_size, d}, "embed.tok_emb");
  expect(p.emb.txt_pos, {c.max_text_len, d}, "embed.txt_pos");
  expect(p.prompts.v_prompt, {c.vp_len, d}, "prompts.v");
  expect(p.prompts.l_prompt, {c.lp_len, d}, "prompts.l");
  expect(p.prompts.vl_prompt, {c.vlp_len, d}, "prompts.vl");
  if (p.stage1.size() != c.stage1_layers || p.stage2.size() != c.stage2_layers) {
    throw ConfigError("parameters do not match config: layer counts differ");
  }
  if (p.fusion.size() + 1 < c.block_count) {
    throw ConfigError("parameters do not match config: " + std::to_string(p.fusion.size()) +
                      " fusion layers for " + std::to_string(c.block_count) + " blocks");
  }
  if (c.head == HeadType::kClassification) {
    expect(p.heads.cls_w, {d, c.n_classes}, "head.cls_w");
  } else {
    expect(p.heads.lm_w, {d, c.vocab_size}, "head.lm_w");
  }
}

/// Full network over a batch:
///   embed -> stage-1 blocks (fusing prompts between blocks) -> drop V/L
///   prompts and prepend the VL-Prompt -> stage-2 layers -> final norm on
///   the [CLS] (and [MASK]) rows.
inline ForwardOutput forward_batch(const ModelConfig& c, const Params& p,
                                   std::span<const Sample> batch) {
  check_compatible(c, p);
  Embedded e = embed_inputs(c, p, batch);
  const std::size_t B = e.batch, L1 = e.layout.total();
  const BoolMatrix mask1 = c.prompt_style == PromptStyle::kMoPE ? build_stage1_mask(e.layout)
                                                                : build_full_mask(L1);
  const BlockLayout blocks =
      partition_blocks(static_cast<long>(c.stage1_layers), static_cast<long>(c.block_count));

  Tensor h = e.hidden;
  std::size_t layer = 0;
  for (std::size_t b = 0; b < blocks.block_count(); ++b) {
    if (b > 0) h = apply_fusion(p.fusion[b - 1], h, e.layout, B);
    for (std::size_t i = 0; i < blocks.block_sizes[b]; ++i, ++layer)
      h = stage1_layer_forward(p.stage1[layer], h, e.layout, mask1, c.n_heads, B);
  }

  // Stage-2 entry.
  const bool soft = c.prompt_style == PromptStyle::kSoft;
  const std::size_t prompt_rows = soft ? e.layout.lp.size() : c.vlp_len;
  const SequenceLayout l2 = stage2_layout(e.layout, prompt_rows);
  const std::size_t L2 = l2.total();
  std::vector<RowRef> map;
  map.reserve(B * L2);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < prompt_rows; ++i) {
      map.push_back(soft ? RowRef{0, static_cast<std::uint32_t>(b * L1 + e.layout.lp.begin + i)}
                         : RowRef{1, static_cast<std::uint32_t>(i)});
    }
    for (std::size_t r = e.layout.img.begin; r < e.layout.txt.end; ++r)
      map.push_back({0, static_cast<std::uint32_t>(b * L1 + r)});
  }
  const Tensor sources[2] = {h, p.prompts.vl_prompt};
  h = assemble_rows(sources, map);
  for (const MoMELayer& l : p.stage2) h = stage2_layer_forward(l, h, l2, c.n_heads, B);

  auto pick = [&](std::size_t pos) {
    std::vector<std::size_t> rows(B);
    for (std::size_t b = 0; b < B; ++b) rows[b] = b * L2 + pos;
    return layer_norm(gather_rows(h, rows), p.final_norm.gamma, p.final_norm.beta);
  };
  ForwardOutput out{pick(l2.cls_index()), std::nullopt};
  if (l2.mask_index) out.mask = pick(*l2.mask_index);
  return out;
}

struct SingleOutput {
  Tensor cls;                  // [d]
  std::optional<Tensor> mask;  // [d]
};

inline SingleOutput forward(const ModelConfig& c, const Params& p, const Sample& s) {
  ForwardOutput o = forward_batch(c, p, std::span<const Sample>(&s, 1));
  SingleOutput r{reshape(o.cls, {c.hidden_dim}), std::nullopt};
  if (o.mask) r.mask = reshape(*o.mask, {c.hidden_dim});
  return r;
}

/// Class logits [batch, n_classes] from the configured head. The LM head
/// scores the vocabulary at [MASK] and keeps the label-word columns.
inline Tensor head_logits(const ModelConfig& c, const Params& p, const ForwardOutput& o) {
  if (c.head == HeadType::kClassification) return add_bias(matmul(o.cls, p.heads.cls_w), p.heads.cls_b);
  if (!o.mask) throw ConfigError("lm_verbalizer head needs a template with [MASK]");
  std::vector<std::size_t> cols(p.heads.verbalizer.begin(), p.heads.verbalizer.end());
  return select_cols(add_bias(matmul(*o.mask, p.heads.lm_w), p.heads.lm_b), cols);
}

inline Tensor batch_loss(const ModelConfig& c, const Params& p, std::span<const Sample> batch) {
  std::vector<int> labels;
  for (const Sample& s : batch) labels.push_back(s.label);
  return cross_entropy(head_logits(c, p, forward_batch(c, p, batch)), labels);
}

/// Class probabilities per sample (inference; records no gradients when
/// called outside a GradTape).
inline std::vector<std::vector<double>> predict_batch(const ModelConfig& c, const Params& p,
                                                      std::span<const Sample> batch) {
  const Tensor logits = head_logits(c, p, forward_batch(c, p, batch));
  const std::size_t K = logits.dim(1);
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < logits.dim(0); ++b)
    out.push_back(softmax(logits.data().subspan(b * K, K)));
  return out;
}

inline std::vector<double> predict(const ModelConfig& c, const Params& p, const Sample& s) {
  return predict_batch(c, p, std::span<const Sample>(&s, 1)).front();
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace mopebaf
