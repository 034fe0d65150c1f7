#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fpsa/attention.hpp"
#include "fpsa/tasks.hpp"

namespace fpsa {

enum class ModelKind { induction_self, induction_vanilla, patch_self, patch_vanilla };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::induction_self: return "induction_self";
    case ModelKind::induction_vanilla: return "induction_vanilla";
    case ModelKind::patch_self: return "patch_self";
    case ModelKind::patch_vanilla: return "patch_vanilla";
  }
  return "?";
}

struct ModelSpec {
  ModelKind kind = ModelKind::induction_self;
  int64_t vocab_size = 20;  // induction ordinary vocabulary
  int64_t dim = 0;          // 0 -> task default (32 induction, 64 patch)
  int64_t heads = 0;        // 0 -> task default (2 induction, 4 patch)
  bool use_pos_emb = true;

  bool is_self() const {
    return kind == ModelKind::induction_self || kind == ModelKind::patch_self;
  }
  bool is_induction() const {
    return kind == ModelKind::induction_self || kind == ModelKind::induction_vanilla;
  }
  int64_t model_dim() const { return dim > 0 ? dim : (is_induction() ? 32 : 64); }
  int64_t n_heads() const { return heads > 0 ? heads : (is_induction() ? 2 : 4); }
  int64_t n_tokens() const { return is_induction() ? InductionTaskSpec::seq_len : 9; }
  int64_t n_classes() const { return is_induction() ? vocab_size + 4 : 10; }
};

// Single attention-block classifier for both toy tasks. The self and vanilla
// variants are built from the same seed with identical parameter shapes, so
// they start from identical values and stay count-matched.
template <typename T>
struct Model {
  ModelSpec spec;
  Var<T> token_emb;  // induction: [vocab+4, C]
  Var<T> w_patch, b_patch;  // patch: [144, C], [C]
  Var<T> pos_emb;    // [N, C] (zeros and frozen when positional input is off)
  FpsaLayer<T> layer;
  Var<T> w_cls, b_cls;  // [C, classes], [classes]

  NamedParams<T> params() const {
    NamedParams<T> p;
    if (spec.is_induction()) {
      p.emplace_back("embed/token", token_emb);
    } else {
      p.emplace_back("embed/w_patch", w_patch);
      p.emplace_back("embed/b_patch", b_patch);
    }
    if (spec.use_pos_emb) p.emplace_back("embed/pos", pos_emb);
    for (auto& kv : layer.params("block")) p.push_back(kv);
    p.emplace_back("head/w_cls", w_cls);
    p.emplace_back("head/b_cls", b_cls);
    return p;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [name, v] : params()) n += v->value.numel();
    return n;
  }
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, uint64_t seed) {
  const int64_t C = spec.model_dim();
  const int64_t H = spec.n_heads();
  if (C % H != 0)
    throw ConfigError("model dim " + std::to_string(C) + " not divisible by heads " +
                      std::to_string(H));
  Model<T> m;
  m.spec = spec;
  Rng rng(seed);
  const double b = 1.0 / std::sqrt(static_cast<double>(C));
  // unit-variance embeddings: attention scores start O(1), so alignment
  // patterns are differentiated from the first iteration instead of the
  // solve collapsing into uniform token mixing
  const double emb_b = std::sqrt(3.0);
  if (spec.is_induction()) {
    Tensor<T> emb({spec.vocab_size + 4, C});
    rng.fill_uniform(emb, -emb_b, emb_b);
    m.token_emb = leaf<T>(std::move(emb));
  } else {
    const PatchTaskSpec patch;
    Tensor<T> wp({patch.patch_dim(), C});
    rng.fill_uniform(wp, -1.0 / std::sqrt(static_cast<double>(patch.patch_dim())),
                     1.0 / std::sqrt(static_cast<double>(patch.patch_dim())));
    m.w_patch = leaf<T>(std::move(wp));
    m.b_patch = leaf<T>(Tensor<T>::zeros({C}));
  }
  Tensor<T> pos({spec.n_tokens(), C});
  if (spec.use_pos_emb) rng.fill_uniform(pos, -emb_b, emb_b);
  m.pos_emb = leaf<T>(std::move(pos), spec.use_pos_emb);
  m.layer = FpsaLayer<T>::init(C, H, rng, /*tanh_step=*/spec.is_self(),
                               /*spectral=*/spec.is_self());
  Tensor<T> wc({C, spec.n_classes()});
  rng.fill_uniform(wc, -b, b);
  m.w_cls = leaf<T>(std::move(wc));
  m.b_cls = leaf<T>(Tensor<T>::zeros({spec.n_classes()}));
  return m;
}

template <typename T>
struct ModelOutput {
  Var<T> logits;          // [B, classes]
  FpsaForward<T> block;   // populated for self variants
  bool has_block = false;
};

// tokens [B, 7] -> logits at the MASK position.
template <typename T>
ModelOutput<T> model_forward_tokens(Model<T>& m, const Tensor<int64_t>& tokens,
                                    const FpiConfig& cfg,
                                    BackwardMode mode = BackwardMode::implicit,
                                    bool update_power = true,
                                    std::function<void(const Tensor<T>&)>* probs_sink = nullptr) {
  if (!m.spec.is_induction()) throw ConfigError("token input fed to a patch model");
  if (tokens.rank() != 2 || tokens.shape[1] != InductionTaskSpec::seq_len)
    throw ShapeError("induction tokens must be [B, 7], got " + shape_str(tokens.shape));
  auto x = ops::embedding(m.token_emb, tokens);
  if (m.spec.use_pos_emb) x = ops::add(x, m.pos_emb);
  ModelOutput<T> out;
  Var<T> y;
  if (m.spec.is_self()) {
    out.block = forward(m.layer, x, cfg, mode, update_power, probs_sink);
    out.has_block = true;
    y = out.block.y;
  } else {
    y = vanilla_forward(m.layer, x, probs_sink);
  }
  const int64_t B = tokens.shape[0];
  auto at_mask = ops::reshape(ops::slice(y, 1, InductionTaskSpec::mask_pos, 1),
                              {B, m.spec.model_dim()});
  out.logits = ops::linear(at_mask, m.w_cls, m.b_cls);
  return out;
}

// patches [B, 9, 144] -> class logits (mean-pooled tokens).
template <typename T>
ModelOutput<T> model_forward_patches(Model<T>& m, const Tensor<T>& patches,
                                     const FpiConfig& cfg,
                                     BackwardMode mode = BackwardMode::implicit,
                                     bool update_power = true,
                                     std::function<void(const Tensor<T>&)>* probs_sink = nullptr) {
  if (m.spec.is_induction()) throw ConfigError("patch input fed to a token model");
  if (patches.rank() != 3 || patches.shape[1] != m.spec.n_tokens())
    throw ShapeError("patch input must be [B, 9, 144], got " + shape_str(patches.shape));
  auto x = ops::linear(constant(patches), m.w_patch, m.b_patch);
  if (m.spec.use_pos_emb) x = ops::add(x, m.pos_emb);
  ModelOutput<T> out;
  Var<T> y;
  if (m.spec.is_self()) {
    out.block = forward(m.layer, x, cfg, mode, update_power, probs_sink);
    out.has_block = true;
    y = out.block.y;
  } else {
    y = vanilla_forward(m.layer, x, probs_sink);
  }
  auto pooled = ops::mean_axis(y, 1);
  out.logits = ops::linear(pooled, m.w_cls, m.b_cls);
  return out;
}

// Backward for one model output: the main reverse sweep plus the equilibrium
// correction when the block ran in implicit/phantom mode.
template <typename T>
void model_backward(Model<T>& m, ModelOutput<T>& out, const Var<T>& loss) {
  backward(loss);
  if (out.has_block && out.block.mode != BackwardMode::unrolled)
    backward_equilibrium(m.layer, out.block);
}

}  // namespace fpsa
