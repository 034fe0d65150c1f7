#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fpsa/fpi.hpp"
#include "fpsa/ops.hpp"
#include "fpsa/optim.hpp"
#include "fpsa/rng.hpp"

namespace fpsa {

enum class BackwardMode { unrolled, implicit, phantom };

inline const char* backward_mode_name(BackwardMode m) {
  switch (m) {
    case BackwardMode::unrolled: return "unrolled";
    case BackwardMode::implicit: return "implicit";
    case BackwardMode::phantom: return "phantom";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// spectral normalization
// ---------------------------------------------------------------------------

template <typename T>
struct SpectralState {
  Tensor<T> u;  // left power-iteration vector, size rows(W)
  Tensor<T> v;  // right vector, size cols(W)
  double last_sigma = 0.0;
  bool initialized = false;
};

template <typename T>
void init_spectral_state(SpectralState<T>& s, int64_t rows, int64_t cols, Rng& rng) {
  s.u = Tensor<T>({rows});
  s.v = Tensor<T>::zeros({cols});
  rng.fill_normal(s.u, 1.0);
  double n = s.u.frob_norm();
  if (n < 1e-30) n = 1.0;
  for (auto& x : s.u.data) x = static_cast<T>(static_cast<double>(x) / n);
  s.initialized = true;
}

// One power-iteration refresh of (u, v) followed by the shrink-only rescale
// W / max(sigma_hat, 1). The returned var differentiates through W with the
// direction vectors held constant. A near-zero matrix passes through
// unchanged (sigma_hat stays below the clamp).
template <typename T>
Var<T> spectral_normalize(const Var<T>& w, SpectralState<T>& state, bool update_state = true) {
  const Tensor<T>& W = w->value;
  if (W.rank() != 2) throw ShapeError("spectral_normalize expects a 2-D matrix");
  const int64_t R = W.shape[0], C = W.shape[1];
  if (!state.initialized) {
    Rng rng(0x5eedu);
    init_spectral_state(state, R, C, rng);
  }
  if (update_state) {
    // v <- normalize(W^T u), u <- normalize(W v)
    Tensor<T> v({C});
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (int64_t r = 0; r < R; ++r)
        s += static_cast<double>(W[r * C + c]) * static_cast<double>(state.u[r]);
      v[c] = static_cast<T>(s);
    }
    const double vn = v.frob_norm();
    if (vn > 1e-30) {
      for (auto& x : v.data) x = static_cast<T>(static_cast<double>(x) / vn);
      Tensor<T> u({R});
      for (int64_t r = 0; r < R; ++r) {
        double s = 0;
        for (int64_t c = 0; c < C; ++c)
          s += static_cast<double>(W[r * C + c]) * static_cast<double>(v[c]);
        u[r] = static_cast<T>(s);
      }
      const double un = u.frob_norm();
      if (un > 1e-30) {
        for (auto& x : u.data) x = static_cast<T>(static_cast<double>(x) / un);
        state.u = std::move(u);
        state.v = std::move(v);
      }
    }
    if (state.v.numel() != C || state.v.frob_norm() < 1e-30) {
      // keep a valid v even when the update was skipped
      state.v = Tensor<T>::zeros({C});
    }
  }
  auto sigma = ops::bilinear_form(w, state.u, state.v);
  state.last_sigma = static_cast<double>(sigma->value[0]);
  return ops::spectral_scale(w, sigma);
}

// ---------------------------------------------------------------------------
// layer parameters
// ---------------------------------------------------------------------------

// Parameter bundle shared by the fixed-point and the single-pass (vanilla)
// attention blocks: fused QKV projection, per-head temperatures, output
// projection, FFN and LayerNorm affine. The two variants differ only in how
// the forward pass uses these tensors, so parameter counts match exactly.
template <typename T>
struct FpsaLayer {
  int64_t dim = 0;
  int64_t heads = 0;
  bool use_tanh_step_norm = true;
  bool use_spectral_norm = true;

  Var<T> w_qkv, b_qkv;          // [C, 3C], [3C]
  Var<T> rho_tau;               // [H]; tau = softplus(rho), so tau > 0 always
  Var<T> w_o, b_o;              // [C, C], [C]
  Var<T> w_ff1, b_ff1;          // [C, 4C], [4C]
  Var<T> w_ff2, b_ff2;          // [4C, C], [C]
  Var<T> ln_gain, ln_bias;      // [C]
  SpectralState<T> sn;          // power-iteration buffers (not learnable)

  int64_t head_dim() const { return dim / heads; }

  static FpsaLayer init(int64_t dim, int64_t heads, Rng& rng, bool tanh_step = true,
                        bool spectral = true) {
    if (heads < 1 || dim % heads != 0)
      throw ConfigError("model dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    FpsaLayer L;
    L.dim = dim;
    L.heads = heads;
    L.use_tanh_step_norm = tanh_step;
    L.use_spectral_norm = spectral;
    auto uniform_init = [&rng](Shape s, int64_t fan_in) {
      Tensor<T> t(std::move(s));
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      rng.fill_uniform(t, -b, b);
      return t;
    };
    L.w_qkv = leaf<T>(uniform_init({dim, 3 * dim}, dim));
    L.b_qkv = leaf<T>(Tensor<T>::zeros({3 * dim}));
    // softplus(rho) == 1  =>  rho = ln(e - 1)
    L.rho_tau = leaf<T>(Tensor<T>::full({heads}, static_cast<T>(0.5413248546129181)));
    L.w_o = leaf<T>(uniform_init({dim, dim}, dim));
    L.b_o = leaf<T>(Tensor<T>::zeros({dim}));
    L.w_ff1 = leaf<T>(uniform_init({dim, 4 * dim}, dim));
    L.b_ff1 = leaf<T>(Tensor<T>::zeros({4 * dim}));
    L.w_ff2 = leaf<T>(uniform_init({4 * dim, dim}, 4 * dim));
    L.b_ff2 = leaf<T>(Tensor<T>::zeros({dim}));
    L.ln_gain = leaf<T>(Tensor<T>::ones({dim}));
    L.ln_bias = leaf<T>(Tensor<T>::zeros({dim}));
    init_spectral_state(L.sn, dim, 3 * dim, rng);
    return L;
  }

  NamedParams<T> params(const std::string& prefix = "layer") const {
    return {{prefix + "/w_qkv", w_qkv}, {prefix + "/b_qkv", b_qkv},
            {prefix + "/rho_tau", rho_tau}, {prefix + "/w_o", w_o},
            {prefix + "/b_o", b_o},     {prefix + "/w_ff1", w_ff1},
            {prefix + "/b_ff1", b_ff1}, {prefix + "/w_ff2", w_ff2},
            {prefix + "/b_ff2", b_ff2}, {prefix + "/ln_gain", ln_gain},
            {prefix + "/ln_bias", ln_bias}};
  }
};

// ---------------------------------------------------------------------------
// step function
// ---------------------------------------------------------------------------

// [B, N, C] -> [B, H, N, Dh]
template <typename T>
Var<T> split_heads(const Var<T>& x, int64_t heads) {
  const auto& s = x->value.shape;
  const int64_t B = s[0], N = s[1], C = s[2];
  return ops::transpose(ops::reshape(x, {B, N, heads, C / heads}), {0, 2, 1, 3});
}

// [B, H, N, Dh] -> [B, N, C]
template <typename T>
Var<T> merge_heads(const Var<T>& x) {
  const auto& s = x->value.shape;
  const int64_t B = s[0], H = s[1], N = s[2], Dh = s[3];
  return ops::reshape(ops::transpose(x, {0, 2, 1, 3}), {B, N, H * Dh});
}

// Everything the iteration step needs besides the iterate itself. Built once
// per forward pass; the same parameter objects are referenced by every
// iteration (dynamic parameter reuse).
template <typename T>
struct StepContext {
  Var<T> w_qkv_n;     // spectral-normalized fused projection (or raw)
  Var<T> b_qkv;
  Var<T> head_scale;  // [H], head_dim^-1/2 / tau_h
  Var<T> v_static;    // [B, H, N, Dh], computed once from the block input
  int64_t heads = 0;
  int64_t dim = 0;
  bool tanh_step = true;
  std::function<void(const Tensor<T>&)>* probs_sink = nullptr;  // optional capture
};

template <typename T>
Var<T> head_temperature_scale(const FpsaLayer<T>& L) {
  const double k = 1.0 / std::sqrt(static_cast<double>(L.head_dim()));
  return ops::recip_scaled(ops::softplus(L.rho_tau), k);
}

template <typename T>
StepContext<T> make_step_context(FpsaLayer<T>& L, const Var<T>& x, bool update_power = true) {
  StepContext<T> ctx;
  ctx.heads = L.heads;
  ctx.dim = L.dim;
  ctx.tanh_step = L.use_tanh_step_norm;
  ctx.w_qkv_n = L.use_spectral_norm ? spectral_normalize(L.w_qkv, L.sn, update_power) : L.w_qkv;
  ctx.b_qkv = L.b_qkv;
  ctx.head_scale = head_temperature_scale(L);
  auto qkv_x = ops::linear(x, ctx.w_qkv_n, ctx.b_qkv);            // [B, N, 3C]
  auto v_slice = ops::slice(qkv_x, -1, 2 * L.dim, L.dim);          // [B, N, C]
  ctx.v_static = split_heads(v_slice, L.heads);                    // [B, H, N, Dh]
  return ctx;
}

// One refinement step: queries and keys come from the current iterate (the
// V part of its projection is discarded), values stay static. Scores use
// head_dim^-1/2 / tau_h scaling, rows are softmax-normalized, and the output
// is squashed by tanh when the step norm is enabled.
template <typename T>
Var<T> attention_step(const Var<T>& z, const StepContext<T>& ctx) {
  const int64_t C = ctx.dim;
  auto qkv = ops::linear(z, ctx.w_qkv_n, ctx.b_qkv);
  auto q = split_heads(ops::slice(qkv, -1, 0, C), ctx.heads);
  auto k = split_heads(ops::slice(qkv, -1, C, C), ctx.heads);
  auto scores = ops::scale_per_head(ops::matmul(q, ops::transpose(k, {0, 1, 3, 2})),
                                    ctx.head_scale);
  {
    const Tensor<T>& sv = scores->value;
    const int64_t per_head = sv.shape[2] * sv.shape[3];
    for (int64_t i = 0; i < sv.numel(); ++i) {
      if (!std::isfinite(static_cast<double>(sv[i])))
        throw NumericError("NaN/Inf in attention scores of head " +
                           std::to_string((i / per_head) % sv.shape[1]));
    }
  }
  auto probs = ops::softmax(scores, -1);
  if (ctx.probs_sink && *ctx.probs_sink) (*ctx.probs_sink)(probs->value);
  auto out = merge_heads(ops::matmul(probs, ctx.v_static));
  if (ctx.tanh_step) out = ops::tanh(out);
  return out;
}

// Output block applied after the loop: Y = LayerNorm(FFN(A) + A), A = W_O Z.
template <typename T>
Var<T> post_loop(const FpsaLayer<T>& L, const Var<T>& z) {
  auto a = ops::linear(z, L.w_o, L.b_o);
  auto h = ops::gelu(ops::linear(a, L.w_ff1, L.b_ff1));
  auto f = ops::linear(h, L.w_ff2, L.b_ff2);
  return ops::layer_norm(ops::add(f, a), L.ln_gain, L.ln_bias);
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct FpsaForward {
  Var<T> y;                 // block output [B, N, C]
  Var<T> z_star;            // equilibrium state; a detached leaf unless unrolled
  Var<T> v_static_var;      // recorded V path (implicit/phantom only)
  Var<T> step_weight;       // the one normalized projection every iteration shares
  FpiResult<T> fpi;         // forward solve trace
  FpiResult<T> adjoint_fpi; // filled by the implicit backward
  BackwardMode mode = BackwardMode::implicit;
  FpiConfig cfg;
  Tensor<T> v_static_value;
  Tensor<T> sn_u, sn_v;     // power vectors in effect for this forward
};

// Runs the fixed-point solve with per-token, per-head freezing and applies
// the output block. In implicit/phantom mode the solve itself is untaped
// (constant memory in max_iter); only the equilibrium re-enters the graph.
template <typename T>
FpsaForward<T> forward(FpsaLayer<T>& L, const Var<T>& x, const FpiConfig& cfg,
                       BackwardMode mode = BackwardMode::implicit, bool update_power = true,
                       std::function<void(const Tensor<T>&)>* probs_sink = nullptr) {
  cfg.validate();
  if (x->value.rank() != 3 || x->value.shape[2] != L.dim)
    throw ShapeError("fpsa forward expects [B, N, " + std::to_string(L.dim) + "], got " +
                     shape_str(x->value.shape));
  if (!x->value.all_finite()) throw NumericError("non-finite input to fpsa forward");

  FpiConfig loop_cfg = cfg;
  loop_cfg.granularity = FreezeGranularity::per_token_per_head;

  FpsaForward<T> fr;
  fr.mode = mode;
  fr.cfg = loop_cfg;

  StepContext<T> ctx = make_step_context(L, x, update_power);
  ctx.probs_sink = probs_sink;
  fr.step_weight = ctx.w_qkv_n;
  fr.sn_u = L.sn.u;
  fr.sn_v = L.sn.v;
  fr.v_static_value = ctx.v_static->value;

  const auto layout = make_chunk_layout(x->value.shape, loop_cfg.granularity, L.heads);
  auto step = [&ctx](const Var<T>& z) { return attention_step(z, ctx); };

  if (mode == BackwardMode::unrolled) {
    FpiConfig rec_cfg = loop_cfg;
    rec_cfg.record_iterates = true;  // the taped trajectory is the point
    fr.fpi = solve<T>(step, x, rec_cfg, layout);
    fr.z_star = fr.fpi.state;
  } else {
    fr.v_static_var = ctx.v_static;
    {
      NoGradGuard ng;
      fr.fpi = solve<T>(step, constant(x->value), loop_cfg, layout);
    }
    fr.z_star = leaf(fr.fpi.state->value, true);
  }
  fr.y = post_loop(L, fr.z_star);
  return fr;
}

// ---------------------------------------------------------------------------
// equilibrium backward (implicit / phantom)
// ---------------------------------------------------------------------------

// Completes the backward pass for a forward run in implicit or phantom mode.
// Call after the main backward sweep has deposited dL/dZ* on fr.z_star.
//
// implicit: solves a = g + J_f(Z*)^T a with the same stopping rule and
// freezing as the forward pass, zeroes adjoint chunks whose forward solve
// did not converge, then pushes a* through one step evaluation for the
// loop's parameter gradients. phantom: uses a* = g through the final step
// evaluation only. Both add the exact gradients of the static value path.
template <typename T>
void backward_equilibrium(FpsaLayer<T>& L, FpsaForward<T>& fr) {
  if (fr.mode == BackwardMode::unrolled)
    throw ConfigError("unrolled forward already carries the full graph; "
                      "equilibrium backward is only for implicit/phantom mode");
  const Tensor<T> g = grad_or_zeros(fr.z_star);

  // Isolated re-recording from leaf copies so session pullbacks cannot
  // disturb gradients already accumulated on the live parameters.
  auto wq = leaf<T>(L.w_qkv->value);
  auto bq = leaf<T>(L.b_qkv->value);
  auto rho = leaf<T>(L.rho_tau->value);
  const bool phantom = fr.mode == BackwardMode::phantom;
  auto zs = leaf<T>(phantom ? fr.fpi.prev_state : fr.z_star->value);
  auto vs = leaf<T>(fr.v_static_value);

  Var<T> out;
  {
    GradModeGuard record(true);
    StepContext<T> ctx;
    ctx.heads = L.heads;
    ctx.dim = L.dim;
    ctx.tanh_step = L.use_tanh_step_norm;
    if (L.use_spectral_norm) {
      auto sigma = ops::bilinear_form(wq, fr.sn_u, fr.sn_v);
      ctx.w_qkv_n = ops::spectral_scale(wq, sigma);
    } else {
      ctx.w_qkv_n = wq;
    }
    ctx.b_qkv = bq;
    const double k = 1.0 / std::sqrt(static_cast<double>(L.head_dim()));
    ctx.head_scale = ops::recip_scaled(ops::softplus(rho), k);
    ctx.v_static = vs;
    out = attention_step(zs, ctx);
  }
  VjpSession<T> session(out);

  Tensor<T> a_star;
  if (phantom) {
    a_star = g;
  } else {
    NoGradGuard ng;
    auto adjoint_step = [&](const Var<T>& a) {
      session.pullback(a->value);
      Tensor<T> t = grad_or_zeros(zs);
      for (int64_t i = 0; i < t.numel(); ++i) t[i] += g[i];
      return constant(std::move(t));
    };
    try {
      fr.adjoint_fpi = solve<T>(adjoint_step, constant(g), fr.cfg, fr.fpi.layout);
    } catch (const NumericError& e) {
      throw NumericError(std::string("adjoint solve diverged: ") + e.what() +
                         " (forward iterations: " + std::to_string(fr.fpi.total_iterations) +
                         ")");
    }
    a_star = fr.adjoint_fpi.state->value;
    // Non-converged forward chunks have no valid equilibrium; their adjoints
    // are discarded before any parameter VJP.
    fr.fpi.layout.for_each_element([&](int64_t chunk, int64_t i) {
      if (!fr.fpi.converged[chunk]) a_star[i] = T(0);
    });
  }

  session.pullback(a_star);
  auto accumulate = [](const Var<T>& dst, const Var<T>& src) {
    if (src->grad.data.empty()) return;
    dst->ensure_grad();
    for (int64_t i = 0; i < dst->grad.numel(); ++i) dst->grad[i] += src->grad[i];
  };
  accumulate(L.w_qkv, wq);
  accumulate(L.b_qkv, bq);
  accumulate(L.rho_tau, rho);

  // Exact gradients for the static value path (outside the loop).
  if (fr.v_static_var && fr.v_static_var->requires_grad)
    backward_from(fr.v_static_var, grad_or_zeros(vs));
}

// ---------------------------------------------------------------------------
// vanilla baseline
// ---------------------------------------------------------------------------

// Single-pass multi-head attention with the same parameter shapes: here the
// V slice of the fused projection is used directly and there is no spectral
// norm, no tanh squashing and no iteration.
template <typename T>
Var<T> vanilla_forward(const FpsaLayer<T>& L, const Var<T>& x,
                       std::function<void(const Tensor<T>&)>* probs_sink = nullptr) {
  if (x->value.rank() != 3 || x->value.shape[2] != L.dim)
    throw ShapeError("vanilla forward expects [B, N, " + std::to_string(L.dim) + "], got " +
                     shape_str(x->value.shape));
  const int64_t C = L.dim;
  auto qkv = ops::linear(x, L.w_qkv, L.b_qkv);
  auto q = split_heads(ops::slice(qkv, -1, 0, C), L.heads);
  auto k = split_heads(ops::slice(qkv, -1, C, C), L.heads);
  auto v = split_heads(ops::slice(qkv, -1, 2 * C, C), L.heads);
  auto scores = ops::scale_per_head(ops::matmul(q, ops::transpose(k, {0, 1, 3, 2})),
                                    head_temperature_scale(L));
  auto probs = ops::softmax(scores, -1);
  if (probs_sink && *probs_sink) (*probs_sink)(probs->value);
  auto out = merge_heads(ops::matmul(probs, v));
  return post_loop(L, out);
}

// Attention probabilities of one step evaluated at a given state (used for
// heatmap export and diagnostics). Returns [B, H, N, N].
template <typename T>
Tensor<T> attention_probs_at(FpsaLayer<T>& L, const Tensor<T>& x, const Tensor<T>& z) {
  NoGradGuard ng;
  Tensor<T> captured;
  std::function<void(const Tensor<T>&)> sink = [&](const Tensor<T>& p) { captured = p; };
  StepContext<T> ctx = make_step_context(L, constant(x), /*update_power=*/false);
  ctx.probs_sink = &sink;
  attention_step(constant(z), ctx);
  return captured;
}

}  // namespace fpsa
