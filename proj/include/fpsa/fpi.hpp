#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fpsa/autodiff.hpp"
#include "fpsa/tensor.hpp"

namespace fpsa {

enum class FreezeGranularity { whole, per_token, per_token_per_head };

struct FpiConfig {
  int max_iter = 100;
  double epsilon = 1e-4;
  FreezeGranularity granularity = FreezeGranularity::whole;
  bool record_iterates = false;  // debug: keep per-iteration state snapshots

  void validate() const {
    if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
    if (epsilon <= 0) throw ConfigError("epsilon must be positive");
  }
};

// Maps a flat state tensor onto convergence chunks. The state is viewed as
// [batch, tokens, heads * chunk_width] row-major; chunk (b, n, h) covers the
// h-th width-sized channel slice of token (b, n).
struct ChunkLayout {
  int64_t batch = 1;
  int64_t tokens = 1;
  int64_t heads = 1;
  int64_t chunk_width = 1;

  int64_t n_chunks() const { return batch * tokens * heads; }
  int64_t numel() const { return batch * tokens * heads * chunk_width; }

  template <typename Fn>  // Fn(chunk_index, flat_element_index)
  void for_each_element(Fn&& fn) const {
    int64_t flat = 0;
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t n = 0; n < tokens; ++n)
        for (int64_t h = 0; h < heads; ++h) {
          const int64_t chunk = (b * tokens + n) * heads + h;
          for (int64_t w = 0; w < chunk_width; ++w) fn(chunk, flat++);
        }
  }
};

// Derive the chunk layout for a state tensor. Token-level granularities
// interpret the shape as [tokens, channels] or [batch, tokens, channels...].
inline ChunkLayout make_chunk_layout(const Shape& shape, FreezeGranularity g,
                                     int64_t heads = 1) {
  ChunkLayout layout;
  const int64_t total = shape_numel(shape);
  switch (g) {
    case FreezeGranularity::whole:
      layout = {1, 1, 1, total};
      break;
    case FreezeGranularity::per_token:
    case FreezeGranularity::per_token_per_head: {
      if (shape.size() < 2)
        throw ShapeError("token-level freezing needs rank >= 2, got " + shape_str(shape));
      const int64_t tokens = shape.size() == 2 ? shape[0] : shape[1];
      const int64_t batch = shape.size() == 2 ? 1 : shape[0];
      const int64_t channels = total / (batch * tokens);
      const int64_t h = g == FreezeGranularity::per_token ? 1 : heads;
      if (h < 1 || channels % h != 0)
        throw ShapeError("channels " + std::to_string(channels) + " not divisible into " +
                         std::to_string(h) + " head slices");
      layout = {batch, tokens, h, channels / h};
      break;
    }
  }
  return layout;
}

// Relative Frobenius residual per chunk, with an absolute-norm fallback when
// the reference chunk norm is below 1e-12 (e.g. zero padding tokens).
struct ChunkResiduals {
  std::vector<double> relative;   // stopping statistic
  std::vector<double> step_norm;  // ||z_next - z||_F per chunk
};

template <typename T>
ChunkResiduals residual(const Tensor<T>& z_next, const Tensor<T>& z, const ChunkLayout& layout) {
  if (!z_next.same_shape(z))
    throw ShapeError("residual shapes differ: " + shape_str(z_next.shape) + " vs " +
                     shape_str(z.shape));
  if (layout.numel() != z.numel())
    throw ShapeError("chunk layout covers " + std::to_string(layout.numel()) +
                     " elements, state has " + std::to_string(z.numel()));
  const int64_t nc = layout.n_chunks();
  std::vector<double> d2(nc, 0.0), n2(nc, 0.0);
  layout.for_each_element([&](int64_t chunk, int64_t i) {
    const double d = static_cast<double>(z_next[i]) - static_cast<double>(z[i]);
    d2[chunk] += d * d;
    const double zi = static_cast<double>(z[i]);
    n2[chunk] += zi * zi;
  });
  ChunkResiduals out;
  out.relative.resize(nc);
  out.step_norm.resize(nc);
  for (int64_t c = 0; c < nc; ++c) {
    const double dn = std::sqrt(d2[c]);
    const double zn = std::sqrt(n2[c]);
    out.step_norm[c] = dn;
    out.relative[c] = zn < 1e-12 ? dn : dn / zn;
  }
  return out;
}

template <typename T>
ChunkResiduals residual(const Tensor<T>& z_next, const Tensor<T>& z, FreezeGranularity g,
                        int64_t heads = 1) {
  return residual(z_next, z, make_chunk_layout(z.shape, g, heads));
}

// Differentiable chunk-wise select: frozen chunks are copied bit-exactly
// from z, the rest from z_next. Gradients route to the branch that was taken.
template <typename T>
Var<T> selective_update(const Var<T>& z, const Var<T>& z_next,
                        const std::vector<uint8_t>& frozen, const ChunkLayout& layout) {
  const Tensor<T>& Z = z->value;
  const Tensor<T>& Zn = z_next->value;
  if (!Z.same_shape(Zn))
    throw ShapeError("selective_update shapes differ: " + shape_str(Z.shape) + " vs " +
                     shape_str(Zn.shape));
  if (static_cast<int64_t>(frozen.size()) != layout.n_chunks())
    throw ShapeError("frozen mask size does not match chunk count");
  Tensor<T> out(Z.shape);
  layout.for_each_element(
      [&](int64_t chunk, int64_t i) { out[i] = frozen[chunk] ? Z[i] : Zn[i]; });
  return attach<T>(std::move(out), {z, z_next}, [frozen, layout](Node<T>& self) {
    auto& pz = *self.parents[0];
    auto& pn = *self.parents[1];
    if (pz.requires_grad) pz.ensure_grad();
    if (pn.requires_grad) pn.ensure_grad();
    layout.for_each_element([&](int64_t chunk, int64_t i) {
      if (frozen[chunk]) {
        if (pz.requires_grad) pz.grad[i] += self.grad[i];
      } else {
        if (pn.requires_grad) pn.grad[i] += self.grad[i];
      }
    });
  });
}

template <typename T>
struct FpiResult {
  Var<T> state;                    // final iterate
  Tensor<T> prev_state;            // input to the last step evaluation
  std::vector<int> iterations;     // per chunk, in [1, max_iter]
  std::vector<uint8_t> converged;  // per chunk
  std::vector<double> final_residual;  // per chunk, at its last active iteration
  // Per-iteration, per-chunk traces (frozen chunks report 0 once frozen).
  std::vector<std::vector<double>> residual_history;
  std::vector<std::vector<double>> step_norm_history;
  int total_iterations = 0;
  ChunkLayout layout;
  int64_t peak_live_nodes = 0;
  std::vector<Tensor<T>> iterate_snapshots;  // only with record_iterates

  bool all_converged() const {
    for (auto c : converged)
      if (!c) return false;
    return true;
  }
  int64_t non_converged_count() const {
    int64_t n = 0;
    for (auto c : converged) n += c ? 0 : 1;
    return n;
  }
};

// Fixed-point iteration with per-chunk freezing. Per iteration:
//   z_next = step(z)
//   chunks frozen earlier keep their bytes from z; all others (including
//   chunks whose residual just dropped below epsilon) take the step
//   z_next, then newly converged chunks join the frozen set.
// Stops when every chunk is frozen or max_iter is reached. A chunk's
// iteration count is the index (1-based) of the evaluation that produced
// its sub-epsilon residual, so an already-stationary input reports 1.
template <typename T>
FpiResult<T> solve(const std::function<Var<T>(const Var<T>&)>& step, const Var<T>& z0,
                   const FpiConfig& cfg, const ChunkLayout& layout) {
  cfg.validate();
  if (layout.numel() != z0->value.numel())
    throw ShapeError("chunk layout does not match state size");
  const int64_t nc = layout.n_chunks();

  FpiResult<T> res;
  res.layout = layout;
  res.iterations.assign(nc, cfg.max_iter);
  res.converged.assign(nc, 0);
  res.final_residual.assign(nc, 0.0);

  Var<T> z = z0;
  std::vector<uint8_t> frozen(nc, 0);
  int64_t frozen_count = 0;
  if (cfg.record_iterates) res.iterate_snapshots.push_back(z0->value);

  for (int k = 1; k <= cfg.max_iter; ++k) {
    res.prev_state = z->value;
    Var<T> z_next = step(z);
    if (!z_next->value.same_shape(z->value))
      throw ShapeError("step changed state shape: " + shape_str(z->value.shape) + " -> " +
                       shape_str(z_next->value.shape));
    if (!z_next->value.all_finite())
      throw NumericError("fixed-point step produced NaN/Inf at iteration " + std::to_string(k));

    ChunkResiduals r = residual(z_next->value, z->value, layout);
    for (int64_t c = 0; c < nc; ++c) {
      if (frozen[c]) {
        r.relative[c] = 0.0;
        r.step_norm[c] = 0.0;
      }
    }
    res.residual_history.push_back(r.relative);
    res.step_norm_history.push_back(r.step_norm);

    // Previously frozen chunks keep their state; everyone else steps.
    z = frozen_count > 0 ? selective_update(z, z_next, frozen, layout) : z_next;

    for (int64_t c = 0; c < nc; ++c) {
      if (frozen[c]) continue;
      res.final_residual[c] = r.relative[c];
      if (r.relative[c] < cfg.epsilon) {
        frozen[c] = 1;
        ++frozen_count;
        res.iterations[c] = k;
        res.converged[c] = 1;
      }
    }

    res.total_iterations = k;
    res.peak_live_nodes = std::max(res.peak_live_nodes, Node<T>::live_count().load());
    if (cfg.record_iterates) res.iterate_snapshots.push_back(z->value);
    if (frozen_count == nc) break;
  }

  res.state = z;
  return res;
}

template <typename T>
FpiResult<T> solve(const std::function<Var<T>(const Var<T>&)>& step, const Var<T>& z0,
                   const FpiConfig& cfg, int64_t heads = 1) {
  return solve(step, z0, cfg, make_chunk_layout(z0->value.shape, cfg.granularity, heads));
}

}  // namespace fpsa
