#pragma once

#include <string>
#include <vector>

#include "fpsa/attention.hpp"

namespace fpsa {

// Central finite differences of a scalar-valued callable w.r.t. one tensor,
// perturbing the storage in place. The independent oracle for every
// reverse-mode gradient in the project.
template <typename F>
Tensor<double> finite_difference_grad(Tensor<double>& storage, F&& eval, double h = 1e-5) {
  Tensor<double> grad(storage.shape);
  for (int64_t i = 0; i < storage.numel(); ++i) {
    const double orig = storage[i];
    storage[i] = orig + h;
    const double up = eval();
    storage[i] = orig - h;
    const double down = eval();
    storage[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Frobenius-relative disagreement between two gradients of one parameter.
// Gradients that are both numerically zero compare by absolute difference;
// a ratio of rounding dust over rounding dust means nothing.
inline double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double d2 = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  const double na = a.frob_norm(), nb = b.frob_norm();
  const double scale = std::max(na, nb);
  if (scale < 1e-9) return std::sqrt(d2);
  return std::sqrt(d2) / scale;
}

struct GradcheckRow {
  std::string name;
  double fd_vs_unrolled = 0;       // gates at 1e-4
  double implicit_vs_unrolled = 0; // gates at 1e-3
  double phantom_vs_unrolled = 0;  // reported, never gates
};

struct GradcheckResult {
  std::vector<GradcheckRow> rows;
  double max_fd = 0;
  double max_implicit = 0;
  double max_phantom = 0;
  int forward_iterations = 0;

  bool pass(double tol_fd = 1e-4, double tol_implicit = 1e-3) const {
    return max_fd < tol_fd && max_implicit < tol_implicit;
  }
};

// Gradient agreement on a random fixed-point attention instance
// (B=2, N=4, C=8, h=2, f64, tight epsilon): finite differences against the
// unrolled tape, and the implicit/phantom modes against unrolled.
// corrupt_hook deliberately damages one implicit gradient (negative-control
// path for the CI gate).
inline GradcheckResult run_fpsa_gradcheck(uint64_t seed = 7, bool corrupt_hook = false,
                                          int64_t batch = 2, int64_t tokens = 4,
                                          int64_t dim = 8, int64_t heads = 2,
                                          double epsilon = 1e-8) {
  Rng rng(seed);
  FpsaLayer<double> layer = FpsaLayer<double>::init(dim, heads, rng);
  // sharpen the attention (tau ~= 0.2) so the step Jacobian is far from
  // zero and the adjoint solve has real work to do
  layer.rho_tau->value.fill(-1.5);
  Tensor<double> x({batch, tokens, dim});
  rng.fill_uniform(x, -1.5, 1.5);
  Tensor<double> r({batch, tokens, dim});
  rng.fill_uniform(r, -1.0, 1.0);

  // Settle the power-iteration estimate, then hold (u, v) fixed so every
  // evaluation differentiates the same normalization.
  {
    NoGradGuard ng;
    for (int i = 0; i < 30; ++i) spectral_normalize(layer.w_qkv, layer.sn, true);
  }

  FpiConfig cfg;
  cfg.max_iter = 500;
  cfg.epsilon = epsilon;

  auto grads_for = [&](BackwardMode mode) {
    auto params = layer.params();
    zero_grads(params);
    GradModeGuard record(true);
    auto fr = forward(layer, constant(x), cfg, mode, false);
    auto loss = ops::sum_all(ops::mul(fr.y, constant(r)));
    backward(loss);
    if (mode != BackwardMode::unrolled) backward_equilibrium(layer, fr);
    std::vector<Tensor<double>> out;
    for (auto& [name, p] : params) out.push_back(grad_or_zeros(p));
    return std::make_pair(out, fr.fpi);
  };

  auto [unrolled, base_fpi] = grads_for(BackwardMode::unrolled);
  auto [implicit_g, fpi_i] = grads_for(BackwardMode::implicit);
  auto [phantom_g, fpi_p] = grads_for(BackwardMode::phantom);

  // The stopping rule is a step function of the parameters: a perturbation
  // can shift a chunk's freeze iteration and finite differences would then
  // straddle two different loop structures. The oracle therefore replays the
  // recorded freeze schedule, which is the exact function the tape saw.
  const std::vector<int> schedule = base_fpi.iterations;
  const int total_iters = base_fpi.total_iterations;
  const ChunkLayout layout = base_fpi.layout;
  auto loss_value = [&]() {
    NoGradGuard ng;
    StepContext<double> ctx = make_step_context(layer, constant(x), false);
    Var<double> z = constant(x);
    for (int k = 1; k <= total_iters; ++k) {
      Var<double> z_next = attention_step(z, ctx);
      std::vector<uint8_t> frozen(schedule.size(), 0);
      bool any = false;
      for (size_t c = 0; c < schedule.size(); ++c) {
        frozen[c] = schedule[c] < k ? 1 : 0;
        any = any || frozen[c];
      }
      z = any ? selective_update(z, z_next, frozen, layout) : z_next;
    }
    auto y = post_loop(layer, z);
    double s = 0;
    for (int64_t i = 0; i < r.numel(); ++i)
      s += static_cast<double>(y->value[i]) * r[i];
    return s;
  };
  if (corrupt_hook && !implicit_g.empty() && implicit_g[0].numel() > 0)
    implicit_g[0][0] += 0.5 + std::abs(implicit_g[0][0]);

  GradcheckResult res;
  res.forward_iterations = total_iters;
  auto params = layer.params();
  for (size_t i = 0; i < params.size(); ++i) {
    GradcheckRow row;
    row.name = params[i].first;
    Tensor<double> fd = finite_difference_grad(params[i].second->value, loss_value);
    row.fd_vs_unrolled = rel_error(fd, unrolled[i]);
    row.implicit_vs_unrolled = rel_error(implicit_g[i], unrolled[i]);
    row.phantom_vs_unrolled = rel_error(phantom_g[i], unrolled[i]);
    res.max_fd = std::max(res.max_fd, row.fd_vs_unrolled);
    res.max_implicit = std::max(res.max_implicit, row.implicit_vs_unrolled);
    res.max_phantom = std::max(res.max_phantom, row.phantom_vs_unrolled);
    res.rows.push_back(row);
  }
  return res;
}

}  // namespace fpsa
