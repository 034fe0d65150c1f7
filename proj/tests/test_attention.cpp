#include <doctest.h>

#include <cmath>

#include "fpsa/attention.hpp"
#include "fpsa/gradcheck.hpp"

using namespace fpsa;

namespace {

FpsaLayer<double> make_layer(int64_t dim, int64_t heads, uint64_t seed, bool tanh_step = true,
                             bool spectral = true) {
  Rng rng(seed);
  return FpsaLayer<double>::init(dim, heads, rng, tanh_step, spectral);
}

Tensor<double> random_input(Shape s, uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  rng.fill_uniform(t, -scale, scale);
  return t;
}

}  // namespace

TEST_CASE("spectral normalization on diag(3, 1)") {
  auto w = leaf<double>(Tensor<double>::of({2, 2}, {3, 0, 0, 1}));
  SpectralState<double> st;
  Rng rng(1);
  init_spectral_state(st, 2, 2, rng);
  Var<double> wn;
  for (int i = 0; i < 20; ++i) wn = spectral_normalize(w, st, true);
  CHECK(st.last_sigma == doctest::Approx(3.0).epsilon(1e-3));
  // top singular value of the normalized matrix via fresh power iterations
  auto wn_leaf = leaf<double>(wn->value);
  SpectralState<double> probe;
  Rng rng2(2);
  init_spectral_state(probe, 2, 2, rng2);
  for (int i = 0; i < 30; ++i) spectral_normalize(wn_leaf, probe, true);
  CHECK(probe.last_sigma <= 1.0 + 1e-3);
  CHECK(probe.last_sigma == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("spectral normalization passes orthogonal and contractive matrices through") {
  // rotation by 30 degrees: isometry, sigma == 1
  const double c = std::cos(0.5), s = std::sin(0.5);
  auto w = leaf<double>(Tensor<double>::of({2, 2}, {c, -s, s, c}));
  SpectralState<double> st;
  Rng rng(3);
  init_spectral_state(st, 2, 2, rng);
  Var<double> wn;
  for (int i = 0; i < 25; ++i) wn = spectral_normalize(w, st, true);
  CHECK(st.last_sigma == doctest::Approx(1.0).epsilon(1e-3));
  for (int64_t i = 0; i < 4; ++i)
    CHECK(wn->value[i] == doctest::Approx(w->value[i]).epsilon(1e-3));

  auto small = leaf<double>(Tensor<double>::of({2, 2}, {0.5, 0, 0, 0.25}));
  SpectralState<double> st2;
  Rng rng2(4);
  init_spectral_state(st2, 2, 2, rng2);
  Var<double> sn;
  for (int i = 0; i < 25; ++i) sn = spectral_normalize(small, st2, true);
  CHECK(sn->value.data == small->value.data);  // max(sigma, 1) clamp keeps it

  auto zero = leaf<double>(Tensor<double>::zeros({3, 3}));
  SpectralState<double> st3;
  auto zn = spectral_normalize(zero, st3, true);
  CHECK(zn->value.data == zero->value.data);
}

TEST_CASE("spectral normalization gradient vs finite differences") {
  Rng rng(5);
  auto w = leaf<double>(random_input({3, 4}, 6, 1.0));
  // make sure sigma > 1 so the scaling branch is active
  for (auto& v : w->value.data) v *= 3.0;
  SpectralState<double> st;
  init_spectral_state(st, 3, 4, rng);
  {
    NoGradGuard ng;
    for (int i = 0; i < 30; ++i) spectral_normalize(w, st, true);
  }
  Tensor<double> r = random_input({3, 4}, 7, 1.0);
  auto graph = [&]() {
    return ops::sum_all(ops::mul(spectral_normalize(w, st, false), constant(r)));
  };
  backward(graph());
  auto eval = [&]() {
    NoGradGuard ng;
    return graph()->value[0];
  };
  CHECK(rel_error(finite_difference_grad(w->value, eval), w->grad) < 1e-6);
}

TEST_CASE("attention step with one token puts all probability on it") {
  auto L = make_layer(6, 2, 11);
  auto x = constant(random_input({1, 1, 6}, 12));
  NoGradGuard ng;
  Tensor<double> probs;
  std::function<void(const Tensor<double>&)> sink = [&](const Tensor<double>& p) { probs = p; };
  StepContext<double> ctx = make_step_context(L, x, false);
  ctx.probs_sink = &sink;
  auto out = attention_step(x, ctx);
  CHECK(probs.shape == Shape{1, 2, 1, 1});
  CHECK(probs[0] == doctest::Approx(1.0));
  CHECK(probs[1] == doctest::Approx(1.0));
  // output is tanh of the head-fused static values
  auto merged = merge_heads(ctx.v_static);
  for (int64_t i = 0; i < out->value.numel(); ++i)
    CHECK(out->value[i] == doctest::Approx(std::tanh(merged->value[i])).epsilon(1e-12));
}

TEST_CASE("huge temperature flattens attention rows to uniform") {
  auto L = make_layer(8, 2, 13);
  L.rho_tau->value.fill(1e6);  // softplus(1e6) == 1e6
  auto x = constant(random_input({1, 5, 8}, 14));
  NoGradGuard ng;
  Tensor<double> probs;
  std::function<void(const Tensor<double>&)> sink = [&](const Tensor<double>& p) { probs = p; };
  StepContext<double> ctx = make_step_context(L, x, false);
  ctx.probs_sink = &sink;
  attention_step(x, ctx);
  for (int64_t i = 0; i < probs.numel(); ++i)
    CHECK(probs[i] == doctest::Approx(1.0 / 5).epsilon(1e-6));
}

TEST_CASE("attention rows are stochastic at every iteration") {
  auto L = make_layer(8, 2, 15);
  Tensor<double> x = random_input({1, 4, 8}, 16);
  int rows_checked = 0;
  std::function<void(const Tensor<double>&)> sink = [&](const Tensor<double>& p) {
    const int64_t N = p.shape[3];
    for (int64_t r = 0; r < p.numel() / N; ++r) {
      double s = 0;
      for (int64_t c = 0; c < N; ++c) {
        CHECK(p[r * N + c] >= 0.0);
        s += p[r * N + c];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      ++rows_checked;
    }
  };
  FpiConfig cfg;
  cfg.epsilon = 1e-6;
  NoGradGuard ng;
  forward(L, constant(x), cfg, BackwardMode::implicit, false, &sink);
  CHECK(rows_checked > 8);  // several iterations' worth
}

TEST_CASE("identical tokens converge identically") {
  auto L = make_layer(8, 2, 17);
  Tensor<double> x({1, 4, 8});
  Rng rng(18);
  Tensor<double> row({8});
  rng.fill_uniform(row, -0.5, 0.5);
  for (int64_t n = 0; n < 4; ++n)
    std::copy(row.data.begin(), row.data.end(), x.data.begin() + n * 8);
  FpiConfig cfg;
  cfg.epsilon = 1e-6;
  NoGradGuard ng;
  auto fr = forward(L, constant(x), cfg, BackwardMode::implicit, false);
  // all (token, head) chunks report the same iteration count
  for (size_t c = 1; c < fr.fpi.iterations.size(); ++c)
    CHECK(fr.fpi.iterations[c] == fr.fpi.iterations[0]);
  // equilibrium rows identical
  const Tensor<double>& z = fr.z_star->value;
  for (int64_t n = 1; n < 4; ++n)
    for (int64_t c = 0; c < 8; ++c)
      CHECK(z[n * 8 + c] == doctest::Approx(z[c]).epsilon(1e-6));
}

TEST_CASE("degenerate epsilon gives exactly one iteration and the one-step output") {
  auto L = make_layer(8, 2, 19);
  Tensor<double> x = random_input({2, 3, 8}, 20);
  FpiConfig cfg;
  cfg.epsilon = 1e30;
  NoGradGuard ng;
  auto fr = forward(L, constant(x), cfg, BackwardMode::implicit, false);
  CHECK(fr.fpi.total_iterations == 1);
  for (auto it : fr.fpi.iterations) CHECK(it == 1);

  StepContext<double> ctx = make_step_context(L, constant(x), false);
  auto manual = post_loop(L, attention_step(constant(x), ctx));
  for (int64_t i = 0; i < manual->value.numel(); ++i)
    CHECK(fr.y->value[i] == manual->value[i]);
}

TEST_CASE("iterates stay inside (-1, 1) with the tanh step norm") {
  auto L = make_layer(8, 4, 21);
  Tensor<double> x = random_input({1, 6, 8}, 22, 3.0);  // deliberately large input
  FpiConfig cfg;
  cfg.epsilon = 1e-7;
  cfg.record_iterates = true;
  NoGradGuard ng;
  StepContext<double> ctx = make_step_context(L, constant(x), false);
  auto step = [&ctx](const Var<double>& z) { return attention_step(z, ctx); };
  auto res = solve<double>(step, constant(x), cfg,
                           make_chunk_layout(x.shape, FreezeGranularity::per_token_per_head, 4));
  REQUIRE(res.iterate_snapshots.size() > 1);
  for (size_t k = 1; k < res.iterate_snapshots.size(); ++k)
    for (int64_t i = 0; i < res.iterate_snapshots[k].numel(); ++i) {
      CHECK(res.iterate_snapshots[k][i] > -1.0);
      CHECK(res.iterate_snapshots[k][i] < 1.0);
    }
}

TEST_CASE("the same parameter objects serve every iteration") {
  auto L = make_layer(8, 2, 23);
  Tensor<double> x = random_input({1, 4, 8}, 24);
  FpiConfig cfg;
  cfg.epsilon = 1e-8;
  NoGradGuard ng;
  auto fr = forward(L, constant(x), cfg, BackwardMode::implicit, false);
  CHECK(fr.fpi.total_iterations > 2);
  // one normalized projection node exists for the whole solve, derived from
  // the live parameter node
  REQUIRE(fr.step_weight != nullptr);
  // and a second forward still reads the identical parameter objects
  auto* before = L.w_qkv.get();
  forward(L, constant(x), cfg, BackwardMode::implicit, false);
  CHECK(L.w_qkv.get() == before);

  // at the solver level: a step capturing a parameter sees the same node at
  // every call
  std::vector<const void*> seen;
  auto w = leaf<double>(Tensor<double>::of({1}, {0.5}));
  auto step = [&](const Var<double>& z) {
    seen.push_back(w.get());
    return ops::mul(z, w);
  };
  FpiConfig c2;
  c2.max_iter = 7;
  c2.epsilon = 1e-300;
  solve<double>(step, constant(Tensor<double>::of({1}, {1.0})), c2,
                make_chunk_layout({1}, FreezeGranularity::whole));
  CHECK(seen.size() == 7);
  for (auto* p : seen) CHECK(p == seen[0]);
}

TEST_CASE("unrolled backward equals plain backprop for a single iteration") {
  auto L = make_layer(8, 2, 25);
  Tensor<double> x = random_input({2, 3, 8}, 26);
  Tensor<double> r = random_input({2, 3, 8}, 27);
  FpiConfig cfg;
  cfg.max_iter = 1;

  auto params = L.params();
  zero_grads(params);
  {
    GradModeGuard rec(true);
    auto fr = forward(L, constant(x), cfg, BackwardMode::unrolled, false);
    backward(ops::sum_all(ops::mul(fr.y, constant(r))));
  }
  std::vector<Tensor<double>> unrolled;
  for (auto& [n, p] : params) unrolled.push_back(grad_or_zeros(p));

  zero_grads(params);
  {
    GradModeGuard rec(true);
    StepContext<double> ctx = make_step_context(L, constant(x), false);
    auto y = post_loop(L, attention_step(constant(x), ctx));
    backward(ops::sum_all(ops::mul(y, constant(r))));
  }
  for (size_t i = 0; i < params.size(); ++i)
    CHECK(rel_error(grad_or_zeros(params[i].second), unrolled[i]) < 1e-7);
}

TEST_CASE("gradcheck: fd vs unrolled vs implicit vs phantom") {
  GradcheckResult res = run_fpsa_gradcheck(31, false, 1, 3, 6, 2);
  CAPTURE(res.max_fd);
  CAPTURE(res.max_implicit);
  CHECK(res.max_fd < 1e-4);
  CHECK(res.max_implicit < 1e-3);
  CHECK(res.forward_iterations > 3);
}

TEST_CASE("phantom equals unrolled when the forward has one iteration") {
  auto L = make_layer(6, 2, 33);
  Tensor<double> x = random_input({1, 3, 6}, 34);
  Tensor<double> r = random_input({1, 3, 6}, 35);
  FpiConfig cfg;
  cfg.max_iter = 1;

  auto params = L.params();
  auto grads_with = [&](BackwardMode mode) {
    zero_grads(params);
    GradModeGuard rec(true);
    auto fr = forward(L, constant(x), cfg, mode, false);
    backward(ops::sum_all(ops::mul(fr.y, constant(r))));
    if (mode != BackwardMode::unrolled) backward_equilibrium(L, fr);
    std::vector<Tensor<double>> out;
    for (auto& [n, p] : params) out.push_back(grad_or_zeros(p));
    return out;
  };
  auto unrolled = grads_with(BackwardMode::unrolled);
  auto phantom = grads_with(BackwardMode::phantom);
  for (size_t i = 0; i < params.size(); ++i)
    CHECK(rel_error(phantom[i], unrolled[i]) < 1e-12);
}

TEST_CASE("scalar fixed point: implicit gives the equilibrium gradient, phantom one step") {
  // z_{k+1} = theta z_k + c with theta = 0.5, c = 1; L = z*
  auto theta = leaf<double>(Tensor<double>::of({1}, {0.5}));
  FpiConfig cfg;
  cfg.epsilon = 1e-10;
  cfg.max_iter = 300;
  Var<double> zstar_var;
  {
    NoGradGuard ng;
    auto step = [&](const Var<double>& z) {
      Tensor<double> out({1});
      out[0] = theta->value[0] * z->value[0] + 1.0;
      return constant(std::move(out));
    };
    auto res = solve<double>(step, constant(Tensor<double>::of({1}, {0.0})), cfg,
                             make_chunk_layout({1}, FreezeGranularity::whole));
    zstar_var = res.state;
  }
  const double zstar = zstar_var->value[0];
  CHECK(zstar == doctest::Approx(2.0).epsilon(1e-9));

  // record one step at z*, then solve the adjoint with the same machinery
  auto zs = leaf<double>(Tensor<double>::of({1}, {zstar}));
  Var<double> out;
  {
    GradModeGuard rec(true);
    out = ops::add(ops::mul(zs, theta), constant(Tensor<double>::of({1}, {1.0})));
  }
  VjpSession<double> sess(out);
  Tensor<double> g = Tensor<double>::ones({1});  // dL/dz* for L = z*

  Tensor<double> a_star;
  {
    NoGradGuard ng;
    auto adjoint = [&](const Var<double>& a) {
      sess.pullback(a->value);
      Tensor<double> t = grad_or_zeros(zs);
      t[0] += g[0];
      return constant(std::move(t));
    };
    auto ares = solve<double>(adjoint, constant(g), cfg,
                              make_chunk_layout({1}, FreezeGranularity::whole));
    a_star = ares.state->value;
  }
  sess.pullback(a_star);
  CHECK(theta->grad[0] == doctest::Approx(4.0).epsilon(1e-4));  // z*/(1-theta)

  sess.pullback(g);  // phantom: a* = g through a single step
  CHECK(theta->grad[0] == doctest::Approx(2.0).epsilon(1e-4));  // just z*
}

TEST_CASE("non-converged chunks contribute no loop adjoint") {
  auto L = make_layer(8, 2, 37);
  Tensor<double> x = random_input({1, 4, 8}, 38);
  Tensor<double> r = random_input({1, 4, 8}, 39);
  FpiConfig cfg;
  cfg.max_iter = 2;      // nothing converges at this epsilon in two steps
  cfg.epsilon = 1e-14;

  auto params = L.params();
  zero_grads(params);
  GradModeGuard rec(true);
  auto fr = forward(L, constant(x), cfg, BackwardMode::implicit, false);
  CHECK(fr.fpi.non_converged_count() == fr.fpi.layout.n_chunks());
  backward(ops::sum_all(ops::mul(fr.y, constant(r))));
  backward_equilibrium(L, fr);
  // everything upstream of the loop is gated by the adjoint, so with all
  // chunks discarded both tau and the fused projection get nothing
  CHECK(grad_or_zeros(L.rho_tau).frob_norm() == 0.0);
  CHECK(grad_or_zeros(L.w_qkv).frob_norm() == 0.0);
  // the post-loop block is outside the fixed point and keeps exact gradients
  CHECK(grad_or_zeros(L.w_o).frob_norm() > 0.0);

  // with convergence the loop gradient is alive
  FpiConfig cfg2;
  cfg2.epsilon = 1e-9;
  cfg2.max_iter = 300;
  zero_grads(params);
  auto fr2 = forward(L, constant(x), cfg2, BackwardMode::implicit, false);
  CHECK(fr2.fpi.all_converged());
  backward(ops::sum_all(ops::mul(fr2.y, constant(r))));
  backward_equilibrium(L, fr2);
  CHECK(grad_or_zeros(L.rho_tau).frob_norm() > 0.0);
}

TEST_CASE("implicit forward retains O(1) iterate state regardless of max_iter") {
  auto L = make_layer(8, 2, 41);
  Tensor<double> x = random_input({1, 4, 8}, 42);
  auto peak_for = [&](int max_iter) {
    FpiConfig cfg;
    cfg.max_iter = max_iter;
    cfg.epsilon = 1e-300;  // exhaust the budget
    NoGradGuard ng;
    auto fr = forward(L, constant(x), cfg, BackwardMode::implicit, false);
    CHECK(fr.fpi.iterate_snapshots.empty());
    return fr.fpi.peak_live_nodes;
  };
  CHECK(peak_for(4) == peak_for(40));
}

TEST_CASE("unrolled mode refuses the equilibrium backward") {
  auto L = make_layer(6, 2, 43);
  Tensor<double> x = random_input({1, 2, 6}, 44);
  FpiConfig cfg;
  cfg.max_iter = 2;
  GradModeGuard rec(true);
  auto fr = forward(L, constant(x), cfg, BackwardMode::unrolled, false);
  CHECK_THROWS_AS(backward_equilibrium(L, fr), ConfigError);
}

TEST_CASE("vanilla attention: stochastic rows, permutation equivariance, matching shapes") {
  auto L = make_layer(8, 2, 45, /*tanh=*/false, /*spectral=*/false);
  Tensor<double> x = random_input({1, 5, 8}, 46);
  NoGradGuard ng;
  Tensor<double> probs;
  std::function<void(const Tensor<double>&)> sink = [&](const Tensor<double>& p) { probs = p; };
  auto y = vanilla_forward(L, constant(x), &sink);
  CHECK(y->value.shape == x.shape);
  for (int64_t r = 0; r < probs.numel() / 5; ++r) {
    double s = 0;
    for (int64_t c = 0; c < 5; ++c) s += probs[r * 5 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }

  // permute tokens: outputs permute identically
  std::vector<int64_t> perm = {3, 0, 4, 1, 2};
  Tensor<double> xp({1, 5, 8});
  for (int64_t n = 0; n < 5; ++n)
    std::copy_n(x.data.begin() + perm[n] * 8, 8, xp.data.begin() + n * 8);
  auto yp = vanilla_forward(L, constant(xp));
  for (int64_t n = 0; n < 5; ++n)
    for (int64_t c = 0; c < 8; ++c)
      CHECK(yp->value[n * 8 + c] == doctest::Approx(y->value[perm[n] * 8 + c]).epsilon(1e-9));

  // fpsa forward on the same layer shapes agrees structurally
  auto L2 = make_layer(8, 2, 45);
  FpiConfig cfg;
  auto fr = forward(L2, constant(x), cfg, BackwardMode::implicit, false);
  CHECK(fr.y->value.shape == y->value.shape);
}

TEST_CASE("attention scores surface NaN with the offending head") {
  auto L = make_layer(8, 2, 47);
  L.w_qkv->value[0] = std::numeric_limits<double>::infinity();
  Tensor<double> x = random_input({1, 3, 8}, 48);
  FpiConfig cfg;
  NoGradGuard ng;
  CHECK_THROWS_AS(forward(L, constant(x), cfg, BackwardMode::implicit, false), NumericError);
}
