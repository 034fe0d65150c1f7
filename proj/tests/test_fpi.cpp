#include <doctest.h>

#include <cmath>

#include "fpsa/fpi.hpp"
#include "fpsa/ops.hpp"
#include "fpsa/rng.hpp"
#include "fpsa/gradcheck.hpp"

using namespace fpsa;

namespace {

// step(z) = a*z + b elementwise
std::function<Var<double>(const Var<double>&)> affine_step(double a, double b) {
  return [a, b](const Var<double>& z) {
    Tensor<double> out(z->value.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z->value[i] + b;
    return constant(std::move(out));
  };
}

}  // namespace

TEST_CASE("residual hand-computed cases") {
  ChunkLayout whole{1, 1, 1, 2};
  Tensor<double> z = Tensor<double>::of({2}, {3, 4});
  Tensor<double> zn = Tensor<double>::of({2}, {3, 4.5});
  auto r = residual(zn, z, whole);
  CHECK(r.relative[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.step_norm[0] == doctest::Approx(0.5).epsilon(1e-12));

  auto zero_r = residual(z, z, whole);
  CHECK(zero_r.relative[0] == 0.0);

  Tensor<double> zeros = Tensor<double>::zeros({2});
  Tensor<double> tiny = Tensor<double>::of({2}, {1e-3, 0});
  auto g = residual(tiny, zeros, whole);
  CHECK(g.relative[0] == doctest::Approx(1e-3).epsilon(1e-9));  // absolute fallback

  CHECK_THROWS_AS(residual(Tensor<double>::zeros({3}), z, whole), ShapeError);
}

TEST_CASE("residual per-token and per-head chunking") {
  // state [1, 2, 4] with 2 heads -> chunks (token, head)
  Tensor<double> z({1, 2, 4});
  Tensor<double> zn({1, 2, 4});
  for (int64_t i = 0; i < 8; ++i) {
    z[i] = 1.0;
    zn[i] = 1.0;
  }
  zn[0] = 2.0;  // token 0, head 0 slice changes
  auto layout = make_chunk_layout(z.shape, FreezeGranularity::per_token_per_head, 2);
  CHECK(layout.n_chunks() == 4);
  auto r = residual(zn, z, layout);
  CHECK(r.relative[0] > 0);
  CHECK(r.relative[1] == 0.0);
  CHECK(r.relative[2] == 0.0);
  CHECK(r.relative[3] == 0.0);

  CHECK_THROWS_AS(make_chunk_layout(z.shape, FreezeGranularity::per_token_per_head, 3),
                  ShapeError);
}

TEST_CASE("solve of 0.5 z + 1 from zero converges to 2") {
  FpiConfig cfg;
  cfg.epsilon = 1e-4;
  auto res = solve<double>(affine_step(0.5, 1.0), constant(Tensor<double>::of({1}, {0.0})), cfg,
                           make_chunk_layout({1}, FreezeGranularity::whole));
  CHECK(res.all_converged());
  CHECK(std::abs(res.state->value[0] - 2.0) < 2e-4);
  CHECK(res.iterations[0] == 14);

  // absolute step norms contract by exactly the map factor
  for (size_t k = 2; k + 1 < res.step_norm_history.size(); ++k) {
    const double ratio = res.step_norm_history[k + 1][0] / res.step_norm_history[k][0];
    CHECK(ratio == doctest::Approx(0.5).epsilon(1e-3));
  }
}

TEST_CASE("already-stationary input reports one iteration") {
  FpiConfig cfg;
  auto res = solve<double>(affine_step(1.0, 0.0), constant(Tensor<double>::of({3}, {1, 2, 3})),
                           cfg, make_chunk_layout({3}, FreezeGranularity::whole));
  CHECK(res.total_iterations == 1);
  CHECK(res.iterations[0] == 1);
  CHECK(res.converged[0] == 1);
  CHECK(res.final_residual[0] == 0.0);
}

TEST_CASE("expansive map never converges") {
  FpiConfig cfg;
  cfg.max_iter = 10;
  auto res = solve<double>(affine_step(2.0, 1.0), constant(Tensor<double>::of({1}, {1.0})), cfg,
                           make_chunk_layout({1}, FreezeGranularity::whole));
  CHECK_FALSE(res.converged[0]);
  CHECK(res.iterations[0] == 10);
  CHECK(res.total_iterations == 10);
}

TEST_CASE("solve with max_iter 1 equals one step application") {
  FpiConfig cfg;
  cfg.max_iter = 1;
  cfg.epsilon = 1e-12;
  auto z0 = constant(Tensor<double>::of({2}, {1.0, -2.0}));
  auto res = solve<double>(affine_step(0.9, 0.1), z0, cfg,
                           make_chunk_layout({2}, FreezeGranularity::whole));
  CHECK(res.state->value[0] == doctest::Approx(1.0 * 0.9 + 0.1));
  CHECK(res.state->value[1] == doctest::Approx(-2.0 * 0.9 + 0.1));
  CHECK(res.total_iterations == 1);
}

TEST_CASE("NaN from the step surfaces as a numeric error with the iteration") {
  FpiConfig cfg;
  int call = 0;
  auto step = [&call](const Var<double>& z) {
    ++call;
    Tensor<double> out = z->value;
    if (call == 3) out[0] = std::nan("");
    for (auto& v : out.data) v *= 1.5;
    return constant(std::move(out));
  };
  CHECK_THROWS_WITH_AS(
      solve<double>(step, constant(Tensor<double>::of({1}, {1.0})), cfg,
                    make_chunk_layout({1}, FreezeGranularity::whole)),
      doctest::Contains("iteration 3"), NumericError);
}

TEST_CASE("selective_update routes chunks bit-exactly") {
  ChunkLayout layout{1, 4, 1, 2};  // 4 token chunks of width 2
  Rng rng(3);
  Tensor<double> a({1, 4, 2}), b({1, 4, 2});
  rng.fill_uniform(a, -1, 1);
  rng.fill_uniform(b, -1, 1);

  auto all = selective_update(constant(a), constant(b), {1, 1, 1, 1}, layout);
  CHECK(all->value.data == a.data);
  auto none = selective_update(constant(a), constant(b), {0, 0, 0, 0}, layout);
  CHECK(none->value.data == b.data);

  auto half = selective_update(constant(a), constant(b), {1, 0, 1, 0}, layout);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t w = 0; w < 2; ++w) {
      const double want = (c % 2 == 0) ? a[c * 2 + w] : b[c * 2 + w];
      CHECK(half->value[c * 2 + w] == want);
    }
}

TEST_CASE("selective_update gradient routes to the branch taken") {
  ChunkLayout layout{1, 2, 1, 1};
  auto a = leaf<double>(Tensor<double>::of({1, 2, 1}, {1, 2}));
  auto b = leaf<double>(Tensor<double>::of({1, 2, 1}, {3, 4}));
  auto out = selective_update(a, b, {1, 0}, layout);
  backward(ops::sum_all(out));
  CHECK(grad_or_zeros(a).data == std::vector<double>{1, 0});
  CHECK(grad_or_zeros(b).data == std::vector<double>{0, 1});
}

TEST_CASE("freezing is monotone and frozen chunks never change") {
  // Per-token contraction with very different rates so chunks freeze at
  // different iterations.
  const int64_t tokens = 5, width = 3;
  std::vector<double> rate = {0.1, 0.3, 0.5, 0.7, 0.9};
  auto step = [&](const Var<double>& z) {
    Tensor<double> out = z->value;
    for (int64_t t = 0; t < tokens; ++t)
      for (int64_t w = 0; w < width; ++w)
        out[t * width + w] = rate[static_cast<size_t>(t)] * out[t * width + w] + 0.2;
    return constant(std::move(out));
  };
  FpiConfig cfg;
  cfg.epsilon = 1e-3;
  cfg.granularity = FreezeGranularity::per_token;
  cfg.record_iterates = true;
  Tensor<double> z0({tokens, width});
  Rng rng(4);
  rng.fill_uniform(z0, 1.0, 2.0);
  auto layout = make_chunk_layout(z0.shape, cfg.granularity);
  auto res = solve<double>(step, constant(z0), cfg, layout);
  CHECK(res.all_converged());

  // iteration counts ordered like the contraction rates
  for (int64_t t = 0; t + 1 < tokens; ++t) CHECK(res.iterations[t] <= res.iterations[t + 1]);

  // reconstruct the frozen set per iteration from the counts: monotone by
  // construction; immutability: once k >= iterations[t], snapshot bytes of
  // chunk t never change again
  for (int64_t t = 0; t < tokens; ++t) {
    const int frozen_at = res.iterations[t];
    for (size_t k = static_cast<size_t>(frozen_at); k + 1 < res.iterate_snapshots.size(); ++k) {
      for (int64_t w = 0; w < width; ++w) {
        CHECK(res.iterate_snapshots[k][t * width + w] ==
              res.iterate_snapshots[k + 1][t * width + w]);
      }
    }
  }
}

TEST_CASE("implicit-style solve keeps live node count flat in max_iter") {
  auto run = [&](int max_iter) {
    FpiConfig cfg;
    cfg.max_iter = max_iter;
    cfg.epsilon = 1e-300;  // never converges; runs the full budget
    NoGradGuard ng;
    auto res = solve<double>(affine_step(0.99, 0.0), constant(Tensor<double>::of({1}, {1.0})),
                             cfg, make_chunk_layout({1}, FreezeGranularity::whole));
    return res.peak_live_nodes;
  };
  const int64_t base = Node<double>::live_count().load();
  const auto peak_small = run(5);
  const auto peak_large = run(200);
  CHECK(peak_small == peak_large);
  CHECK(Node<double>::live_count().load() == base);  // nothing leaked
}

TEST_CASE("config validation") {
  FpiConfig cfg;
  cfg.max_iter = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.max_iter = 1;
  cfg.epsilon = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("adjoint solve recovers equilibrium gradients through a dense Jacobian") {
  // step(z) = tanh(z A + b) with spectral radius ~0.8: slow convergence, the
  // inverse-Jacobian Neumann series does real work.
  const int64_t n = 6;
  Rng rng(21);
  Tensor<double> a_raw({n, n});
  rng.fill_uniform(a_raw, -1, 1);
  // crude spectral scaling: run a few power iterations
  {
    Tensor<double> u({n});
    rng.fill_uniform(u, -1, 1);
    double sigma = 1;
    for (int it = 0; it < 50; ++it) {
      Tensor<double> v({n});
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < n; ++j) s += a_raw[j * n + i] * u[j];
        v[i] = s;
      }
      double vn = v.frob_norm();
      for (auto& x : v.data) x /= vn;
      Tensor<double> u2({n});
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < n; ++j) s += a_raw[i * n + j] * v[j];
        u2[i] = s;
      }
      sigma = u2.frob_norm();
      for (auto& x : u2.data) x /= sigma;
      u = u2;
    }
    for (auto& x : a_raw.data) x *= 0.8 / sigma;
  }
  auto A = leaf<double>(a_raw);
  auto b = leaf<double>(Tensor<double>::of({1, n}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.2}));
  Tensor<double> w({1, n});
  rng.fill_uniform(w, -1, 1);

  FpiConfig cfg;
  cfg.epsilon = 1e-12;
  cfg.max_iter = 2000;
  auto layout = make_chunk_layout({1, n}, FreezeGranularity::whole);

  auto value_step = [&](const Var<double>& z) {
    NoGradGuard ng;
    return ops::tanh(ops::add(ops::matmul(z, A), b));
  };
  auto res = solve<double>(value_step, constant(Tensor<double>::zeros({1, n})), cfg, layout);
  REQUIRE(res.all_converged());
  CHECK(res.total_iterations > 30);  // genuinely slow contraction
  const Tensor<double> zstar = res.state->value;

  // implicit gradients via one recorded step + adjoint solve
  auto zs = leaf<double>(zstar);
  Var<double> out;
  {
    GradModeGuard rec(true);
    out = ops::tanh(ops::add(ops::matmul(zs, A), b));
  }
  VjpSession<double> sess(out);
  Tensor<double> g = w;  // dL/dz* for L = sum(w * z*)
  Tensor<double> a_star;
  {
    NoGradGuard ng;
    auto adjoint = [&](const Var<double>& av) {
      sess.pullback(av->value);
      Tensor<double> t = grad_or_zeros(zs);
      for (int64_t i = 0; i < t.numel(); ++i) t[i] += g[i];
      return constant(std::move(t));
    };
    auto ares = solve<double>(adjoint, constant(g), cfg, layout);
    REQUIRE(ares.all_converged());
    CHECK(ares.total_iterations > 30);
    a_star = ares.state->value;
  }
  sess.pullback(a_star);
  Tensor<double> impl_dA = grad_or_zeros(A);
  Tensor<double> impl_db = grad_or_zeros(b);

  // finite differences on the converged solve itself
  auto loss_value = [&]() {
    auto r = solve<double>(value_step, constant(Tensor<double>::zeros({1, n})), cfg, layout);
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += w[i] * r.state->value[i];
    return s;
  };
  auto fd_dA = finite_difference_grad(A->value, loss_value, 1e-6);
  auto fd_db = finite_difference_grad(b->value, loss_value, 1e-6);
  CHECK(rel_error(fd_dA, impl_dA) < 1e-6);
  CHECK(rel_error(fd_db, impl_db) < 1e-6);

  // the one-step (phantom) gradient is measurably different here
  sess.pullback(g);
  CHECK(rel_error(grad_or_zeros(A), impl_dA) > 0.05);
}
