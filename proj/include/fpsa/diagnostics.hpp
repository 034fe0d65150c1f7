#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "fpsa/attention.hpp"
#include "fpsa/csv.hpp"
#include "fpsa/fpi.hpp"

namespace fpsa {

// Per (sample, head, token) convergence outcome of a fixed-point solve.
struct TraceRecord {
  int64_t sample = 0;
  int64_t head = 0;
  int64_t token = 0;
  int iterations = 0;
  bool converged = false;
  double final_residual = 0.0;
};

struct IterationTrace {
  int64_t n_heads = 0;
  int64_t n_tokens = 0;
  std::vector<TraceRecord> records;
  // mean residual per (iteration, head), averaged over chunks still active
  // at that iteration
  std::vector<std::vector<double>> resid_sum;
  std::vector<std::vector<int64_t>> resid_count;

  template <typename T>
  void append(const FpiResult<T>& r, int64_t sample_offset) {
    const ChunkLayout& L = r.layout;
    if (n_heads == 0) {
      n_heads = L.heads;
      n_tokens = L.tokens;
    }
    for (int64_t b = 0; b < L.batch; ++b)
      for (int64_t n = 0; n < L.tokens; ++n)
        for (int64_t h = 0; h < L.heads; ++h) {
          const int64_t c = (b * L.tokens + n) * L.heads + h;
          records.push_back({sample_offset + b, h, n, r.iterations[c],
                             r.converged[c] != 0, r.final_residual[c]});
        }
    if (static_cast<int64_t>(resid_sum.size()) < r.total_iterations) {
      resid_sum.resize(r.total_iterations, std::vector<double>(L.heads, 0.0));
      resid_count.resize(r.total_iterations, std::vector<int64_t>(L.heads, 0));
    }
    for (int k = 1; k <= r.total_iterations; ++k)
      for (int64_t b = 0; b < L.batch; ++b)
        for (int64_t n = 0; n < L.tokens; ++n)
          for (int64_t h = 0; h < L.heads; ++h) {
            const int64_t c = (b * L.tokens + n) * L.heads + h;
            if (k <= r.iterations[c]) {
              resid_sum[k - 1][h] += r.residual_history[k - 1][c];
              resid_count[k - 1][h] += 1;
            }
          }
  }

  std::vector<std::vector<double>> mean_residuals() const {
    std::vector<std::vector<double>> out(resid_sum.size());
    for (size_t k = 0; k < resid_sum.size(); ++k) {
      out[k].resize(resid_sum[k].size());
      for (size_t h = 0; h < resid_sum[k].size(); ++h)
        out[k][h] = resid_count[k][h] ? resid_sum[k][h] / resid_count[k][h] : 0.0;
    }
    return out;
  }
};

struct HeadSummary {
  int64_t head = 0;
  double mean = 0.0;
  int median = 0;  // lower-middle for even counts
  int max = 0;
  int64_t non_converged = 0;
  int64_t count = 0;
};

inline std::vector<HeadSummary> summarize(const IterationTrace& trace) {
  if (trace.records.empty()) throw DataError("cannot summarize an empty trace");
  std::vector<std::vector<int>> per_head(static_cast<size_t>(trace.n_heads));
  std::vector<int64_t> non_conv(static_cast<size_t>(trace.n_heads), 0);
  for (const auto& r : trace.records) {
    per_head[static_cast<size_t>(r.head)].push_back(r.iterations);
    if (!r.converged) ++non_conv[static_cast<size_t>(r.head)];
  }
  std::vector<HeadSummary> out;
  for (int64_t h = 0; h < trace.n_heads; ++h) {
    auto& counts = per_head[static_cast<size_t>(h)];
    HeadSummary s;
    s.head = h;
    s.count = static_cast<int64_t>(counts.size());
    if (counts.empty()) {
      out.push_back(s);
      continue;
    }
    std::sort(counts.begin(), counts.end());
    double sum = 0;
    for (int c : counts) sum += c;
    s.mean = sum / counts.size();
    s.median = counts[(counts.size() - 1) / 2];
    s.max = counts.back();
    s.non_converged = non_conv[static_cast<size_t>(h)];
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

// One CSV per head at <path_prefix>_head<h>.csv: header row of key labels,
// then one row per query with its label in the first column. Refuses to
// export rows that are not properly normalized.
inline void export_attention_csv(const std::vector<Tensor<double>>& head_probs,
                                 const std::string& path_prefix,
                                 const std::vector<std::string>& labels = {}) {
  for (size_t h = 0; h < head_probs.size(); ++h) {
    const Tensor<double>& P = head_probs[h];
    if (P.rank() != 2 || P.shape[0] != P.shape[1])
      throw ShapeError("attention matrix must be square, got " + shape_str(P.shape));
    const int64_t N = P.shape[0];
    for (int64_t i = 0; i < N; ++i) {
      double s = 0;
      for (int64_t j = 0; j < N; ++j) {
        if (P[i * N + j] < -1e-9)
          throw DataError("negative attention weight in head " + std::to_string(h));
        s += P[i * N + j];
      }
      if (std::abs(s - 1.0) > 1e-6)
        throw DataError("attention row " + std::to_string(i) + " of head " + std::to_string(h) +
                        " sums to " + std::to_string(s) + ", refusing export");
    }
    auto label = [&](int64_t i, const char* fallback) {
      return i < static_cast<int64_t>(labels.size()) ? labels[static_cast<size_t>(i)]
                                                     : std::string(fallback) + std::to_string(i);
    };
    std::string path = path_prefix + "_head" + std::to_string(h) + ".csv";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f << "query";
    for (int64_t j = 0; j < N; ++j) f << "," << label(j, "k");
    f << "\n";
    for (int64_t i = 0; i < N; ++i) {
      f << label(i, "q");
      for (int64_t j = 0; j < N; ++j) f << "," << csv::fixed9(P[i * N + j]);
      f << "\n";
    }
    if (!f) throw DataError("write failed for " + path);
  }
}

// sample_id,head,token,iterations,converged,final_residual, sorted by
// (sample, head, token).
inline void export_trace_csv(const IterationTrace& trace, const std::string& path) {
  std::vector<TraceRecord> rows = trace.records;
  std::sort(rows.begin(), rows.end(), [](const TraceRecord& a, const TraceRecord& b) {
    if (a.sample != b.sample) return a.sample < b.sample;
    if (a.head != b.head) return a.head < b.head;
    return a.token < b.token;
  });
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << "sample_id,head,token,iterations,converged,final_residual\n";
  for (const auto& r : rows)
    f << r.sample << "," << r.head << "," << r.token << "," << r.iterations << ","
      << (r.converged ? 1 : 0) << "," << csv::general9(r.final_residual) << "\n";
  if (!f) throw DataError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// contraction probe
// ---------------------------------------------------------------------------

struct ProbeStats {
  std::vector<double> ratios;
  double min = 0, median = 0, mean = 0, max = 0;
  int64_t skipped = 0;

  void finalize() {
    if (ratios.empty()) return;
    std::vector<double> sorted = ratios;
    std::sort(sorted.begin(), sorted.end());
    min = sorted.front();
    max = sorted.back();
    median = sorted[(sorted.size() - 1) / 2];
    double s = 0;
    for (double r : sorted) s += r;
    mean = s / sorted.size();
  }
};

// Distribution of ||step(Z1) - step(Z2)|| / ||Z1 - Z2|| over random pairs
// perturbed around the given base states. Diagnostic only: nothing asserts
// the ratios stay below 1.
template <typename T, typename StepFn>
ProbeStats contraction_probe(StepFn&& step, const std::vector<Tensor<T>>& base_states,
                             int n_pairs, double perturb_scale, uint64_t seed) {
  if (base_states.empty()) throw DataError("contraction probe needs at least one base state");
  NoGradGuard ng;
  Rng rng(seed);
  ProbeStats stats;
  for (int p = 0; p < n_pairs; ++p) {
    const Tensor<T>& base = base_states[static_cast<size_t>(p) % base_states.size()];
    Tensor<T> z1 = base, z2 = base;
    for (int64_t i = 0; i < base.numel(); ++i) {
      z1[i] += static_cast<T>(rng.next_normal() * perturb_scale);
      z2[i] += static_cast<T>(rng.next_normal() * perturb_scale);
    }
    double den2 = 0;
    for (int64_t i = 0; i < base.numel(); ++i) {
      const double d = static_cast<double>(z1[i]) - static_cast<double>(z2[i]);
      den2 += d * d;
    }
    const double den = std::sqrt(den2);
    if (den < 1e-12) {
      ++stats.skipped;
      continue;
    }
    Tensor<T> s1 = step(constant(z1))->value;
    Tensor<T> s2 = step(constant(z2))->value;
    double num2 = 0;
    for (int64_t i = 0; i < s1.numel(); ++i) {
      const double d = static_cast<double>(s1[i]) - static_cast<double>(s2[i]);
      num2 += d * d;
    }
    stats.ratios.push_back(std::sqrt(num2) / den);
  }
  stats.finalize();
  return stats;
}

// Probe the attention step of a layer around the iterates of a solve on x.
template <typename T>
ProbeStats contraction_probe(FpsaLayer<T>& layer, const Tensor<T>& x, const FpiConfig& cfg,
                             int n_pairs, uint64_t seed) {
  NoGradGuard ng;
  StepContext<T> ctx = make_step_context(layer, constant(x), /*update_power=*/false);
  auto step = [&ctx](const Var<T>& z) { return attention_step(z, ctx); };
  FpiConfig snap_cfg = cfg;
  snap_cfg.granularity = FreezeGranularity::per_token_per_head;
  snap_cfg.record_iterates = true;
  auto result = solve<T>(step, constant(x), snap_cfg,
                         make_chunk_layout(x.shape, snap_cfg.granularity, layer.heads));
  return contraction_probe<T>(step, result.iterate_snapshots, n_pairs, 0.01, seed);
}

}  // namespace fpsa
