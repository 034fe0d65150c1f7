#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fpsa/diagnostics.hpp"
#include "fpsa/mnist.hpp"
#include "fpsa/model.hpp"
#include "fpsa/optim.hpp"
#include "fpsa/tasks.hpp"

namespace fpsa {

// Uniform container for both tasks: exactly one of tokens/patches is filled.
template <typename T>
struct ClassificationData {
  Tensor<int64_t> train_tokens, test_tokens;  // [n, 7]
  Tensor<T> train_patches, test_patches;      // [n, 9, 144]
  std::vector<int64_t> train_labels, test_labels;

  bool token_based() const { return train_tokens.numel() > 0; }
  int64_t train_size() const { return static_cast<int64_t>(train_labels.size()); }
  int64_t test_size() const { return static_cast<int64_t>(test_labels.size()); }

  static ClassificationData from_induction(const InductionDataset& ds) {
    ClassificationData d;
    d.train_tokens = ds.train.tokens;
    d.train_labels = ds.train.labels;
    d.test_tokens = ds.test.tokens;
    d.test_labels = ds.test.labels;
    return d;
  }

  static ClassificationData from_mnist(const MnistData& mnist, const PatchTaskSpec& spec = {}) {
    ClassificationData d;
    d.train_patches = patchify_batch(mnist.train.images, spec).template cast<T>();
    d.train_labels = mnist.train.labels;
    d.test_patches = patchify_batch(mnist.test.images, spec).template cast<T>();
    d.test_labels = mnist.test.labels;
    return d;
  }
};

template <typename T>
struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  AdamWParams opt;
  double clip_threshold = 1.0;
  uint64_t seed = 42;
  FpiConfig fpi;
  BackwardMode mode = BackwardMode::implicit;
  bool collect_iteration_stats = true;
  bool verbose = false;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::vector<int64_t> per_class_correct;
  std::vector<int64_t> per_class_total;
};

struct TrainReport {
  std::vector<double> loss_curve;      // mean training loss per epoch
  std::vector<double> test_acc_curve;  // accuracy on the test split per epoch
  std::vector<std::vector<HeadSummary>> iter_stats;  // per epoch (self models)
  double final_test_accuracy = 0.0;
  bool aborted_nan = false;
  int completed_epochs = 0;
};

namespace detail {

template <typename T>
ModelOutput<T> forward_batch(Model<T>& m, const ClassificationData<T>& data, bool train_split,
                             const std::vector<int64_t>& idx, const FpiConfig& cfg,
                             BackwardMode mode, bool update_power) {
  const int64_t B = static_cast<int64_t>(idx.size());
  if (data.token_based()) {
    const Tensor<int64_t>& src = train_split ? data.train_tokens : data.test_tokens;
    Tensor<int64_t> tokens({B, InductionTaskSpec::seq_len});
    for (int64_t i = 0; i < B; ++i)
      std::copy_n(src.data.begin() + idx[i] * InductionTaskSpec::seq_len,
                  InductionTaskSpec::seq_len,
                  tokens.data.begin() + i * InductionTaskSpec::seq_len);
    return model_forward_tokens(m, tokens, cfg, mode, update_power);
  }
  const Tensor<T>& src = train_split ? data.train_patches : data.test_patches;
  const int64_t row = src.shape[1] * src.shape[2];
  Tensor<T> patches({B, src.shape[1], src.shape[2]});
  for (int64_t i = 0; i < B; ++i)
    std::copy_n(src.data.begin() + idx[i] * row, row, patches.data.begin() + i * row);
  return model_forward_patches(m, patches, cfg, mode, update_power);
}

inline std::vector<int64_t> gather_labels(const std::vector<int64_t>& labels,
                                          const std::vector<int64_t>& idx) {
  std::vector<int64_t> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<size_t>(idx[i])];
  return out;
}

inline int64_t argmax_row(const double* p, int64_t n) {
  int64_t best = 0;
  for (int64_t i = 1; i < n; ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

}  // namespace detail

// Deterministic full-split evaluation; parameters and power-iteration state
// are left untouched.
template <typename T>
EvalResult evaluate(Model<T>& m, const ClassificationData<T>& data, const FpiConfig& cfg,
                    bool train_split = false, int batch_size = 128, int64_t limit = -1) {
  NoGradGuard ng;
  const auto& labels = train_split ? data.train_labels : data.test_labels;
  int64_t n = static_cast<int64_t>(labels.size());
  if (limit >= 0) n = std::min<int64_t>(n, limit);
  EvalResult res;
  res.per_class_correct.assign(static_cast<size_t>(m.spec.n_classes()), 0);
  res.per_class_total.assign(static_cast<size_t>(m.spec.n_classes()), 0);
  if (n == 0) return res;
  int64_t correct = 0;
  double loss_sum = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t B = std::min<int64_t>(batch_size, n - start);
    std::vector<int64_t> idx(static_cast<size_t>(B));
    std::iota(idx.begin(), idx.end(), start);
    auto out = detail::forward_batch(m, data, train_split, idx, cfg, BackwardMode::implicit,
                                     /*update_power=*/false);
    auto batch_labels = detail::gather_labels(labels, idx);
    loss_sum +=
        static_cast<double>(ops::cross_entropy_logits(out.logits, batch_labels)->value[0]) * B;
    const Tensor<T>& logits = out.logits->value;
    const int64_t C = logits.shape[1];
    std::vector<double> row(static_cast<size_t>(C));
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t c = 0; c < C; ++c)
        row[static_cast<size_t>(c)] = static_cast<double>(logits[b * C + c]);
      const int64_t pred = detail::argmax_row(row.data(), C);
      const int64_t truth = batch_labels[static_cast<size_t>(b)];
      res.per_class_total[static_cast<size_t>(truth)] += 1;
      if (pred == truth) {
        res.per_class_correct[static_cast<size_t>(truth)] += 1;
        ++correct;
      }
    }
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  res.mean_loss = loss_sum / static_cast<double>(n);
  return res;
}

// Incremental trainer so callers can checkpoint/resume at epoch boundaries.
// Shuffling is derived from (seed, epoch), which makes a resumed run
// bit-identical to an uninterrupted one.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const ClassificationData<T>& data, TrainConfig<T> cfg)
      : model_(model), data_(data), cfg_(std::move(cfg)),
        opt_state_(AdamWState<T>::init(model.params())) {
    cfg_.fpi.validate();
  }

  // One pass over the training split. Returns false when a NaN loss aborted
  // the epoch (parameters roll back to the last epoch boundary).
  bool run_epoch() {
    auto params = model_.params();
    std::vector<Tensor<T>> param_backup;
    std::vector<Tensor<T>> m_backup, v_backup;
    for (auto& [name, p] : params) param_backup.push_back(p->value);
    m_backup = opt_state_.m;
    v_backup = opt_state_.v;
    const int64_t t_backup = opt_state_.t;
    auto sn_backup = model_.layer.sn;

    std::vector<int64_t> order(static_cast<size_t>(data_.train_size()));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg_.seed, static_cast<uint64_t>(epoch_) + 1));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    int64_t seen = 0;
    IterationTrace trace;
    bool want_stats = cfg_.collect_iteration_stats && model_.spec.is_self();

    for (size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const size_t end = std::min(order.size(), start + cfg_.batch_size);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
      GradModeGuard record(true);
      auto out = detail::forward_batch(model_, data_, /*train=*/true, idx, cfg_.fpi, cfg_.mode,
                                       /*update_power=*/true);
      auto labels = detail::gather_labels(data_.train_labels, idx);
      auto loss = ops::cross_entropy_logits(out.logits, labels);
      const double loss_val = static_cast<double>(loss->value[0]);
      if (!std::isfinite(loss_val)) {
        for (size_t i = 0; i < params.size(); ++i) params[i].second->value = param_backup[i];
        opt_state_.m = m_backup;
        opt_state_.v = v_backup;
        opt_state_.t = t_backup;
        model_.layer.sn = sn_backup;
        report_.aborted_nan = true;
        return false;
      }
      loss_sum += loss_val * static_cast<double>(idx.size());
      seen += static_cast<int64_t>(idx.size());
      if (want_stats && out.has_block)
        trace.append(out.block.fpi, static_cast<int64_t>(start));

      zero_grads(params);
      model_backward(model_, out, loss);
      clip_grad_norm(params, cfg_.clip_threshold);
      adamw_step(params, opt_state_, cfg_.opt);
    }

    report_.loss_curve.push_back(seen ? loss_sum / seen : 0.0);
    if (want_stats && !trace.records.empty()) report_.iter_stats.push_back(summarize(trace));
    const EvalResult ev = evaluate(model_, data_, cfg_.fpi, /*train_split=*/false);
    report_.test_acc_curve.push_back(ev.accuracy);
    report_.final_test_accuracy = ev.accuracy;
    ++epoch_;
    report_.completed_epochs = epoch_;
    return true;
  }

  bool run(int n_epochs) {
    for (int e = 0; e < n_epochs; ++e) {
      if (!run_epoch()) return false;
      if (cfg_.verbose) {
        std::fprintf(stderr, "epoch %d  loss %.6f  test_acc %.4f\n", epoch_,
                     report_.loss_curve.back(), report_.test_acc_curve.back());
      }
    }
    return true;
  }

  const TrainReport& report() const { return report_; }
  TrainReport& report() { return report_; }
  AdamWState<T>& optimizer_state() { return opt_state_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }

 private:
  Model<T>& model_;
  const ClassificationData<T>& data_;
  TrainConfig<T> cfg_;
  AdamWState<T> opt_state_;
  TrainReport report_;
  int epoch_ = 0;
};

// Convenience wrapper: train for cfg.epochs and return the report. With
// epochs == 0 this degenerates to a single evaluation of the fresh model.
template <typename T>
TrainReport train(Model<T>& model, const ClassificationData<T>& data, const TrainConfig<T>& cfg) {
  Trainer<T> tr(model, data, cfg);
  if (cfg.epochs == 0) {
    const EvalResult ev = evaluate(model, data, cfg.fpi, /*train_split=*/false);
    tr.report().final_test_accuracy = ev.accuracy;
    tr.report().test_acc_curve.push_back(ev.accuracy);
    return tr.report();
  }
  tr.run(cfg.epochs);
  return tr.report();
}

}  // namespace fpsa
