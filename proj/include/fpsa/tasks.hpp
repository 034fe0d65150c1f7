#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "fpsa/rng.hpp"
#include "fpsa/tensor.hpp"

namespace fpsa {

// Sequence completion task: every sample is [BOS t1 t2 SEP t1 MASK EOS] with
// t1 != t2 from the ordinary vocabulary, label t2, prediction at the MASK.
struct InductionTaskSpec {
  int64_t vocab_size = 20;  // ordinary tokens; specials appended after

  static constexpr int64_t seq_len = 7;
  static constexpr int64_t mask_pos = 5;

  int64_t total_vocab() const { return vocab_size + 4; }
  int64_t bos() const { return vocab_size; }
  int64_t sep() const { return vocab_size + 1; }
  int64_t mask() const { return vocab_size + 2; }
  int64_t eos() const { return vocab_size + 3; }
  int64_t pair_capacity() const { return vocab_size * (vocab_size - 1); }

  std::string token_name(int64_t t) const {
    if (t == bos()) return "BOS";
    if (t == sep()) return "SEP";
    if (t == mask()) return "MASK";
    if (t == eos()) return "EOS";
    return "t" + std::to_string(t);
  }
};

struct TokenDataset {
  Tensor<int64_t> tokens;       // [n, 7]
  std::vector<int64_t> labels;  // [n]
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

struct InductionDataset {
  InductionTaskSpec spec;
  TokenDataset train;
  TokenDataset test;
};

namespace detail {
inline void emit_induction_sample(const InductionTaskSpec& s, int64_t t1, int64_t t2,
                                  Tensor<int64_t>& tokens, std::vector<int64_t>& labels) {
  const int64_t row = static_cast<int64_t>(labels.size());
  int64_t* p = tokens.data.data() + row * InductionTaskSpec::seq_len;
  p[0] = s.bos();
  p[1] = t1;
  p[2] = t2;
  p[3] = s.sep();
  p[4] = t1;
  p[5] = s.mask();
  p[6] = s.eos();
  labels.push_back(t2);
}
}  // namespace detail

// Draws n_samples distinct (t1, t2) pairs and splits them so that test pairs
// never occur in training: the task is solved by the copy mechanism, not by
// pair memorization. Deterministic under seed.
inline InductionDataset gen_induction_dataset(const InductionTaskSpec& spec, int64_t n_samples,
                                              uint64_t seed, double train_fraction = 0.8) {
  if (spec.vocab_size < 2) throw DataError("induction task needs vocab_size >= 2");
  const int64_t capacity = spec.pair_capacity();
  if (n_samples < 1 || n_samples > capacity)
    throw DataError("requested " + std::to_string(n_samples) + " samples but only " +
                    std::to_string(capacity) + " distinct (t1, t2) pairs exist");
  if (train_fraction <= 0.0 || train_fraction > 1.0)
    throw DataError("train_fraction must be in (0, 1]");

  std::vector<std::pair<int64_t, int64_t>> pairs;
  pairs.reserve(capacity);
  for (int64_t a = 0; a < spec.vocab_size; ++a)
    for (int64_t b = 0; b < spec.vocab_size; ++b)
      if (a != b) pairs.emplace_back(a, b);
  Rng rng(seed);
  rng.shuffle(pairs);
  pairs.resize(n_samples);

  int64_t n_train = static_cast<int64_t>(std::llround(train_fraction * n_samples));
  n_train = std::clamp<int64_t>(n_train, 1, n_samples);

  InductionDataset ds;
  ds.spec = spec;
  ds.train.tokens = Tensor<int64_t>({n_train, InductionTaskSpec::seq_len});
  ds.test.tokens = Tensor<int64_t>({std::max<int64_t>(n_samples - n_train, 0),
                                    InductionTaskSpec::seq_len});
  for (int64_t i = 0; i < n_samples; ++i) {
    auto [t1, t2] = pairs[i];
    if (i < n_train)
      detail::emit_induction_sample(spec, t1, t2, ds.train.tokens, ds.train.labels);
    else
      detail::emit_induction_sample(spec, t1, t2, ds.test.tokens, ds.test.labels);
  }
  return ds;
}

// MNIST-patch task geometry: 28x28 inputs are zero-padded to 36x36 (4 px on
// each side) and cut into a 3x3 grid of 12x12 patches.
struct PatchTaskSpec {
  int64_t image_size = 28;
  int64_t patch_size = 12;
  int64_t padded_size = 36;
  int64_t classes = 10;

  int64_t grid() const { return padded_size / patch_size; }
  int64_t n_tokens() const { return grid() * grid(); }
  int64_t patch_dim() const { return patch_size * patch_size; }
  int64_t pad() const { return (padded_size - image_size) / 2; }
};

// [28, 28] -> [9, 144], row-major within each patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, const PatchTaskSpec& spec = {}) {
  if (image.rank() != 2 || image.shape[0] != spec.image_size ||
      image.shape[1] != spec.image_size)
    throw ShapeError("patchify expects a " + std::to_string(spec.image_size) + "x" +
                     std::to_string(spec.image_size) + " image, got " +
                     shape_str(image.shape));
  if (!image.all_finite()) throw NumericError("non-finite pixel in patchify input");
  const int64_t P = spec.patch_size, G = spec.grid(), pad = spec.pad(), S = spec.image_size;
  Tensor<T> out({G * G, P * P});
  for (int64_t gy = 0; gy < G; ++gy)
    for (int64_t gx = 0; gx < G; ++gx) {
      const int64_t patch = gy * G + gx;
      for (int64_t py = 0; py < P; ++py)
        for (int64_t px = 0; px < P; ++px) {
          const int64_t iy = gy * P + py - pad;
          const int64_t ix = gx * P + px - pad;
          T v = T(0);
          if (iy >= 0 && iy < S && ix >= 0 && ix < S) v = image[iy * S + ix];
          out[patch * P * P + py * P + px] = v;
        }
    }
  return out;
}

// Batched convenience: [n, 28, 28] -> [n, 9, 144].
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, const PatchTaskSpec& spec = {}) {
  if (images.rank() != 3) throw ShapeError("patchify_batch expects [n, H, W]");
  const int64_t n = images.shape[0];
  const int64_t hw = images.shape[1] * images.shape[2];
  Tensor<T> out({n, spec.n_tokens(), spec.patch_dim()});
  Tensor<T> one({images.shape[1], images.shape[2]});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(images.data.begin() + i * hw, hw, one.data.begin());
    Tensor<T> p = patchify(one, spec);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + i * p.numel());
  }
  return out;
}

}  // namespace fpsa
