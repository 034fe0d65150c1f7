#pragma once

#include <string>
#include <vector>

#include "fpsa/tensor.hpp"

namespace fpsa {

// One MNIST split loaded from IDX files: images [n, 28, 28] scaled to [0, 1].
struct MnistSplit {
  Tensor<float> images;
  std::vector<int64_t> labels;
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

struct MnistData {
  MnistSplit train;
  MnistSplit test;
};

// Reads a big-endian IDX image/label file pair (magic 2051 / 2049).
MnistSplit load_idx_split(const std::string& images_path, const std::string& labels_path);

// Loads the standard four files from a directory, accepting both the
// historical "." and the "-" filename variants.
MnistData load_mnist(const std::string& dir);

bool mnist_present(const std::string& dir);

}  // namespace fpsa
