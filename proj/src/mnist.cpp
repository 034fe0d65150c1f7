#include "fpsa/mnist.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "fpsa/errors.hpp"

namespace fpsa {

namespace {

uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw DataError("truncated IDX header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

std::string find_file(const std::string& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  // canonical name uses dots; many mirrors ship dashes
  for (std::string name : {stem, [&] {
         std::string s = stem;
         for (auto& c : s)
           if (c == '.') c = '-';
         return s;
       }()}) {
    fs::path p = fs::path(dir) / name;
    if (fs::exists(p)) return p.string();
  }
  return (fs::path(dir) / stem).string();
}

}  // namespace

MnistSplit load_idx_split(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw DataError("cannot open IDX image file: " + images_path);
  const uint32_t magic_i = read_be32(fi, images_path);
  if (magic_i != 2051)
    throw DataError("bad IDX image magic " + std::to_string(magic_i) + " in " + images_path +
                    " (expected 2051)");
  const int64_t n = read_be32(fi, images_path);
  const int64_t rows = read_be32(fi, images_path);
  const int64_t cols = read_be32(fi, images_path);

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw DataError("cannot open IDX label file: " + labels_path);
  const uint32_t magic_l = read_be32(fl, labels_path);
  if (magic_l != 2049)
    throw DataError("bad IDX label magic " + std::to_string(magic_l) + " in " + labels_path +
                    " (expected 2049)");
  const int64_t nl = read_be32(fl, labels_path);
  if (nl != n)
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                    std::to_string(nl) + " labels");

  MnistSplit split;
  split.images = Tensor<float>({n, rows, cols});
  std::vector<unsigned char> buf(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < n; ++i) {
    if (!fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw DataError("truncated image data at sample " + std::to_string(i) + " in " +
                      images_path);
    float* dst = split.images.data.data() + i * rows * cols;
    for (size_t j = 0; j < buf.size(); ++j) dst[j] = static_cast<float>(buf[j]) / 255.0f;
  }
  split.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    unsigned char lab;
    if (!fl.read(reinterpret_cast<char*>(&lab), 1))
      throw DataError("truncated label data at sample " + std::to_string(i) + " in " +
                      labels_path);
    if (lab > 9) throw DataError("label " + std::to_string(int(lab)) + " outside 0-9");
    split.labels[static_cast<size_t>(i)] = lab;
  }
  return split;
}

MnistData load_mnist(const std::string& dir) {
  MnistData d;
  d.train = load_idx_split(find_file(dir, "train-images.idx3-ubyte"),
                           find_file(dir, "train-labels.idx1-ubyte"));
  d.test = load_idx_split(find_file(dir, "t10k-images.idx3-ubyte"),
                          find_file(dir, "t10k-labels.idx1-ubyte"));
  return d;
}

bool mnist_present(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir)) return false;
  auto ok = [&](const std::string& stem) { return fs::exists(find_file(dir, stem)); };
  return ok("train-images.idx3-ubyte") && ok("train-labels.idx1-ubyte") &&
         ok("t10k-images.idx3-ubyte") && ok("t10k-labels.idx1-ubyte");
}

}  // namespace fpsa
