#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fpsa {

// Flat run configuration: parsed from an INI-style file with sections
// mirroring the groups below; command-line flags override file values.
// Unknown sections or keys are rejected.
struct RunConfig {
  // [task]
  std::string task = "induction";    // induction | mnist_patch
  std::string attention = "self";    // self | vanilla
  std::string backward = "implicit"; // unrolled | implicit | phantom

  // [fpi]
  int max_iter = 100;
  double epsilon = 0.0;  // 0 -> task default (1e-4 induction, 1e-5 mnist_patch)

  // [train]
  int epochs = 100;
  int batch = 64;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double clip = 1.0;
  uint64_t seed = 42;

  // [model]
  int64_t vocab_size = 20;
  int64_t dim = 0;    // 0 -> task default (32 induction, 64 patch)
  int64_t heads = 0;  // 0 -> task default (2 induction, 4 patch)
  int64_t n_pairs = 0;  // induction dataset size; 0 -> all distinct pairs
  double train_fraction = 0.8;
  bool pos_emb = true;

  // [paths]
  std::string data_dir = "data";
  std::string out_dir = "out";

  double effective_epsilon() const {
    if (epsilon > 0) return epsilon;
    return task == "mnist_patch" ? 1e-5 : 1e-4;
  }

  void validate() const;
};

// Key -> (section, default, description) listing used by --help and by the
// strict parser.
struct ConfigKeyDoc {
  std::string section, key, def, doc;
};
const std::vector<ConfigKeyDoc>& config_key_docs();

RunConfig parse_config_file(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& section, const std::string& key,
                       const std::string& value, const std::string& where);

}  // namespace fpsa
