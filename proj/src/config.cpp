#include "fpsa/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "fpsa/errors.hpp"

namespace fpsa {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ConfigError(where + ": '" + v + "' is not an integer");
  }
}

double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ConfigError(where + ": '" + v + "' is not a number");
  }
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": '" + v + "' is not a boolean");
}

}  // namespace

const std::vector<ConfigKeyDoc>& config_key_docs() {
  static const std::vector<ConfigKeyDoc> docs = {
      {"task", "task", "induction", "task to run: induction | mnist_patch"},
      {"task", "attention", "self", "attention variant: self | vanilla"},
      {"task", "backward", "implicit", "gradient mode: unrolled | implicit | phantom"},
      {"fpi", "max_iter", "100", "maximum fixed-point iterations"},
      {"fpi", "epsilon", "task default",
       "relative-residual stopping threshold (1e-4 induction, 1e-5 mnist_patch)"},
      {"train", "epochs", "100", "training epochs"},
      {"train", "batch", "64", "batch size"},
      {"train", "lr", "3e-4", "AdamW learning rate"},
      {"train", "weight_decay", "0.01", "AdamW decoupled weight decay"},
      {"train", "clip", "1.0", "global gradient-norm clip threshold"},
      {"train", "seed", "42", "master seed (data order, init)"},
      {"model", "vocab_size", "20", "induction: ordinary vocabulary size"},
      {"model", "dim", "task default", "embedding dim (32 induction, 64 patch)"},
      {"model", "heads", "task default", "attention heads (2 induction, 4 patch)"},
      {"model", "n_pairs", "all", "induction: distinct (t1,t2) pairs to draw"},
      {"model", "train_fraction", "0.8", "induction: fraction of pairs in the train split"},
      {"model", "pos_emb", "true", "add learned positional embeddings"},
      {"paths", "data_dir", "data", "directory with MNIST IDX files"},
      {"paths", "out_dir", "out", "directory for artifacts"},
  };
  return docs;
}

void apply_config_line(RunConfig& cfg, const std::string& section, const std::string& key,
                       const std::string& value, const std::string& where) {
  const std::string full = section + "." + key;
  if (full == "task.task") {
    if (value != "induction" && value != "mnist_patch")
      throw ConfigError(where + ": unknown task '" + value + "'");
    cfg.task = value;
  } else if (full == "task.attention") {
    if (value != "self" && value != "vanilla")
      throw ConfigError(where + ": unknown attention variant '" + value + "'");
    cfg.attention = value;
  } else if (full == "task.backward") {
    if (value != "unrolled" && value != "implicit" && value != "phantom")
      throw ConfigError(where + ": unknown backward mode '" + value + "'");
    cfg.backward = value;
  } else if (full == "fpi.max_iter") {
    cfg.max_iter = static_cast<int>(parse_int(value, where));
  } else if (full == "fpi.epsilon") {
    cfg.epsilon = parse_double(value, where);
  } else if (full == "train.epochs") {
    cfg.epochs = static_cast<int>(parse_int(value, where));
  } else if (full == "train.batch") {
    cfg.batch = static_cast<int>(parse_int(value, where));
  } else if (full == "train.lr") {
    cfg.lr = parse_double(value, where);
  } else if (full == "train.weight_decay") {
    cfg.weight_decay = parse_double(value, where);
  } else if (full == "train.clip") {
    cfg.clip = parse_double(value, where);
  } else if (full == "train.seed") {
    cfg.seed = static_cast<uint64_t>(parse_int(value, where));
  } else if (full == "model.vocab_size") {
    cfg.vocab_size = parse_int(value, where);
  } else if (full == "model.dim") {
    cfg.dim = parse_int(value, where);
  } else if (full == "model.heads") {
    cfg.heads = parse_int(value, where);
  } else if (full == "model.n_pairs") {
    cfg.n_pairs = parse_int(value, where);
  } else if (full == "model.train_fraction") {
    cfg.train_fraction = parse_double(value, where);
  } else if (full == "model.pos_emb") {
    cfg.pos_emb = parse_bool(value, where);
  } else if (full == "paths.data_dir") {
    cfg.data_dir = value;
  } else if (full == "paths.out_dir") {
    cfg.out_dir = value;
  } else {
    throw ConfigError(where + ": unknown config key '" + full + "'");
  }
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const auto& d : config_key_docs()) known = known || d.section == section;
      if (!known) throw ConfigError(where + ": unknown section '[" + section + "]'");
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any [section]");
    apply_config_line(cfg, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)), where);
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  if (max_iter < 1) throw ConfigError("fpi.max_iter must be >= 1");
  if (epsilon < 0) throw ConfigError("fpi.epsilon must be positive");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (lr <= 0) throw ConfigError("train.lr must be positive");
  if (clip <= 0) throw ConfigError("train.clip must be positive");
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
  if (train_fraction <= 0 || train_fraction > 1)
    throw ConfigError("model.train_fraction must be in (0, 1]");
  if (n_pairs < 0) throw ConfigError("model.n_pairs must be >= 0");
  const int64_t d = dim;
  const int64_t h = heads;
  if (d < 0 || h < 0) throw ConfigError("model.dim / model.heads must be >= 0");
  if (d > 0 && h > 0 && d % h != 0)
    throw ConfigError("model.dim must be divisible by model.heads");
}

}  // namespace fpsa
