#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fpsa/config.hpp"
#include "fpsa/errors.hpp"

using namespace fpsa;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const std::string& body, const std::string& name) {
  auto dir = fs::temp_directory_path() / "fpsa_cli_test";
  fs::create_directories(dir);
  auto p = dir / name;
  std::ofstream f(p);
  f << body;
  return p;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string out_file =
      (fs::temp_directory_path() / "fpsa_cli_test" / "cli_out.txt").string();
  fs::create_directories(fs::temp_directory_path() / "fpsa_cli_test");
  const std::string cmd = std::string(FPSA_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (output) {
    std::ifstream f(out_file);
    output->assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("config file parsing with defaults and overrides") {
  auto p = write_config(
      "# comment\n"
      "[task]\n"
      "task = induction\n"
      "attention = vanilla\n"
      "[train]\n"
      "epochs = 7\n"
      "lr = 1e-3\n"
      "[fpi]\n"
      "epsilon = 1e-6\n",
      "ok.ini");
  RunConfig cfg = parse_config_file(p.string());
  CHECK(cfg.attention == "vanilla");
  CHECK(cfg.epochs == 7);
  CHECK(cfg.lr == doctest::Approx(1e-3));
  CHECK(cfg.epsilon == doctest::Approx(1e-6));
  CHECK(cfg.max_iter == 100);  // untouched default
  CHECK(cfg.effective_epsilon() == doctest::Approx(1e-6));
}

TEST_CASE("epsilon defaults depend on the task") {
  RunConfig cfg;
  CHECK(cfg.effective_epsilon() == doctest::Approx(1e-4));
  cfg.task = "mnist_patch";
  CHECK(cfg.effective_epsilon() == doctest::Approx(1e-5));
}

TEST_CASE("unknown keys, sections and malformed lines are rejected") {
  auto bad_key = write_config("[train]\nlearning_rate = 1\n", "bad_key.ini");
  CHECK_THROWS_WITH_AS(parse_config_file(bad_key.string()),
                       doctest::Contains("train.learning_rate"), ConfigError);

  auto bad_section = write_config("[optimizer]\nlr = 1\n", "bad_section.ini");
  CHECK_THROWS_WITH_AS(parse_config_file(bad_section.string()), doctest::Contains("optimizer"),
                       ConfigError);

  auto no_section = write_config("lr = 1\n", "no_section.ini");
  CHECK_THROWS_AS(parse_config_file(no_section.string()), ConfigError);

  auto bad_value = write_config("[train]\nepochs = soon\n", "bad_value.ini");
  CHECK_THROWS_WITH_AS(parse_config_file(bad_value.string()), doctest::Contains("soon"),
                       ConfigError);

  auto bad_enum = write_config("[task]\nbackward = magic\n", "bad_enum.ini");
  CHECK_THROWS_AS(parse_config_file(bad_enum.string()), ConfigError);

  CHECK_THROWS_AS(parse_config_file("/nonexistent/fpsa.ini"), ConfigError);
}

TEST_CASE("config validation bounds") {
  RunConfig cfg;
  cfg.batch = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.clip = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.dim = 10;
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("every documented key is accepted by the parser") {
  RunConfig cfg;
  for (const auto& d : config_key_docs()) {
    std::string value;
    if (d.key == "task") value = "induction";
    else if (d.key == "attention") value = "self";
    else if (d.key == "backward") value = "implicit";
    else if (d.key == "data_dir" || d.key == "out_dir") value = "somewhere";
    else if (d.key == "pos_emb") value = "true";
    else if (d.key == "train_fraction") value = "0.5";
    else if (d.key == "epsilon" || d.key == "lr" || d.key == "weight_decay" || d.key == "clip")
      value = "0.5";
    else value = "4";
    CHECK_NOTHROW(apply_config_line(cfg, d.section, d.key, value, "test"));
  }
}

TEST_CASE("cli: help exits zero and lists config keys") {
  std::string out;
  CHECK(run_cli("--help", &out) == 0);
  for (const auto& d : config_key_docs()) CHECK(out.find(d.key) != std::string::npos);
  CHECK(out.find("train") != std::string::npos);
  CHECK(out.find("gradcheck") != std::string::npos);
}

TEST_CASE("cli: config errors exit 2") {
  CHECK(run_cli("train --config /nonexistent.ini") == 2);
  auto bad = write_config("[train]\nepochs = -3\n", "neg.ini");
  CHECK(run_cli("train --config " + bad.string()) == 2);
  CHECK(run_cli("definitely-not-a-command") == 2);
}

TEST_CASE("cli: missing mnist data exits 3 with the path in the message") {
  auto cfgp = write_config("[task]\ntask = mnist_patch\n[paths]\ndata_dir = /no/such/dir\n",
                           "mnist_missing.ini");
  std::string out;
  CHECK(run_cli("train --config " + cfgp.string(), &out) == 3);
  CHECK(out.find("/no/such/dir") != std::string::npos);
}

TEST_CASE("cli: train with epochs 0 evaluates the fresh model and writes artifacts") {
  auto dir = fs::temp_directory_path() / "fpsa_cli_test" / "run0";
  fs::remove_all(dir);
  auto cfgp = write_config(
      "[task]\ntask = induction\n[train]\nepochs = 0\n[model]\nvocab_size = 6\nn_pairs = 20\n",
      "ep0.ini");
  std::string out;
  const int rc = run_cli("train --config " + cfgp.string() + " --out " + dir.string(), &out);
  CHECK(rc == 0);
  CHECK(out.find("final_test_accuracy") != std::string::npos);
  CHECK(fs::exists(dir / "checkpoint.ckpt"));
  CHECK(fs::exists(dir / "run_meta.json"));
}

TEST_CASE("cli: short training run produces artifacts; eval reproduces accuracy; heatmaps export") {
  auto dir = fs::temp_directory_path() / "fpsa_cli_test" / "run1";
  fs::remove_all(dir);
  auto cfgp = write_config(
      "[task]\ntask = induction\nattention = self\n"
      "[train]\nepochs = 2\nbatch = 16\nseed = 5\n"
      "[model]\nvocab_size = 8\nn_pairs = 40\n",
      "short.ini");
  std::string out;
  const int rc = run_cli("train --config " + cfgp.string() + " --out " + dir.string(), &out);
  CHECK(rc == 0);
  REQUIRE(out.find("final_test_accuracy") != std::string::npos);
  CHECK(fs::exists(dir / "checkpoint.ckpt"));
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "iteration_stats.csv"));

  const std::string acc_line = out.substr(out.find("final_test_accuracy"));
  std::string eval_out;
  const int rc2 = run_cli("eval --config " + cfgp.string() + " --checkpoint " +
                              (dir / "checkpoint.ckpt").string(),
                          &eval_out);
  CHECK(rc2 == 0);
  const std::string acc_value = acc_line.substr(acc_line.find(' ') + 1, 8);
  CHECK(eval_out.find("test_accuracy " + acc_value) != std::string::npos);

  // checkpoint trained as self cannot load into a vanilla config
  auto van = write_config(
      "[task]\ntask = induction\nattention = vanilla\n[model]\nvocab_size = 8\nn_pairs = 40\n",
      "van.ini");
  CHECK(run_cli("eval --config " + van.string() + " --checkpoint " +
                (dir / "checkpoint.ckpt").string()) == 5);

  // heatmap export
  std::string hm_out;
  const int rc3 = run_cli("heatmap --config " + cfgp.string() + " --checkpoint " +
                              (dir / "checkpoint.ckpt").string() + " --out " + dir.string(),
                          &hm_out);
  CHECK(rc3 == 0);
  CHECK(fs::exists(dir / "attention_head0.csv"));
  CHECK(fs::exists(dir / "attention_head1.csv"));

  // trace over the train split
  std::string tr_out;
  const int rc4 = run_cli("trace --config " + cfgp.string() + " --checkpoint " +
                              (dir / "checkpoint.ckpt").string() + " --out " + dir.string() +
                              " --limit 16",
                          &tr_out);
  CHECK(rc4 == 0);
  CHECK(tr_out.find("head 0:") != std::string::npos);
  CHECK(fs::exists(dir / "trace.csv"));
}

TEST_CASE("cli: gradcheck gates exit codes") {
  std::string out;
  CHECK(run_cli("gradcheck", &out) == 0);
  CHECK(out.find("gradcheck passed") != std::string::npos);
  CHECK(out.find("phantom") != std::string::npos);  // reported but not gating
  CHECK(run_cli("gradcheck --corrupt-vjp", &out) == 6);
}

TEST_CASE("cli: identical config and seed give byte-identical artifacts") {
  auto dir1 = fs::temp_directory_path() / "fpsa_cli_test" / "det1";
  auto dir2 = fs::temp_directory_path() / "fpsa_cli_test" / "det2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  auto cfgp = write_config(
      "[task]\ntask = induction\n[train]\nepochs = 1\nbatch = 16\nseed = 9\n"
      "[model]\nvocab_size = 8\nn_pairs = 30\n",
      "det.ini");
  REQUIRE(run_cli("train --config " + cfgp.string() + " --out " + dir1.string()) == 0);
  REQUIRE(run_cli("train --config " + cfgp.string() + " --out " + dir2.string()) == 0);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir1 / "metrics.csv") == slurp(dir2 / "metrics.csv"));
  CHECK(slurp(dir1 / "iteration_stats.csv") == slurp(dir2 / "iteration_stats.csv"));
  CHECK(slurp(dir1 / "checkpoint.ckpt") == slurp(dir2 / "checkpoint.ckpt"));
}
