#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "fpsa/checkpoint.hpp"
#include "fpsa/config.hpp"
#include "fpsa/csv.hpp"
#include "fpsa/diagnostics.hpp"
#include "fpsa/gradcheck.hpp"
#include "fpsa/mnist.hpp"
#include "fpsa/train.hpp"

namespace fs = std::filesystem;
using namespace fpsa;

namespace {

// Exit codes: 0 ok, 2 config, 3 data, 4 numeric divergence, 5 checkpoint
// mismatch, 6 gradcheck threshold violation.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitGradcheck = 6;

struct CliArgs {
  std::string config_path;
  std::string checkpoint;
  std::string out_dir;
  std::string data_dir;
  int64_t seed = -1;
  int64_t limit = -1;
  bool do_export = false;
  bool f64 = false;
  bool corrupt_vjp = false;  // gradcheck negative-control hook
};

RunConfig resolve_config(const CliArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = parse_config_file(a.config_path);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
  cfg.validate();
  return cfg;
}

ModelSpec model_spec_from(const RunConfig& cfg) {
  ModelSpec spec;
  const bool self = cfg.attention == "self";
  spec.kind = cfg.task == "induction"
                  ? (self ? ModelKind::induction_self : ModelKind::induction_vanilla)
                  : (self ? ModelKind::patch_self : ModelKind::patch_vanilla);
  spec.vocab_size = cfg.vocab_size;
  spec.dim = cfg.dim;
  spec.heads = cfg.heads;
  spec.use_pos_emb = cfg.pos_emb;
  return spec;
}

BackwardMode backward_mode_from(const RunConfig& cfg) {
  if (cfg.backward == "unrolled") return BackwardMode::unrolled;
  if (cfg.backward == "phantom") return BackwardMode::phantom;
  return BackwardMode::implicit;
}

template <typename T>
ClassificationData<T> load_task_data(const RunConfig& cfg) {
  if (cfg.task == "induction") {
    InductionTaskSpec spec;
    spec.vocab_size = cfg.vocab_size;
    const int64_t n = cfg.n_pairs > 0 ? cfg.n_pairs : spec.pair_capacity();
    return ClassificationData<T>::from_induction(
        gen_induction_dataset(spec, n, cfg.seed, cfg.train_fraction));
  }
  if (!mnist_present(cfg.data_dir))
    throw DataError("MNIST IDX files not found under data_dir '" + cfg.data_dir + "'");
  return ClassificationData<T>::from_mnist(load_mnist(cfg.data_dir));
}

template <typename T>
TrainConfig<T> train_config_from(const RunConfig& cfg) {
  TrainConfig<T> tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch;
  tc.opt.lr = cfg.lr;
  tc.opt.weight_decay = cfg.weight_decay;
  tc.clip_threshold = cfg.clip;
  tc.seed = cfg.seed;
  tc.fpi.max_iter = cfg.max_iter;
  tc.fpi.epsilon = cfg.effective_epsilon();
  tc.mode = backward_mode_from(cfg);
  return tc;
}

nlohmann::json run_echo(const RunConfig& cfg) {
  nlohmann::json j;
  j["task"] = cfg.task;
  j["attention"] = cfg.attention;
  j["backward"] = cfg.backward;
  j["max_iter"] = cfg.max_iter;
  j["epsilon"] = cfg.effective_epsilon();
  j["epochs"] = cfg.epochs;
  j["batch"] = cfg.batch;
  j["lr"] = cfg.lr;
  j["weight_decay"] = cfg.weight_decay;
  j["clip"] = cfg.clip;
  j["seed"] = cfg.seed;
  return j;
}

void write_run_meta(const RunConfig& cfg, const std::string& command) {
  // the one artifact allowed to carry wall-clock time
  nlohmann::json meta;
  meta["command"] = command;
  meta["config"] = run_echo(cfg);
  meta["timestamp_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  std::ofstream f(fs::path(cfg.out_dir) / "run_meta.json");
  f << meta.dump(2) << "\n";
}

template <typename T>
int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  auto data = load_task_data<T>(cfg);
  Model<T> model = build_model<T>(model_spec_from(cfg), cfg.seed);
  TrainConfig<T> tc = train_config_from<T>(cfg);
  const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.ckpt").string();

  Trainer<T> trainer(model, data, tc);
  if (tc.epochs == 0) {
    save_model_checkpoint(ckpt_path, model, &trainer.optimizer_state(), 0, run_echo(cfg));
    const EvalResult ev = evaluate(model, data, tc.fpi);
    std::printf("final_test_accuracy %.6f\n", ev.accuracy);
    write_run_meta(cfg, "train");
    return kExitOk;
  }
  for (int e = 0; e < tc.epochs; ++e) {
    if (!trainer.run_epoch()) {
      std::fprintf(stderr, "NaN loss in epoch %d; keeping last-good checkpoint\n",
                   trainer.epoch() + 1);
      break;
    }
    save_model_checkpoint(ckpt_path, model, &trainer.optimizer_state(), trainer.epoch(),
                          run_echo(cfg));
    if (cfg.epochs >= 20 && (e + 1) % 10 == 0)
      std::fprintf(stderr, "epoch %d/%d loss %.6f test_acc %.4f\n", e + 1, tc.epochs,
                   trainer.report().loss_curve.back(),
                   trainer.report().test_acc_curve.back());
  }
  const TrainReport& rep = trainer.report();

  {
    std::ofstream f(fs::path(cfg.out_dir) / "metrics.csv", std::ios::binary);
    f << "epoch,train_loss,test_accuracy\n";
    for (size_t e = 0; e < rep.loss_curve.size(); ++e)
      f << (e + 1) << "," << csv::general9(rep.loss_curve[e]) << ","
        << csv::general9(rep.test_acc_curve[e]) << "\n";
  }
  if (!rep.iter_stats.empty()) {
    std::ofstream f(fs::path(cfg.out_dir) / "iteration_stats.csv", std::ios::binary);
    f << "epoch,head,mean_iterations,median_iterations,max_iterations,non_converged\n";
    for (size_t e = 0; e < rep.iter_stats.size(); ++e)
      for (const auto& s : rep.iter_stats[e])
        f << (e + 1) << "," << s.head << "," << csv::general9(s.mean) << "," << s.median << ","
          << s.max << "," << s.non_converged << "\n";
  }
  write_run_meta(cfg, "train");
  if (rep.aborted_nan) {
    std::fprintf(stderr, "training aborted on NaN loss after %d epochs\n",
                 rep.completed_epochs);
    return kExitNumeric;
  }
  std::printf("final_test_accuracy %.6f\n", rep.final_test_accuracy);
  return kExitOk;
}

template <typename T>
void export_sample_attention(Model<T>& model, const ClassificationData<T>& data,
                             const RunConfig& cfg, const FpiConfig& fpi) {
  NoGradGuard ng;
  const bool use_test = data.test_size() > 0;
  std::vector<int64_t> idx = {0};
  Tensor<T> probs;  // [1, H, N, N]
  std::vector<std::string> labels;
  if (data.token_based()) {
    const Tensor<int64_t>& src = use_test ? data.test_tokens : data.train_tokens;
    Tensor<int64_t> tokens({1, InductionTaskSpec::seq_len});
    std::copy_n(src.data.begin(), InductionTaskSpec::seq_len, tokens.data.begin());
    InductionTaskSpec ispec;
    ispec.vocab_size = cfg.vocab_size;
    for (int64_t p = 0; p < InductionTaskSpec::seq_len; ++p)
      labels.push_back(ispec.token_name(tokens[p]));
    std::function<void(const Tensor<T>&)> sink = [&](const Tensor<T>& p) { probs = p; };
    model_forward_tokens(model, tokens, fpi, BackwardMode::implicit, false, &sink);
  } else {
    const Tensor<T>& src = use_test ? data.test_patches : data.train_patches;
    Tensor<T> patches({1, src.shape[1], src.shape[2]});
    std::copy_n(src.data.begin(), src.shape[1] * src.shape[2], patches.data.begin());
    for (int64_t p = 0; p < src.shape[1]; ++p) labels.push_back("p" + std::to_string(p));
    std::function<void(const Tensor<T>&)> sink = [&](const Tensor<T>& p) { probs = p; };
    model_forward_patches(model, patches, fpi, BackwardMode::implicit, false, &sink);
  }
  // the sink fires once per iteration; by the end it holds the probs at Z*
  const int64_t H = probs.shape[1], N = probs.shape[2];
  std::vector<Tensor<double>> heads;
  for (int64_t h = 0; h < H; ++h) {
    Tensor<double> m({N, N});
    for (int64_t i = 0; i < N * N; ++i)
      m[i] = static_cast<double>(probs[h * N * N + i]);
    heads.push_back(std::move(m));
  }
  fs::create_directories(cfg.out_dir);
  const std::string prefix = (fs::path(cfg.out_dir) / "attention").string();
  export_attention_csv(heads, prefix, labels);
  std::printf("wrote %lld attention heatmap CSVs under %s\n",
              static_cast<long long>(H), cfg.out_dir.c_str());
}

template <typename T>
int cmd_eval(const RunConfig& cfg, const CliArgs& args) {
  if (args.checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
  auto data = load_task_data<T>(cfg);
  Model<T> model = build_model<T>(model_spec_from(cfg), cfg.seed);
  load_model_checkpoint(args.checkpoint, model);
  TrainConfig<T> tc = train_config_from<T>(cfg);
  const EvalResult ev = evaluate(model, data, tc.fpi, false, 128, args.limit);
  std::printf("test_accuracy %.6f\n", ev.accuracy);
  for (size_t c = 0; c < ev.per_class_total.size(); ++c) {
    if (ev.per_class_total[c] == 0) continue;
    std::printf("class %zu: %lld/%lld\n", c,
                static_cast<long long>(ev.per_class_correct[c]),
                static_cast<long long>(ev.per_class_total[c]));
  }
  if (args.do_export) export_sample_attention(model, data, cfg, tc.fpi);
  return kExitOk;
}

template <typename T>
ModelOutput<T> train_detail_forward(Model<T>& model, const ClassificationData<T>& data,
                                    const std::vector<int64_t>& idx, const FpiConfig& fpi);

template <typename T>
int cmd_trace(const RunConfig& cfg, const CliArgs& args) {
  auto data = load_task_data<T>(cfg);
  Model<T> model = build_model<T>(model_spec_from(cfg), cfg.seed);
  if (!args.checkpoint.empty()) load_model_checkpoint(args.checkpoint, model);
  if (!model.spec.is_self())
    throw ConfigError("trace needs attention = self (vanilla has no iteration)");
  TrainConfig<T> tc = train_config_from<T>(cfg);

  NoGradGuard ng;
  int64_t n = data.train_size();
  if (args.limit >= 0) n = std::min<int64_t>(n, args.limit);
  IterationTrace trace;
  const int64_t B = 128;
  for (int64_t start = 0; start < n; start += B) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(start + B, n); ++i) idx.push_back(i);
    auto out = train_detail_forward(model, data, idx, tc.fpi);
    trace.append(out.block.fpi, start);
  }
  if (trace.records.empty()) throw DataError("no samples to trace");
  for (const auto& s : summarize(trace))
    std::printf("head %lld: mean %.2f median %d max %d non_converged %lld/%lld\n",
                static_cast<long long>(s.head), s.mean, s.median, s.max,
                static_cast<long long>(s.non_converged), static_cast<long long>(s.count));
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / "trace.csv").string();
  export_trace_csv(trace, path);
  std::printf("wrote %s\n", path.c_str());
  return kExitOk;
}

// trace needs plain batched forwards without the Trainer plumbing
template <typename T>
ModelOutput<T> train_detail_forward(Model<T>& model, const ClassificationData<T>& data,
                                    const std::vector<int64_t>& idx, const FpiConfig& fpi) {
  if (data.token_based()) {
    Tensor<int64_t> tokens({static_cast<int64_t>(idx.size()), InductionTaskSpec::seq_len});
    for (size_t i = 0; i < idx.size(); ++i)
      std::copy_n(data.train_tokens.data.begin() + idx[i] * InductionTaskSpec::seq_len,
                  InductionTaskSpec::seq_len,
                  tokens.data.begin() + static_cast<int64_t>(i) * InductionTaskSpec::seq_len);
    return model_forward_tokens(model, tokens, fpi, BackwardMode::implicit, false);
  }
  const int64_t row = data.train_patches.shape[1] * data.train_patches.shape[2];
  Tensor<T> patches({static_cast<int64_t>(idx.size()), data.train_patches.shape[1],
                     data.train_patches.shape[2]});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(data.train_patches.data.begin() + idx[i] * row, row,
                patches.data.begin() + static_cast<int64_t>(i) * row);
  return model_forward_patches(model, patches, fpi, BackwardMode::implicit, false);
}

template <typename T>
int cmd_heatmap(const RunConfig& cfg, const CliArgs& args) {
  auto data = load_task_data<T>(cfg);
  Model<T> model = build_model<T>(model_spec_from(cfg), cfg.seed);
  if (!args.checkpoint.empty()) load_model_checkpoint(args.checkpoint, model);
  TrainConfig<T> tc = train_config_from<T>(cfg);
  export_sample_attention(model, data, cfg, tc.fpi);
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, const CliArgs& args) {
  // always f64: finite differences are meaningless in f32 at these tolerances
  GradcheckResult res = run_fpsa_gradcheck(cfg.seed, args.corrupt_vjp);
  std::printf("%-16s %14s %14s %14s\n", "parameter", "fd/unrolled", "impl/unrolled",
              "phantom/unrl");
  for (const auto& row : res.rows)
    std::printf("%-16s %14.3e %14.3e %14.3e\n", row.name.c_str(), row.fd_vs_unrolled,
                row.implicit_vs_unrolled, row.phantom_vs_unrolled);
  std::printf("max fd_vs_unrolled       %.3e (tolerance 1e-4)\n", res.max_fd);
  std::printf("max implicit_vs_unrolled %.3e (tolerance 1e-3)\n", res.max_implicit);
  std::printf("max phantom_vs_unrolled  %.3e (reported only)\n", res.max_phantom);
  if (!res.pass()) {
    std::fprintf(stderr, "gradcheck FAILED\n");
    return kExitGradcheck;
  }
  std::printf("gradcheck passed (forward iterations: %d)\n", res.forward_iterations);
  return kExitOk;
}

std::string config_help_footer() {
  std::string s = "\nConfig file keys (INI sections; flags override):\n";
  for (const auto& d : config_key_docs()) {
    s += "  [" + d.section + "] " + d.key + " = " + d.def + "\n      " + d.doc + "\n";
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fixed-point self-attention: training, evaluation and diagnostics"};
  app.footer(config_help_footer());
  app.require_subcommand(1);

  CliArgs args;
  std::string command;
  auto add_common = [&](CLI::App* sub, bool with_checkpoint) {
    sub->add_option("--config", args.config_path, "config file (INI)");
    sub->add_option("--seed", args.seed, "override train.seed");
    sub->add_option("--out", args.out_dir, "override paths.out_dir");
    sub->add_option("--data", args.data_dir, "override paths.data_dir");
    sub->add_option("--limit", args.limit, "restrict sample count");
    sub->add_flag("--export", args.do_export, "write attention CSVs");
    sub->add_flag("--f64", args.f64, "run in double precision");
    if (with_checkpoint) sub->add_option("--checkpoint", args.checkpoint, "checkpoint path");
  };
  add_common(app.add_subcommand("train", "train a model and write artifacts"), false);
  add_common(app.add_subcommand("eval", "evaluate a checkpoint"), true);
  auto* gc = app.add_subcommand("gradcheck", "gradient agreement CI gate (f64)");
  add_common(gc, false);
  gc->add_flag("--corrupt-vjp", args.corrupt_vjp, "test hook: corrupt one gradient");
  add_common(app.add_subcommand("trace", "convergence statistics over a split"), true);
  add_common(app.add_subcommand("heatmap", "export attention matrices for a sample"), true);

  try {
    app.parse(argc, argv);
    command = app.get_subcommands().front()->get_name();
    RunConfig cfg = resolve_config(args);
    if (command == "train")
      return args.f64 ? cmd_train<double>(cfg) : cmd_train<float>(cfg);
    if (command == "eval")
      return args.f64 ? cmd_eval<double>(cfg, args) : cmd_eval<float>(cfg, args);
    if (command == "gradcheck") return cmd_gradcheck(cfg, args);
    if (command == "trace")
      return args.f64 ? cmd_trace<double>(cfg, args) : cmd_trace<float>(cfg, args);
    if (command == "heatmap")
      return args.f64 ? cmd_heatmap<double>(cfg, args) : cmd_heatmap<float>(cfg, args);
    throw ConfigError("unknown command " + command);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitCheckpoint;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
