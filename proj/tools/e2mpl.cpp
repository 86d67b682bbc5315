// Command-line driver: train, eval, ablate, gen-data.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "e2mpl/config.hpp"
#include "e2mpl/run.hpp"

namespace fs = std::filesystem;
using namespace e2mpl;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  int workers = 0;
  std::optional<int> num_tasks;
  bool train_cls_token = false;
};

// Config errors that should exit with code 1 rather than 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const CommonFlags& flags, RunConfig base = {}) {
  RunConfig config = flags.config_path.empty() ? base : load_config(flags.config_path, base);
  apply_overrides(config, flags.sets);
  if (flags.seed) config.seed = *flags.seed;
  if (flags.num_tasks) config.num_tasks = *flags.num_tasks;
  if (flags.train_cls_token) config.train_cls_token = true;
  config.validate();
  return config;
}

int worker_count(const CommonFlags& flags) {
  if (flags.workers > 0) return flags.workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string config_block(const RunConfig& config) {
  return "# digest " + config.digest() + "\n# seed " + std::to_string(config.seed) + "\n" +
         config.canonical_text();
}

int cmd_train(const CommonFlags& flags) {
  const RunConfig config = resolve_config(flags);
  spdlog::info("train: digest {} seed {}", config.digest(), config.seed);
  const RunData data = load_run_data(config);
  const TrainedModel trained = train_model(config, data);
  const fs::path out(flags.out);
  fs::create_directories(out);
  save_checkpoint(make_checkpoint(config, trained), out / "checkpoint.e2ck");
  write_text(out / "history.ndjson", history_ndjson(trained.result.history));
  write_text(out / "timing.ndjson", timing_ndjson(trained.result.history));
  write_text(out / "config.txt", config_block(config));
  spdlog::info("train: {} episodes, wrote {}", trained.result.history.records.size(), out.string());
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_path) {
  Checkpoint ckpt;
  try {
    ckpt = load_checkpoint(checkpoint_path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const RunConfig config = resolve_config(flags, parse_config(ckpt.config_text));
  try {
    check_compatible(config, ckpt);
  } catch (const CheckpointError& e) {
    throw UsageError(e.what());
  }
  spdlog::info("eval: digest {} seed {} tasks {}", config.digest(), config.seed, config.num_tasks);
  const RunData data = load_run_data(config);
  const FrozenBackbone backbone = FrozenBackbone::create(config.model(), ckpt.backbone_seed);
  const EvalReport report = evaluate_model(config, data, ckpt.params, backbone, worker_count(flags));
  const fs::path out(flags.out);
  write_text(out / "eval.json", eval_json(config, report, ckpt.params.fingerprint()));
  write_text(out / "eval_timing.json", eval_timing_json(config, report));
  write_text(out / "tasks.csv", tasks_csv(report));
  spdlog::info("eval: mean {:.4f} median {:.4f} iqr {:.4f}", report.accuracy.mean, report.accuracy.median,
               report.accuracy.iqr);
  return 0;
}

int cmd_ablate(const CommonFlags& flags) {
  const RunConfig config = resolve_config(flags);
  spdlog::info("ablate: digest {} seed {}", config.digest(), config.seed);
  const RunData data = load_run_data(config);
  const auto rows = run_ablation(config, data, worker_count(flags));
  const fs::path out(flags.out);
  write_text(out / "ablation.json", ablation_json(config, rows));
  write_text(out / "ablation.csv", ablation_csv(rows));
  for (const auto& r : rows) spdlog::info("{:8} {:14} {:.4f}", r.group, r.cell, r.accuracy.mean);
  return 0;
}

int cmd_gen_data(const CommonFlags& flags) {
  const RunConfig config = resolve_config(flags);
  if (config.data_source != "synthetic") throw ConfigError("data_source", "gen-data needs data_source = synthetic");
  const RunData data = load_run_data(config);
  const fs::path out(flags.out);
  fs::create_directories(out);
  save_feature_file(data.source, out / "source.e2fv");
  save_feature_file(data.target, out / "target.e2fv");
  nlohmann::ordered_json manifest{{"config_digest", config.digest()},
                                  {"seed", config.seed},
                                  {"dim", data.source.raw_dim()},
                                  {"source_rows", data.source.size()},
                                  {"target_rows", data.target.size()},
                                  {"num_classes", config.num_classes}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value config file");
  cmd->add_option("--set", flags.sets, "override, key=value (repeatable)");
  cmd->add_option("--seed", flags.seed, "master seed");
  cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
  cmd->add_option("--workers", flags.workers, "evaluation threads (default: all cores)");
  cmd->add_option("--num-tasks", flags.num_tasks, "evaluation tasks");
  cmd->add_flag("--train-cls-token", flags.train_cls_token, "make the classification token trainable");
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("e2mpl"));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  CLI::App app{"Meta-prompt learning for few-shot domain adaptation"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string checkpoint;
  auto* train = app.add_subcommand("train", "meta-train and write a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on test tasks");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  auto* gen = app.add_subcommand("gen-data", "write the synthetic pools as feature files");
  for (auto* cmd : {train, eval, ablate, gen}) add_common(cmd, flags);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(flags);
    if (*eval) return cmd_eval(flags, checkpoint);
    if (*ablate) return cmd_ablate(flags);
    return cmd_gen_data(flags);
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kExitConfig;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
}
