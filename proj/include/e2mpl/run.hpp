#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "e2mpl/config.hpp"
#include "e2mpl/trainer.hpp"

namespace e2mpl {

// Seeds of the named streams every run draws from.
struct RunSeeds {
  std::uint64_t backbone = 0;
  std::uint64_t init = 0;
  std::uint64_t eval = 0;

  static RunSeeds from(std::uint64_t master);
};

struct TrainedModel {
  PromptNetConfig model;
  FrozenBackbone backbone;
  PromptParams initial;
  TrainResult result;
};

TrainedModel train_model(const RunConfig& config, const RunData& data);

EvalReport evaluate_model(const RunConfig& config, const RunData& data, const PromptParams& params,
                          const FrozenBackbone& backbone, int workers);

Checkpoint make_checkpoint(const RunConfig& config, const TrainedModel& trained);

// A checkpoint is only usable with a config whose model dimensions match it.
void check_compatible(const RunConfig& config, const Checkpoint& ckpt);

// ---------------------------------------------------------------- reports

// First line carries the digest and seed, then one record per episode.
std::string history_ndjson(const TrainHistory& history);
// Wall-clock per episode, kept apart so the history stays reproducible.
std::string timing_ndjson(const TrainHistory& history);

std::string eval_json(const RunConfig& config, const EvalReport& report, const std::string& params_fingerprint);
std::string eval_timing_json(const RunConfig& config, const EvalReport& report);
std::string tasks_csv(const EvalReport& report);

struct AblationRow {
  std::string group;  // prompts | losses | adapter
  std::string cell;
  bool domain_prompts = true;
  bool task_prompts = true;
  bool use_ld = true;
  bool use_lf = true;
  bool adapter = true;
  std::string config_digest;
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 0;
  AccuracyStats accuracy;
};

// Trains and evaluates the 2x2 prompt grid, the three loss cells and the
// adapter knockout. Cells with identical configs are trained once.
std::vector<AblationRow> run_ablation(const RunConfig& base, const RunData& data, int workers);

std::string ablation_json(const RunConfig& base, const std::vector<AblationRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace e2mpl
