#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "e2mpl/episodes.hpp"
#include "e2mpl/objective.hpp"
#include "e2mpl/promptnet.hpp"

namespace e2mpl {

struct AdamOptions {
  double lr = 0.005;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  PromptParams m;
  PromptParams v;
  std::int64_t step = 0;
  AdamOptions options;

  static AdamState init(const PromptParams& like, const AdamOptions& options = {});
};

// One bias-corrected Adam update. Returns false, leaving `theta` and `state`
// untouched, when any gradient entry is non-finite.
bool adam_step(PromptParams& theta, const PromptParams& grads, AdamState& state);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeRecord {
  std::int64_t episode = 0;
  LossBreakdown losses;
  double millis = 0.0;
  bool skipped = false;
};

struct TrainHistory {
  std::vector<EpisodeRecord> records;
  std::uint64_t seed = 0;
  std::string config_digest;
  bool stopped_early = false;
};

struct EvalOptions {
  int num_tasks = 200;
  EpisodeSpec spec{5, 1, 15, TargetSampling::EpisodeClasses};
  ObjectiveOptions objective;
  int workers = 1;
};

struct EarlyStopOptions {
  bool enabled = false;
  int patience = 3;
  int validate_every = 100;
  EvalOptions eval;
};

struct TrainOptions {
  int epochs = 1;
  int episodes_per_epoch = 500;
  EpisodeSpec spec{5, 1, 15, TargetSampling::SplitClasses};
  ObjectiveOptions objective;
  AdamOptions adam;
  int max_consecutive_skips = 10;
  EarlyStopOptions early_stop;
};

struct TrainData {
  const FeaturePool* source = nullptr;
  const FeaturePool* target = nullptr;
  std::vector<std::int64_t> train_classes;
  std::vector<std::int64_t> val_classes;  // only used by early stopping
};

struct TrainResult {
  PromptParams params;
  AdamState adam;
  TrainHistory history;
};

// Episodic meta-training. `start` is copied; `adam` resumes a previous run
// when given.
TrainResult meta_train(const PromptParams& start, const FrozenBackbone& backbone,
                       const PromptNetConfig& config, const TrainData& data,
                       const TrainOptions& options, std::uint64_t seed,
                       const AdamState* resume = nullptr);

struct TaskResult {
  int task_id = 0;
  double accuracy = 0.0;
  int correct = 0;
  int total = 0;
  double adapt_millis = 0.0;
  std::int64_t solve_count = 0;
  std::int64_t optimizer_steps = 0;
};

// Meta-test on one task: embed, fit classifier and adapter in closed form,
// predict the target queries and score them against the held-out truth.
TaskResult adapt_and_test(const PromptParams& params, const FrozenBackbone& backbone,
                          const PromptNetConfig& config, const Episode& task,
                          const ObjectiveOptions& options);

struct AccuracyStats {
  double mean = 0.0;
  double variance = 0.0;  // population
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
};

// Quantile of sorted data by linear interpolation at position (n-1)p.
double quantile_sorted(std::span<const double> sorted, double p);
AccuracyStats summarize(std::span<const double> values);

struct EvalReport {
  std::vector<TaskResult> tasks;
  AccuracyStats accuracy;
  double mean_adapt_millis = 0.0;
  double max_adapt_millis = 0.0;
};

// Runs `num_tasks` independent tasks drawn from `classes`. Task i uses its own
// sampler stream, so the report does not depend on the worker count.
EvalReport evaluate_suite(const PromptParams& params, const FrozenBackbone& backbone,
                          const PromptNetConfig& config, const FeaturePool& source,
                          const FeaturePool& target, std::span<const std::int64_t> classes,
                          const EvalOptions& options, std::uint64_t seed);

}  // namespace e2mpl
