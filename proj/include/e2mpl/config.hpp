#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "e2mpl/episodes.hpp"
#include "e2mpl/promptnet.hpp"
#include "e2mpl/trainer.hpp"

namespace e2mpl {

// Raised for unreadable, malformed or invalid configuration. `key` names the
// offending entry when there is one.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  std::uint64_t seed = 0;

  // data
  std::string data_source = "synthetic";  // synthetic | files
  std::string source_path;
  std::string target_path;
  int num_classes = 28;
  int per_class = 40;
  double class_separation = 4.0;
  double within_sigma = 0.5;
  int signal_dims = 16;
  double nuisance_scale = 1.0;
  int nuisance_dims = 48;
  double shared_offset = 0.0;
  double rotation_angle = 0.3;
  std::uint64_t rotation_seed = 1;
  double translation = 4.0;
  double target_noise = 0.1;
  int train_classes = 20;
  int val_classes = 0;
  int test_classes = 8;
  // Permute the target pool's labels (chance-level control).
  bool shuffle_labels = false;

  // model
  int raw_dim = 64;
  int token_dim = 64;
  int n_dsp = 4;
  int n_tsp = 2;
  int n_img = 4;
  int backbone_hidden = 32;
  int backbone_out = 32;
  int head_out = 32;
  double gamma_w_init = 1.0;
  double gamma_p_init = 1e3;
  double lambda_s_init = 1.0;
  bool train_cls_token = false;

  // episodes
  int way_count = 5;
  int shot_count = 1;
  int query_count = 15;

  // training
  int epochs = 1;
  int episodes_per_epoch = 500;
  double learning_rate = 0.005;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_consecutive_skips = 10;
  bool early_stop = false;
  int early_stop_patience = 3;
  int validate_every = 100;
  int val_tasks = 50;

  // objective
  double lambda_d = 0.01;
  double lambda_f = 0.01;
  bool soft_pseudo_labels = false;
  double soft_temperature = 0.05;
  bool lf_after_projection = true;
  int sinkhorn_max_iters = 100;
  double sinkhorn_tol = 1e-6;

  // ablation switches
  bool disable_prompts = false;
  bool disable_domain_prompts = false;
  bool disable_task_prompts = false;
  bool disable_adapter = false;
  bool disable_lf = false;
  bool disable_ld = false;

  // evaluation
  int num_tasks = 200;

  // Applies one `key = value` assignment. Throws ConfigError on an unknown
  // key or an unparsable value.
  void set(std::string_view key, std::string_view value);
  void validate() const;

  // Every key in sorted order, one `key = value` per line.
  std::string canonical_text() const;
  std::string digest() const;

  PromptNetConfig model() const;
  ObjectiveOptions objective() const;
  TrainOptions training() const;
  EvalOptions evaluation() const;
  SyntheticSpec synthetic() const;

  static const std::vector<std::string>& keys();
};

// Parses `key = value` lines; `#` starts a comment, string values may be quoted.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

// Applies `key=value` overrides in order.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

struct RunData {
  FeaturePool source;
  FeaturePool target;
  ClassSplit split;
};

// Builds or loads both pools and splits the source classes.
RunData load_run_data(const RunConfig& config);

}  // namespace e2mpl
