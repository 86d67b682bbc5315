#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "e2mpl/autodiff.hpp"
#include "e2mpl/numerics.hpp"

namespace e2mpl {

struct PromptNetConfig {
  int raw_dim = 64;
  int token_dim = 768;
  int n_dsp = 4;  // domain-shared prompt tokens
  int n_tsp = 2;  // task-specific prompt tokens per input
  int n_img = 4;  // lifted image tokens per input
  int backbone_hidden = 512;
  int backbone_out = 512;
  int head_out = 128;

  double gamma_w_init = 1.0;
  double gamma_p_init = 1e3;
  double lambda_s_init = 1.0;

  bool train_cls_token = false;
  bool use_domain_prompts = true;
  bool use_task_prompts = true;

  int token_count() const { return 1 + n_dsp + n_tsp + n_img; }
  void validate() const;
};

// Similarity threshold range for pseudo-labeling.
inline constexpr double kTauLow = 0.65;
inline constexpr double kTauSpan = 0.15;

// The trainable bundle. Instantiated with Matrix for values and gradients,
// and with ad::Var when bound to a tape.
template <typename T>
struct BasicPromptParams {
  T prompts;  // domain-shared tokens, n_dsp x token_dim
  T dsp_w1, dsp_b1, dsp_w2, dsp_b2;  // prompt embedding MLP
  T tsp_w1, tsp_b1, tsp_w2, tsp_b2;  // task-prompt projection MLP
  T head_w, head_b;
  T cls_token;  // 1 x token_dim when trainable, else 0 x 0
  T rho_gamma_w, rho_gamma_p, rho_lambda_s, rho_tau;  // 1x1 each

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }

  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f("prompts", self.prompts);
    f("dsp_w1", self.dsp_w1);
    f("dsp_b1", self.dsp_b1);
    f("dsp_w2", self.dsp_w2);
    f("dsp_b2", self.dsp_b2);
    f("tsp_w1", self.tsp_w1);
    f("tsp_b1", self.tsp_b1);
    f("tsp_w2", self.tsp_w2);
    f("tsp_b2", self.tsp_b2);
    f("head_w", self.head_w);
    f("head_b", self.head_b);
    f("cls_token", self.cls_token);
    f("rho_gamma_w", self.rho_gamma_w);
    f("rho_gamma_p", self.rho_gamma_p);
    f("rho_lambda_s", self.rho_lambda_s);
    f("rho_tau", self.rho_tau);
  }
};

struct PromptParams : BasicPromptParams<Matrix> {
  double gamma_w() const { return numerics::softplus(rho_gamma_w(0, 0)); }
  double gamma_p() const { return numerics::softplus(rho_gamma_p(0, 0)); }
  double lambda_s() const { return numerics::softplus(rho_lambda_s(0, 0)); }
  double tau() const { return kTauLow + kTauSpan * numerics::sigmoid(rho_tau(0, 0)); }

  PromptParams zeros_like() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  std::string fingerprint() const;
};

using ParamVars = BasicPromptParams<ad::Var>;

// Fixed-weight stand-in for the pretrained encoder and prompt network. Every
// weight is a deterministic function of (config, seed); nothing here is ever
// handed to an optimizer.
struct FrozenBackbone {
  std::uint64_t seed = 0;
  Matrix cls_token;           // 1 x token_dim
  Matrix lift_w, lift_b;      // raw_dim -> n_img*token_dim
  Matrix prompt_w1, prompt_b1;  // raw_dim -> token_dim
  Matrix prompt_w2, prompt_b2;  // token_dim -> n_tsp*token_dim
  Matrix enc_w1, enc_b1;      // token_count*token_dim -> backbone_hidden
  Matrix enc_w2, enc_b2;      // backbone_hidden -> backbone_out

  static FrozenBackbone create(const PromptNetConfig& config, std::uint64_t seed);
  std::string fingerprint() const;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

PromptParams init_params(const PromptNetConfig& config, std::uint64_t seed);

// Per-input prompt block, one row per input: [b x n_tsp*token_dim], token-major.
Matrix generate_task_prompts(const Matrix& x_raw, const FrozenBackbone& backbone,
                             const PromptNetConfig& config);

// Puts every trainable tensor on the tape; as variables when `trainable`.
ParamVars bind(ad::Tape& tape, const PromptParams& params, bool trainable);

ad::Var embed(ad::Tape& tape, const Matrix& x_raw, const ParamVars& params,
              const FrozenBackbone& backbone, const PromptNetConfig& config);

Matrix embed(const Matrix& x_raw, const PromptParams& params, const FrozenBackbone& backbone,
             const PromptNetConfig& config);

// ---------------------------------------------------------------- checkpoint

inline constexpr char kCheckpointMagic[4] = {'E', '2', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_digest;
  std::string config_text;
  std::uint64_t backbone_seed = 0;
  PromptParams params;
  // Optimizer state for resuming; absent in evaluation-only checkpoints.
  std::optional<PromptParams> adam_m;
  std::optional<PromptParams> adam_v;
  std::int64_t adam_step = 0;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace e2mpl
