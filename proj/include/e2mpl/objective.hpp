#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "e2mpl/autodiff.hpp"
#include "e2mpl/episodes.hpp"
#include "e2mpl/promptnet.hpp"
#include "e2mpl/solvers.hpp"

namespace e2mpl {

struct LossBreakdown {
  double l_c = 0.0;
  double l_d = 0.0;
  double l_f = 0.0;
  double total = 0.0;
  double lambda_d = 0.0;
  double lambda_f = 0.0;
};

struct PseudoLabelPair {
  int target = 0;   // row in the target query
  int support = 0;  // row in the source support
  double similarity = 0.0;
};

struct PseudoLabelAssignment {
  std::vector<PseudoLabelPair> pairs;
  double tau = 0.0;
};

struct ObjectiveOptions {
  double lambda_d = 0.01;
  double lambda_f = 0.01;
  bool disable_adapter = false;
  bool disable_ld = false;
  bool disable_lf = false;
  // Weight every target sample by sigmoid((similarity - tau) / temperature)
  // instead of hard thresholding; gives tau a gradient.
  bool soft_pseudo_labels = false;
  double soft_temperature = 0.05;
  // Scatter pool uses adapter-projected target features (else raw embeddings).
  bool lf_after_projection = true;
  // Scatter over unit-norm rows. Raw traces are unbounded below as the
  // features grow, so S_w - lambda_s S_b can be driven down by scale alone.
  bool unit_norm_scatter = true;
  // Divide both traces by the pooled weight, so the loss does not reward
  // admitting more pseudo-labeled samples.
  bool mean_scatter = true;
  SinkhornOptions sinkhorn;

  double effective_lambda_d() const { return disable_ld ? 0.0 : lambda_d; }
  double effective_lambda_f() const { return disable_lf ? 0.0 : lambda_f; }
};

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Discrete choices made during a forward pass. Replaying a plan evaluates the
// same smooth branch, which is what finite-difference checks compare against.
struct EpisodePlan {
  int sinkhorn_iters = 0;
  PseudoLabelAssignment assignment;
  // Most similar support row per target row (soft pseudo-labels only).
  std::vector<int> best_support;
};

namespace objective {

ad::Var classification_loss(ad::Var logits, std::span<const std::int64_t> labels);
ad::Var entropy_loss(ad::Var logits);

struct Discrimination {
  ad::Var loss;
  PseudoLabelAssignment assignment;
  std::vector<int> best_support;
};

// S_w - lambda_s * S_b (scatter traces) over labeled source queries plus
// target rows pseudo-labeled from their most similar support row. With
// `replay`, the recorded matches are reused instead of thresholding.
Discrimination discrimination_loss(ad::Var z_src_que, std::span<const std::int64_t> que_labels,
                                   ad::Var z_tgt, ad::Var z_src_sup,
                                   std::span<const std::int64_t> sup_labels, ad::Var tau,
                                   ad::Var lambda_s, const ObjectiveOptions& options,
                                   const EpisodePlan* replay = nullptr);

// Weighted scatter traces of rows of `x` grouped by `labels`.
struct Scatter {
  ad::Var within;
  ad::Var between;
};
Scatter scatter(ad::Var x, std::span<const std::int64_t> labels, ad::Var weights);

}  // namespace objective

// Plain-value conveniences over the tape versions.
double classification_loss(const Matrix& logits, std::span<const std::int64_t> labels);
double entropy_loss(const Matrix& logits);

struct DiscriminationResult {
  double loss = 0.0;
  PseudoLabelAssignment assignment;
};
DiscriminationResult discrimination_loss(const Matrix& z_src_que, std::span<const std::int64_t> que_labels,
                                         const Matrix& z_tgt, const Matrix& z_src_sup,
                                         std::span<const std::int64_t> sup_labels, double tau,
                                         double lambda_s, const ObjectiveOptions& options = {});

struct OuterLossInputs {
  Matrix z_src_sup;
  Labels sup_labels;
  Matrix z_src_que;
  Labels que_labels;
  Matrix z_tgt_que;
  ClassifierSolution classifier;
  std::optional<AdapterSolution> adapter;  // absent = identity projection
  double tau = 0.725;
  double lambda_s = 1.0;
};

LossBreakdown outer_loss(const OuterLossInputs& in, const ObjectiveOptions& options);

// Forward pass of one meta-training episode on `tape`: embed, both inner
// solves, predictions and the weighted loss.
struct EpisodeForward {
  ad::Var total;
  LossBreakdown losses;
  EpisodePlan plan;
};

EpisodeForward episode_forward(ad::Tape& tape, const Episode& episode, const ParamVars& params,
                               const FrozenBackbone& backbone, const PromptNetConfig& config,
                               const ObjectiveOptions& options, const EpisodePlan* replay = nullptr);

struct OuterGradient {
  LossBreakdown losses;
  PromptParams grads;
  EpisodePlan plan;
};

// Reverse-mode gradient of `loss_scale * total` with respect to every
// trainable tensor. Throws ObjectiveError on a non-finite loss or gradient.
OuterGradient outer_gradient(const Episode& episode, const PromptParams& params,
                             const FrozenBackbone& backbone, const PromptNetConfig& config,
                             const ObjectiveOptions& options, double loss_scale = 1.0);

// Loss only; with `replay` the discrete choices are pinned.
LossBreakdown episode_loss(const Episode& episode, const PromptParams& params,
                           const FrozenBackbone& backbone, const PromptNetConfig& config,
                           const ObjectiveOptions& options, const EpisodePlan* replay = nullptr);

}  // namespace e2mpl
