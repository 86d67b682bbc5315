#include "e2mpl/objective.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace e2mpl {

namespace {

int way_of(std::span<const std::int64_t> labels) {
  std::int64_t top = -1;
  for (const auto l : labels) top = std::max(top, l);
  return static_cast<int>(top + 1);
}

Matrix unit_rows(const Matrix& z) {
  Matrix out = z;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

// Index of the most similar support row for each target row; ties go to the
// lowest support index.
std::vector<int> best_matches(const Matrix& cos) {
  std::vector<int> best(static_cast<std::size_t>(cos.rows()), 0);
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    int b = 0;
    for (Eigen::Index k = 1; k < cos.cols(); ++k) {
      if (cos(i, k) > cos(i, b)) b = static_cast<int>(k);
    }
    best[static_cast<std::size_t>(i)] = b;
  }
  return best;
}

}  // namespace

namespace objective {

ad::Var classification_loss(ad::Var logits, std::span<const std::int64_t> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw ObjectiveError("classification loss: label count does not match logits");
  }
  return ad::cross_entropy(ad::softmax_rows(logits), labels);
}

ad::Var entropy_loss(ad::Var logits) { return ad::entropy_rows(ad::softmax_rows(logits)); }

Scatter scatter(ad::Var x, std::span<const std::int64_t> labels, ad::Var weights) {
  ad::Tape& tape = *x.tape;
  const Eigen::Index p = x.rows();
  if (p < 1) throw ObjectiveError("scatter: empty pool");
  if (static_cast<Eigen::Index>(labels.size()) != p || weights.rows() != p || weights.cols() != 1) {
    throw ObjectiveError("scatter: labels and weights must have one entry per row");
  }
  std::map<std::int64_t, Eigen::Index> column;
  for (const auto l : labels) column.emplace(l, 0);
  Eigen::Index c = 0;
  for (auto& [label, idx] : column) idx = c++;

  Matrix r = Matrix::Zero(p, c);
  for (Eigen::Index i = 0; i < p; ++i) r(i, column.at(labels[static_cast<std::size_t>(i)])) = 1.0;
  ad::Var member = tape.constant(r);
  ad::Var member_t = tape.constant(r.transpose());

  ad::Var wx = ad::scale_rows(x, weights);
  ad::Var class_w = ad::matmul(member_t, weights);  // c x 1
  ad::Var means = ad::scale_rows(ad::matmul(member_t, wx), ad::reciprocal(class_w));
  ad::Var resid = ad::sub(x, ad::matmul(member, means));
  ad::Var within = ad::sum(ad::scale_rows(ad::hadamard(resid, resid), weights));

  ad::Var ones = tape.constant(Matrix::Ones(1, p));
  ad::Var grand = ad::mul_scalar(ad::matmul(ones, wx), ad::reciprocal(ad::sum(weights)));
  ad::Var diff = ad::sub(means, ad::broadcast_rows(grand, c));
  ad::Var between = ad::sum(ad::scale_rows(ad::hadamard(diff, diff), class_w));
  return {within, between};
}

Discrimination discrimination_loss(ad::Var z_src_que, std::span<const std::int64_t> que_labels,
                                   ad::Var z_tgt, ad::Var z_src_sup,
                                   std::span<const std::int64_t> sup_labels, ad::Var tau,
                                   ad::Var lambda_s, const ObjectiveOptions& options,
                                   const EpisodePlan* replay) {
  ad::Tape& tape = *z_src_que.tape;
  if (z_src_que.rows() < 1) throw ObjectiveError("discrimination loss: no labeled source queries");
  if (static_cast<Eigen::Index>(que_labels.size()) != z_src_que.rows() ||
      static_cast<Eigen::Index>(sup_labels.size()) != z_src_sup.rows()) {
    throw ObjectiveError("discrimination loss: label count does not match features");
  }
  if (z_tgt.cols() != z_src_sup.cols() || z_src_que.cols() != z_tgt.cols()) {
    throw ObjectiveError("discrimination loss: feature dimensions differ");
  }

  Discrimination out;
  out.assignment.tau = tau.scalar();
  const Matrix cos = unit_rows(z_tgt.value()) * unit_rows(z_src_sup.value()).transpose();
  const bool have_support = z_src_sup.rows() > 0 && z_tgt.rows() > 0;

  Labels pool_labels(que_labels.begin(), que_labels.end());
  std::vector<int> picked;
  ad::Var weights = tape.constant(Matrix::Ones(z_src_que.rows(), 1));

  if (options.soft_pseudo_labels && have_support) {
    out.best_support = replay ? replay->best_support : best_matches(cos);
    if (out.best_support.size() != static_cast<std::size_t>(z_tgt.rows())) {
      throw ObjectiveError("discrimination loss: replayed plan does not match target rows");
    }
    std::vector<std::pair<int, int>> idx;
    for (int i = 0; i < static_cast<int>(z_tgt.rows()); ++i) {
      const int k = out.best_support[static_cast<std::size_t>(i)];
      idx.emplace_back(i, k);
      picked.push_back(i);
      pool_labels.push_back(sup_labels[static_cast<std::size_t>(k)]);
      if (cos(i, k) > out.assignment.tau) out.assignment.pairs.push_back({i, k, cos(i, k)});
    }
    ad::Var sims = ad::matmul(ad::normalize_rows_safe(z_tgt), ad::transpose(ad::normalize_rows_safe(z_src_sup)));
    ad::Var best = ad::gather_elems(sims, idx);
    ad::Var margin = ad::sub(best, ad::broadcast_rows(tau, z_tgt.rows()));
    ad::Var w_tgt = ad::sigmoid(ad::scale(margin, 1.0 / options.soft_temperature));
    const ad::Var parts[] = {weights, w_tgt};
    weights = ad::vcat(parts);
  } else if (have_support) {
    if (replay) {
      out.assignment.pairs = replay->assignment.pairs;
    } else {
      const auto best = best_matches(cos);
      for (int i = 0; i < static_cast<int>(z_tgt.rows()); ++i) {
        const int k = best[static_cast<std::size_t>(i)];
        if (cos(i, k) > out.assignment.tau) out.assignment.pairs.push_back({i, k, cos(i, k)});
      }
    }
    for (const auto& pair : out.assignment.pairs) {
      picked.push_back(pair.target);
      pool_labels.push_back(sup_labels[static_cast<std::size_t>(pair.support)]);
    }
    weights = tape.constant(Matrix::Ones(static_cast<Eigen::Index>(pool_labels.size()), 1));
  }

  ad::Var src_rows = options.unit_norm_scatter ? ad::normalize_rows_safe(z_src_que) : z_src_que;
  ad::Var pool = src_rows;
  if (!picked.empty()) {
    ad::Var tgt_rows = ad::gather_rows(z_tgt, picked);
    if (options.unit_norm_scatter) tgt_rows = ad::normalize_rows_safe(tgt_rows);
    const ad::Var parts[] = {src_rows, tgt_rows};
    pool = ad::vcat(parts);
  }
  const Scatter s = scatter(pool, pool_labels, weights);
  out.loss = ad::sub(s.within, ad::mul_scalar(s.between, lambda_s));
  if (options.mean_scatter) out.loss = ad::mul_scalar(out.loss, ad::reciprocal(ad::sum(weights)));
  return out;
}

}  // namespace objective

double classification_loss(const Matrix& logits, std::span<const std::int64_t> labels) {
  ad::Tape tape;
  return objective::classification_loss(tape.constant(logits), labels).scalar();
}

double entropy_loss(const Matrix& logits) {
  ad::Tape tape;
  return objective::entropy_loss(tape.constant(logits)).scalar();
}

DiscriminationResult discrimination_loss(const Matrix& z_src_que, std::span<const std::int64_t> que_labels,
                                         const Matrix& z_tgt, const Matrix& z_src_sup,
                                         std::span<const std::int64_t> sup_labels, double tau,
                                         double lambda_s, const ObjectiveOptions& options) {
  if (!(lambda_s >= 0.0)) throw ObjectiveError("discrimination loss: lambda_s must be >= 0");
  ad::Tape tape;
  const auto d = objective::discrimination_loss(
      tape.constant(z_src_que), que_labels, tape.constant(z_tgt), tape.constant(z_src_sup), sup_labels,
      tape.constant(Matrix::Constant(1, 1, tau)), tape.constant(Matrix::Constant(1, 1, lambda_s)), options);
  return {d.loss.scalar(), d.assignment};
}

LossBreakdown outer_loss(const OuterLossInputs& in, const ObjectiveOptions& options) {
  LossBreakdown out;
  out.lambda_d = options.effective_lambda_d();
  out.lambda_f = options.effective_lambda_f();
  out.l_c = classification_loss(predict_source(in.z_src_que, in.classifier), in.que_labels);
  const Matrix projected = in.adapter ? Matrix(in.z_tgt_que * in.adapter->theta) : in.z_tgt_que;
  out.l_d = entropy_loss(projected * in.classifier.theta);
  const Matrix& scatter_tgt = options.lf_after_projection ? projected : in.z_tgt_que;
  out.l_f = discrimination_loss(in.z_src_que, in.que_labels, scatter_tgt, in.z_src_sup, in.sup_labels, in.tau,
                                in.lambda_s, options)
                .loss;
  out.total = out.l_c;
  if (out.lambda_d != 0.0) out.total += out.lambda_d * out.l_d;
  if (out.lambda_f != 0.0) out.total += out.lambda_f * out.l_f;
  return out;
}

EpisodeForward episode_forward(ad::Tape& tape, const Episode& episode, const ParamVars& params,
                               const FrozenBackbone& backbone, const PromptNetConfig& config,
                               const ObjectiveOptions& options, const EpisodePlan* replay) {
  const Eigen::Index ns = episode.support_src.rows();
  const Eigen::Index nq = episode.query_src.rows();
  const Eigen::Index nt = episode.query_tgt.rows();
  if (ns < 1 || nq < 1) throw ObjectiveError("episode: empty support or query set");
  const int way = std::max(episode.way_count, way_of(episode.support_labels));

  Matrix raw(ns + nq + nt, episode.support_src.cols());
  raw << episode.support_src, episode.query_src, episode.query_tgt;
  ad::Var z = embed(tape, raw, params, backbone, config);
  ad::Var z_ss = ad::slice_rows(z, 0, ns);
  ad::Var z_sq = ad::slice_rows(z, ns, nq);
  ad::Var z_tq = ad::slice_rows(z, ns + nq, nt);

  ad::Var gamma_w = ad::softplus(params.rho_gamma_w);
  ad::Var gamma_p = ad::softplus(params.rho_gamma_p);
  ad::Var lambda_s = ad::softplus(params.rho_lambda_s);
  ad::Var tau = ad::affine_scalar(ad::sigmoid(params.rho_tau), kTauSpan, kTauLow);

  EpisodeForward out;
  ad::Var theta_w = solvers::ridge_classifier(z_ss, numerics::one_hot(episode.support_labels, way), gamma_w);
  ad::Var l_c = objective::classification_loss(ad::matmul(z_sq, theta_w), episode.query_labels);

  ad::Var z_tp = z_tq;
  if (!options.disable_adapter && nt > 0) {
    SinkhornOptions sk = options.sinkhorn;
    if (replay) sk.fixed_iters = replay->sinkhorn_iters;
    const auto norm = solvers::normalize_log_similarity(solvers::log_similarity(z_tq, z_ss), sk);
    out.plan.sinkhorn_iters = norm.iters;
    z_tp = ad::matmul(z_tq, solvers::domain_adapter(z_tq, z_ss, norm.a, gamma_p));
  }

  ad::Var total = l_c;
  out.losses.lambda_d = options.effective_lambda_d();
  out.losses.lambda_f = options.effective_lambda_f();
  out.losses.l_c = l_c.scalar();
  if (nt > 0) {
    ad::Var l_d = objective::entropy_loss(ad::matmul(z_tp, theta_w));
    out.losses.l_d = l_d.scalar();
    if (out.losses.lambda_d != 0.0) total = ad::add(total, ad::scale(l_d, out.losses.lambda_d));
  }
  ad::Var scatter_tgt = options.lf_after_projection ? z_tp : z_tq;
  auto disc = objective::discrimination_loss(z_sq, episode.query_labels, scatter_tgt, z_ss, episode.support_labels,
                                             tau, lambda_s, options, replay);
  out.losses.l_f = disc.loss.scalar();
  if (out.losses.lambda_f != 0.0) total = ad::add(total, ad::scale(disc.loss, out.losses.lambda_f));
  out.plan.assignment = std::move(disc.assignment);
  out.plan.best_support = std::move(disc.best_support);

  out.total = total;
  out.losses.total = total.scalar();
  return out;
}

OuterGradient outer_gradient(const Episode& episode, const PromptParams& params, const FrozenBackbone& backbone,
                             const PromptNetConfig& config, const ObjectiveOptions& options, double loss_scale) {
  ad::Tape tape;
  const ParamVars vars = bind(tape, params, true);
  auto fwd = episode_forward(tape, episode, vars, backbone, config, options);
  if (!std::isfinite(fwd.losses.total)) throw ObjectiveError("episode loss is not finite");
  tape.backward(fwd.total, loss_scale);

  OuterGradient out;
  out.losses = fwd.losses;
  out.plan = std::move(fwd.plan);
  std::vector<ad::Var> order;
  vars.for_each([&order](const char*, const ad::Var& v) { order.push_back(v); });
  std::size_t i = 0;
  out.grads = params.zeros_like();
  out.grads.for_each([&](const char* name, Matrix& g) {
    g = tape.grad(order[i++]);
    if (!g.allFinite()) throw ObjectiveError(std::string("non-finite gradient for ") + name);
  });
  return out;
}

LossBreakdown episode_loss(const Episode& episode, const PromptParams& params, const FrozenBackbone& backbone,
                           const PromptNetConfig& config, const ObjectiveOptions& options,
                           const EpisodePlan* replay) {
  ad::Tape tape;
  const ParamVars vars = bind(tape, params, false);
  return episode_forward(tape, episode, vars, backbone, config, options, replay).losses;
}

}  // namespace e2mpl
