#include "e2mpl/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace e2mpl {

namespace {

using Clock = std::chrono::steady_clock;

double millis_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::vector<Matrix*> tensors(PromptParams& p) {
  std::vector<Matrix*> out;
  p.for_each([&out](const char*, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> tensors(const PromptParams& p) {
  std::vector<const Matrix*> out;
  p.for_each([&out](const char*, const Matrix& m) { out.push_back(&m); });
  return out;
}

}  // namespace

AdamState AdamState::init(const PromptParams& like, const AdamOptions& options) {
  AdamState s;
  s.m = like.zeros_like();
  s.v = like.zeros_like();
  s.options = options;
  return s;
}

bool adam_step(PromptParams& theta, const PromptParams& grads, AdamState& state) {
  auto th = tensors(theta);
  const auto gs = tensors(grads);
  auto ms = tensors(state.m);
  auto vs = tensors(state.v);
  if (gs.size() != th.size() || ms.size() != th.size() || vs.size() != th.size()) {
    throw TrainingError("adam: parameter bundles differ");
  }
  for (std::size_t i = 0; i < th.size(); ++i) {
    if (gs[i]->rows() != th[i]->rows() || gs[i]->cols() != th[i]->cols() || ms[i]->rows() != th[i]->rows() ||
        ms[i]->cols() != th[i]->cols()) {
      throw TrainingError("adam: gradient shape does not match parameters");
    }
    if (!gs[i]->allFinite()) return false;
  }

  const AdamOptions& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < th.size(); ++i) {
    Matrix& m = *ms[i];
    Matrix& v = *vs[i];
    const Matrix& g = *gs[i];
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);
    th[i]->array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
  }
  return true;
}

TrainResult meta_train(const PromptParams& start, const FrozenBackbone& backbone, const PromptNetConfig& config,
                       const TrainData& data, const TrainOptions& options, std::uint64_t seed,
                       const AdamState* resume) {
  if (data.source == nullptr || data.target == nullptr) throw TrainingError("meta_train: missing pools");
  if (data.train_classes.empty()) throw TrainingError("meta_train: empty training split");
  if (options.epochs < 0 || options.episodes_per_epoch < 0) {
    throw TrainingError("meta_train: episode counts must be >= 0");
  }

  TrainResult out;
  out.params = start;
  out.adam = resume ? *resume : AdamState::init(start, options.adam);
  out.history.seed = seed;

  Rng sampler = make_rng(seed, "train.sampler");
  int skips = 0;
  double best_val = -1.0;
  int stale = 0;
  std::int64_t episode = 0;
  const std::int64_t budget = static_cast<std::int64_t>(options.epochs) * options.episodes_per_epoch;
  out.history.records.reserve(static_cast<std::size_t>(budget));

  for (; episode < budget; ++episode) {
    const auto t0 = Clock::now();
    const Episode ep = sample_episode(*data.source, *data.target, data.train_classes, options.spec, sampler);

    EpisodeRecord rec;
    rec.episode = episode;
    bool ok = false;
    try {
      const OuterGradient g = outer_gradient(ep, out.params, backbone, config, options.objective);
      rec.losses = g.losses;
      ok = adam_step(out.params, g.grads, out.adam);
    } catch (const ObjectiveError& e) {
      spdlog::warn("episode {}: {}", episode, e.what());
    } catch (const SolverError& e) {
      spdlog::warn("episode {}: {}", episode, e.what());
    } catch (const NumericsError& e) {
      spdlog::warn("episode {}: {}", episode, e.what());
    }
    if (ok) {
      skips = 0;
    } else {
      rec.skipped = true;
      spdlog::warn("episode {} skipped: non-finite loss or gradient", episode);
      if (++skips > options.max_consecutive_skips) {
        throw TrainingError("meta_train: " + std::to_string(skips) +
                            " consecutive non-finite episodes, last at episode " + std::to_string(episode));
      }
    }
    rec.millis = millis_since(t0);
    out.history.records.push_back(rec);

    const EarlyStopOptions& es = options.early_stop;
    if (es.enabled && es.validate_every > 0 && (episode + 1) % es.validate_every == 0) {
      if (data.val_classes.empty()) throw TrainingError("meta_train: early stopping needs validation classes");
      const auto report = evaluate_suite(out.params, backbone, config, *data.source, *data.target,
                                         data.val_classes, es.eval, derive_seed(seed, "train.val"));
      spdlog::info("episode {}: validation accuracy {:.4f}", episode + 1, report.accuracy.mean);
      if (report.accuracy.mean > best_val) {
        best_val = report.accuracy.mean;
        stale = 0;
      } else if (++stale >= es.patience) {
        out.history.stopped_early = true;
        break;
      }
    }
  }
  return out;
}

TaskResult adapt_and_test(const PromptParams& params, const FrozenBackbone& backbone, const PromptNetConfig& config,
                          const Episode& task, const ObjectiveOptions& options) {
  const Eigen::Index ns = task.support_src.rows();
  const Eigen::Index nt = task.query_tgt.rows();
  if (ns < 1 || nt < 1) throw TrainingError("adapt_and_test: empty support or target query");
  if (static_cast<Eigen::Index>(task.query_tgt_truth.size()) != nt) {
    throw TrainingError("adapt_and_test: task carries no target labels for scoring");
  }
  if (task.support_src.cols() != config.raw_dim) {
    throw TrainingError("adapt_and_test: task raw_dim " + std::to_string(task.support_src.cols()) +
                        " does not match config raw_dim " + std::to_string(config.raw_dim));
  }

  TaskResult out;
  const numerics::SolveCounter solves;
  const auto t0 = Clock::now();

  ad::Tape tape;
  const ParamVars vars = bind(tape, params, false);
  Matrix raw(ns + nt, task.support_src.cols());
  raw << task.support_src, task.query_tgt;
  ad::Var z = embed(tape, raw, vars, backbone, config);
  ad::Var z_ss = ad::slice_rows(z, 0, ns);
  ad::Var z_tq = ad::slice_rows(z, ns, nt);

  const int way = std::max(task.way_count, 1);
  const Matrix y = numerics::one_hot(task.support_labels, way);
  ad::Var theta_w = solvers::ridge_classifier(z_ss, y, tape.constant(Matrix::Constant(1, 1, params.gamma_w())));
  ad::Var z_tp = z_tq;
  if (!options.disable_adapter) {
    const auto norm = solvers::normalize_log_similarity(solvers::log_similarity(z_tq, z_ss), options.sinkhorn);
    z_tp = ad::matmul(z_tq, solvers::domain_adapter(z_tq, z_ss, norm.a,
                                                    tape.constant(Matrix::Constant(1, 1, params.gamma_p()))));
  }
  const auto pred = numerics::argmax_rows(ad::matmul(z_tp, theta_w).value());
  out.adapt_millis = millis_since(t0);

  for (Eigen::Index i = 0; i < nt; ++i) {
    if (pred[static_cast<std::size_t>(i)] == task.query_tgt_truth[static_cast<std::size_t>(i)]) ++out.correct;
  }
  out.total = static_cast<int>(nt);
  out.accuracy = static_cast<double>(out.correct) / static_cast<double>(out.total);
  out.solve_count = solves.count();
  return out;
}

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  const double pos = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

AccuracyStats summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  AccuracyStats s;
  double sum = 0.0;
  for (const double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (const double v : values) ss += (v - s.mean) * (v - s.mean);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) {
    s.mean = *lo;
    ss = 0.0;
  }
  s.variance = ss / static_cast<double>(values.size());
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  s.median = quantile_sorted(sorted, 0.5);
  s.q1 = quantile_sorted(sorted, 0.25);
  s.q3 = quantile_sorted(sorted, 0.75);
  s.iqr = s.q3 - s.q1;
  return s;
}

EvalReport evaluate_suite(const PromptParams& params, const FrozenBackbone& backbone, const PromptNetConfig& config,
                          const FeaturePool& source, const FeaturePool& target,
                          std::span<const std::int64_t> classes, const EvalOptions& options, std::uint64_t seed) {
  if (options.num_tasks < 1) throw TrainingError("evaluate_suite: num_tasks must be >= 1");
  EpisodeSpec spec = options.spec;
  spec.target_sampling = TargetSampling::EpisodeClasses;

  EvalReport report;
  report.tasks.resize(static_cast<std::size_t>(options.num_tasks));
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (int i = next++; i < options.num_tasks; i = next++) {
      try {
        Rng rng = make_rng(seed, "eval.task", static_cast<std::uint64_t>(i));
        const Episode task = sample_episode(source, target, classes, spec, rng);
        TaskResult r = adapt_and_test(params, backbone, config, task, options.objective);
        r.task_id = i;
        report.tasks[static_cast<std::size_t>(i)] = r;
      } catch (...) {
        const std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = options.num_tasks;
      }
    }
  };

  const int workers = std::clamp(options.workers, 1, options.num_tasks);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<double> acc;
  acc.reserve(report.tasks.size());
  double total_ms = 0.0;
  for (const auto& t : report.tasks) {
    acc.push_back(t.accuracy);
    total_ms += t.adapt_millis;
    report.max_adapt_millis = std::max(report.max_adapt_millis, t.adapt_millis);
  }
  report.accuracy = summarize(acc);
  report.mean_adapt_millis = total_ms / static_cast<double>(report.tasks.size());
  return report;
}

}  // namespace e2mpl
