#pragma once

// Adam, class-balanced mini-batching, stratified repeated cross-validation and
// accuracy reporting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "chebcam/data.hpp"
#include "chebcam/errors.hpp"
#include "chebcam/nn.hpp"
#include "chebcam/random.hpp"
#include "chebcam/spectral.hpp"

namespace chebcam {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 5e-4;
  int batch_size = 200;
  int total_steps = 500;
  int eval_every = 10;
  double lr_decay_factor = 0.5;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvalidInput("train config: learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw InvalidInput("train config: betas must be in (0, 1)");
    if (!(epsilon > 0.0)) throw InvalidInput("train config: epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw InvalidInput("train config: weight decay must be >= 0");
    if (batch_size < 2 || batch_size % 2 != 0) throw InvalidInput("train config: batch size must be even and >= 2");
    if (total_steps < 1) throw InvalidInput("train config: total_steps must be >= 1");
    if (eval_every < 1 || total_steps % eval_every != 0)
      throw InvalidInput("train config: eval_every must divide total_steps");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
      throw InvalidInput("train config: lr decay factor must be in (0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Parameters first_moment;
  Parameters second_moment;
  long step_count = 0;

  AdamState() = default;
  explicit AdamState(const Parameters& like)
      : first_moment(like.zeros_like()), second_moment(like.zeros_like()) {}
};

/// One bias-corrected Adam update. `grads` must already contain the L2 term.
/// Non-finite gradients abort the step before anything is modified.
inline void adam_step(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& config,
                      double learning_rate) {
  bool finite = true;
  for_each_tensor([&](const TensorInfo&, const auto& g) { finite = finite && g.allFinite(); }, grads);
  if (!finite) throw NumericalError("adam_step: non-finite gradient");

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for_each_tensor(
      [&](const TensorInfo&, auto& p, const auto& g, auto& m, auto& v) {
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        p.array() -= learning_rate * (m.array() / correction1) / ((v.array() / correction2).sqrt() + config.epsilon);
      },
      params, grads, state.first_moment, state.second_moment);
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Halves (by `factor`) after two successive strict drops in validation
/// accuracy; the comparison history restarts after each decay.
class LrSchedule {
 public:
  LrSchedule(double initial, double factor) : lr_(initial), factor_(factor) {}

  /// Returns true when this observation triggered a decay.
  bool observe(double accuracy) {
    if (has_previous_ && accuracy < previous_) {
      ++drops_;
    } else {
      drops_ = 0;
    }
    previous_ = accuracy;
    has_previous_ = true;
    if (drops_ >= 2) {
      lr_ *= factor_;
      drops_ = 0;
      has_previous_ = false;
      return true;
    }
    return false;
  }

  double lr() const noexcept { return lr_; }

 private:
  double lr_;
  double factor_;
  double previous_ = 0.0;
  bool has_previous_ = false;
  int drops_ = 0;
};

// ---------------------------------------------------------------------------
// Folds and batches

struct FoldSplit {
  std::vector<int> train_idx;
  std::vector<int> val_idx;
  std::vector<int> test_idx;
};

/// Fold index of every sample: per-class shuffled indices dealt round-robin,
/// each class continuing from the fold where the previous class stopped.
inline std::vector<int> assign_stratified_folds(std::span<const int> labels, int n_folds, std::uint64_t seed) {
  if (n_folds < 3) throw InvalidInput("stratified folds: need at least 3 folds");
  int num_classes = 0;
  for (int l : labels) {
    if (l < 0) throw InvalidInput("stratified folds: negative label");
    num_classes = std::max(num_classes, l + 1);
  }
  Rng rng(seed);
  std::vector<int> fold_of(labels.size(), -1);
  int next_fold = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(static_cast<int>(i));
    if (members.empty()) continue;
    if (static_cast<int>(members.size()) < n_folds)
      throw InvalidInput("stratified folds: class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                         " samples, need at least " + std::to_string(n_folds));
    shuffle(std::span<int>(members), rng);
    for (int idx : members) {
      fold_of[static_cast<std::size_t>(idx)] = next_fold;
      next_fold = (next_fold + 1) % n_folds;
    }
  }
  return fold_of;
}

/// Split f: test = fold f, validation = fold (f+1) mod n, train = the rest.
inline std::vector<FoldSplit> splits_from_assignment(std::span<const int> fold_of, int n_folds) {
  std::vector<FoldSplit> splits(static_cast<std::size_t>(n_folds));
  for (int f = 0; f < n_folds; ++f) {
    auto& split = splits[static_cast<std::size_t>(f)];
    const int val_fold = (f + 1) % n_folds;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      const int idx = static_cast<int>(i);
      if (fold_of[i] == f)
        split.test_idx.push_back(idx);
      else if (fold_of[i] == val_fold)
        split.val_idx.push_back(idx);
      else
        split.train_idx.push_back(idx);
    }
  }
  return splits;
}

inline std::vector<FoldSplit> make_stratified_folds(std::span<const int> labels, int n_folds, std::uint64_t seed) {
  return splits_from_assignment(assign_stratified_folds(labels, n_folds, seed), n_folds);
}

/// Equal per-class draws from per-class queues that reshuffle when exhausted.
class BalancedBatcher {
 public:
  BalancedBatcher(std::span<const int> train_idx, std::span<const int> labels, int num_classes, std::uint64_t seed)
      : rng_(seed), queues_(static_cast<std::size_t>(num_classes)) {
    for (int idx : train_idx) {
      const int label = labels[static_cast<std::size_t>(idx)];
      if (label < 0 || label >= num_classes) throw InvalidInput("balanced batch: label out of range");
      queues_[static_cast<std::size_t>(label)].members.push_back(idx);
    }
    for (std::size_t c = 0; c < queues_.size(); ++c)
      if (queues_[c].members.empty())
        throw InvalidInput("balanced batch: class " + std::to_string(c) + " is absent from the training set");
    for (auto& q : queues_) q.pos = q.members.size();  // shuffle on first draw
  }

  std::vector<int> next(int batch_size) {
    const int classes = static_cast<int>(queues_.size());
    if (batch_size < classes || batch_size % classes != 0)
      throw InvalidInput("balanced batch: batch size must be a positive multiple of the class count");
    std::vector<int> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (auto& q : queues_)
      for (int i = 0; i < batch_size / classes; ++i) {
        if (q.pos == q.members.size()) {
          shuffle(std::span<int>(q.members), rng_);
          q.pos = 0;
        }
        batch.push_back(q.members[q.pos++]);
      }
    return batch;
  }

 private:
  struct Queue {
    std::vector<int> members;
    std::size_t pos = 0;
  };
  Rng rng_;
  std::vector<Queue> queues_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<long>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

inline int argmax_row(const MatrixXd& m, Index row) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = c;
  return static_cast<int>(best);
}

inline EvalResult evaluate_logits(const MatrixXd& logits, std::span<const int> labels, int num_classes) {
  if (labels.empty()) throw InvalidInput("evaluate: empty subject list");
  EvalResult r;
  r.confusion.assign(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes), 0));
  long correct = 0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const int pred = argmax_row(logits, static_cast<Index>(s));
    r.predictions.push_back(pred);
    ++r.confusion[static_cast<std::size_t>(labels[s])][static_cast<std::size_t>(pred)];
    if (pred == labels[s]) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return r;
}

/// Eval-mode predictions (argmax of logits) over the given subjects.
inline EvalResult evaluate(const Model& model, const ScaledLaplacian& ltilde, const Dataset& ds,
                           std::span<const int> indices) {
  if (indices.empty()) throw InvalidInput("evaluate: empty subject list");
  std::vector<const MatrixXd*> samples;
  std::vector<int> labels;
  for (int i : indices) {
    samples.push_back(&ds.subjects[static_cast<std::size_t>(i)].features);
    labels.push_back(ds.subjects[static_cast<std::size_t>(i)].label);
  }
  return evaluate_logits(predict_logits(model, ltilde, samples), labels, model.config.num_classes);
}

// ---------------------------------------------------------------------------
// Training

struct EvalRecord {
  int step = 0;
  double val_accuracy = 0.0;
  double learning_rate = 0.0;  // in effect during the steps leading up to this evaluation
};

struct LrEvent {
  int step = 0;
  double old_lr = 0.0;
  double new_lr = 0.0;
};

struct FoldReport {
  double test_accuracy = 0.0;
  std::vector<EvalRecord> evaluations;
  std::vector<LrEvent> lr_events;
  double final_lr = 0.0;
  double final_loss = 0.0;
};

struct TrainedFold {
  Model model;
  FoldReport report;
};

struct LossAndGrads {
  double loss = 0.0;
  Parameters grads;
};

/// Cross-entropy plus L2 penalty and the gradient of their sum.
inline LossAndGrads loss_and_gradients(const Model& model, const ScaledLaplacian& ltilde, const NodeTensor& batch,
                                       std::span<const int> labels, double weight_decay, std::uint64_t dropout_seed) {
  const ForwardTrace trace = model_forward(model, ltilde, batch, Mode::Train, dropout_seed);
  const LossResult ce = softmax_cross_entropy(trace.logits, labels);
  const PenaltyResult penalty = l2_penalty(model.params, weight_decay);
  LossAndGrads out{ce.loss + penalty.loss, model_backward(model, ltilde, trace, ce.grad_logits)};
  for_each_tensor([](const TensorInfo&, auto& g, const auto& pg) { g += pg; }, out.grads, penalty.grad);
  return out;
}

/// Trains one fold. Seeds derive from (config.seed, run, fold). The model kept
/// is the one after the last step; test accuracy is measured once at the end.
inline TrainedFold train_model(const Dataset& ds, const ScaledLaplacian& ltilde, const FoldSplit& split,
                               const ModelConfig& model_config, const TrainConfig& config, int run = 0, int fold = 0) {
  config.validate();
  model_config.validate();
  if (model_config.input_channels != ds.feature_dim())
    throw InvalidInput("train: model expects " + std::to_string(model_config.input_channels) +
                       " input channels, dataset has " + std::to_string(ds.feature_dim()));
  if (split.train_idx.empty() || split.val_idx.empty() || split.test_idx.empty())
    throw InvalidInput("train: every partition of the split must be non-empty");
  const auto r = static_cast<std::uint64_t>(run);
  const auto f = static_cast<std::uint64_t>(fold);
  const std::vector<int> labels = ds.labels();

  TrainedFold out{init_model(model_config, derive_seed(config.seed, r, f, SeedPurpose::Init)), {}};
  Model& model = out.model;
  AdamState state(model.params);
  BalancedBatcher batcher(split.train_idx, labels, model_config.num_classes,
                          derive_seed(config.seed, r, f, SeedPurpose::Batches));
  Rng dropout_stream(derive_seed(config.seed, r, f, SeedPurpose::Dropout));
  LrSchedule schedule(config.learning_rate, config.lr_decay_factor);

  std::vector<const MatrixXd*> samples;
  std::vector<int> batch_labels;
  for (int step = 1; step <= config.total_steps; ++step) {
    const auto idx = batcher.next(config.batch_size);
    samples.clear();
    batch_labels.clear();
    for (int i : idx) {
      samples.push_back(&ds.subjects[static_cast<std::size_t>(i)].features);
      batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    LossAndGrads lg;
    try {
      lg = loss_and_gradients(model, ltilde, make_batch(samples), batch_labels, config.weight_decay, dropout_stream());
      if (!std::isfinite(lg.loss)) throw NumericalError("non-finite loss");
      adam_step(model.params, lg.grads, state, config, schedule.lr());
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("training diverged: ") + e.what(), step);
    }
    out.report.final_loss = lg.loss;

    if (step % config.eval_every == 0) {
      const double lr_before = schedule.lr();
      const double acc = evaluate(model, ltilde, ds, split.val_idx).accuracy;
      out.report.evaluations.push_back({step, acc, lr_before});
      if (schedule.observe(acc)) out.report.lr_events.push_back({step, lr_before, schedule.lr()});
    }
  }
  out.report.final_lr = schedule.lr();
  out.report.test_accuracy = evaluate(model, ltilde, ds, split.test_idx).accuracy;
  return out;
}

// ---------------------------------------------------------------------------
// Repeated cross-validation

struct CvOptions {
  int n_runs = 10;
  int n_folds = 10;
  bool parallel = false;
  unsigned max_threads = 0;  // 0: hardware concurrency
};

struct RunResult {
  int run = 0;
  std::uint64_t seed = 0;
  std::vector<int> fold_of;
  std::vector<FoldSplit> splits;
  std::vector<TrainedFold> folds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

struct CvResult {
  std::vector<RunResult> runs;
  double grand_mean = 0.0;
  double grand_std = 0.0;
};

class CrossValidationError : public NumericalError {
 public:
  CrossValidationError(int run, int fold, const std::string& what)
      : NumericalError("run " + std::to_string(run) + " fold " + std::to_string(fold) + ": " + what),
        run_(run),
        fold_(fold) {}

  int run() const noexcept { return run_; }
  int fold() const noexcept { return fold_; }

 private:
  int run_;
  int fold_;
};

/// Mean and population standard deviation, summed in the given order.
inline std::pair<double, double> mean_and_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

/// Run r uses seed config.seed + r for its folds and its training streams.
/// Parallel execution fans out (run, fold) tasks; results are stored by slot,
/// so the outcome does not depend on scheduling.
inline CvResult run_cross_validation(const Dataset& ds, const ScaledLaplacian& ltilde, const ModelConfig& model_config,
                                     const TrainConfig& config, const CvOptions& options) {
  if (options.n_runs < 1) throw InvalidInput("cross-validation: need at least one run");
  config.validate();
  model_config.validate();
  const std::vector<int> labels = ds.labels();

  CvResult result;
  result.runs.resize(static_cast<std::size_t>(options.n_runs));
  for (int r = 0; r < options.n_runs; ++r) {
    auto& run = result.runs[static_cast<std::size_t>(r)];
    run.run = r;
    run.seed = config.seed + static_cast<std::uint64_t>(r);
    run.fold_of = assign_stratified_folds(labels, options.n_folds, derive_seed(run.seed, 0, 0, SeedPurpose::Folds));
    run.splits = splits_from_assignment(run.fold_of, options.n_folds);
    run.folds.resize(static_cast<std::size_t>(options.n_folds));
  }

  const std::size_t n_tasks = static_cast<std::size_t>(options.n_runs) * static_cast<std::size_t>(options.n_folds);
  std::vector<std::exception_ptr> errors(n_tasks);
  auto task = [&](std::size_t t) {
    const int r = static_cast<int>(t / static_cast<std::size_t>(options.n_folds));
    const int f = static_cast<int>(t % static_cast<std::size_t>(options.n_folds));
    auto& run = result.runs[static_cast<std::size_t>(r)];
    TrainConfig fold_config = config;
    fold_config.seed = run.seed;
    try {
      run.folds[static_cast<std::size_t>(f)] =
          train_model(ds, ltilde, run.splits[static_cast<std::size_t>(f)], model_config, fold_config, r, f);
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };

  if (options.parallel) {
    unsigned workers = options.max_threads ? options.max_threads : std::max(2u, std::thread::hardware_concurrency());
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n_tasks));
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < n_tasks; t = next++) task(t);
      });
  } else {
    for (std::size_t t = 0; t < n_tasks; ++t) task(t);
  }

  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (!errors[t]) continue;
    const int r = static_cast<int>(t / static_cast<std::size_t>(options.n_folds));
    const int f = static_cast<int>(t % static_cast<std::size_t>(options.n_folds));
    try {
      std::rethrow_exception(errors[t]);
    } catch (const std::exception& e) {
      throw CrossValidationError(r, f, e.what());
    }
  }

  std::vector<double> all;
  for (auto& run : result.runs) {
    std::vector<double> accs;
    for (const auto& fold : run.folds) accs.push_back(fold.report.test_accuracy);
    std::tie(run.mean_accuracy, run.std_accuracy) = mean_and_std(accs);
    all.insert(all.end(), accs.begin(), accs.end());
  }
  std::tie(result.grand_mean, result.grand_std) = mean_and_std(all);
  return result;
}

}  // namespace chebcam
