#pragma once

// Class activation maps on graphs and their population-level aggregation.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "chebcam/data.hpp"
#include "chebcam/errors.hpp"
#include "chebcam/nn.hpp"
#include "chebcam/spectral.hpp"
#include "chebcam/train.hpp"

namespace chebcam {

/// M_c(v) = sum_i w_i^c f_i(v) for one subject and class.
struct ClassActivationMap {
  std::string subject_id;
  int class_index = 0;
  VectorXd scores;
};

/// d x C matrix of CAM scores from final-layer maps (d x F) and dense weights (F x C).
inline MatrixXd cam_scores(const MatrixXd& last_conv_features, const DenseParams& dense) {
  return last_conv_features * dense.weights;
}

inline ClassActivationMap class_activation_map(const Model& model, const ScaledLaplacian& ltilde,
                                               const Subject& subject, int class_index) {
  if (class_index < 0 || class_index >= model.config.num_classes)
    throw InvalidInput("class_activation_map: class index " + std::to_string(class_index) + " out of range");
  const MatrixXd* sample = &subject.features;
  const auto trace = model_forward(model, ltilde, make_batch(std::span<const MatrixXd* const>(&sample, 1)), Mode::Eval);
  ClassActivationMap cam;
  cam.subject_id = subject.id;
  cam.class_index = class_index;
  cam.scores = trace.last_conv_features.sample(0) * model.params.dense.weights.col(class_index);
  return cam;
}

/// Indices of the k largest scores in descending order; ties go to the lower index.
inline std::vector<int> top_k_nodes(const VectorXd& scores, int k) {
  if (k < 1 || k > scores.size())
    throw InvalidInput("top_k_nodes: k must be in [1, " + std::to_string(scores.size()) + "]");
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    return scores(a) > scores(b) || (scores(a) == scores(b) && a < b);
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

inline std::vector<int> top_k_nodes(const ClassActivationMap& cam, int k) { return top_k_nodes(cam.scores, k); }

/// Min-max scaling to [0, 1]; a constant row maps to zeros.
inline Eigen::RowVectorXd min_max_scale(const Eigen::RowVectorXd& row) {
  const double lo = row.minCoeff();
  const double hi = row.maxCoeff();
  if (!(hi > lo)) return Eigen::RowVectorXd::Zero(row.size());
  return (row.array() - lo) / (hi - lo);
}

/// One run of cross-validation as saliency input: the fold models and the
/// splits they were trained on.
struct RunArtifacts {
  std::vector<Model> fold_models;
  std::vector<FoldSplit> splits;
};

inline RunArtifacts artifacts_from(const RunResult& run) {
  RunArtifacts a;
  a.splits = run.splits;
  for (const auto& fold : run.folds) a.fold_models.push_back(fold.model);
  return a;
}

struct SubjectCam {
  int run = 0;
  int subject = 0;
  int predicted = 0;
  MatrixXd scores;  // C x d
};

struct PopulationSaliency {
  int k = 3;
  MatrixXd mean_activation;         // C x d, each row min-max scaled
  MatrixXd mean_activation_raw;     // C x d, before scaling
  std::vector<long> topk_counts;    // per node
  long n_subjects = 0;
  long n_runs = 0;
  std::vector<SubjectCam> per_subject;  // filled only on request
};

/// Every subject is attributed under the model of the fold where it was tested.
/// Activation sums cover both classes; top-k counts use the predicted class.
inline PopulationSaliency population_saliency(std::span<const RunArtifacts> runs, const Dataset& ds,
                                              const ScaledLaplacian& ltilde, int k, bool keep_per_subject = false) {
  const Index d = ds.num_nodes();
  const int n_classes = ds.num_classes();
  const auto n = static_cast<Index>(ds.subjects.size());
  if (runs.empty()) throw InvalidInput("population_saliency: no runs");
  if (k < 1 || k > d) throw InvalidInput("population_saliency: k must be in [1, " + std::to_string(d) + "]");

  PopulationSaliency out;
  out.k = k;
  out.n_subjects = n;
  out.n_runs = static_cast<long>(runs.size());
  out.topk_counts.assign(static_cast<std::size_t>(d), 0);
  MatrixXd sums = MatrixXd::Zero(n_classes, d);

  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& run = runs[r];
    if (run.fold_models.size() != run.splits.size())
      throw InvalidState("population_saliency: run " + std::to_string(r) + " has " +
                         std::to_string(run.fold_models.size()) + " models for " + std::to_string(run.splits.size()) +
                         " folds");
    std::vector<int> fold_of(static_cast<std::size_t>(n), -1);
    for (std::size_t f = 0; f < run.splits.size(); ++f)
      for (int s : run.splits[f].test_idx) {
        if (s < 0 || s >= n) throw InvalidState("population_saliency: split references unknown subject");
        if (fold_of[static_cast<std::size_t>(s)] != -1)
          throw InvalidState("population_saliency: subject " + ds.subjects[static_cast<std::size_t>(s)].id +
                             " is tested twice in run " + std::to_string(r));
        fold_of[static_cast<std::size_t>(s)] = static_cast<int>(f);
      }
    for (Index s = 0; s < n; ++s)
      if (fold_of[static_cast<std::size_t>(s)] == -1)
        throw InvalidState("population_saliency: subject " + ds.subjects[static_cast<std::size_t>(s)].id +
                           " has no test-fold model in run " + std::to_string(r));

    // CAMs per subject (C x d) and predictions, computed fold by fold.
    std::vector<MatrixXd> cams(static_cast<std::size_t>(n));
    std::vector<int> predicted(static_cast<std::size_t>(n), 0);
    for (std::size_t f = 0; f < run.splits.size(); ++f) {
      const auto& test = run.splits[f].test_idx;
      if (test.empty()) continue;
      const Model& model = run.fold_models[f];
      if (model.config.num_classes != n_classes || model.config.input_channels != ds.feature_dim())
        throw InvalidState("population_saliency: fold model " + std::to_string(f) + " of run " + std::to_string(r) +
                           " does not match the dataset");
      constexpr std::size_t chunk = 256;
      for (std::size_t start = 0; start < test.size(); start += chunk) {
        const std::size_t len = std::min(chunk, test.size() - start);
        std::vector<const MatrixXd*> samples;
        for (std::size_t i = start; i < start + len; ++i)
          samples.push_back(&ds.subjects[static_cast<std::size_t>(test[i])].features);
        const auto trace = model_forward(model, ltilde, make_batch(samples), Mode::Eval);
        for (std::size_t i = 0; i < len; ++i) {
          const auto s = static_cast<std::size_t>(test[start + i]);
          cams[s] = cam_scores(trace.last_conv_features.sample(static_cast<Index>(i)), model.params.dense).transpose();
          predicted[s] = argmax_row(trace.logits, static_cast<Index>(i));
        }
      }
    }

    // Reduction in subject order.
    for (std::size_t s = 0; s < static_cast<std::size_t>(n); ++s) {
      sums += cams[s];
      for (int v : top_k_nodes(VectorXd(cams[s].row(predicted[s]).transpose()), k))
        ++out.topk_counts[static_cast<std::size_t>(v)];
      if (keep_per_subject)
        out.per_subject.push_back({static_cast<int>(r), static_cast<int>(s), predicted[s], std::move(cams[s])});
    }
  }

  out.mean_activation_raw = sums / static_cast<double>(n * static_cast<Index>(runs.size()));
  out.mean_activation.resize(n_classes, d);
  for (int c = 0; c < n_classes; ++c) out.mean_activation.row(c) = min_max_scale(out.mean_activation_raw.row(c));
  return out;
}

/// Nodes by top-k count descending, node index ascending on ties.
inline std::vector<int> rank_nodes(std::span<const long> topk_counts) {
  std::vector<int> order(topk_counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return topk_counts[static_cast<std::size_t>(a)] > topk_counts[static_cast<std::size_t>(b)];
  });
  return order;
}

}  // namespace chebcam
