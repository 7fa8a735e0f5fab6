#pragma once

// Graph representations, Laplacians, Chebyshev filtering and partial-correlation
// network modelling. Everything here is dense: graphs are at most a few hundred
// nodes.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "chebcam/errors.hpp"

namespace chebcam {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Symmetric, non-negative weighted adjacency with zero diagonal.
class Graph {
 public:
  /// Validates the invariants; throws InvalidInput on violation.
  explicit Graph(MatrixXd weights) : weights_(std::move(weights)) {
    const Index n = weights_.rows();
    if (n < 2 || weights_.cols() != n)
      throw InvalidInput("graph: weights must be square with at least 2 nodes, got " +
                         std::to_string(weights_.rows()) + "x" + std::to_string(weights_.cols()));
    if (!weights_.allFinite()) throw InvalidInput("graph: non-finite edge weight");
    for (Index i = 0; i < n; ++i) {
      if (weights_(i, i) != 0.0) throw InvalidInput("graph: non-zero diagonal at node " + std::to_string(i));
      for (Index j = 0; j < n; ++j) {
        if (weights_(i, j) < 0.0)
          throw InvalidInput("graph: negative weight at (" + std::to_string(i) + "," + std::to_string(j) + ")");
        if (weights_(i, j) != weights_(j, i))
          throw InvalidInput("graph: asymmetric weight at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }

  Index num_nodes() const noexcept { return weights_.rows(); }
  const MatrixXd& weights() const noexcept { return weights_; }

 private:
  MatrixXd weights_;
};

/// The rescaled Laplacian (2/lambda_max) L - I, the operand of Chebyshev filtering.
struct ScaledLaplacian {
  MatrixXd matrix;
  double lambda_max = 2.0;
  bool converged = false;

  Index num_nodes() const noexcept { return matrix.rows(); }
};

/// T x d observations, T >= 2, all finite.
class TimeseriesMatrix {
 public:
  explicit TimeseriesMatrix(MatrixXd data) : data_(std::move(data)) {
    if (data_.rows() < 2) throw InvalidInput("timeseries: need at least 2 observations");
    if (data_.cols() < 1) throw InvalidInput("timeseries: need at least 1 variable");
    if (!data_.allFinite()) throw InvalidInput("timeseries: non-finite sample");
  }

  const MatrixXd& data() const noexcept { return data_; }

 private:
  MatrixXd data_;
};

/// L = I - D^{-1/2} W D^{-1/2}. Isolated nodes get a zero D^{-1/2} entry, so L(i,i) = 1.
inline MatrixXd normalized_laplacian(const Graph& graph) {
  const MatrixXd& w = graph.weights();
  if (!w.allFinite()) throw InvalidInput("normalized_laplacian: non-finite weights");
  const Index n = w.rows();
  VectorXd inv_sqrt_degree(n);
  for (Index i = 0; i < n; ++i) {
    const double degree = w.row(i).sum();
    inv_sqrt_degree(i) = degree > 0.0 ? 1.0 / std::sqrt(degree) : 0.0;
  }
  MatrixXd laplacian = -(inv_sqrt_degree.asDiagonal() * w * inv_sqrt_degree.asDiagonal());
  laplacian.diagonal().array() += 1.0;
  // The product is symmetric in exact arithmetic; make it so bit for bit.
  laplacian = (0.5 * (laplacian + laplacian.transpose())).eval();
  return laplacian;
}

struct LambdaEstimate {
  double lambda_max = 2.0;
  bool converged = false;
};

struct PowerIterationOptions {
  double tol = 1e-7;
  int max_iters = 1000;
};

/// Power iteration from a fixed start vector; on non-convergence returns the
/// normalized-Laplacian bound 2.0 with converged = false.
inline LambdaEstimate estimate_lambda_max(const MatrixXd& laplacian, PowerIterationOptions options = {}) {
  const Index n = laplacian.rows();
  if (n == 0 || laplacian.cols() != n) throw InvalidInput("estimate_lambda_max: matrix must be square and non-empty");
  if (!(options.tol > 0.0)) throw InvalidInput("estimate_lambda_max: tol must be positive");

  // Irrational-step sequence: deterministic and not orthogonal to structured eigenvectors.
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) {
    const double x = static_cast<double>(i + 1) * 0.6180339887498949;
    v(i) = 0.5 + (x - std::floor(x));
  }
  v.normalize();

  // Besides a small step, the geometric tail implied by the ratio of
  // successive steps must also be below tol; with slow convergence a small
  // step alone can leave an error many times larger.
  double rayleigh = v.dot(laplacian * v);
  double previous_change = 0.0;
  for (int iter = 0; iter < options.max_iters; ++iter) {
    VectorXd next = laplacian * v;
    const double norm = next.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) break;
    v = next / norm;
    const double updated = v.dot(laplacian * v);
    const double change = std::abs(updated - rayleigh);
    if (change < options.tol) {
      const double ratio = previous_change > 0.0 ? std::min(change / previous_change, 0.999999) : 0.0;
      if (change * ratio / (1.0 - ratio) < options.tol) {
        if (updated > 0.0) return {updated, true};
        break;
      }
    }
    previous_change = change;
    rayleigh = updated;
  }
  return {2.0, false};
}

/// (2 / lambda_max) L - I.
inline ScaledLaplacian scale_laplacian(const MatrixXd& laplacian, double lambda_max, bool converged = true) {
  if (!(lambda_max > 0.0) || !std::isfinite(lambda_max))
    throw InvalidInput("scale_laplacian: lambda_max must be positive and finite");
  if (laplacian.rows() != laplacian.cols()) throw InvalidInput("scale_laplacian: matrix must be square");
  ScaledLaplacian out;
  out.matrix = (2.0 / lambda_max) * laplacian;
  out.matrix.diagonal().array() -= 1.0;
  out.lambda_max = lambda_max;
  out.converged = converged;
  return out;
}

/// Normalized Laplacian, power-iteration lambda_max, rescaling.
inline ScaledLaplacian make_scaled_laplacian(const Graph& graph, PowerIterationOptions options = {}) {
  const MatrixXd laplacian = normalized_laplacian(graph);
  const LambdaEstimate estimate = estimate_lambda_max(laplacian, options);
  return scale_laplacian(laplacian, estimate.lambda_max, estimate.converged);
}

/// [T_0(L~) X, ..., T_{K-1}(L~) X] by the three-term recurrence.
inline std::vector<MatrixXd> cheb_apply(const ScaledLaplacian& ltilde, const MatrixXd& x, int num_coeffs) {
  if (num_coeffs < 1) throw InvalidInput("cheb_apply: num_coeffs must be >= 1");
  if (x.cols() < 1) throw InvalidInput("cheb_apply: signal needs at least one column");
  if (x.rows() != ltilde.num_nodes())
    throw InvalidInput("cheb_apply: signal has " + std::to_string(x.rows()) + " rows, Laplacian has " +
                       std::to_string(ltilde.num_nodes()) + " nodes");
  std::vector<MatrixXd> stack;
  stack.reserve(static_cast<std::size_t>(num_coeffs));
  stack.push_back(x);
  if (num_coeffs > 1) stack.push_back(ltilde.matrix * x);
  for (int k = 2; k < num_coeffs; ++k) {
    MatrixXd next = 2.0 * (ltilde.matrix * stack[k - 1]) - stack[k - 2];
    stack.push_back(std::move(next));
  }
  return stack;
}

/// Sum_k theta_k T_k(L~) materialised as a d x d matrix.
inline MatrixXd chebyshev_filter_matrix(const ScaledLaplacian& ltilde, std::span<const double> theta) {
  const Index n = ltilde.num_nodes();
  const auto stack = cheb_apply(ltilde, MatrixXd::Identity(n, n), static_cast<int>(theta.size()));
  MatrixXd filter = MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k < theta.size(); ++k) filter += theta[k] * stack[k];
  return filter;
}

/// L2-regularised partial correlation from the precision (Sigma + rho I)^{-1};
/// covariance uses divisor T - 1 and the diagonal of the result is zero.
inline MatrixXd partial_correlation(const TimeseriesMatrix& ts, double rho) {
  if (!(rho >= 0.0) || !std::isfinite(rho)) throw InvalidInput("partial_correlation: rho must be >= 0");
  const MatrixXd& data = ts.data();
  const Index t = data.rows();
  const Index d = data.cols();
  const MatrixXd centered = data.rowwise() - data.colwise().mean();
  MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(t - 1);
  cov.diagonal().array() += rho;

  Eigen::LDLT<MatrixXd> ldlt(cov);
  const double scale = std::max(1.0, cov.diagonal().cwiseAbs().maxCoeff());
  const VectorXd pivots = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || pivots.minCoeff() <= 1e-12 * scale)
    throw NumericalError("partial_correlation: regularised covariance (Sigma + rho*I) is singular");
  const MatrixXd precision = ldlt.solve(MatrixXd::Identity(d, d));

  MatrixXd out = MatrixXd::Zero(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = i + 1; j < d; ++j) {
      const double p = -precision(i, j) / std::sqrt(precision(i, i) * precision(j, j));
      out(i, j) = out(j, i) = std::clamp(p, -1.0, 1.0);
    }
  return out;
}

/// Group adjacency: element-wise mean of |connectome|, zero diagonal, optional
/// per-row k-NN sparsification symmetrised by element-wise maximum.
inline Graph build_group_graph(std::span<const MatrixXd> connectomes, std::optional<int> knn = std::nullopt) {
  if (connectomes.empty()) throw InvalidInput("build_group_graph: need at least one connectome");
  const Index d = connectomes.front().rows();
  MatrixXd sum = MatrixXd::Zero(d, d);
  for (std::size_t m = 0; m < connectomes.size(); ++m) {
    const MatrixXd& c = connectomes[m];
    if (c.rows() != d || c.cols() != d)
      throw InvalidInput("build_group_graph: connectome " + std::to_string(m) + " is not " + std::to_string(d) +
                         "x" + std::to_string(d));
    if (!c.allFinite()) throw InvalidInput("build_group_graph: connectome " + std::to_string(m) + " is not finite");
    sum += c.cwiseAbs();
  }
  MatrixXd w = sum / static_cast<double>(connectomes.size());
  w = (0.5 * (w + w.transpose())).eval();
  w.diagonal().setZero();

  if (knn) {
    if (*knn < 1 || *knn >= d)
      throw InvalidInput("build_group_graph: knn must be in [1, " + std::to_string(d - 1) + "]");
    MatrixXd kept = MatrixXd::Zero(d, d);
    std::vector<Index> order(static_cast<std::size_t>(d));
    for (Index i = 0; i < d; ++i) {
      order.clear();
      for (Index j = 0; j < d; ++j)
        if (j != i) order.push_back(j);
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return w(i, a) > w(i, b); });
      for (int r = 0; r < *knn; ++r) kept(i, order[static_cast<std::size_t>(r)]) = w(i, order[static_cast<std::size_t>(r)]);
    }
    w = kept.cwiseMax(kept.transpose());
  }
  return Graph(std::move(w));
}

}  // namespace chebcam
