#pragma once
// Damped Gauss-Newton / Fisher-scoring fits of a model curve to binned data.

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hompix {

/// Fills the model prediction (size m) and its Jacobian (m x n) for parameters p.
using ModelFn = std::function<void(const Eigen::VectorXd& p, Eigen::VectorXd& mu, Eigen::MatrixXd& jac)>;

enum class Objective {
  chi2,     ///< sum ((y - mu) / sigma)^2
  poisson,  ///< deviance 2 sum (mu - y + y ln(y / mu))
};

struct CurveFitProblem {
  ModelFn model;
  Eigen::VectorXd y;
  Eigen::VectorXd sigma;  ///< chi2 only
  Objective objective = Objective::chi2;
  Eigen::VectorXd start;
  Eigen::VectorXd lower;  ///< -inf for unbounded
  Eigen::VectorXd upper;  ///< +inf for unbounded
  std::vector<bool> fixed;  ///< empty = all free
  int max_iterations = 200;
  double tolerance = 1e-9;  ///< relative objective change
};

struct CurveFitResult {
  Eigen::VectorXd params;
  Eigen::VectorXd errors;  ///< 0 for fixed parameters
  Eigen::MatrixXd covariance;
  double objective = 0.0;
  /// Pearson chi2 at the solution (equals objective for chi2 fits).
  double chi2 = 0.0;
  int ndf = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<bool> at_bound;
  /// Objective value after every accepted step.
  std::vector<double> trace;
};

/// Levenberg-Marquardt with parameters projected onto their box bounds.
/// Never throws on non-convergence; callers inspect `converged`.
CurveFitResult fit_curve(const CurveFitProblem& problem);

}  // namespace hompix
