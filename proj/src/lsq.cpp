#include "hompix/lsq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hompix/error.hpp"

namespace hompix {

namespace {

constexpr double kMuFloor = 1e-12;

double objective_value(const CurveFitProblem& pr, const Eigen::VectorXd& mu) {
  double s = 0.0;
  const auto m = pr.y.size();
  if (pr.objective == Objective::chi2) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double r = (pr.y[i] - mu[i]) / pr.sigma[i];
      s += r * r;
    }
  } else {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double u = std::max(mu[i], kMuFloor);
      s += u - pr.y[i];
      if (pr.y[i] > 0.0) s += pr.y[i] * std::log(pr.y[i] / u);
    }
    s *= 2.0;
  }
  return s;
}

Eigen::VectorXd weights(const CurveFitProblem& pr, const Eigen::VectorXd& mu) {
  Eigen::VectorXd w(pr.y.size());
  for (Eigen::Index i = 0; i < w.size(); ++i)
    w[i] = pr.objective == Objective::chi2 ? 1.0 / (pr.sigma[i] * pr.sigma[i])
                                           : 1.0 / std::max(mu[i], 1e-6);
  return w;
}

double pearson(const CurveFitProblem& pr, const Eigen::VectorXd& mu) {
  if (pr.objective == Objective::chi2) return objective_value(pr, mu);
  double s = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double u = std::max(mu[i], 1e-6);
    s += (pr.y[i] - u) * (pr.y[i] - u) / u;
  }
  return s;
}

}  // namespace

CurveFitResult fit_curve(const CurveFitProblem& pr) {
  const Eigen::Index n = pr.start.size();
  const Eigen::Index m = pr.y.size();
  if (pr.lower.size() != n || pr.upper.size() != n)
    throw ContractViolation("fit_curve: bound vectors must match the parameter count");
  if (pr.objective == Objective::chi2 && pr.sigma.size() != m)
    throw ContractViolation("fit_curve: sigma must match the data size");
  if (!pr.fixed.empty() && static_cast<Eigen::Index>(pr.fixed.size()) != n)
    throw ContractViolation("fit_curve: fixed mask must match the parameter count");

  auto is_free = [&](Eigen::Index k) { return pr.fixed.empty() || !pr.fixed[k]; };
  std::vector<Eigen::Index> free_idx;
  for (Eigen::Index k = 0; k < n; ++k)
    if (is_free(k)) free_idx.push_back(k);
  const auto nf = static_cast<Eigen::Index>(free_idx.size());

  auto project = [&](Eigen::VectorXd& p) {
    for (Eigen::Index k = 0; k < n; ++k) p[k] = std::clamp(p[k], pr.lower[k], pr.upper[k]);
  };

  CurveFitResult res;
  Eigen::VectorXd p = pr.start;
  project(p);
  Eigen::VectorXd mu(m), mu_try(m);
  Eigen::MatrixXd jac(m, n), jac_try(m, n);
  pr.model(p, mu, jac);
  double f = objective_value(pr, mu);
  if (!std::isfinite(f)) throw FitFailure("fit_curve: objective not finite at the start point", {});
  res.trace.push_back(f);

  double lambda = 1e-3;
  for (int it = 0; it < pr.max_iterations && nf > 0; ++it) {
    res.iterations = it + 1;
    const Eigen::VectorXd w = weights(pr, mu);
    Eigen::MatrixXd jf(m, nf);
    for (Eigen::Index c = 0; c < nf; ++c) jf.col(c) = jac.col(free_idx[c]);
    const Eigen::MatrixXd a = jf.transpose() * w.asDiagonal() * jf;
    const Eigen::VectorXd g = jf.transpose() * (w.array() * (pr.y - mu).array()).matrix();

    bool accepted = false;
    double f_new = f;
    Eigen::VectorXd p_new = p;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd damped = a;
      for (Eigen::Index c = 0; c < nf; ++c)
        damped(c, c) += lambda * std::max(a(c, c), 1e-12);
      const Eigen::VectorXd step = damped.ldlt().solve(g);
      if (!step.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      p_new = p;
      for (Eigen::Index c = 0; c < nf; ++c) p_new[free_idx[c]] += step[c];
      project(p_new);
      pr.model(p_new, mu_try, jac_try);
      f_new = objective_value(pr, mu_try);
      if (std::isfinite(f_new) && f_new <= f) {
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      // No descent direction left: treat as a stationary point.
      res.converged = true;
      break;
    }
    const double change = f - f_new;
    p = p_new;
    mu = mu_try;
    jac = jac_try;
    f = f_new;
    res.trace.push_back(f);
    lambda = std::max(lambda / 10.0, 1e-12);
    if (change <= pr.tolerance * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
  }
  if (nf == 0) res.converged = true;

  res.params = p;
  res.objective = f;
  res.chi2 = pearson(pr, mu);
  res.ndf = static_cast<int>(m - nf);
  res.errors = Eigen::VectorXd::Zero(n);
  res.covariance = Eigen::MatrixXd::Zero(n, n);
  res.at_bound.assign(static_cast<std::size_t>(n), false);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double span = std::max(1e-12, 1e-9 * std::max(1.0, std::abs(p[k])));
    res.at_bound[k] = is_free(k) && (std::abs(p[k] - pr.lower[k]) < span || std::abs(p[k] - pr.upper[k]) < span);
  }
  if (nf > 0) {
    const Eigen::VectorXd w = weights(pr, mu);
    Eigen::MatrixXd jf(m, nf);
    for (Eigen::Index c = 0; c < nf; ++c) jf.col(c) = jac.col(free_idx[c]);
    const Eigen::MatrixXd a = jf.transpose() * w.asDiagonal() * jf;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
    const Eigen::MatrixXd cov = cod.pseudoInverse();
    for (Eigen::Index r = 0; r < nf; ++r)
      for (Eigen::Index c = 0; c < nf; ++c) res.covariance(free_idx[r], free_idx[c]) = cov(r, c);
    for (Eigen::Index k = 0; k < n; ++k) res.errors[k] = std::sqrt(std::max(0.0, res.covariance(k, k)));
  }
  return res;
}

}  // namespace hompix
