#include "box_newton.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace grmsel::detail {

namespace {

// Cholesky solve of A x = b for symmetric A; false when A is not positive definite.
bool cholesky_solve(std::vector<double> a, std::size_t n, std::vector<double>& b) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) return false;
    d = std::sqrt(d);
    a[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return true;
}

}  // namespace

BoxResult maximize_box(const BoxProblem& problem, std::vector<double> x0, int max_iterations,
                       double gradient_tolerance) {
  const std::size_t dim = x0.size();
  auto project = [&](std::vector<double>& x) {
    for (std::size_t i = 0; i < dim; ++i) x[i] = std::clamp(x[i], problem.lower[i], problem.upper[i]);
  };
  project(x0);

  BoxResult out;
  out.x = std::move(x0);
  out.value = problem.value(out.x);
  std::vector<double> g(dim), gp(dim), gm(dim);

  for (int iter = 0; iter < max_iterations; ++iter) {
    out.iterations = iter + 1;
    problem.gradient(out.x, g);
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < dim; ++i) {
      const bool pinned_low = out.x[i] <= problem.lower[i] && g[i] < 0.0;
      const bool pinned_high = out.x[i] >= problem.upper[i] && g[i] > 0.0;
      if (!pinned_low && !pinned_high) free.push_back(i);
    }
    double gmax = 0.0;
    for (auto i : free) gmax = std::max(gmax, std::abs(g[i]));
    if (free.empty() || gmax < gradient_tolerance) break;

    const std::size_t nf = free.size();
    std::vector<double> neg_hessian(nf * nf, 0.0);
    for (std::size_t c = 0; c < nf; ++c) {
      const std::size_t j = free[c];
      const double h = 1e-5 * std::max(1.0, std::abs(out.x[j]));
      auto xp = out.x;
      auto xm = out.x;
      xp[j] += h;
      xm[j] -= h;
      problem.gradient(xp, gp);
      problem.gradient(xm, gm);
      for (std::size_t r = 0; r < nf; ++r) {
        neg_hessian[r * nf + c] = -(gp[free[r]] - gm[free[r]]) / (2.0 * h);
      }
    }
    for (std::size_t r = 0; r < nf; ++r) {
      for (std::size_t c = r + 1; c < nf; ++c) {
        const double s = 0.5 * (neg_hessian[r * nf + c] + neg_hessian[c * nf + r]);
        neg_hessian[r * nf + c] = neg_hessian[c * nf + r] = s;
      }
    }

    double diag_scale = 0.0;
    for (std::size_t r = 0; r < nf; ++r) diag_scale = std::max(diag_scale, std::abs(neg_hessian[r * nf + r]));
    if (diag_scale == 0.0) diag_scale = 1.0;

    bool improved = false;
    for (double damping = 0.0; damping < 1e12 * diag_scale && !improved;
         damping = damping == 0.0 ? 1e-8 * diag_scale : damping * 100.0) {
      auto a = neg_hessian;
      for (std::size_t r = 0; r < nf; ++r) a[r * nf + r] += damping;
      std::vector<double> step(nf);
      for (std::size_t r = 0; r < nf; ++r) step[r] = g[free[r]];
      if (!cholesky_solve(a, nf, step)) continue;

      double scale = 1.0;
      for (int halving = 0; halving < 30; ++halving) {
        auto candidate = out.x;
        for (std::size_t r = 0; r < nf; ++r) candidate[free[r]] += scale * step[r];
        project(candidate);
        const double v = problem.value(candidate);
        if (v > out.value) {
          out.x = std::move(candidate);
          out.value = v;
          improved = true;
          break;
        }
        scale *= 0.5;
      }
    }
    if (!improved) break;
  }
  return out;
}

void accumulate_item_gradient(const ItemParams& item, int m, double theta, double weight,
                              std::span<double> grad) {
  const double a = item.discrimination();
  const auto& b = item.thresholds();
  const int top = item.max_level();
  // log P_m = log(sigma(x_m) - sigma(x_{m+1})), x_k = a (theta - b_k)
  double upper_coef = 0.0;  // d/dx_m
  double lower_coef = 0.0;  // d/dx_{m+1}
  if (m >= 1 && m <= top - 1) {
    const double xm = a * (theta - b[m - 1]);
    const double xn = a * (theta - b[m]);
    const double tail = -std::expm1(-(xm - xn));
    upper_coef = logistic(-xm) / (logistic(-xn) * tail);
    lower_coef = -logistic(xn) / (logistic(xm) * tail);
  } else if (m == 0) {
    const double xn = a * (theta - b[0]);
    lower_coef = -logistic(xn);
  } else {  // m == top
    const double xm = a * (theta - b[top - 1]);
    upper_coef = logistic(-xm);
  }
  if (m >= 1) {
    grad[0] += weight * upper_coef * (theta - b[m - 1]);
    grad[m] += weight * upper_coef * (-a);
  }
  if (m <= top - 1) {
    grad[0] += weight * lower_coef * (theta - b[m]);
    grad[m + 1] += weight * lower_coef * (-a);
  }
}

}  // namespace grmsel::detail
