#include "grmsel/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

namespace grmsel {

namespace {

struct Maximum {
  double x = 0.0;
  bool clipped = false;
  int iterations = 0;
};

// Maximizes a concave function on [lo, hi]: grid bracketing, then Newton
// steps on the derivative safeguarded by bisection.
Maximum maximize_concave(const std::function<double(double)>& f,
                         const std::function<double(double)>& df,
                         const std::function<double(double)>& curvature, double lo, double hi) {
  constexpr double kGridStep = 0.25;
  const int cells = std::max(2, static_cast<int>(std::ceil((hi - lo) / kGridStep)));
  const double step = (hi - lo) / cells;
  int best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= cells; ++i) {
    const double v = f(lo + i * step);
    if (v > best_value) {
      best_value = v;
      best = i;
    }
  }
  double left = lo + std::max(best - 1, 0) * step;
  double right = lo + std::min(best + 1, cells) * step;

  Maximum out;
  if (best == 0 && df(lo) <= 0.0) {
    out.x = lo;
    out.clipped = true;
    return out;
  }
  if (best == cells && df(hi) >= 0.0) {
    out.x = hi;
    out.clipped = true;
    return out;
  }
  double x = lo + best * step;
  for (int iter = 1; iter <= 200; ++iter) {
    out.iterations = iter;
    const double g = df(x);
    if (g == 0.0) break;
    if (g > 0.0) {
      left = x;
    } else {
      right = x;
    }
    double next = x + g / curvature(x);
    if (!(next > left && next < right)) next = 0.5 * (left + right);
    const double moved = std::abs(next - x);
    x = next;
    if (moved < 1e-13 * std::max(1.0, std::abs(x)) || right - left < 1e-14) break;
  }
  out.x = x;
  return out;
}

void require_nonempty(std::span<const Observation> obs) {
  if (obs.empty()) throw DomainError("empty response set");
}

bool is_boundary_pattern(std::span<const Observation> obs, const ItemBank& bank) {
  const bool all_min =
      std::all_of(obs.begin(), obs.end(), [](const Observation& o) { return o.level == 0; });
  const bool all_max = std::all_of(obs.begin(), obs.end(), [&](const Observation& o) {
    return o.level == bank[o.item].max_level();
  });
  return all_min || all_max;
}

std::vector<std::size_t> answered_items(std::span<const Observation> obs) {
  std::vector<std::size_t> items;
  items.reserve(obs.size());
  for (const auto& o : obs) items.push_back(o.item);
  return items;
}

}  // namespace

std::vector<Observation> resolve(const ResponseSet& responses, const ItemBank& bank) {
  std::vector<Observation> out;
  out.reserve(responses.size());
  std::set<std::size_t> seen;
  for (const auto& r : responses) {
    const std::size_t i = bank.index_of(r.item_id);
    if (r.level < 0 || r.level > bank[i].max_level()) {
      std::ostringstream msg;
      msg << "level " << r.level << " out of range for item '" << r.item_id << "'";
      throw DomainError(msg.str());
    }
    if (!seen.insert(i).second) {
      throw DomainError("item '" + r.item_id + "' answered twice in one response set");
    }
    out.push_back({i, r.level, 0.0});
  }
  return out;
}

double log_likelihood_theta(std::span<const Observation> obs, const ItemBank& bank, double theta) {
  double total = 0.0;
  for (const auto& o : obs) total += log_prob_eq(bank[o.item], o.level, theta);
  return total;
}

double log_likelihood_theta(const ResponseSet& responses, const ItemBank& bank, double theta) {
  const auto obs = resolve(responses, bank);
  require_nonempty(obs);
  return log_likelihood_theta(obs, bank, theta);
}

double score_theta(std::span<const Observation> obs, const ItemBank& bank, double theta) {
  double total = 0.0;
  for (const auto& o : obs) total += dlog_prob_eq(bank[o.item], o.level, theta);
  return total;
}

double observed_information(std::span<const Observation> obs, const ItemBank& bank,
                            double theta) {
  double total = 0.0;
  for (const auto& o : obs) total += neg_d2log_prob_eq(bank[o.item], o.level, theta);
  return total;
}

PosteriorSummary estimate_theta_mle(const ResponseSet& responses, const ItemBank& bank) {
  const auto obs = resolve(responses, bank);
  require_nonempty(obs);
  const auto items = answered_items(obs);

  PosteriorSummary out;
  out.method = EstimationMethod::MLE;
  if (is_boundary_pattern(obs, bank)) {
    out.boundary_pattern = true;
    out.clipped = true;
    out.estimate = obs.front().level == 0 ? -kThetaBound : kThetaBound;
    out.sd = conditional_sd(bank, items, out.estimate);
    return out;
  }
  const auto m = maximize_concave(
      [&](double t) { return log_likelihood_theta(obs, bank, t); },
      [&](double t) { return score_theta(obs, bank, t); },
      [&](double t) { return observed_information(obs, bank, t); }, -kThetaBound, kThetaBound);
  out.estimate = m.x;
  out.clipped = m.clipped;
  out.iterations = m.iterations;
  out.sd = conditional_sd(bank, items, out.estimate);
  return out;
}

PosteriorSummary estimate_theta_map(const ResponseSet& responses, const ItemBank& bank,
                                    const NormalDist& prior) {
  validate(LatentDistribution{prior});
  const auto obs = resolve(responses, bank);
  const double precision = 1.0 / (prior.sd * prior.sd);

  PosteriorSummary out;
  out.method = EstimationMethod::MAP;
  if (obs.empty()) {
    out.estimate = prior.mean;
    out.sd = prior.sd;
    return out;
  }
  out.boundary_pattern = is_boundary_pattern(obs, bank);
  const double lo = std::min(-kThetaBound, prior.mean);
  const double hi = std::max(kThetaBound, prior.mean);
  const auto m = maximize_concave(
      [&](double t) {
        const double z = t - prior.mean;
        return log_likelihood_theta(obs, bank, t) - 0.5 * precision * z * z;
      },
      [&](double t) { return score_theta(obs, bank, t) - precision * (t - prior.mean); },
      [&](double t) { return observed_information(obs, bank, t) + precision; }, lo, hi);
  out.estimate = m.x;
  out.clipped = m.clipped;
  out.iterations = m.iterations;
  out.sd = 1.0 / std::sqrt(observed_information(obs, bank, m.x) + precision);
  return out;
}

void TrajectoryPrior::validate() const {
  if (!std::isfinite(beta0) || !std::isfinite(beta1)) {
    throw DomainError("trajectory prior: non-finite fixed effect");
  }
  if (!(var_u0 > 0.0) || !(var_u1 > 0.0)) {
    throw DomainError("trajectory prior: random-effect variances must be positive");
  }
  if (!(std::abs(rho) < 1.0)) throw DomainError("trajectory prior: |rho| must be below 1");
}

double TrajectoryPrior::cov_u0u1() const { return rho * std::sqrt(var_u0 * var_u1); }

std::array<double, 3> TrajectoryPrior::precision() const {
  const double c01 = cov_u0u1();
  const double det = var_u0 * var_u1 - c01 * c01;
  return {var_u1 / det, -c01 / det, var_u0 / det};
}

double trajectory_objective(std::span<const Observation> obs, const ItemBank& bank,
                            const TrajectoryPrior& prior, double u0, double u1) {
  double total = 0.0;
  for (const auto& o : obs) {
    const double theta = prior.beta0 + u0 + (prior.beta1 + u1) * o.time;
    total += log_prob_eq(bank[o.item], o.level, theta);
  }
  const auto p = prior.precision();
  return total - 0.5 * (p[0] * u0 * u0 + 2.0 * p[1] * u0 * u1 + p[2] * u1 * u1);
}

TrajectoryEstimate estimate_trajectory_map(std::span<const Observation> obs, const ItemBank& bank,
                                           const TrajectoryPrior& prior,
                                           const TrajectoryOptions& options,
                                           std::array<double, 2> start) {
  prior.validate();
  const auto p = prior.precision();
  TrajectoryEstimate out;
  double u0 = start[0];
  double u1 = start[1];

  struct Derivatives {
    double g0, g1, h00, h01, h11;  // gradient and negated Hessian
  };
  auto derivatives = [&](double v0, double v1) {
    Derivatives d{0, 0, p[0], p[1], p[2]};
    d.g0 = -(p[0] * v0 + p[1] * v1);
    d.g1 = -(p[1] * v0 + p[2] * v1);
    for (const auto& o : obs) {
      const double theta = prior.beta0 + v0 + (prior.beta1 + v1) * o.time;
      const double s = dlog_prob_eq(bank[o.item], o.level, theta);
      const double c = neg_d2log_prob_eq(bank[o.item], o.level, theta);
      d.g0 += s;
      d.g1 += s * o.time;
      d.h00 += c;
      d.h01 += c * o.time;
      d.h11 += c * o.time * o.time;
    }
    return d;
  };

  double value = trajectory_objective(obs, bank, prior, u0, u1);
  out.objective_trace.push_back(value);
  Derivatives d = derivatives(u0, u1);
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    out.gradient_norm = std::hypot(d.g0, d.g1);
    if (out.gradient_norm < options.gradient_tolerance) {
      out.converged = true;
      break;
    }
    const double det = d.h00 * d.h11 - d.h01 * d.h01;
    const double s0 = (d.h11 * d.g0 - d.h01 * d.g1) / det;
    const double s1 = (d.h00 * d.g1 - d.h01 * d.g0) / det;
    const double slope = d.g0 * s0 + d.g1 * s1;
    // Predicted gain below rounding of the objective: the value can no longer
    // rank steps, so take the full step when it shrinks the gradient.
    if (slope < 1e-13 * (1.0 + std::abs(value))) {
      const Derivatives next = derivatives(u0 + s0, u1 + s1);
      out.iterations = iter + 1;
      if (!(std::hypot(next.g0, next.g1) < std::hypot(d.g0, d.g1))) break;
      u0 += s0;
      u1 += s1;
      value = trajectory_objective(obs, bank, prior, u0, u1);
      out.objective_trace.push_back(value);
      d = next;
      continue;
    }
    double step = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      const double c0 = u0 + step * s0;
      const double c1 = u1 + step * s1;
      const double candidate = trajectory_objective(obs, bank, prior, c0, c1);
      if (candidate >= value + 1e-4 * step * slope || (candidate >= value && halving > 40)) {
        u0 = c0;
        u1 = c1;
        value = candidate;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    out.iterations = iter + 1;
    if (!accepted) break;
    out.objective_trace.push_back(value);
    d = derivatives(u0, u1);
  }
  out.gradient_norm = std::hypot(d.g0, d.g1);
  if (out.gradient_norm < options.gradient_tolerance) out.converged = true;

  out.u0 = u0;
  out.u1 = u1;
  const double det = d.h00 * d.h11 - d.h01 * d.h01;
  out.covariance = {d.h11 / det, -d.h01 / det, d.h00 / det};

  std::set<double> times;
  for (const auto& o : obs) times.insert(o.time);
  for (double t : times) {
    out.times.push_back(t);
    out.severity.push_back(prior.beta0 + u0 + (prior.beta1 + u1) * t);
  }
  return out;
}

TrajectoryEstimate estimate_trajectory_map(std::span<const TimedResponses> visits,
                                           const ItemBank& bank, const TrajectoryPrior& prior,
                                           const TrajectoryOptions& options) {
  std::vector<Observation> obs;
  for (const auto& visit : visits) {
    for (auto o : resolve(visit.responses, bank)) {
      o.time = visit.time;
      obs.push_back(o);
    }
  }
  return estimate_trajectory_map(obs, bank, prior, options);
}

double predict_severity(const TrajectoryEstimate& traj, const TrajectoryPrior& prior, double t) {
  return prior.beta0 + traj.u0 + (prior.beta1 + traj.u1) * t;
}

}  // namespace grmsel
