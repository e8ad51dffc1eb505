#pragma once

// Latent-trait scoring for one respondent: single-occasion MLE/MAP and the
// longitudinal intercept/slope deviations under a bivariate normal prior.

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "grmsel/grm.hpp"
#include "grmsel/population.hpp"

namespace grmsel {

struct Response {
  std::string item_id;
  int level = 0;
};

using ResponseSet = std::vector<Response>;

/// Response resolved against a bank, with its measurement time in years.
struct Observation {
  std::size_t item = 0;
  int level = 0;
  double time = 0.0;
};

/// Checks ids, level ranges, and distinct items; returns bank indices (time 0).
std::vector<Observation> resolve(const ResponseSet& responses, const ItemBank& bank);

enum class EstimationMethod { MLE, MAP };

/// Search interval for the trait estimate.
inline constexpr double kThetaBound = 8.0;

struct PosteriorSummary {
  double estimate = 0.0;
  double sd = 0.0;
  EstimationMethod method = EstimationMethod::MLE;
  bool boundary_pattern = false;  // all minimum or all maximum levels
  bool clipped = false;           // optimum sits on the search bound
  int iterations = 0;
};

double log_likelihood_theta(const ResponseSet& responses, const ItemBank& bank, double theta);
double log_likelihood_theta(std::span<const Observation> obs, const ItemBank& bank, double theta);
/// d/dtheta of the log-likelihood.
double score_theta(std::span<const Observation> obs, const ItemBank& bank, double theta);
/// -d^2/dtheta^2 of the log-likelihood (> 0 whenever obs is nonempty).
double observed_information(std::span<const Observation> obs, const ItemBank& bank, double theta);

PosteriorSummary estimate_theta_mle(const ResponseSet& responses, const ItemBank& bank);
PosteriorSummary estimate_theta_map(const ResponseSet& responses, const ItemBank& bank,
                                    const NormalDist& prior);

/// Population line and random-effect covariance of the longitudinal model.
struct TrajectoryPrior {
  double beta0 = 0.0;
  double beta1 = 0.075;
  double var_u0 = 1.0;
  double var_u1 = 0.027;
  double rho = 0.085;

  void validate() const;
  double cov_u0u1() const;
  /// Inverse covariance as {s00, s01, s11}.
  std::array<double, 3> precision() const;
};

struct TrajectoryOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-8;
};

struct TrajectoryEstimate {
  double u0 = 0.0;
  double u1 = 0.0;
  std::array<double, 3> covariance{};  // {c00, c01, c11}
  std::vector<double> times;
  std::vector<double> severity;  // beta0 + u0 + (beta1 + u1) t at each time
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0;
  std::vector<double> objective_trace;
};

/// Penalized log-likelihood of (u0, u1) for one subject.
double trajectory_objective(std::span<const Observation> obs, const ItemBank& bank,
                            const TrajectoryPrior& prior, double u0, double u1);

/// Damped Newton on the 2-D penalized log-likelihood, started from `start`.
TrajectoryEstimate estimate_trajectory_map(std::span<const Observation> obs, const ItemBank& bank,
                                           const TrajectoryPrior& prior,
                                           const TrajectoryOptions& options = {},
                                           std::array<double, 2> start = {0.0, 0.0});

struct TimedResponses {
  double time = 0.0;
  ResponseSet responses;
};

TrajectoryEstimate estimate_trajectory_map(std::span<const TimedResponses> visits,
                                           const ItemBank& bank, const TrajectoryPrior& prior,
                                           const TrajectoryOptions& options = {});

double predict_severity(const TrajectoryEstimate& traj, const TrajectoryPrior& prior, double t);

}  // namespace grmsel
