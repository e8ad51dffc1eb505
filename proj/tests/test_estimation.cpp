#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "grmsel/estimation.hpp"
#include "grmsel/io.hpp"
#include "oracles.hpp"

using Catch::Approx;
using grmsel::ItemBank;
using grmsel::ItemParams;
using grmsel::NormalDist;
using grmsel::ResponseSet;
using grmsel::TrajectoryPrior;

namespace {

// A random response pattern drawn from the model at theta.
ResponseSet draw_responses(const ItemBank& bank, double theta, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ResponseSet out;
  for (const auto& item : bank) {
    double u = unif(rng);
    int m = 0;
    for (; m < item.max_level(); ++m) {
      u -= static_cast<double>(oracle::naive_eq(item, m, theta));
      if (u < 0) break;
    }
    out.push_back({item.id(), m});
  }
  return out;
}

bool boundary(const ResponseSet& rs, const ItemBank& bank) {
  bool all_low = true, all_high = true;
  for (const auto& r : rs) {
    all_low = all_low && r.level == 0;
    all_high = all_high && r.level == bank[bank.index_of(r.item_id)].max_level();
  }
  return all_low || all_high;
}

}  // namespace

TEST_CASE("log-likelihood examples", "[estimation]") {
  const ItemBank bank({ItemParams("p", 1.3, {-0.5, 0.7}), ItemParams("q", 2.0, {0.2})});
  const ResponseSet one{{"p", 1}};
  REQUIRE(grmsel::log_likelihood_theta(one, bank, 0.1) == Approx(std::log(grmsel::prob_eq(bank[0], 1, 0.1))).epsilon(1e-14));

  const ResponseSet two{{"p", 2}, {"q", 0}};
  const double hand = std::log(1.0 / (1.0 + std::exp(-1.3 * (0.4 - 0.7)))) +
                      std::log(1.0 - 1.0 / (1.0 + std::exp(-2.0 * (0.4 - 0.2))));
  REQUIRE(grmsel::log_likelihood_theta(two, bank, 0.4) == Approx(hand).epsilon(1e-13));

  const ResponseSet low{{"p", 0}, {"q", 0}};
  double prev = grmsel::log_likelihood_theta(low, bank, 6.0);
  for (double t = 5.0; t >= -8.0; t -= 1.0) {
    const double v = grmsel::log_likelihood_theta(low, bank, t);
    REQUIRE(v > prev);
    prev = v;
  }
  REQUIRE_THROWS_AS(grmsel::log_likelihood_theta(ResponseSet{{"zz", 0}}, bank, 0.0), grmsel::DomainError);
}

TEST_CASE("response sets are validated", "[estimation]") {
  const ItemBank bank({ItemParams("p", 1.3, {-0.5, 0.7})});
  REQUIRE_THROWS_AS(grmsel::resolve({{"p", 3}}, bank), grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::resolve({{"p", -1}}, bank), grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::resolve({{"p", 1}, {"p", 0}}, bank), grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::estimate_theta_mle({}, bank), grmsel::DomainError);
}

TEST_CASE("score matches central differences on random triples", "[estimation][property]") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> ut(-3.0, 3.0);
  for (int c = 0; c < 100; ++c) {
    const auto bank = oracle::random_bank(rng, 5, 1, 4);
    const auto obs = grmsel::resolve(draw_responses(bank, ut(rng), rng), bank);
    const double t = ut(rng);
    const double h = 1e-5;
    const double fd = (oracle::naive_loglik(obs, bank, t + h) - oracle::naive_loglik(obs, bank, t - h)) / (2 * h);
    const double g = grmsel::score_theta(obs, bank, t);
    REQUIRE(std::abs(g - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    REQUIRE(grmsel::log_likelihood_theta(obs, bank, t) == Approx(oracle::naive_loglik(obs, bank, t)).epsilon(1e-12));
    REQUIRE(grmsel::observed_information(obs, bank, t) > 0.0);
  }
}

TEST_CASE("MLE examples", "[estimation]") {
  const ItemBank single({ItemParams("c", 2.5, {0.0})});
  const auto top = grmsel::estimate_theta_mle({{"c", 1}}, single);
  REQUIRE(top.boundary_pattern);
  REQUIRE(top.estimate == grmsel::kThetaBound);
  const auto bottom = grmsel::estimate_theta_mle({{"c", 0}}, single);
  REQUIRE(bottom.boundary_pattern);
  REQUIRE(bottom.estimate == -grmsel::kThetaBound);

  const ItemBank pair({ItemParams("lo", 2.5, {-1.0}), ItemParams("hi", 2.5, {1.0})});
  const auto sym = grmsel::estimate_theta_mle({{"lo", 1}, {"hi", 0}}, pair);
  REQUIRE_FALSE(sym.boundary_pattern);
  REQUIRE(sym.estimate == Approx(0.0).margin(1e-9));
  std::vector<ItemParams> items = pair.items();
  REQUIRE(sym.sd == grmsel::conditional_sd(items, sym.estimate));
}

TEST_CASE("MLE and MAP agree with grid-search oracles", "[estimation][oracle]") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> trait(0.0, 1.0);
  int checked = 0;
  while (checked < 100) {
    const auto bank = oracle::random_bank(rng, 5, 1, 4);
    const auto rs = draw_responses(bank, trait(rng), rng);
    if (boundary(rs, bank)) continue;
    const auto obs = grmsel::resolve(rs, bank);
    const auto mle = grmsel::estimate_theta_mle(rs, bank);
    const double grid_mle = oracle::grid_oracle([&](double t) { return oracle::naive_loglik(obs, bank, t); }, -8, 8);
    REQUIRE(std::abs(mle.estimate - grid_mle) <= 1e-3);

    std::vector<ItemParams> answered = bank.items();
    REQUIRE(mle.sd == grmsel::conditional_sd(answered, mle.estimate));

    const NormalDist prior{0.38, 1.0};
    const auto map = grmsel::estimate_theta_map(rs, bank, prior);
    const double grid_map = oracle::grid_oracle(
        [&](double t) { return oracle::naive_loglik(obs, bank, t) - 0.5 * (t - 0.38) * (t - 0.38); }, -8, 8);
    REQUIRE(std::abs(map.estimate - grid_map) <= 1e-3);
    REQUIRE(map.sd == Approx(1.0 / std::sqrt(grmsel::observed_information(obs, bank, map.estimate) + 1.0)).epsilon(1e-12));

    const auto flat = grmsel::estimate_theta_map(rs, bank, NormalDist{0.0, 1e4});
    REQUIRE(std::abs(flat.estimate - mle.estimate) <= 1e-4);
    ++checked;
  }
}

TEST_CASE("MAP examples", "[estimation]") {
  const ItemBank bank({ItemParams("c", 2.5, {0.0})});
  const auto prior_only = grmsel::estimate_theta_map({}, bank, NormalDist{0.38, 1.0});
  REQUIRE(prior_only.estimate == Approx(0.38).margin(1e-12));
  REQUIRE(prior_only.sd == Approx(1.0).epsilon(1e-12));

  const ItemBank weak({ItemParams("w1", 1e-6, {-0.5}), ItemParams("w2", 1e-6, {0.5})});
  const auto w = grmsel::estimate_theta_map({{"w1", 1}, {"w2", 1}}, weak, NormalDist{0.38, 1.0});
  REQUIRE(w.estimate == Approx(0.38).margin(1e-5));

  // boundary pattern still finite under a prior
  const auto b = grmsel::estimate_theta_map({{"c", 1}}, bank, NormalDist{});
  REQUIRE(std::isfinite(b.estimate));
  REQUIRE(b.estimate < grmsel::kThetaBound);
  REQUIRE(b.boundary_pattern);
}

TEST_CASE("MAP shrinks toward the prior mean on symmetric constructions", "[estimation][property]") {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> ua(0.6, 2.5), ub(0.2, 2.0);
  for (int c = 0; c < 50; ++c) {
    const double b = ub(rng);
    const ItemBank bank({ItemParams("lo", ua(rng), {-b}), ItemParams("hi", ua(rng), {b}),
                         ItemParams("mid", ua(rng), {0.3 * b})});
    const ResponseSet rs{{"lo", 1}, {"hi", 0}, {"mid", c % 2}};
    const auto mle = grmsel::estimate_theta_mle(rs, bank);
    const auto map = grmsel::estimate_theta_map(rs, bank, NormalDist{0.0, 1.0});
    REQUIRE(std::abs(map.estimate) <= std::abs(mle.estimate));
  }
}

TEST_CASE("trajectory prior", "[estimation]") {
  TrajectoryPrior p;
  REQUIRE(p.beta1 == 0.075);
  REQUIRE(p.var_u1 == 0.027);
  REQUIRE(p.rho == 0.085);
  REQUIRE(p.cov_u0u1() == Approx(0.085 * std::sqrt(0.027)).epsilon(1e-15));
  const auto prec = p.precision();
  const double det = p.var_u0 * p.var_u1 - p.cov_u0u1() * p.cov_u0u1();
  REQUIRE(prec[0] == Approx(p.var_u1 / det).epsilon(1e-14));
  REQUIRE(prec[1] == Approx(-p.cov_u0u1() / det).epsilon(1e-14));
  REQUIRE(prec[2] == Approx(p.var_u0 / det).epsilon(1e-14));
  p.rho = 1.0;
  REQUIRE_THROWS_AS(p.validate(), grmsel::DomainError);
  p.rho = 0.0;
  p.var_u1 = 0.0;
  REQUIRE_THROWS_AS(p.validate(), grmsel::DomainError);
}

TEST_CASE("trajectory with no responses sits at the prior mode", "[estimation]") {
  const auto bank = grmsel::io::fixtures::synthetic34_bank();
  const auto est = grmsel::estimate_trajectory_map(std::vector<grmsel::Observation>{}, bank, TrajectoryPrior{});
  REQUIRE(est.u0 == 0.0);
  REQUIRE(est.u1 == 0.0);
  REQUIRE(est.converged);
  const TrajectoryPrior p;
  REQUIRE(est.covariance[0] == Approx(p.var_u0).epsilon(1e-12));
  REQUIRE(est.covariance[1] == Approx(p.cov_u0u1()).epsilon(1e-12));
  REQUIRE(est.covariance[2] == Approx(p.var_u1).epsilon(1e-12));
}

TEST_CASE("single visit at rho = 0 reduces to single-occasion MAP", "[estimation]") {
  const auto bank = grmsel::io::fixtures::synthetic34_bank();
  std::mt19937_64 rng(44);
  TrajectoryPrior prior;
  prior.rho = 0.0;
  prior.beta0 = 0.2;
  for (int c = 0; c < 10; ++c) {
    const auto rs = draw_responses(bank, 0.5, rng);
    std::vector<grmsel::TimedResponses> visits{{0.0, rs}};
    const auto traj = grmsel::estimate_trajectory_map(visits, bank, prior);
    const auto map = grmsel::estimate_theta_map(rs, bank, NormalDist{prior.beta0, std::sqrt(prior.var_u0)});
    REQUIRE(traj.converged);
    REQUIRE(traj.u1 == Approx(0.0).margin(1e-10));
    REQUIRE(grmsel::predict_severity(traj, prior, 0.0) == Approx(map.estimate).margin(1e-7));
    REQUIRE(traj.severity.size() == 1);
  }
}

TEST_CASE("trajectory Newton is monotone and converges", "[estimation][property]") {
  const auto bank = grmsel::io::fixtures::synthetic34_bank();
  std::mt19937_64 rng(45);
  std::normal_distribution<double> z(0.0, 1.0);
  const TrajectoryPrior prior;
  for (int c = 0; c < 30; ++c) {
    const double u0 = z(rng), u1 = std::sqrt(prior.var_u1) * z(rng);
    std::vector<grmsel::TimedResponses> visits;
    for (double t : {0.0, 1.0, 2.5, 4.0})
      visits.push_back({t, draw_responses(bank, prior.beta0 + u0 + (prior.beta1 + u1) * t, rng)});
    const auto est = grmsel::estimate_trajectory_map(visits, bank, prior);
    REQUIRE(est.converged);
    REQUIRE(est.gradient_norm < 1e-8);
    for (std::size_t i = 1; i < est.objective_trace.size(); ++i) {
      const double prev = est.objective_trace[i - 1];
      REQUIRE(est.objective_trace[i] >= prev - 1e-12 * (1.0 + std::abs(prev)));
    }
    REQUIRE(est.covariance[0] > 0.0);
    REQUIRE(est.covariance[2] > 0.0);
    REQUIRE(est.covariance[0] * est.covariance[2] - est.covariance[1] * est.covariance[1] > 0.0);

    // the reported mode is a local maximum of the objective
    std::vector<grmsel::Observation> obs;
    for (const auto& v : visits)
      for (auto o : grmsel::resolve(v.responses, bank)) {
        o.time = v.time;
        obs.push_back(o);
      }
    const double best = grmsel::trajectory_objective(obs, bank, prior, est.u0, est.u1);
    for (double d : {-1e-3, 1e-3}) {
      REQUIRE(grmsel::trajectory_objective(obs, bank, prior, est.u0 + d, est.u1) <= best);
      REQUIRE(grmsel::trajectory_objective(obs, bank, prior, est.u0, est.u1 + d) <= best);
    }
  }
}

TEST_CASE("trajectory recovery beats a single visit", "[estimation]") {
  // 10 visits x 10 items; the trajectory RMSE against the true severities is
  // below the single-visit asymptotic SD of the same 10 items.
  const auto full = grmsel::io::fixtures::synthetic34_bank();
  const ItemBank bank(std::vector<ItemParams>(full.items().begin(), full.items().begin() + 10));
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> z(0.0, 1.0);
  const TrajectoryPrior prior;
  double sq = 0.0, sd_sum = 0.0;
  int count = 0;
  for (int s = 0; s < 40; ++s) {
    const double u0 = z(rng);
    const double u1 = std::sqrt(prior.var_u1) * (prior.rho * u0 + std::sqrt(1 - prior.rho * prior.rho) * z(rng));
    std::vector<grmsel::TimedResponses> visits;
    std::vector<double> truth;
    for (int v = 0; v < 10; ++v) {
      const double t = v;
      truth.push_back(prior.beta0 + u0 + (prior.beta1 + u1) * t);
      visits.push_back({t, draw_responses(bank, truth.back(), rng)});
    }
    const auto est = grmsel::estimate_trajectory_map(visits, bank, prior);
    for (int v = 0; v < 10; ++v) {
      const double e = est.severity[static_cast<std::size_t>(v)] - truth[static_cast<std::size_t>(v)];
      sq += e * e;
      sd_sum += grmsel::conditional_sd(bank.items(), truth[static_cast<std::size_t>(v)]);
      ++count;
    }
  }
  REQUIRE(std::sqrt(sq / count) < sd_sum / count);
}

TEST_CASE("predict_severity", "[estimation]") {
  grmsel::TrajectoryEstimate est;
  const TrajectoryPrior prior;
  REQUIRE(grmsel::predict_severity(est, prior, 4.0) == Approx(0.30).epsilon(1e-14));
  est.u0 = 0.4;
  est.u1 = -0.01;
  REQUIRE(grmsel::predict_severity(est, prior, 0.0) == 0.4);
  REQUIRE(grmsel::predict_severity(est, prior, 2.0) == Approx(0.4 + 0.065 * 2.0).epsilon(1e-14));
}
