#include "grmsel/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "box_newton.hpp"
#include "grmsel/parallel.hpp"
#include "grmsel/population.hpp"

namespace grmsel {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> cumulative_thresholds(double first, std::span<const double> increments) {
  std::vector<double> b{first};
  for (double inc : increments) b.push_back(b.back() + inc);
  return b;
}

}  // namespace

DegenerateItem::DegenerateItem(const std::string& item_id)
    : DomainError("degenerate item '" + item_id + "': responses observed at fewer than two levels"),
      item_id_(item_id) {}

std::vector<ItemSpec> item_specs(const ItemBank& bank) {
  std::vector<ItemSpec> out;
  for (const auto& item : bank) out.push_back({item.id(), item.max_level()});
  return out;
}

std::vector<SubjectData> group_by_subject(const ResponsePanel& panel,
                                          const std::vector<ItemSpec>& items) {
  std::unordered_map<std::string, std::size_t> item_index;
  for (std::size_t i = 0; i < items.size(); ++i) item_index.emplace(items[i].id, i);

  std::vector<SubjectData> out;
  std::unordered_map<std::string, std::size_t> subject_index;
  std::set<std::tuple<std::size_t, double, std::size_t>> seen;
  for (std::size_t r = 0; r < panel.records.size(); ++r) {
    const auto& rec = panel.records[r];
    auto it = item_index.find(rec.item_id);
    if (it == item_index.end()) {
      throw DomainError("panel record " + std::to_string(r + 1) + ": unknown item id '" +
                        rec.item_id + "'");
    }
    const std::size_t i = it->second;
    if (rec.level < 0 || rec.level > items[i].max_level) {
      throw DomainError("panel record " + std::to_string(r + 1) + ": level " +
                        std::to_string(rec.level) + " out of range for item '" + rec.item_id + "'");
    }
    if (!std::isfinite(rec.time)) {
      throw DomainError("panel record " + std::to_string(r + 1) + ": non-finite time");
    }
    auto [sit, inserted] = subject_index.emplace(rec.subject_id, out.size());
    if (inserted) out.push_back({rec.subject_id, {}});
    if (!seen.emplace(sit->second, rec.time, i).second) {
      throw DomainError("panel record " + std::to_string(r + 1) + ": duplicate (subject, time, item) = (" +
                        rec.subject_id + ", " + std::to_string(rec.time) + ", " + rec.item_id + ")");
    }
    out[sit->second].observations.push_back({i, rec.level, rec.time});
  }
  return out;
}

ResponsePanel first_visit_slice(const ResponsePanel& panel) {
  std::unordered_map<std::string, double> first;
  for (const auto& rec : panel.records) {
    auto [it, inserted] = first.emplace(rec.subject_id, rec.time);
    if (!inserted) it->second = std::min(it->second, rec.time);
  }
  ResponsePanel out;
  for (const auto& rec : panel.records) {
    if (rec.time == first.at(rec.subject_id)) out.records.push_back(rec);
  }
  return out;
}

void SimulationScenario::validate() const {
  population.validate();
  if (n_subjects < 1) throw DomainError("scenario: n_subjects must be positive");
  auto check = [](const std::vector<double>& times) {
    if (times.empty()) throw DomainError("scenario: empty visit schedule");
    for (std::size_t v = 0; v < times.size(); ++v) {
      if (!(times[v] >= 0.0)) throw DomainError("scenario: visit times must be >= 0");
      if (v > 0 && !(times[v] > times[v - 1])) {
        throw DomainError("scenario: visit times must be increasing");
      }
    }
  };
  if (schedules.empty()) {
    check(visit_times);
  } else {
    if (schedules.size() != n_subjects) {
      throw DomainError("scenario: schedules must list one schedule per subject");
    }
    for (const auto& s : schedules) check(s);
  }
}

const std::vector<double>& SimulationScenario::schedule(std::size_t subject) const {
  return schedules.empty() ? visit_times : schedules.at(subject);
}

SimulatedPanel simulate_longitudinal(const SimulationScenario& scenario) {
  scenario.validate();
  const auto& pop = scenario.population;
  const double sd0 = std::sqrt(pop.var_u0);
  const double sd1 = std::sqrt(pop.var_u1);
  const double resid = std::sqrt(1.0 - pop.rho * pop.rho);

  std::mt19937_64 rng(scenario.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const int width = static_cast<int>(std::to_string(scenario.n_subjects).size());
  SimulatedPanel out;
  for (std::size_t j = 0; j < scenario.n_subjects; ++j) {
    std::ostringstream id;
    id << 's' << std::setw(width) << std::setfill('0') << j + 1;
    const double z0 = normal(rng);
    const double z1 = normal(rng);
    const double u0 = sd0 * z0;
    const double u1 = sd1 * (pop.rho * z0 + resid * z1);
    out.subject_ids.push_back(id.str());
    out.effects.push_back({u0, u1});
    for (double t : scenario.schedule(j)) {
      const double theta = pop.beta0 + u0 + (pop.beta1 + u1) * t;
      for (const auto& item : scenario.bank) {
        const double draw = uniform(rng);
        int level = 0;
        for (int m = 1; m <= item.max_level(); ++m) {
          if (draw < prob_gte(item, m, theta)) level = m;
        }
        out.panel.records.push_back({id.str(), t, item.id(), level});
      }
    }
  }
  return out;
}

void TruncatedNormal::validate() const {
  if (!(variance > 0.0)) throw DomainError("truncated normal prior: variance must be positive");
  if (!(lower < upper)) throw DomainError("truncated normal prior: bounds must be ordered");
}

double TruncatedNormal::project(double x) const noexcept { return std::clamp(x, lower, upper); }

double TruncatedNormal::log_density(double x) const noexcept {
  if (!contains(x)) return kNegInf;
  const double z = x - mean;
  return -0.5 * z * z / variance;
}

PriorSpec default_priors() {
  return PriorSpec{
      TruncatedNormal{0.0, 1.0, -1.0, 1.0},
      TruncatedNormal{0.0, 1.0, 0.01, 2.0},
      TruncatedNormal{1.0, 1.0, 0.01, 10.0},
  };
}

// ---------------------------------------------------------------------------
// Stage 1

CrossSectionalFit fit_grm_cross_sectional(const ResponsePanel& panel,
                                          const std::vector<ItemSpec>& items,
                                          const CrossSectionalOptions& options) {
  if (items.empty()) throw DomainError("no items to calibrate");
  const auto subjects = group_by_subject(first_visit_slice(panel), items);
  if (subjects.empty()) throw DomainError("panel has no responses");
  const std::size_t n_items = items.size();
  const std::size_t n_subj = subjects.size();

  // Observed level counts; reject items stuck at one level.
  std::vector<std::vector<double>> level_counts(n_items);
  for (std::size_t i = 0; i < n_items; ++i) level_counts[i].assign(items[i].max_level + 1, 0.0);
  for (const auto& s : subjects) {
    for (const auto& o : s.observations) level_counts[o.item][o.level] += 1.0;
  }
  for (std::size_t i = 0; i < n_items; ++i) {
    const auto distinct =
        std::count_if(level_counts[i].begin(), level_counts[i].end(), [](double c) { return c > 0; });
    if (distinct < 2) throw DegenerateItem(items[i].id);
  }

  // Raw parameters per item: a, b_1, then increments b_k - b_{k-1}.
  std::vector<std::vector<double>> raw(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    const int top = items[i].max_level;
    double total = 0.0;
    for (double c : level_counts[i]) total += c;
    std::vector<double> b(top);
    double at_or_above = total;
    for (int m = 1; m <= top; ++m) {
      at_or_above -= level_counts[i][m - 1];
      const double p = std::clamp(at_or_above / total, 0.5 / total, 1.0 - 0.5 / total);
      b[m - 1] = -std::log(p / (1.0 - p));
      if (m > 1) b[m - 1] = std::max(b[m - 1], b[m - 2] + 0.05);
    }
    raw[i].push_back(1.0);
    raw[i].push_back(std::clamp(b[0], -10.0, 10.0));
    for (int m = 1; m < top; ++m) raw[i].push_back(std::clamp(b[m] - b[m - 1], 0.01, 10.0));
  }
  auto to_item = [&](std::size_t i, std::span<const double> x) {
    return ItemParams(items[i].id, x[0], cumulative_thresholds(x[1], x.subspan(2)));
  };

  const QuadratureRule rule = gauss_hermite_normal(options.quadrature_nodes);
  const std::size_t nq = rule.size();
  std::vector<double> log_weight(nq);
  for (std::size_t q = 0; q < nq; ++q) log_weight[q] = std::log(rule.weights[q]);

  CrossSectionalFit fit{ItemBank({to_item(0, raw[0])}), {}, {}, {}, {}, 0, false};
  std::vector<double> posterior(n_subj * nq);
  std::vector<double> subject_ll(n_subj);
  // log P(level m | node q) per item
  std::vector<std::vector<double>> log_p(n_items);

  for (int iter = 0;; ++iter) {
    std::vector<ItemParams> current;
    for (std::size_t i = 0; i < n_items; ++i) current.push_back(to_item(i, raw[i]));
    for (std::size_t i = 0; i < n_items; ++i) {
      const int levels = items[i].max_level + 1;
      log_p[i].assign(levels * nq, 0.0);
      for (int m = 0; m < levels; ++m) {
        for (std::size_t q = 0; q < nq; ++q) {
          log_p[i][m * nq + q] = log_prob_eq(current[i], m, rule.nodes[q]);
        }
      }
    }

    // E-step
    parallel_for(n_subj, options.threads, [&](std::size_t j) {
      double* post = posterior.data() + j * nq;
      for (std::size_t q = 0; q < nq; ++q) post[q] = log_weight[q];
      for (const auto& o : subjects[j].observations) {
        const double* lp = log_p[o.item].data() + o.level * nq;
        for (std::size_t q = 0; q < nq; ++q) post[q] += lp[q];
      }
      const double peak = *std::max_element(post, post + nq);
      double total = 0.0;
      for (std::size_t q = 0; q < nq; ++q) {
        post[q] = std::exp(post[q] - peak);
        total += post[q];
      }
      for (std::size_t q = 0; q < nq; ++q) post[q] /= total;
      subject_ll[j] = peak + std::log(total);
    });
    double ll = 0.0;
    for (double v : subject_ll) ll += v;
    fit.loglik_trace.push_back(ll);
    fit.iterations = iter;

    const auto& trace = fit.loglik_trace;
    if (trace.size() >= 2 &&
        std::abs(trace.back() - trace[trace.size() - 2]) < options.tolerance * std::abs(trace.back())) {
      fit.converged = true;
      break;
    }
    if (iter >= options.max_iterations) break;

    // Expected level counts per node.
    std::vector<std::vector<double>> expected(n_items);
    for (std::size_t i = 0; i < n_items; ++i) expected[i].assign((items[i].max_level + 1) * nq, 0.0);
    for (std::size_t j = 0; j < n_subj; ++j) {
      const double* post = posterior.data() + j * nq;
      for (const auto& o : subjects[j].observations) {
        double* e = expected[o.item].data() + o.level * nq;
        for (std::size_t q = 0; q < nq; ++q) e[q] += post[q];
      }
    }

    // M-step
    parallel_for(n_items, options.threads, [&](std::size_t i) {
      const int levels = items[i].max_level + 1;
      const auto& r = expected[i];
      detail::BoxProblem problem;
      problem.value = [&](std::span<const double> x) {
        const ItemParams item = to_item(i, x);
        double total = 0.0;
        for (int m = 0; m < levels; ++m) {
          for (std::size_t q = 0; q < nq; ++q) {
            const double w = r[m * nq + q];
            if (w > 0.0) total += w * log_prob_eq(item, m, rule.nodes[q]);
          }
        }
        return total;
      };
      problem.gradient = [&](std::span<const double> x, std::span<double> g) {
        const ItemParams item = to_item(i, x);
        std::vector<double> natural(levels, 0.0);  // d/d(a, b_1..b_M)
        for (int m = 0; m < levels; ++m) {
          for (std::size_t q = 0; q < nq; ++q) {
            const double w = r[m * nq + q];
            if (w > 0.0) detail::accumulate_item_gradient(item, m, rule.nodes[q], w, natural);
          }
        }
        g[0] = natural[0];
        double tail = 0.0;
        for (int k = levels - 1; k >= 1; --k) {
          tail += natural[k];
          g[k] = tail;  // k = 1 is b_1; k >= 2 are increments
        }
      };
      problem.lower.assign(levels, 0.01);
      problem.upper.assign(levels, 10.0);
      problem.lower[0] = 0.05;
      problem.upper[0] = 20.0;
      problem.lower[1] = -10.0;
      problem.upper[1] = 10.0;
      raw[i] = detail::maximize_box(problem, raw[i], 20).x;
    });
  }

  std::vector<ItemParams> final_items;
  for (std::size_t i = 0; i < n_items; ++i) final_items.push_back(to_item(i, raw[i]));
  fit.bank = ItemBank(std::move(final_items));
  for (std::size_t j = 0; j < n_subj; ++j) {
    const double* post = posterior.data() + j * nq;
    double mean = 0.0;
    for (std::size_t q = 0; q < nq; ++q) mean += post[q] * rule.nodes[q];
    double var = 0.0;
    for (std::size_t q = 0; q < nq; ++q) var += post[q] * (rule.nodes[q] - mean) * (rule.nodes[q] - mean);
    fit.subject_ids.push_back(subjects[j].id);
    fit.theta_eap.push_back(mean);
    fit.theta_psd.push_back(std::sqrt(var));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Parameter ledger

LedgerRow ParameterLedger::total() const {
  LedgerRow t{"Total", 0, 0, 0, 0, 0};
  for (const auto& r : rows) {
    t.n += r.n;
    t.fixed += r.fixed;
    t.estimated += r.estimated;
    t.stage1 += r.stage1;
    t.stage2 += r.stage2;
  }
  return t;
}

ParameterLedger parameter_ledger(const std::vector<int>& max_levels, std::size_t n_subjects,
                                 int fixed_lower_thresholds) {
  std::size_t thresholds = 0;
  std::size_t lower = 0;
  for (int m : max_levels) {
    thresholds += static_cast<std::size_t>(m);
    lower += static_cast<std::size_t>(std::min(m, fixed_lower_thresholds));
  }
  const std::size_t n_items = max_levels.size();
  ParameterLedger ledger;
  ledger.rows = {
      {"Mean intercept", 1, 1, 0, 0, 0},
      {"Mean slope", 1, 0, 1, 0, 1},
      {"Random intercept variance", 1, 1, 0, 0, 0},
      {"Random slope variance", 1, 0, 1, 0, 1},
      {"Random effects correlation", 1, 0, 1, 0, 1},
      {"Item thresholds", thresholds, 0, thresholds, lower, thresholds - lower},
      {"Item discrimination", n_items, 0, n_items, n_items, 0},
      {"Individual random intercepts", n_subjects, 0, n_subjects, 0, n_subjects},
      {"Individual random slopes", n_subjects, 0, n_subjects, 0, n_subjects},
  };
  return ledger;
}

// ---------------------------------------------------------------------------
// Stage 2
//
// Objective: Laplace approximation of the log marginal posterior of the
// population and item parameters, with each subject's (u0, u1) at its mode.
// Block proposals come from cheap surrogates (profile Newton for beta1, Newton
// on the joint objective for increments, Laplace-EM for Sigma); a proposal is
// kept only if the objective strictly increases.

TrajectoryPrior FitResult::population() const {
  return TrajectoryPrior{beta0, beta1, var_u0, var_u1, rho};
}

namespace {

struct Stage2Params {
  double beta1 = 0.0;
  double var_u1 = 0.1;
  double rho = 0.0;
  std::vector<std::vector<double>> increments;  // free levels above the fixed ones

  TrajectoryPrior population() const { return TrajectoryPrior{0.0, beta1, 1.0, var_u1, rho}; }
};

struct Stage2Evaluation {
  double value = kNegInf;
  std::vector<std::array<double, 2>> u;
  std::vector<std::array<double, 3>> cov;  // inverse negated Hessian per subject
  std::size_t unconverged = 0;
};

class Stage2Problem {
 public:
  Stage2Problem(const std::vector<SubjectData>& subjects, const ItemBank& stage_one,
                const PriorSpec& priors, int fixed_lower, int threads)
      : subjects_(subjects), priors_(priors), threads_(threads) {
    for (const auto& item : stage_one) {
      ids_.push_back(item.id());
      a_.push_back(item.discrimination());
      const auto& b = item.thresholds();
      const int keep = std::min(item.max_level(), fixed_lower);
      fixed_.emplace_back(b.begin(), b.begin() + keep);
    }
  }

  std::size_t n_items() const { return ids_.size(); }
  std::size_t n_subjects() const { return subjects_.size(); }
  const std::vector<double>& fixed(std::size_t i) const { return fixed_[i]; }

  ItemParams item(std::size_t i, std::span<const double> increments) const {
    auto b = fixed_[i];
    for (double inc : increments) b.push_back(b.back() + inc);
    return ItemParams(ids_[i], a_[i], std::move(b));
  }

  ItemBank bank(const Stage2Params& p) const {
    std::vector<ItemParams> items;
    for (std::size_t i = 0; i < n_items(); ++i) items.push_back(item(i, p.increments[i]));
    return ItemBank(std::move(items));
  }

  double log_prior(const Stage2Params& p) const {
    double total = priors_.slope.log_density(p.beta1) + priors_.slope_variance.log_density(p.var_u1);
    for (const auto& inc : p.increments) {
      for (double v : inc) total += priors_.threshold_increment.log_density(v);
    }
    return total;
  }

  Stage2Evaluation evaluate(const Stage2Params& p, const std::vector<std::array<double, 2>>& start) const {
    const ItemBank b = bank(p);
    const TrajectoryPrior pop = p.population();
    const std::size_t n = n_subjects();
    Stage2Evaluation ev;
    ev.u.resize(n);
    ev.cov.resize(n);
    std::vector<double> terms(n);
    std::vector<char> converged(n);
    parallel_for(n, threads_, [&](std::size_t j) {
      const auto est = estimate_trajectory_map(subjects_[j].observations, b, pop, {}, start[j]);
      ev.u[j] = {est.u0, est.u1};
      ev.cov[j] = est.covariance;
      const double det_cov = est.covariance[0] * est.covariance[2] - est.covariance[1] * est.covariance[1];
      terms[j] = trajectory_objective(subjects_[j].observations, b, pop, est.u0, est.u1) + 0.5 * std::log(det_cov);
      converged[j] = est.converged;
    });
    double total = 0.0;
    for (double t : terms) total += t;
    const double log_det_sigma = std::log(p.var_u1 * (1.0 - p.rho * p.rho));
    ev.value = total - 0.5 * static_cast<double>(n) * log_det_sigma + log_prior(p);
    if (!std::isfinite(ev.value)) ev.value = kNegInf;
    ev.unconverged = static_cast<std::size_t>(std::count(converged.begin(), converged.end(), 0));
    return ev;
  }

  const std::vector<SubjectData>& subjects() const { return subjects_; }
  const PriorSpec& priors() const { return priors_; }
  int threads() const { return threads_; }

 private:
  const std::vector<SubjectData>& subjects_;
  const PriorSpec& priors_;
  int threads_;
  std::vector<std::string> ids_;
  std::vector<double> a_;
  std::vector<std::vector<double>> fixed_;
};

// Gradient of the Laplace objective. Each subject's mode moves with the
// parameters, so besides the direct terms the log-determinant picks up the
// third derivative of the log-likelihood through the mode (envelope argument
// for the joint part). Also returns step metrics: the profile curvature in
// beta1 and an outer-product metric per item for the increments.
struct Stage2Gradient {
  double beta1 = 0.0;
  double var_u1 = 0.0;
  double rho = 0.0;
  double beta1_curvature = 0.0;
  std::vector<std::vector<double>> increments;
  std::vector<std::vector<double>> metric;  // n_free x n_free per item, row-major
};

Stage2Gradient stage2_gradient(const Stage2Problem& problem, const Stage2Params& p,
                               const Stage2Evaluation& ev) {
  constexpr double kThetaStep = 1e-5;
  constexpr double kThresholdStep = 1e-6;
  const ItemBank bank = problem.bank(p);
  const TrajectoryPrior pop = p.population();
  const auto prec = pop.precision();
  const auto& priors = problem.priors();
  const auto& inc_prior = priors.threshold_increment;
  const std::size_t n_items = problem.n_items();

  // Items with one free threshold nudged up/down: [item][free index] -> (plus, minus).
  std::vector<std::vector<std::pair<ItemParams, ItemParams>>> nudged(n_items);
  std::vector<std::size_t> keep(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    keep[i] = problem.fixed(i).size();
    const auto& b = bank[i].thresholds();
    for (std::size_t k = keep[i]; k < b.size(); ++k) {
      auto up = b;
      auto down = b;
      up[k] += kThresholdStep;
      down[k] -= kThresholdStep;
      nudged[i].emplace_back(ItemParams(bank[i].id(), bank[i].discrimination(), up),
                             ItemParams(bank[i].id(), bank[i].discrimination(), down));
    }
  }

  Stage2Gradient out;
  std::vector<std::vector<double>> by_threshold(n_items);
  out.increments.resize(n_items);
  out.metric.resize(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t n_free = nudged[i].size();
    by_threshold[i].assign(n_free, 0.0);
    out.metric[i].assign(n_free * n_free, 0.0);
  }

  // d Sigma / d(var_u1) and d Sigma / d(rho), then dP = -P dSigma P.
  const double sd1 = std::sqrt(p.var_u1);
  const std::array<std::array<double, 3>, 2> d_sigma{{{0.0, 0.5 * p.rho / sd1, 1.0}, {0.0, sd1, 0.0}}};
  auto sandwich = [&](const std::array<double, 3>& d) {
    // -P d P for symmetric 2x2 stored as {00, 01, 11}
    const double m00 = prec[0] * d[0] + prec[1] * d[1];
    const double m01 = prec[0] * d[1] + prec[1] * d[2];
    const double m10 = prec[1] * d[0] + prec[2] * d[1];
    const double m11 = prec[1] * d[1] + prec[2] * d[2];
    return std::array<double, 3>{-(m00 * prec[0] + m01 * prec[1]), -(m00 * prec[1] + m01 * prec[2]),
                                 -(m10 * prec[1] + m11 * prec[2])};
  };
  const std::array<std::array<double, 3>, 2> d_prec{sandwich(d_sigma[0]), sandwich(d_sigma[1])};
  double g_sigma[2] = {0.0, 0.0};

  std::vector<double> natural;
  std::vector<double> score_inc;
  const auto& subjects = problem.subjects();
  for (std::size_t j = 0; j < subjects.size(); ++j) {
    const auto& obs = subjects[j].observations;
    const auto& u = ev.u[j];
    const auto& c = ev.cov[j];
    struct Local {
      double theta, s, curv, r;
    };
    std::vector<Local> local(obs.size());
    double q0 = 0.0, q1 = 0.0;
    double a01 = 0.0, a11 = 0.0;
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const auto& o = obs[k];
      const auto& item = bank[o.item];
      const double t = o.time;
      const double theta = u[0] + (p.beta1 + u[1]) * t;
      const double s = dlog_prob_eq(item, o.level, theta);
      const double curv = neg_d2log_prob_eq(item, o.level, theta);
      const double dcurv = (neg_d2log_prob_eq(item, o.level, theta + kThetaStep) -
                            neg_d2log_prob_eq(item, o.level, theta - kThetaStep)) /
                           (2.0 * kThetaStep);
      const double leverage = c[0] + 2.0 * t * c[1] + t * t * c[2];
      const double r = -0.5 * leverage;
      q0 += r * dcurv;
      q1 += r * dcurv * t;
      a01 += curv * t;
      a11 += curv * t * t;
      local[k] = {theta, s, curv, r};
      out.beta1 += s * t + r * dcurv * t;
    }
    // v = H^{-1} q: sensitivity of the log-determinant term to the mode.
    const double v0 = c[0] * q0 + c[1] * q1;
    const double v1 = c[1] * q0 + c[2] * q1;
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const double t = obs[k].time;
      out.beta1 += (v0 + v1 * t) * (-local[k].curv * t);
    }
    out.beta1_curvature += a11 - (a01 * a01 * c[0] + 2.0 * a01 * a11 * c[1] + a11 * a11 * c[2]);

    for (int d = 0; d < 2; ++d) {
      const auto& dp = d_prec[d];
      const double quad = dp[0] * u[0] * u[0] + 2.0 * dp[1] * u[0] * u[1] + dp[2] * u[1] * u[1];
      const double trace = c[0] * dp[0] + 2.0 * c[1] * dp[1] + c[2] * dp[2];
      const double dpu0 = dp[0] * u[0] + dp[1] * u[1];
      const double dpu1 = dp[1] * u[0] + dp[2] * u[1];
      g_sigma[d] += -0.5 * quad - 0.5 * trace - (v0 * dpu0 + v1 * dpu1);
    }

    for (std::size_t k = 0; k < obs.size(); ++k) {
      const auto& o = obs[k];
      const std::size_t i = o.item;
      const std::size_t n_free = nudged[i].size();
      if (n_free == 0) continue;
      const auto& item = bank[i];
      const double t = o.time;
      const double theta = local[k].theta;
      natural.assign(item.max_level() + 1, 0.0);
      detail::accumulate_item_gradient(item, o.level, theta, 1.0, natural);
      score_inc.assign(n_free, 0.0);
      // Level m involves thresholds m and m + 1 (1-based), i.e. indices m - 1 and m.
      for (int idx = o.level - 1; idx <= o.level; ++idx) {
        if (idx < static_cast<int>(keep[i]) || idx >= item.max_level()) continue;
        const std::size_t f = static_cast<std::size_t>(idx) - keep[i];
        const auto& [up, down] = nudged[i][f];
        const double ds = (dlog_prob_eq(up, o.level, theta) - dlog_prob_eq(down, o.level, theta)) /
                          (2.0 * kThresholdStep);
        const double dc = (neg_d2log_prob_eq(up, o.level, theta) - neg_d2log_prob_eq(down, o.level, theta)) /
                          (2.0 * kThresholdStep);
        const double dl = natural[idx + 1];
        by_threshold[i][f] += dl + local[k].r * dc + (v0 + v1 * t) * ds;
        for (std::size_t l = 0; l <= f; ++l) score_inc[l] += dl;
      }
      auto& m = out.metric[i];
      for (std::size_t a = 0; a < n_free; ++a) {
        for (std::size_t b = 0; b < n_free; ++b) m[a * n_free + b] += score_inc[a] * score_inc[b];
      }
    }
  }

  out.beta1 -= (p.beta1 - priors.slope.mean) / priors.slope.variance;
  out.beta1_curvature += 1.0 / priors.slope.variance;
  const double n = static_cast<double>(subjects.size());
  for (int d = 0; d < 2; ++d) {
    // -n/2 d log det Sigma = -n/2 tr(P dSigma)
    const auto& ds = d_sigma[d];
    g_sigma[d] -= 0.5 * n * (prec[0] * ds[0] + 2.0 * prec[1] * ds[1] + prec[2] * ds[2]);
  }
  out.var_u1 = g_sigma[0] - (p.var_u1 - priors.slope_variance.mean) / priors.slope_variance.variance;
  out.rho = g_sigma[1];
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t n_free = by_threshold[i].size();
    out.increments[i].assign(n_free, 0.0);
    double tail = 0.0;
    for (std::size_t f = n_free; f-- > 0;) {
      tail += by_threshold[i][f];
      out.increments[i][f] = tail - (p.increments[i][f] - inc_prior.mean) / inc_prior.variance;
      out.metric[i][f * n_free + f] += 1.0 / inc_prior.variance;
    }
  }
  return out;
}

// Solves the small symmetric positive definite system m x = g in place of g;
// false if m is not positive definite.
bool solve_spd(std::vector<double> m, std::vector<double>& g) {
  const std::size_t n = g.size();
  for (std::size_t j = 0; j < n; ++j) {
    double d = m[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= m[j * n + k] * m[j * n + k];
    if (!(d > 0.0)) return false;
    d = std::sqrt(d);
    m[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= m[i * n + k] * m[j * n + k];
      m[i * n + j] = s / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = g[i];
    for (std::size_t k = 0; k < i; ++k) s -= m[i * n + k] * g[k];
    g[i] = s / m[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = g[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= m[k * n + i] * g[k];
    g[i] = s / m[i * n + i];
  }
  return true;
}
Stage2Params interpolate(const Stage2Params& from, const Stage2Params& to, double alpha) {
  Stage2Params out = from;
  out.beta1 = from.beta1 + alpha * (to.beta1 - from.beta1);
  out.var_u1 = from.var_u1 + alpha * (to.var_u1 - from.var_u1);
  out.rho = from.rho + alpha * (to.rho - from.rho);
  for (std::size_t i = 0; i < out.increments.size(); ++i) {
    for (std::size_t f = 0; f < out.increments[i].size(); ++f) {
      out.increments[i][f] += alpha * (to.increments[i][f] - from.increments[i][f]);
    }
  }
  return out;
}

}  // namespace

FitResult fit_longitudinal_map(const ResponsePanel& panel, const ItemBank& stage_one,
                               const PriorSpec& priors, const LongitudinalOptions& options) {
  priors.slope.validate();
  priors.slope_variance.validate();
  priors.threshold_increment.validate();
  if (!(options.max_abs_rho > 0.0 && options.max_abs_rho < 1.0)) {
    throw DomainError("max_abs_rho must lie in (0, 1)");
  }
  const auto subjects = group_by_subject(panel, item_specs(stage_one));
  if (subjects.empty()) throw DomainError("panel has no responses");
  const int fixed_lower = std::max(1, options.fixed_lower_thresholds);
  const Stage2Problem problem(subjects, stage_one, priors, fixed_lower, options.threads);
  const std::size_t n_items = problem.n_items();
  const std::size_t n_subj = problem.n_subjects();
  const auto& inc_prior = priors.threshold_increment;

  FitResult result{stage_one, 0.0, 0.0, 1.0, 0.0, 0.0, {}, {}, 0.0, 0, false, {}, {}};
  auto warn = [&](const std::string& msg) { result.warnings.push_back(msg); };

  Stage2Params params;
  for (std::size_t i = 0; i < n_items; ++i) {
    const auto& item = stage_one[i];
    const auto& b = item.thresholds();
    std::vector<double> inc;
    for (int k = static_cast<int>(problem.fixed(i).size()); k < item.max_level(); ++k) {
      const double raw = b[k] - b[k - 1];
      const double projected = inc_prior.project(raw);
      if (projected != raw) {
        std::ostringstream msg;
        msg << "item '" << item.id() << "': initial increment for level " << k + 1 << " (" << raw
            << ") projected onto prior bounds";
        warn(msg.str());
      }
      inc.push_back(projected);
    }
    params.increments.push_back(std::move(inc));
  }
  params.beta1 = priors.slope.project(options.initial_beta1);
  params.var_u1 = priors.slope_variance.project(options.initial_var_u1);
  params.rho = std::clamp(options.initial_rho, -options.max_abs_rho, options.max_abs_rho);
  auto clamp_params = [&](Stage2Params& p) {
    p.beta1 = priors.slope.project(p.beta1);
    p.var_u1 = priors.slope_variance.project(p.var_u1);
    p.rho = std::clamp(p.rho, -options.max_abs_rho, options.max_abs_rho);
    for (auto& inc : p.increments) {
      for (double& v : inc) v = inc_prior.project(v);
    }
  };

  Stage2Evaluation current = problem.evaluate(params, std::vector<std::array<double, 2>>(n_subj, {0.0, 0.0}));
  if (!std::isfinite(current.value)) throw std::runtime_error("stage-2 objective is not finite at the start");
  result.objective_trace.push_back(current.value);

  // Moves towards `proposal`, halving until the objective strictly increases;
  // a full step that succeeds is extended while it keeps improving. Returns the
  // accepted multiple of the step, 0 when nothing was accepted.
  auto try_move = [&](const Stage2Params& proposal, bool extend) {
    const Stage2Params origin = params;
    for (int halving = 0; halving < 6; ++halving) {
      const double alpha = std::ldexp(1.0, -halving);
      Stage2Params candidate = interpolate(origin, proposal, alpha);
      auto ev = problem.evaluate(candidate, current.u);
      if (!(ev.value > current.value)) continue;
      params = std::move(candidate);
      current = std::move(ev);
      double accepted = alpha;
      if (extend && halving == 0) {
        for (double factor = 2.0; factor <= 16.0; factor *= 2.0) {
          Stage2Params further = interpolate(origin, proposal, factor);
          clamp_params(further);
          auto next = problem.evaluate(further, current.u);
          if (!(next.value > current.value)) break;
          params = std::move(further);
          current = std::move(next);
          accepted = factor;
        }
      }
      return accepted;
    }
    return 0.0;
  };

  // The Sigma surrogate can be much stiffer than the objective (weakly
  // informative data); this multiplier carries what the extensions learned.
  double sigma_scale = 1.0;

  for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
    const double before = current.value;

    // beta1: profile Newton step.
    {
      const auto g = stage2_gradient(problem, params, current);
      Stage2Params proposal = params;
      proposal.beta1 = priors.slope.project(params.beta1 + g.beta1 / std::max(g.beta1_curvature, 1e-12));
      if (proposal.beta1 != params.beta1) try_move(proposal, false);
    }

    // Free threshold increments, all items at once, scaled by the per-item metric.
    {
      const auto g = stage2_gradient(problem, params, current);
      Stage2Params proposal = params;
      for (std::size_t i = 0; i < n_items; ++i) {
        auto step = g.increments[i];
        if (step.empty()) continue;
        if (!solve_spd(g.metric[i], step)) continue;
        for (std::size_t f = 0; f < step.size(); ++f) {
          proposal.increments[i][f] = inc_prior.project(params.increments[i][f] + step[f]);
        }
      }
      if (proposal.increments != params.increments) try_move(proposal, false);
    }

    // Sigma: gradient step scaled by the curvature of the expected complete-data
    // log density under the Laplace posteriors of the random effects.
    {
      const auto g = stage2_gradient(problem, params, current);
      std::array<double, 3> s{0.0, 0.0, 0.0};
      for (std::size_t j = 0; j < n_subj; ++j) {
        const auto& u = current.u[j];
        const auto& c = current.cov[j];
        s[0] += u[0] * u[0] + c[0];
        s[1] += u[0] * u[1] + c[1];
        s[2] += u[1] * u[1] + c[2];
      }
      auto surrogate = [&](double v1, double rho) {
        const double one_minus = 1.0 - rho * rho;
        const double quad = (s[0] - 2.0 * rho * s[1] / std::sqrt(v1) + s[2] / v1) / one_minus;
        return -0.5 * static_cast<double>(n_subj) * std::log(v1 * one_minus) - 0.5 * quad -
               0.5 * (v1 - priors.slope_variance.mean) * (v1 - priors.slope_variance.mean) /
                   priors.slope_variance.variance;
      };
      const double x0 = params.var_u1;
      const double x1 = params.rho;
      const double h0 = 1e-4 * x0;
      const double h1 = 1e-4 * std::min(1.0 - std::abs(x1), 0.5);
      const double f = surrogate(x0, x1);
      std::vector<double> neg_hessian{
          -(surrogate(x0 + h0, x1) - 2.0 * f + surrogate(x0 - h0, x1)) / (h0 * h0),
          -(surrogate(x0 + h0, x1 + h1) - surrogate(x0 + h0, x1 - h1) - surrogate(x0 - h0, x1 + h1) +
            surrogate(x0 - h0, x1 - h1)) / (4.0 * h0 * h1),
          0.0,
          -(surrogate(x0, x1 + h1) - 2.0 * f + surrogate(x0, x1 - h1)) / (h1 * h1)};
      neg_hessian[2] = neg_hessian[1];
      std::vector<double> step{g.var_u1, g.rho};
      if (!solve_spd(neg_hessian, step)) {
        step = {g.var_u1 * x0 * x0 / static_cast<double>(n_subj), g.rho / static_cast<double>(n_subj)};
      }
      Stage2Params proposal = params;
      proposal.var_u1 = x0 + sigma_scale * step[0];
      proposal.rho = x1 + sigma_scale * step[1];
      clamp_params(proposal);
      if (proposal.var_u1 != params.var_u1 || proposal.rho != params.rho) {
        const double accepted = try_move(proposal, true);
        if (accepted >= 16.0) {
          sigma_scale = std::min(sigma_scale * 16.0, 1e8);
        } else if (accepted < 1.0) {
          sigma_scale = std::max(sigma_scale * 0.5, 1.0);
        }
      }
    }
    result.objective_trace.push_back(current.value);
    result.sweeps = sweep;
    if (current.value - before < options.tolerance) {
      result.converged = true;
      break;
    }
  }
  if (!result.converged) {
    warn("stage-2 fit did not converge within " + std::to_string(options.max_sweeps) + " sweeps");
  }
  if (current.unconverged > 0) {
    warn(std::to_string(current.unconverged) + " subject mode(s) did not reach the gradient tolerance");
  }
  if (std::abs(params.rho) >= options.max_abs_rho - 1e-6) warn("random-effect correlation at its bound");

  // Gradient of the objective, projected at active bounds.
  {
    const auto g = stage2_gradient(problem, params, current);
    auto projected = [](double grad, double x, double lower, double upper) {
      if (x <= lower && grad < 0.0) return 0.0;
      if (x >= upper && grad > 0.0) return 0.0;
      return grad;
    };
    double norm2 = std::pow(projected(g.beta1, params.beta1, priors.slope.lower, priors.slope.upper), 2) +
                   std::pow(projected(g.var_u1, params.var_u1, priors.slope_variance.lower,
                                      priors.slope_variance.upper), 2) +
                   std::pow(projected(g.rho, params.rho, -options.max_abs_rho, options.max_abs_rho), 2);
    for (std::size_t i = 0; i < n_items; ++i) {
      for (std::size_t f = 0; f < params.increments[i].size(); ++f) {
        norm2 += std::pow(projected(g.increments[i][f], params.increments[i][f], inc_prior.lower,
                                    inc_prior.upper), 2);
      }
    }
    result.gradient_norm = std::sqrt(norm2);
  }
  result.bank = problem.bank(params);
  result.beta1 = params.beta1;
  result.var_u1 = params.var_u1;
  result.rho = params.rho;
  for (std::size_t j = 0; j < n_subj; ++j) {
    result.subjects.push_back({subjects[j].id, current.u[j][0], current.u[j][1]});
  }
  std::vector<int> max_levels;
  for (const auto& item : result.bank) max_levels.push_back(item.max_level());
  result.ledger = parameter_ledger(max_levels, n_subj, fixed_lower);
  return result;
}

}  // namespace grmsel
