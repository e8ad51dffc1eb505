#pragma once

// Synthetic longitudinal GRM data and desk-scale calibration: stage-1 marginal
// maximum likelihood on first visits (EM over Gauss-Hermite nodes) and a
// stage-2 penalized-MAP fit of the longitudinal model by block coordinate ascent.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "grmsel/estimation.hpp"
#include "grmsel/grm.hpp"

namespace grmsel {

/// An item whose observed responses never leave one level.
class DegenerateItem : public DomainError {
 public:
  explicit DegenerateItem(const std::string& item_id);
  const std::string& item_id() const noexcept { return item_id_; }

 private:
  std::string item_id_;
};

struct PanelRecord {
  std::string subject_id;
  double time = 0.0;  // years since first visit
  std::string item_id;
  int level = 0;
};

struct ResponsePanel {
  std::vector<PanelRecord> records;
};

struct ItemSpec {
  std::string id;
  int max_level = 4;
};

std::vector<ItemSpec> item_specs(const ItemBank& bank);

struct SubjectData {
  std::string id;
  std::vector<Observation> observations;  // item indices refer to the ItemSpec list
};

/// Groups records by subject (first-appearance order) and checks ids, level
/// ranges and (subject, time, item) uniqueness.
std::vector<SubjectData> group_by_subject(const ResponsePanel& panel,
                                          const std::vector<ItemSpec>& items);

/// Keeps each subject's earliest visit.
ResponsePanel first_visit_slice(const ResponsePanel& panel);

struct SimulationScenario {
  ItemBank bank;
  TrajectoryPrior population;  // fixed effects and random-effect covariance
  std::vector<double> visit_times{0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  /// Optional per-subject schedules; when nonempty, one entry per subject.
  std::vector<std::vector<double>> schedules;
  std::size_t n_subjects = 100;
  std::uint64_t seed = 1;

  void validate() const;
  const std::vector<double>& schedule(std::size_t subject) const;
};

struct SimulatedPanel {
  ResponsePanel panel;
  std::vector<std::string> subject_ids;
  std::vector<std::array<double, 2>> effects;  // true (u0, u1) per subject
};

SimulatedPanel simulate_longitudinal(const SimulationScenario& scenario);

struct TruncatedNormal {
  double mean = 0.0;
  double variance = 1.0;
  double lower = 0.0;
  double upper = 0.0;

  void validate() const;
  bool contains(double x) const noexcept { return x >= lower && x <= upper; }
  double project(double x) const noexcept;
  /// Log density up to the normalizing constant; -inf outside the bounds.
  double log_density(double x) const noexcept;
};

struct PriorSpec {
  TruncatedNormal slope;
  TruncatedNormal slope_variance;
  TruncatedNormal threshold_increment;
};

PriorSpec default_priors();

struct CrossSectionalOptions {
  int quadrature_nodes = 41;
  int max_iterations = 2000;
  double tolerance = 1e-9;  // relative change of the marginal log-likelihood
  int threads = 1;
};

struct CrossSectionalFit {
  ItemBank bank;
  std::vector<std::string> subject_ids;
  std::vector<double> theta_eap;
  std::vector<double> theta_psd;
  std::vector<double> loglik_trace;  // marginal log-likelihood per E-step
  int iterations = 0;
  bool converged = false;
};

/// Marginal ML under a standard normal trait using each subject's first visit.
CrossSectionalFit fit_grm_cross_sectional(const ResponsePanel& panel,
                                          const std::vector<ItemSpec>& items,
                                          const CrossSectionalOptions& options = {});

struct LedgerRow {
  std::string name;
  std::size_t n = 0;
  std::size_t fixed = 0;
  std::size_t estimated = 0;
  std::size_t stage1 = 0;
  std::size_t stage2 = 0;
};

struct ParameterLedger {
  std::vector<LedgerRow> rows;
  LedgerRow total() const;
};

/// Fixed/estimated parameter counts for the two-stage fit.
ParameterLedger parameter_ledger(const std::vector<int>& max_levels, std::size_t n_subjects,
                                 int fixed_lower_thresholds = 2);

struct LongitudinalOptions {
  int max_sweeps = 5000;
  double tolerance = 1e-8;
  int fixed_lower_thresholds = 2;
  double initial_beta1 = 0.0;
  double initial_var_u1 = 0.1;
  double initial_rho = 0.0;
  double max_abs_rho = 0.99;
  int threads = 1;
};

struct SubjectEffect {
  std::string id;
  double u0 = 0.0;
  double u1 = 0.0;
};

struct FitResult {
  ItemBank bank;
  double beta0 = 0.0;
  double beta1 = 0.0;
  double var_u0 = 1.0;
  double var_u1 = 0.0;
  double rho = 0.0;
  std::vector<SubjectEffect> subjects;
  std::vector<double> objective_trace;  // penalized objective after each sweep
  double gradient_norm = 0.0;           // over beta1 and free increments
  int sweeps = 0;
  bool converged = false;
  std::vector<std::string> warnings;
  ParameterLedger ledger;

  TrajectoryPrior population() const;
};

/// Stage 2. Discriminations and the lowest `fixed_lower_thresholds` thresholds
/// of each item are taken from `stage_one` and held fixed; its upper thresholds
/// seed the free increments.
FitResult fit_longitudinal_map(const ResponsePanel& panel, const ItemBank& stage_one,
                               const PriorSpec& priors, const LongitudinalOptions& options = {});

}  // namespace grmsel
