#pragma once

// K-item subset selection: expected-information ranking, coordinate-descent
// exchange on the expected SD, the per-trait adaptive limit, a random-order
// baseline, and exhaustive search as an oracle.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "grmsel/grm.hpp"
#include "grmsel/population.hpp"

namespace grmsel {

enum class SelectionMethod { RankByExpectedInfo, CoordinateDescent, Adaptive, Random };

std::string_view to_string(SelectionMethod method);
/// Accepts "rank", "cd", "adaptive", "random".
SelectionMethod parse_selection_method(std::string_view name);

/// Brute-force enumeration would exceed the configured number of subsets.
class CapExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SwapRecord {
  int sweep = 0;
  std::size_t position = 0;
  std::size_t item_out = 0;
  std::size_t item_in = 0;
  double before = 0.0;
  double after = 0.0;
};

struct SelectionTrace {
  std::vector<SwapRecord> swaps;
  int sweeps = 0;
  std::string init;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> start_positions;
  std::vector<std::size_t> final_positions;
};

struct SubsetResult {
  std::vector<std::size_t> items;  // ascending bank indices
  std::vector<std::string> ids;
  double expected_info = 0.0;
  double expected_sd = 0.0;
  SelectionMethod method = SelectionMethod::RankByExpectedInfo;
  SelectionTrace trace;
};

/// A bank with its information tabulated on a quadrature rule.
class SelectionContext {
 public:
  SelectionContext(ItemBank bank, QuadratureRule rule);
  SelectionContext(ItemBank bank, const LatentDistribution& dist,
                   int n_nodes = kDefaultQuadratureNodes);

  const ItemBank& bank() const noexcept { return bank_; }
  const InformationTable& table() const noexcept { return table_; }
  const QuadratureRule& rule() const noexcept { return table_.rule(); }
  std::size_t size() const noexcept { return bank_.size(); }

  /// Expected SD of a set, summing item rows in ascending index order so the
  /// value depends on the set only. +inf for a non-informative set.
  double criterion(std::vector<std::size_t> items) const;

 private:
  ItemBank bank_;
  InformationTable table_;
};

struct CdInit {
  enum class Kind { Rank, Random, Explicit };
  Kind kind = Kind::Rank;
  std::vector<std::string> ids;

  static CdInit rank() { return {Kind::Rank, {}}; }
  static CdInit random() { return {Kind::Random, {}}; }
  static CdInit explicit_ids(std::vector<std::string> ids) { return {Kind::Explicit, std::move(ids)}; }
};

struct CdOptions {
  int threads = 1;
  int max_sweeps = 100000;
};

inline constexpr std::uint64_t kDefaultBruteForceCap = 2'000'000;
inline constexpr std::size_t kDefaultRandomReps = 200;

SubsetResult select_by_rank(const SelectionContext& ctx, std::size_t k);

SubsetResult coordinate_descent(const SelectionContext& ctx, std::size_t k,
                                const CdInit& init = CdInit::rank(), std::uint64_t seed = 0,
                                const CdOptions& options = {});

/// Best of a rank-initialized run and `random_starts` randomly initialized runs.
SubsetResult coordinate_descent_multistart(const SelectionContext& ctx, std::size_t k,
                                           std::size_t random_starts, std::uint64_t seed,
                                           const CdOptions& options = {});

/// The k items with the most information at theta; expected_* fields hold the
/// set information and conditional SD at theta.
SubsetResult select_adaptive_at(const ItemBank& bank, double theta, std::size_t k);

struct AdaptiveDesign {
  double expected_sd = 0.0;
  std::vector<std::vector<std::size_t>> node_sets;  // ascending indices per node
};

AdaptiveDesign adaptive_design(const SelectionContext& ctx, std::size_t k);
double adaptive_expected_sd(const SelectionContext& ctx, std::size_t k);

struct RandomBaseline {
  std::vector<double> mean;  // index K-1
  std::vector<double> sd;    // spread across repetitions
  std::size_t reps = 0;
  std::uint64_t seed = 0;
};

RandomBaseline random_baseline(const SelectionContext& ctx, std::size_t reps, std::uint64_t seed);

SubsetResult brute_force_best(const SelectionContext& ctx, std::size_t k,
                              std::uint64_t cap = kDefaultBruteForceCap);

struct ComparisonCurves {
  std::vector<SelectionMethod> methods;
  std::vector<std::vector<double>> expected_sd;  // [method][K-1]
  RandomBaseline random;

  std::size_t max_k() const noexcept { return random.mean.size(); }
  /// 100 (1 - sd / random_sd) for the given method column at K.
  double percent_decrease(std::size_t method_index, std::size_t k) const;
};

ComparisonCurves comparison_curves(const SelectionContext& ctx,
                                   const std::vector<SelectionMethod>& methods, std::size_t reps,
                                   std::uint64_t seed, const CdOptions& options = {});

/// Number of k-subsets of n, saturating at UINT64_MAX.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

}  // namespace grmsel
