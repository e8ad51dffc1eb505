#pragma once

// Expectations over the latent-trait population: expected Fisher information
// and expected standard deviation of the trait estimate, by quadrature.

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

#include "grmsel/grm.hpp"

namespace grmsel {

struct NormalDist {
  double mean = 0.0;
  double sd = 1.0;
};

/// Point masses 1/n at each value (e.g. fitted trait estimates).
struct EmpiricalSample {
  std::vector<double> values;
};

/// Explicit nodes with probability weights summing to one.
struct ExplicitGrid {
  std::vector<double> nodes;
  std::vector<double> weights;
};

using LatentDistribution = std::variant<NormalDist, EmpiricalSample, ExplicitGrid>;

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const noexcept { return nodes.size(); }
};

inline constexpr int kDefaultQuadratureNodes = 61;

void validate(const LatentDistribution& dist);

/// n-point Gauss-Hermite rule for the standard normal density, weights summing to 1.
QuadratureRule gauss_hermite_normal(int n_nodes);

/// Normal: Gauss-Hermite mapped to (mean, sd). Sample: weight 1/n per value.
/// Grid: returned unchanged (n_nodes is ignored).
QuadratureRule make_quadrature(const LatentDistribution& dist,
                               int n_nodes = kDefaultQuadratureNodes);

double expected_item_information(const ItemParams& item, const QuadratureRule& rule);
double expected_item_information(const ItemParams& item, const LatentDistribution& dist);

double expected_set_information(std::span<const ItemParams> items, const QuadratureRule& rule);
double expected_set_information(std::span<const ItemParams> items,
                                const LatentDistribution& dist);

/// Sum_k w_k * conditional_sd(items, theta_k). Throws NonInformativeSet naming
/// the first node where the set carries no information.
double expected_sd(std::span<const ItemParams> items, const QuadratureRule& rule);
double expected_sd(std::span<const ItemParams> items, const LatentDistribution& dist);

/// Item information tabulated on the nodes of a rule. Selection algorithms
/// evaluate thousands of subsets against the same bank, so they work from this.
class InformationTable {
 public:
  InformationTable(const ItemBank& bank, QuadratureRule rule);

  std::size_t n_items() const noexcept { return n_items_; }
  std::size_t n_nodes() const noexcept { return rule_.size(); }
  const QuadratureRule& rule() const noexcept { return rule_; }

  /// Information of item i at node k.
  double at(std::size_t item, std::size_t node) const { return info_[item * n_nodes() + node]; }
  std::span<const double> row(std::size_t item) const {
    return {info_.data() + item * n_nodes(), n_nodes()};
  }
  double expected_information(std::size_t item) const { return expected_[item]; }

  double expected_set_information(std::span<const std::size_t> items) const;
  double expected_sd(std::span<const std::size_t> items) const;
  /// Expected SD from per-node set information totals.
  double expected_sd_from_totals(std::span<const double> totals) const;

 private:
  QuadratureRule rule_;
  std::size_t n_items_;
  std::vector<double> info_;
  std::vector<double> expected_;
};

}  // namespace grmsel
