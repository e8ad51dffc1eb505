#include "grmsel/population.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

namespace grmsel {

namespace {

struct DistValidator {
  void operator()(const NormalDist& d) const {
    if (!std::isfinite(d.mean)) throw DomainError("normal distribution: non-finite mean");
    if (!(d.sd > 0.0) || !std::isfinite(d.sd)) {
      throw DomainError("normal distribution: sd must be positive");
    }
  }
  void operator()(const EmpiricalSample& s) const {
    if (s.values.empty()) throw DomainError("empirical sample is empty");
    for (double v : s.values) {
      if (!std::isfinite(v)) throw DomainError("empirical sample has a non-finite value");
    }
  }
  void operator()(const ExplicitGrid& g) const {
    if (g.nodes.empty()) throw DomainError("grid distribution is empty");
    if (g.nodes.size() != g.weights.size()) {
      throw DomainError("grid distribution: nodes and weights differ in length");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < g.nodes.size(); ++k) {
      if (!std::isfinite(g.nodes[k])) throw DomainError("grid distribution: non-finite node");
      if (!(g.weights[k] >= 0.0)) throw DomainError("grid distribution: negative weight");
      total += g.weights[k];
    }
    if (std::abs(total - 1.0) > 1e-10) {
      std::ostringstream msg;
      msg << "grid distribution: weights sum to " << total << ", expected 1";
      throw DomainError(msg.str());
    }
  }
};

}  // namespace

void validate(const LatentDistribution& dist) { std::visit(DistValidator{}, dist); }

QuadratureRule gauss_hermite_normal(int n_nodes) {
  if (n_nodes < 1) throw DomainError("quadrature needs at least one node");
  const int n = n_nodes;
  // Orthonormal Hermite polynomials by recurrence, rescaled on the fly so large
  // n cannot overflow. Returns p_n up to a positive factor and log|p_{n-1}|.
  const auto hermite = [n](double z, double& log_prev) {
    double p1 = 1.0;
    double p2 = 0.0;
    double log_scale = 0.0;
    for (int j = 1; j <= n; ++j) {
      const double p3 = p2;
      p2 = p1;
      p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt(static_cast<double>(j - 1) / j) * p3;
      if (std::abs(p1) > 1e150) {
        p1 *= 1e-150;
        p2 *= 1e-150;
        log_scale += 150.0 * std::numbers::ln10;
      }
    }
    log_prev = std::log(std::abs(p2)) + log_scale;
    return p1;
  };

  // Sign scan over the positive axis; roots are at least pi / sqrt(2n + 1) apart.
  std::vector<double> roots;
  const double step = std::numbers::pi / (8.0 * std::sqrt(2.0 * n + 1.0));
  const double z_max = std::sqrt(2.0 * n + 1.0) + 1.0;
  double log_prev = 0.0;
  double lo = 0.5 * step;
  double f_lo = hermite(lo, log_prev);
  while (lo < z_max && static_cast<int>(roots.size()) < n / 2) {
    const double hi = lo + step;
    const double f_hi = hermite(hi, log_prev);
    if ((f_lo < 0.0) != (f_hi < 0.0)) {
      double a = lo, b = hi, fa = f_lo;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (a + b);
        if (mid == a || mid == b) break;
        const double fm = hermite(mid, log_prev);
        if ((fm < 0.0) == (fa < 0.0)) {
          a = mid;
          fa = fm;
        } else {
          b = mid;
        }
      }
      roots.push_back(0.5 * (a + b));
    }
    lo = hi;
    f_lo = f_hi;
  }
  if (static_cast<int>(roots.size()) != n / 2) {
    throw std::runtime_error("Gauss-Hermite root search failed for n = " + std::to_string(n));
  }

  std::vector<double> x;
  x.reserve(static_cast<std::size_t>(n));
  for (auto it = roots.rbegin(); it != roots.rend(); ++it) x.push_back(-*it);
  if (n % 2 == 1) x.push_back(0.0);
  for (double r : roots) x.push_back(r);

  // w_i = 1 / (n p_{n-1}(x_i)^2), kept in logs until normalization.
  std::vector<double> log_w(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < log_w.size(); ++k) {
    hermite(x[k], log_prev);
    log_w[k] = -2.0 * log_prev;
  }
  const double top = *std::max_element(log_w.begin(), log_w.end());
  std::vector<double> w(log_w.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = std::exp(log_w[k] - top);

  QuadratureRule rule;
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (std::size_t k = 0; k < static_cast<std::size_t>(n); ++k) {
    rule.nodes[k] = std::numbers::sqrt2 * x[k];
    rule.weights[k] = w[k] / total;
  }
  return rule;
}

QuadratureRule make_quadrature(const LatentDistribution& dist, int n_nodes) {
  validate(dist);
  if (const auto* normal = std::get_if<NormalDist>(&dist)) {
    if (n_nodes < 3) throw DomainError("quadrature needs at least 3 nodes");
    QuadratureRule rule = gauss_hermite_normal(n_nodes);
    for (double& node : rule.nodes) node = normal->mean + normal->sd * node;
    return rule;
  }
  if (const auto* sample = std::get_if<EmpiricalSample>(&dist)) {
    QuadratureRule rule;
    rule.nodes = sample->values;
    rule.weights.assign(sample->values.size(), 1.0 / static_cast<double>(sample->values.size()));
    return rule;
  }
  const auto& grid = std::get<ExplicitGrid>(dist);
  return QuadratureRule{grid.nodes, grid.weights};
}

double expected_item_information(const ItemParams& item, const QuadratureRule& rule) {
  double total = 0.0;
  for (std::size_t k = 0; k < rule.size(); ++k) {
    total += rule.weights[k] * item_information(item, rule.nodes[k]);
  }
  return total;
}

double expected_item_information(const ItemParams& item, const LatentDistribution& dist) {
  return expected_item_information(item, make_quadrature(dist));
}

double expected_set_information(std::span<const ItemParams> items, const QuadratureRule& rule) {
  double total = 0.0;
  for (const auto& item : items) total += expected_item_information(item, rule);
  return total;
}

double expected_set_information(std::span<const ItemParams> items,
                                const LatentDistribution& dist) {
  return expected_set_information(items, make_quadrature(dist));
}

double expected_sd(std::span<const ItemParams> items, const QuadratureRule& rule) {
  double total = 0.0;
  for (std::size_t k = 0; k < rule.size(); ++k) {
    total += rule.weights[k] * conditional_sd(items, rule.nodes[k]);
  }
  return total;
}

double expected_sd(std::span<const ItemParams> items, const LatentDistribution& dist) {
  return expected_sd(items, make_quadrature(dist));
}

InformationTable::InformationTable(const ItemBank& bank, QuadratureRule rule)
    : rule_(std::move(rule)), n_items_(bank.size()) {
  info_.resize(n_items_ * rule_.size());
  expected_.resize(n_items_);
  for (std::size_t i = 0; i < n_items_; ++i) {
    double expected = 0.0;
    for (std::size_t k = 0; k < rule_.size(); ++k) {
      const double v = item_information(bank[i], rule_.nodes[k]);
      info_[i * rule_.size() + k] = v;
      expected += rule_.weights[k] * v;
    }
    expected_[i] = expected;
  }
}

double InformationTable::expected_set_information(std::span<const std::size_t> items) const {
  double total = 0.0;
  for (auto i : items) total += expected_[i];
  return total;
}

double InformationTable::expected_sd(std::span<const std::size_t> items) const {
  std::vector<double> totals(n_nodes(), 0.0);
  for (auto i : items) {
    const auto r = row(i);
    for (std::size_t k = 0; k < totals.size(); ++k) totals[k] += r[k];
  }
  return expected_sd_from_totals(totals);
}

double InformationTable::expected_sd_from_totals(std::span<const double> totals) const {
  double total = 0.0;
  for (std::size_t k = 0; k < totals.size(); ++k) {
    if (!(totals[k] > 0.0)) throw NonInformativeSet(rule_.nodes[k]);
    total += rule_.weights[k] / std::sqrt(totals[k]);
  }
  return total;
}

}  // namespace grmsel
