#pragma once

// Graded response model: category probabilities, item and set Fisher
// information, and the asymptotic standard deviation of a trait estimate.

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace grmsel {

/// Invalid parameter or argument (bad threshold ordering, level out of range...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an item set carries zero information at some trait value, so
/// no finite standard deviation exists there.
class NonInformativeSet : public std::runtime_error {
 public:
  explicit NonInformativeSet(double theta);
  double theta() const noexcept { return theta_; }

 private:
  double theta_;
};

/// One GRM item. `thresholds()` holds b_1 < ... < b_M; M = 1 is the 2-PL model.
class ItemParams {
 public:
  ItemParams(std::string id, double discrimination, std::vector<double> thresholds);

  const std::string& id() const noexcept { return id_; }
  double discrimination() const noexcept { return a_; }
  const std::vector<double>& thresholds() const noexcept { return b_; }
  /// Highest response level M (levels run 0..M).
  int max_level() const noexcept { return static_cast<int>(b_.size()); }

 private:
  std::string id_;
  double a_;
  std::vector<double> b_;
};

/// Ordered pool of items on a common trait scale. Ids are unique.
class ItemBank {
 public:
  explicit ItemBank(std::vector<ItemParams> items);

  std::size_t size() const noexcept { return items_.size(); }
  const ItemParams& operator[](std::size_t i) const { return items_[i]; }
  const std::vector<ItemParams>& items() const noexcept { return items_; }
  auto begin() const noexcept { return items_.begin(); }
  auto end() const noexcept { return items_.end(); }

  std::optional<std::size_t> find(const std::string& id) const;
  /// Like find() but throws DomainError for unknown ids.
  std::size_t index_of(const std::string& id) const;

  std::vector<ItemParams> subset(std::span<const std::size_t> indices) const;

 private:
  std::vector<ItemParams> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

double logistic(double x) noexcept;
/// log(logistic(x)) without overflow or cancellation.
double log_logistic(double x) noexcept;
/// logistic(x) * (1 - logistic(x)).
double logistic_variance(double x) noexcept;

/// P(Y >= m | theta). 1 for m = 0, 0 for m = M + 1.
double prob_gte(const ItemParams& item, int m, double theta);
/// P(Y = m | theta) = P(Y >= m) - P(Y >= m + 1).
double prob_eq(const ItemParams& item, int m, double theta);
double log_prob_eq(const ItemParams& item, int m, double theta);
/// d/dtheta log P(Y = m | theta) = a (1 - P_m - P_{m+1}).
double dlog_prob_eq(const ItemParams& item, int m, double theta);
/// -d^2/dtheta^2 log P(Y = m | theta) = a^2 (g_m + g_{m+1}), g = P(1-P).
/// Does not depend on m beyond the two bracketing thresholds; always > 0.
double neg_d2log_prob_eq(const ItemParams& item, int m, double theta);

double item_information(const ItemParams& item, double theta);
double set_information(std::span<const ItemParams> items, double theta);
double set_information(const ItemBank& bank, std::span<const std::size_t> indices,
                       double theta);

/// set_information^(-1/2). Throws NonInformativeSet when the information is 0.
double conditional_sd(std::span<const ItemParams> items, double theta);
double conditional_sd(const ItemBank& bank, std::span<const std::size_t> indices,
                      double theta);

}  // namespace grmsel
