#include "grmsel/grm.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace grmsel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_level(const ItemParams& item, int m, int upper) {
  if (m < 0 || m > upper) {
    std::ostringstream msg;
    msg << "level " << m << " out of range [0, " << upper << "] for item '" << item.id()
        << "'";
    throw DomainError(msg.str());
  }
}

// Cumulative logit a (theta - b_m), with x_0 = +inf and x_{M+1} = -inf.
double cumulative_logit(const ItemParams& item, int m, double theta) {
  if (m == 0) return kInf;
  if (m == item.max_level() + 1) return -kInf;
  return item.discrimination() * (theta - item.thresholds()[m - 1]);
}

// logistic(u) - logistic(v) for u >= v, written as
// logistic(u) * logistic(-v) * (1 - e^{v-u}) so nothing cancels.
double logistic_gap(double u, double v) {
  const double d = u - v;
  if (std::isnan(d)) return 0.0;  // both logits at the same infinity
  const double tail = std::isinf(d) ? 1.0 : -std::expm1(-d);
  return logistic(u) * logistic(-v) * tail;
}

double log_logistic_gap(double u, double v) {
  const double d = u - v;
  if (std::isnan(d)) return -kInf;
  const double tail = std::isinf(d) ? 0.0 : std::log(-std::expm1(-d));
  return log_logistic(u) + log_logistic(-v) + tail;
}

double variance_at(const ItemParams& item, int m, double theta) {
  if (m == 0 || m == item.max_level() + 1) return 0.0;
  return logistic_variance(cumulative_logit(item, m, theta));
}

}  // namespace

NonInformativeSet::NonInformativeSet(double theta)
    : std::runtime_error([theta] {
        std::ostringstream msg;
        msg << "non-informative set at theta = " << theta;
        return msg.str();
      }()),
      theta_(theta) {}

ItemParams::ItemParams(std::string id, double discrimination, std::vector<double> thresholds)
    : id_(std::move(id)), a_(discrimination), b_(std::move(thresholds)) {
  if (!(a_ > 0.0) || !std::isfinite(a_)) {
    throw DomainError("item '" + id_ + "': discrimination must be positive and finite");
  }
  if (b_.empty()) throw DomainError("item '" + id_ + "': at least one threshold required");
  for (std::size_t m = 0; m < b_.size(); ++m) {
    if (!std::isfinite(b_[m])) throw DomainError("item '" + id_ + "': non-finite threshold");
    if (m > 0 && !(b_[m - 1] < b_[m])) {
      std::ostringstream msg;
      msg << "item '" << id_ << "': thresholds not strictly increasing (b" << m << " = "
          << b_[m - 1] << ", b" << m + 1 << " = " << b_[m] << ")";
      throw DomainError(msg.str());
    }
  }
}

ItemBank::ItemBank(std::vector<ItemParams> items) : items_(std::move(items)) {
  if (items_.empty()) throw DomainError("item bank is empty");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!index_.emplace(items_[i].id(), i).second) {
      throw DomainError("duplicate item id '" + items_[i].id() + "'");
    }
  }
}

std::optional<std::size_t> ItemBank::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ItemBank::index_of(const std::string& id) const {
  if (auto i = find(id)) return *i;
  throw DomainError("unknown item id '" + id + "'");
}

std::vector<ItemParams> ItemBank::subset(std::span<const std::size_t> indices) const {
  std::vector<ItemParams> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items_.at(i));
  return out;
}

double logistic(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

double log_logistic(double x) noexcept {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

double logistic_variance(double x) noexcept {
  const double z = std::exp(-std::abs(x));
  const double s = 1.0 + z;
  return z / (s * s);
}

double prob_gte(const ItemParams& item, int m, double theta) {
  check_level(item, m, item.max_level() + 1);
  if (m == 0) return 1.0;
  if (m == item.max_level() + 1) return 0.0;
  return logistic(cumulative_logit(item, m, theta));
}

double prob_eq(const ItemParams& item, int m, double theta) {
  check_level(item, m, item.max_level());
  return logistic_gap(cumulative_logit(item, m, theta), cumulative_logit(item, m + 1, theta));
}

double log_prob_eq(const ItemParams& item, int m, double theta) {
  check_level(item, m, item.max_level());
  return log_logistic_gap(cumulative_logit(item, m, theta),
                          cumulative_logit(item, m + 1, theta));
}

double dlog_prob_eq(const ItemParams& item, int m, double theta) {
  check_level(item, m, item.max_level());
  // 1 - P_m - P_{m+1} = (1 - P_m) - P_{m+1}
  const double upper_miss = logistic(-cumulative_logit(item, m, theta));
  const double next_hit = logistic(cumulative_logit(item, m + 1, theta));
  return item.discrimination() * (upper_miss - next_hit);
}

double neg_d2log_prob_eq(const ItemParams& item, int m, double theta) {
  check_level(item, m, item.max_level());
  const double a = item.discrimination();
  return a * a * (variance_at(item, m, theta) + variance_at(item, m + 1, theta));
}

double item_information(const ItemParams& item, double theta) {
  if (std::isinf(theta)) return 0.0;
  const double a = item.discrimination();
  const int top = item.max_level() + 1;
  double total = 0.0;
  for (int m = 1; m <= top; ++m) {
    const double num = a * (variance_at(item, m - 1, theta) - variance_at(item, m, theta));
    if (num == 0.0) continue;
    const double den = logistic_gap(cumulative_logit(item, m - 1, theta),
                                    cumulative_logit(item, m, theta));
    if (!(den > 0.0)) continue;
    total += num * num / den;
  }
  return total;
}

double set_information(std::span<const ItemParams> items, double theta) {
  double total = 0.0;
  for (const auto& item : items) total += item_information(item, theta);
  return total;
}

double set_information(const ItemBank& bank, std::span<const std::size_t> indices,
                       double theta) {
  double total = 0.0;
  for (auto i : indices) total += item_information(bank[i], theta);
  return total;
}

double conditional_sd(std::span<const ItemParams> items, double theta) {
  const double info = set_information(items, theta);
  if (!(info > 0.0)) throw NonInformativeSet(theta);
  return 1.0 / std::sqrt(info);
}

double conditional_sd(const ItemBank& bank, std::span<const std::size_t> indices,
                      double theta) {
  const double info = set_information(bank, indices, theta);
  if (!(info > 0.0)) throw NonInformativeSet(theta);
  return 1.0 / std::sqrt(info);
}

}  // namespace grmsel
