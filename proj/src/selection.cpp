#include "grmsel/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "grmsel/parallel.hpp"

namespace grmsel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    std::ostringstream msg;
    msg << "subset size K = " << k << " out of range [1, " << n << "]";
    throw DomainError(msg.str());
  }
}

SubsetResult make_result(const SelectionContext& ctx, std::vector<std::size_t> items,
                         SelectionMethod method) {
  std::sort(items.begin(), items.end());
  SubsetResult out;
  out.method = method;
  out.expected_info = ctx.table().expected_set_information(items);
  out.expected_sd = ctx.criterion(items);
  if (std::isinf(out.expected_sd)) {
    // Name the offending node.
    (void)ctx.table().expected_sd(items);
  }
  for (auto i : items) out.ids.push_back(ctx.bank()[i].id());
  out.items = std::move(items);
  return out;
}

// Indices ordered by descending score, ties to the lower index.
std::vector<std::size_t> order_by_score(const std::vector<double>& score) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return score[l] > score[r]; });
  return order;
}

std::vector<std::size_t> rank_order(const SelectionContext& ctx) {
  std::vector<double> score(ctx.size());
  for (std::size_t i = 0; i < ctx.size(); ++i) score[i] = ctx.table().expected_information(i);
  return order_by_score(score);
}

std::vector<std::size_t> random_start(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  perm.resize(k);
  return perm;
}

bool lexicographically_less(const std::vector<std::size_t>& l,
                            const std::vector<std::size_t>& r) {
  return std::lexicographical_compare(l.begin(), l.end(), r.begin(), r.end());
}

// Running mean/variance that leaves the mean bit-exact for constant input.
struct RunningStats {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  double sd() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1)) : 0.0; }
};

}  // namespace

std::string_view to_string(SelectionMethod method) {
  switch (method) {
    case SelectionMethod::RankByExpectedInfo: return "rank";
    case SelectionMethod::CoordinateDescent: return "cd";
    case SelectionMethod::Adaptive: return "adaptive";
    case SelectionMethod::Random: return "random";
  }
  return "unknown";
}

SelectionMethod parse_selection_method(std::string_view name) {
  if (name == "rank") return SelectionMethod::RankByExpectedInfo;
  if (name == "cd") return SelectionMethod::CoordinateDescent;
  if (name == "adaptive") return SelectionMethod::Adaptive;
  if (name == "random") return SelectionMethod::Random;
  throw DomainError("unknown selection method '" + std::string(name) + "'");
}

SelectionContext::SelectionContext(ItemBank bank, QuadratureRule rule)
    : bank_(std::move(bank)), table_(bank_, std::move(rule)) {}

SelectionContext::SelectionContext(ItemBank bank, const LatentDistribution& dist, int n_nodes)
    : SelectionContext(std::move(bank), make_quadrature(dist, n_nodes)) {}

double SelectionContext::criterion(std::vector<std::size_t> items) const {
  std::sort(items.begin(), items.end());
  std::vector<double> totals(table_.n_nodes(), 0.0);
  for (auto i : items) {
    const auto r = table_.row(i);
    for (std::size_t k = 0; k < totals.size(); ++k) totals[k] += r[k];
  }
  double total = 0.0;
  const auto& w = table_.rule().weights;
  for (std::size_t k = 0; k < totals.size(); ++k) {
    if (!(totals[k] > 0.0)) return kInf;
    total += w[k] / std::sqrt(totals[k]);
  }
  return total;
}

SubsetResult select_by_rank(const SelectionContext& ctx, std::size_t k) {
  check_k(k, ctx.size());
  auto order = rank_order(ctx);
  order.resize(k);
  auto out = make_result(ctx, std::move(order), SelectionMethod::RankByExpectedInfo);
  out.trace.init = "rank";
  return out;
}

SubsetResult coordinate_descent(const SelectionContext& ctx, std::size_t k, const CdInit& init,
                                std::uint64_t seed, const CdOptions& options) {
  const std::size_t n = ctx.size();
  check_k(k, n);

  std::vector<std::size_t> positions;
  SelectionTrace trace;
  switch (init.kind) {
    case CdInit::Kind::Rank:
      positions = rank_order(ctx);
      positions.resize(k);
      trace.init = "rank";
      break;
    case CdInit::Kind::Random: {
      std::mt19937_64 rng(seed);
      positions = random_start(n, k, rng);
      trace.init = "random";
      trace.seed = seed;
      break;
    }
    case CdInit::Kind::Explicit: {
      if (init.ids.size() != k) {
        std::ostringstream msg;
        msg << "initial set has " << init.ids.size() << " items, expected K = " << k;
        throw DomainError(msg.str());
      }
      for (const auto& id : init.ids) positions.push_back(ctx.bank().index_of(id));
      auto sorted = positions;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw DomainError("initial set contains duplicate item ids");
      }
      trace.init = "explicit";
      break;
    }
  }
  trace.start_positions = positions;

  std::vector<char> used(n, 0);
  for (auto i : positions) used[i] = 1;
  double current = ctx.criterion(positions);

  std::vector<std::size_t> candidates;
  std::vector<double> values;
  bool changed = true;
  while (changed) {
    if (trace.sweeps >= options.max_sweeps) break;
    ++trace.sweeps;
    changed = false;
    for (std::size_t pos = 0; pos < k; ++pos) {
      candidates.clear();
      for (std::size_t c = 0; c < n; ++c) {
        if (!used[c]) candidates.push_back(c);
      }
      values.assign(candidates.size(), kInf);
      parallel_for(candidates.size(), options.threads, [&](std::size_t j) {
        auto trial = positions;
        trial[pos] = candidates[j];
        values[j] = ctx.criterion(std::move(trial));
      });
      double best = current;
      std::size_t best_item = positions[pos];
      for (std::size_t j = 0; j < candidates.size(); ++j) {
        if (values[j] < best) {
          best = values[j];
          best_item = candidates[j];
        }
      }
      if (best_item != positions[pos]) {
        trace.swaps.push_back({trace.sweeps, pos, positions[pos], best_item, current, best});
        used[positions[pos]] = 0;
        used[best_item] = 1;
        positions[pos] = best_item;
        current = best;
        changed = true;
      }
    }
  }
  trace.final_positions = positions;

  auto out = make_result(ctx, positions, SelectionMethod::CoordinateDescent);
  out.trace = std::move(trace);
  return out;
}

SubsetResult coordinate_descent_multistart(const SelectionContext& ctx, std::size_t k,
                                           std::size_t random_starts, std::uint64_t seed,
                                           const CdOptions& options) {
  SubsetResult best = coordinate_descent(ctx, k, CdInit::rank(), 0, options);
  std::mt19937_64 seeder(seed);
  for (std::size_t r = 0; r < random_starts; ++r) {
    auto run = coordinate_descent(ctx, k, CdInit::random(), seeder(), options);
    if (run.expected_sd < best.expected_sd ||
        (run.expected_sd == best.expected_sd && lexicographically_less(run.items, best.items))) {
      best = std::move(run);
    }
  }
  return best;
}

SubsetResult select_adaptive_at(const ItemBank& bank, double theta, std::size_t k) {
  check_k(k, bank.size());
  std::vector<double> score(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) score[i] = item_information(bank[i], theta);
  auto order = order_by_score(score);
  order.resize(k);
  std::sort(order.begin(), order.end());

  SubsetResult out;
  out.method = SelectionMethod::Adaptive;
  out.expected_info = set_information(bank, order, theta);
  out.expected_sd = conditional_sd(bank, order, theta);
  for (auto i : order) out.ids.push_back(bank[i].id());
  out.items = std::move(order);
  out.trace.init = "adaptive";
  return out;
}

AdaptiveDesign adaptive_design(const SelectionContext& ctx, std::size_t k) {
  check_k(k, ctx.size());
  const auto& table = ctx.table();
  const auto& rule = ctx.rule();
  AdaptiveDesign out;
  out.node_sets.reserve(rule.size());
  std::vector<double> score(ctx.size());
  for (std::size_t node = 0; node < rule.size(); ++node) {
    for (std::size_t i = 0; i < ctx.size(); ++i) score[i] = table.at(i, node);
    auto order = order_by_score(score);
    order.resize(k);
    std::sort(order.begin(), order.end());
    double info = 0.0;
    for (auto i : order) info += table.at(i, node);
    if (!(info > 0.0)) throw NonInformativeSet(rule.nodes[node]);
    out.expected_sd += rule.weights[node] / std::sqrt(info);
    out.node_sets.push_back(std::move(order));
  }
  return out;
}

double adaptive_expected_sd(const SelectionContext& ctx, std::size_t k) {
  return adaptive_design(ctx, k).expected_sd;
}

RandomBaseline random_baseline(const SelectionContext& ctx, std::size_t reps,
                               std::uint64_t seed) {
  if (reps < 1) throw DomainError("random baseline needs at least one repetition");
  const std::size_t n = ctx.size();
  std::vector<RunningStats> stats(n);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(n);
  for (std::size_t r = 0; r < reps; ++r) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t k = 1; k <= n; ++k) {
      stats[k - 1].add(ctx.criterion({perm.begin(), perm.begin() + static_cast<long>(k)}));
    }
  }
  RandomBaseline out;
  out.reps = reps;
  out.seed = seed;
  for (const auto& s : stats) {
    out.mean.push_back(s.mean);
    out.sd.push_back(s.sd());
  }
  return out;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t result = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // result * (n - k + i) / i is exact at each step
    const std::uint64_t factor = n - k + i;
    const std::uint64_t g = std::gcd(result, i);
    const std::uint64_t reduced = result / g;
    const std::uint64_t div = i / g;
    const std::uint64_t f = factor / div;
    if (reduced != 0 && f > kMax / reduced) return kMax;
    result = reduced * f;
  }
  return result;
}

SubsetResult brute_force_best(const SelectionContext& ctx, std::size_t k, std::uint64_t cap) {
  const std::size_t n = ctx.size();
  check_k(k, n);
  const auto count = binomial(n, k);
  if (count > cap) {
    std::ostringstream msg;
    msg << "brute force over C(" << n << ", " << k << ") = " << count
        << " subsets exceeds the cap of " << cap;
    throw CapExceeded(msg.str());
  }
  std::vector<std::size_t> combo(k);
  std::iota(combo.begin(), combo.end(), std::size_t{0});
  std::vector<std::size_t> best = combo;
  double best_sd = kInf;
  while (true) {
    const double v = ctx.criterion(combo);
    if (v < best_sd) {
      best_sd = v;
      best = combo;
    }
    // next combination in lexicographic order
    std::size_t i = k;
    while (i > 0 && combo[i - 1] == n - k + (i - 1)) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t j = i; j < k; ++j) combo[j] = combo[j - 1] + 1;
  }
  auto out = make_result(ctx, best, SelectionMethod::CoordinateDescent);
  out.trace.init = "exhaustive";
  return out;
}

double ComparisonCurves::percent_decrease(std::size_t method_index, std::size_t k) const {
  const double base = random.mean.at(k - 1);
  return 100.0 * (1.0 - expected_sd.at(method_index).at(k - 1) / base);
}

ComparisonCurves comparison_curves(const SelectionContext& ctx,
                                   const std::vector<SelectionMethod>& methods, std::size_t reps,
                                   std::uint64_t seed, const CdOptions& options) {
  if (methods.empty()) throw DomainError("no selection methods requested");
  ComparisonCurves out;
  out.methods = methods;
  out.random = random_baseline(ctx, reps, seed);
  const std::size_t n = ctx.size();
  for (auto method : methods) {
    std::vector<double> column(n);
    for (std::size_t k = 1; k <= n; ++k) {
      switch (method) {
        case SelectionMethod::RankByExpectedInfo:
          column[k - 1] = select_by_rank(ctx, k).expected_sd;
          break;
        case SelectionMethod::CoordinateDescent:
          column[k - 1] = coordinate_descent(ctx, k, CdInit::rank(), 0, options).expected_sd;
          break;
        case SelectionMethod::Adaptive:
          column[k - 1] = adaptive_expected_sd(ctx, k);
          break;
        case SelectionMethod::Random:
          column[k - 1] = out.random.mean[k - 1];
          break;
      }
    }
    out.expected_sd.push_back(std::move(column));
  }
  return out;
}

}  // namespace grmsel
