#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "grmsel/io.hpp"
#include "grmsel/selection.hpp"
#include "oracles.hpp"

using Catch::Approx;
using grmsel::NormalDist;
using grmsel::SelectionContext;
namespace fx = grmsel::io::fixtures;

namespace {

SelectionContext figure2() { return SelectionContext(fx::figure2_bank(), NormalDist{}); }

std::vector<std::size_t> enumerate_best(const SelectionContext& ctx, std::size_t k) {
  std::vector<std::size_t> best;
  double best_sd = std::numeric_limits<double>::infinity();
  oracle::for_each_subset(ctx.size(), k, [&](const std::vector<std::size_t>& s) {
    const double v = oracle::expected_sd_naive(ctx.bank(), s, ctx.rule().nodes, ctx.rule().weights);
    if (v < best_sd) {
      best_sd = v;
      best = s;
    }
  });
  return best;
}

void require_swap_optimal(const SelectionContext& ctx, const grmsel::SubsetResult& r) {
  std::vector<bool> used(ctx.size(), false);
  for (auto i : r.items) used[i] = true;
  for (std::size_t p = 0; p < r.items.size(); ++p) {
    for (std::size_t j = 0; j < ctx.size(); ++j) {
      if (used[j]) continue;
      auto s = r.items;
      s[p] = j;
      REQUIRE(ctx.criterion(s) >= r.expected_sd);
    }
  }
}

}  // namespace

TEST_CASE("method names", "[selection]") {
  using M = grmsel::SelectionMethod;
  REQUIRE(grmsel::parse_selection_method("rank") == M::RankByExpectedInfo);
  REQUIRE(grmsel::parse_selection_method("cd") == M::CoordinateDescent);
  REQUIRE(grmsel::parse_selection_method("adaptive") == M::Adaptive);
  REQUIRE(grmsel::parse_selection_method("random") == M::Random);
  REQUIRE_THROWS_AS(grmsel::parse_selection_method("greedy"), grmsel::DomainError);
  for (auto m : {M::RankByExpectedInfo, M::CoordinateDescent, M::Adaptive, M::Random})
    REQUIRE(grmsel::parse_selection_method(grmsel::to_string(m)) == m);
}

TEST_CASE("rank selection on the Figure-2 bank", "[selection]") {
  const auto ctx = figure2();
  const auto r5 = grmsel::select_by_rank(ctx, 5);
  REQUIRE(r5.items == fx::figure2_set1());
  const auto r1 = grmsel::select_by_rank(ctx, 1);
  REQUIRE(r1.items == std::vector<std::size_t>{3});
  const auto r7 = grmsel::select_by_rank(ctx, 7);
  REQUIRE(r7.items.size() == 7);
  REQUIRE_THROWS_AS(grmsel::select_by_rank(ctx, 0), grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::select_by_rank(ctx, 8), grmsel::DomainError);
  REQUIRE(r5.ids.size() == 5);
  REQUIRE(r5.ids[0] == ctx.bank()[1].id());
}

TEST_CASE("rank sets are nested and the rank curve is non-increasing", "[selection]") {
  std::mt19937_64 rng(31);
  const auto bank = oracle::random_bank(rng, 12, 1, 4);
  const SelectionContext ctx(bank, NormalDist{});
  std::vector<std::size_t> previous;
  double previous_sd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= ctx.size(); ++k) {
    const auto r = grmsel::select_by_rank(ctx, k);
    REQUIRE(std::includes(r.items.begin(), r.items.end(), previous.begin(), previous.end()));
    REQUIRE(r.expected_sd <= previous_sd);
    previous = r.items;
    previous_sd = r.expected_sd;
  }
}

TEST_CASE("rank ties go to the lower index", "[selection]") {
  grmsel::ItemBank bank({grmsel::ItemParams("x", 1.0, {0.5}), grmsel::ItemParams("y", 2.0, {0.0}),
                         grmsel::ItemParams("z", 1.0, {0.5}), grmsel::ItemParams("w", 1.0, {0.5})});
  const SelectionContext ctx(bank, NormalDist{});
  REQUIRE(grmsel::select_by_rank(ctx, 2).items == std::vector<std::size_t>{0, 1});
  REQUIRE(grmsel::select_by_rank(ctx, 3).items == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("coordinate descent on the Figure-2 bank", "[selection]") {
  const auto ctx = figure2();
  const auto cd = grmsel::coordinate_descent(ctx, 5);
  const auto rank = grmsel::select_by_rank(ctx, 5);
  REQUIRE(cd.expected_sd <= 0.64 + 0.02);
  REQUIRE(cd.expected_sd < rank.expected_sd);
  REQUIRE(cd.items == enumerate_best(ctx, 5));
  REQUIRE(cd.items == grmsel::brute_force_best(ctx, 5).items);
  REQUIRE(cd.trace.init == "rank");
  require_swap_optimal(ctx, cd);

  double last = cd.trace.swaps.empty() ? cd.expected_sd : cd.trace.swaps.front().before;
  for (const auto& s : cd.trace.swaps) {
    REQUIRE(s.after < s.before);
    REQUIRE(s.before <= last);
    last = s.after;
  }
  REQUIRE(last == cd.expected_sd);

  const auto full = grmsel::coordinate_descent(ctx, 7);
  REQUIRE(full.items.size() == 7);
  REQUIRE(full.trace.swaps.empty());
}

TEST_CASE("coordinate descent initializations", "[selection]") {
  const auto ctx = figure2();
  const auto bank = ctx.bank();
  const auto r = grmsel::coordinate_descent(
      ctx, 3, grmsel::CdInit::explicit_ids({bank[0].id(), bank[1].id(), bank[2].id()}));
  REQUIRE(r.trace.start_positions == std::vector<std::size_t>{0, 1, 2});
  require_swap_optimal(ctx, r);

  REQUIRE_THROWS_AS(grmsel::coordinate_descent(ctx, 2, grmsel::CdInit::explicit_ids({bank[0].id(), bank[0].id()})),
                    grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::coordinate_descent(ctx, 2, grmsel::CdInit::explicit_ids({bank[0].id()})),
                    grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::coordinate_descent(ctx, 2, grmsel::CdInit::explicit_ids({bank[0].id(), "zz"})),
                    grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::coordinate_descent(ctx, 0), grmsel::DomainError);

  const auto a = grmsel::coordinate_descent(ctx, 4, grmsel::CdInit::random(), 99);
  const auto b = grmsel::coordinate_descent(ctx, 4, grmsel::CdInit::random(), 99);
  REQUIRE(a.items == b.items);
  REQUIRE(a.trace.start_positions == b.trace.start_positions);
  REQUIRE(a.trace.seed == std::optional<std::uint64_t>(99));
}

TEST_CASE("coordinate descent properties on random banks", "[selection][property]") {
  std::mt19937_64 rng(32);
  for (int c = 0; c < 40; ++c) {
    const auto bank = oracle::random_bank(rng, 9, 1, 4, 0.7, 3.5);
    const SelectionContext ctx(bank, NormalDist{});
    const std::size_t k = 2 + static_cast<std::size_t>(c % 4);
    const auto rank = grmsel::select_by_rank(ctx, k);
    const auto cd = grmsel::coordinate_descent(ctx, k);
    REQUIRE(cd.expected_sd <= rank.expected_sd);
    require_swap_optimal(ctx, cd);
    const auto multi = grmsel::coordinate_descent_multistart(ctx, k, 20, 5);
    REQUIRE(multi.expected_sd <= cd.expected_sd);
    const auto brute = grmsel::brute_force_best(ctx, k);
    REQUIRE(brute.expected_sd <= multi.expected_sd);
    REQUIRE(brute.items == enumerate_best(ctx, k));
    REQUIRE(grmsel::adaptive_expected_sd(ctx, k) <= brute.expected_sd);
  }
}

TEST_CASE("threaded coordinate descent matches the serial result", "[selection]") {
  std::mt19937_64 rng(33);
  const auto bank = oracle::random_bank(rng, 20, 2, 4);
  const SelectionContext ctx(bank, NormalDist{});
  grmsel::CdOptions serial, threaded;
  threaded.threads = 4;
  const auto a = grmsel::coordinate_descent(ctx, 6, grmsel::CdInit::random(), 3, serial);
  const auto b = grmsel::coordinate_descent(ctx, 6, grmsel::CdInit::random(), 3, threaded);
  REQUIRE(a.items == b.items);
  REQUIRE(a.expected_sd == b.expected_sd);
  REQUIRE(a.trace.swaps.size() == b.trace.swaps.size());
}

TEST_CASE("adaptive selection at a trait value", "[selection]") {
  const auto bank = fx::figure2_bank();
  REQUIRE(grmsel::select_adaptive_at(bank, 0.0, 5).items == fx::figure2_set1());
  REQUIRE(grmsel::select_adaptive_at(bank, 2.5, 1).items == std::vector<std::size_t>{6});
  REQUIRE(grmsel::select_adaptive_at(bank, 1.0, 7).items.size() == 7);
  const auto r = grmsel::select_adaptive_at(bank, 0.0, 1);
  REQUIRE(r.expected_info == Approx(1.5625).epsilon(1e-14));
  REQUIRE(r.expected_sd == Approx(0.8).epsilon(1e-14));
  REQUIRE_THROWS_AS(grmsel::select_adaptive_at(bank, 0.0, 0), grmsel::DomainError);
}

TEST_CASE("adaptive top-K equals brute force under a point mass", "[selection][property]") {
  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> ut(-3.0, 3.0);
  for (int c = 0; c < 60; ++c) {
    const auto bank = oracle::random_bank(rng, 7 + static_cast<std::size_t>(c % 6), 1, 4);
    const double theta = ut(rng);
    const std::size_t k = 1 + static_cast<std::size_t>(c % 5);
    const SelectionContext point(bank, grmsel::ExplicitGrid{{theta}, {1.0}});
    const auto adaptive = grmsel::select_adaptive_at(bank, theta, k);
    const auto brute = grmsel::brute_force_best(point, k);
    REQUIRE(adaptive.items == brute.items);
  }
}

TEST_CASE("adaptive expected SD", "[selection]") {
  const auto ctx = figure2();
  const double full = ctx.criterion({0, 1, 2, 3, 4, 5, 6});
  REQUIRE(grmsel::adaptive_expected_sd(ctx, 7) == Approx(full).epsilon(1e-14));
  const double a5 = grmsel::adaptive_expected_sd(ctx, 5);
  REQUIRE(a5 <= grmsel::coordinate_descent(ctx, 5).expected_sd);

  // per-node top-K by direct quadrature
  long double oracle_value = 0.0L;
  for (std::size_t k = 0; k < ctx.rule().size(); ++k) {
    std::vector<std::pair<long double, std::size_t>> info;
    for (std::size_t i = 0; i < ctx.size(); ++i)
      info.emplace_back(-oracle::literal_information(ctx.bank()[i], ctx.rule().nodes[k]), i);
    std::sort(info.begin(), info.end());
    long double total = 0.0L;
    for (std::size_t j = 0; j < 5; ++j) total -= info[j].first;
    oracle_value += ctx.rule().weights[k] / std::sqrt(total);
  }
  REQUIRE(a5 == Approx(static_cast<double>(oracle_value)).epsilon(1e-12));

  const auto design = grmsel::adaptive_design(ctx, 5);
  REQUIRE(design.node_sets.size() == ctx.rule().size());
  REQUIRE(design.expected_sd == a5);
}

TEST_CASE("random baseline", "[selection]") {
  const auto ctx = figure2();
  const auto base = grmsel::random_baseline(ctx, 200, 42);
  REQUIRE(base.mean.size() == 7);
  REQUIRE(base.reps == 200);
  REQUIRE(base.mean[6] == ctx.criterion({0, 1, 2, 3, 4, 5, 6}));
  REQUIRE(base.sd[6] == Approx(0.0).margin(1e-15));
  REQUIRE(base.mean[4] >= grmsel::coordinate_descent(ctx, 5).expected_sd);

  const auto once_a = grmsel::random_baseline(ctx, 1, 7);
  const auto once_b = grmsel::random_baseline(ctx, 1, 7);
  REQUIRE(once_a.mean == once_b.mean);
  REQUIRE_THROWS_AS(grmsel::random_baseline(ctx, 0, 7), grmsel::DomainError);

  // one repetition is one permutation: the curve is a prefix chain, so non-increasing
  for (std::size_t k = 1; k < once_a.mean.size(); ++k) REQUIRE(once_a.mean[k] <= once_a.mean[k - 1]);
}

TEST_CASE("brute force", "[selection]") {
  const auto ctx = figure2();
  REQUIRE(grmsel::brute_force_best(ctx, 7).items.size() == 7);
  const auto one = grmsel::brute_force_best(ctx, 1);
  REQUIRE(one.items == enumerate_best(ctx, 1));
  REQUIRE_THROWS_AS(grmsel::brute_force_best(ctx, 3, 10), grmsel::CapExceeded);
  REQUIRE(grmsel::binomial(7, 5) == 21);
  REQUIRE(grmsel::binomial(34, 17) == 2333606220ULL);
  REQUIRE(grmsel::binomial(3, 5) == 0);
  REQUIRE(grmsel::binomial(200, 100) == std::numeric_limits<std::uint64_t>::max());
}

TEST_CASE("comparison curves ordering", "[selection]") {
  using M = grmsel::SelectionMethod;
  const auto ctx = figure2();
  const auto curves = grmsel::comparison_curves(ctx, {M::RankByExpectedInfo, M::CoordinateDescent, M::Adaptive}, 50, 42);
  REQUIRE(curves.max_k() == 7);
  for (std::size_t k = 1; k <= 7; ++k) {
    const double rank = curves.expected_sd[0][k - 1];
    const double cd = curves.expected_sd[1][k - 1];
    const double ad = curves.expected_sd[2][k - 1];
    REQUIRE(ad <= cd);
    REQUIRE(cd <= rank);
    REQUIRE(curves.percent_decrease(0, k) ==
            Approx(100.0 * (1.0 - rank / curves.random.mean[k - 1])).epsilon(1e-14));
  }
  REQUIRE_THROWS_AS(grmsel::comparison_curves(ctx, {}, 10, 1), grmsel::DomainError);
}
