#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "grmsel/grm.hpp"
#include "grmsel/io.hpp"
#include "oracles.hpp"

using Catch::Approx;
using grmsel::ItemBank;
using grmsel::ItemParams;

namespace {

ItemParams central() { return ItemParams("c", 2.5, {0.0}); }

}  // namespace

TEST_CASE("prob_gte boundary conventions and symmetry at the threshold", "[grm]") {
  REQUIRE(grmsel::prob_gte(central(), 0, -3.0) == 1.0);
  REQUIRE(grmsel::prob_gte(central(), 2, 1.0) == 0.0);
  REQUIRE(grmsel::prob_gte(central(), 1, 0.0) == Approx(0.5).margin(1e-15));
  REQUIRE(grmsel::prob_gte(ItemParams("easy", 2.5, {-2.0}), 1, -2.0) == Approx(0.5).margin(1e-15));
  REQUIRE_THROWS_AS(grmsel::prob_gte(central(), 3, 0.0), grmsel::DomainError);
  REQUIRE_THROWS_AS(grmsel::prob_gte(central(), -1, 0.0), grmsel::DomainError);
}

TEST_CASE("prob_eq examples", "[grm]") {
  REQUIRE(grmsel::prob_eq(central(), 1, 0.0) == Approx(0.5).margin(1e-15));
  REQUIRE(grmsel::prob_eq(central(), 0, 0.0) == Approx(0.5).margin(1e-15));
  const ItemParams two("t", 1.0, {-1.0, 1.0});
  const double expected = 1.0 / (1.0 + std::exp(-1.0)) - 1.0 / (1.0 + std::exp(1.0));
  REQUIRE(grmsel::prob_eq(two, 1, 0.0) == Approx(expected).epsilon(1e-14));
  REQUIRE(grmsel::prob_eq(two, 1, 0.0) == Approx(0.46212).margin(1e-5));
  REQUIRE_THROWS_AS(grmsel::prob_eq(two, 3, 0.0), grmsel::DomainError);
}

TEST_CASE("item construction rejects invalid parameters", "[grm]") {
  REQUIRE_THROWS_AS(ItemParams("x", 1.0, {0.5, 0.5}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemParams("x", 1.0, {1.0, 0.0}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemParams("x", 0.0, {0.0}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemParams("x", 1.0, {}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemParams("x", std::nan(""), {0.0}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemBank({central(), central()}), grmsel::DomainError);
  REQUIRE_THROWS_AS(ItemBank({}), grmsel::DomainError);
}

TEST_CASE("information examples", "[grm]") {
  REQUIRE(grmsel::item_information(central(), 0.0) == Approx(1.5625).epsilon(1e-14));
  REQUIRE(grmsel::item_information(central(), 40.0) < 1e-30);
  REQUIRE(grmsel::item_information(central(), -40.0) < 1e-30);
  REQUIRE(grmsel::item_information(central(), 1e6) == 0.0);

  const ItemParams two("t", 1.0, {-1.0, 1.0});
  const double literal = static_cast<double>(oracle::literal_information(two, 0.0L));
  REQUIRE(grmsel::item_information(two, 0.0) == Approx(literal).epsilon(1e-13));

  std::vector<ItemParams> none;
  REQUIRE(grmsel::set_information(none, 0.3) == 0.0);
  std::vector<ItemParams> pair{central(), ItemParams("c2", 2.5, {0.0})};
  REQUIRE(grmsel::set_information(pair, 0.0) == Approx(3.125).epsilon(1e-14));
}

TEST_CASE("Figure-2 set 1 information at zero is the sum of near-peak terms", "[grm]") {
  const auto bank = grmsel::io::fixtures::figure2_bank();
  const auto set1 = grmsel::io::fixtures::figure2_set1();
  long double oracle_sum = 0.0L;
  for (auto i : set1) oracle_sum += oracle::literal_information(bank[i], 0.0L);
  const double value = grmsel::set_information(bank, set1, 0.0);
  REQUIRE(value == Approx(static_cast<double>(oracle_sum)).epsilon(1e-13));
  REQUIRE(value < 5 * 1.5625);
  REQUIRE(value > 5 * 1.5);
}

TEST_CASE("conditional_sd examples", "[grm]") {
  std::vector<ItemParams> one{central()};
  REQUIRE(grmsel::conditional_sd(one, 0.0) == Approx(0.8).epsilon(1e-14));
  std::vector<ItemParams> none;
  REQUIRE_THROWS_AS(grmsel::conditional_sd(none, 0.0), grmsel::NonInformativeSet);
  try {
    grmsel::conditional_sd(none, 1.25);
  } catch (const grmsel::NonInformativeSet& e) {
    REQUIRE(e.theta() == 1.25);
  }

  const auto bank = grmsel::io::fixtures::figure2_bank();
  const auto set1 = grmsel::io::fixtures::figure2_set1();
  const auto set2 = grmsel::io::fixtures::figure2_set2();
  for (double theta : {-2.5, 2.5}) {
    REQUIRE(grmsel::conditional_sd(bank, set2, theta) < 0.5 * grmsel::conditional_sd(bank, set1, theta));
  }
}

TEST_CASE("category probabilities sum to one and agree with the naive form", "[grm][property]") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ut(-8.0, 8.0);
  for (int c = 0; c < 1000; ++c) {
    const auto item = oracle::random_item(rng, "r", 1 + c % 5, 0.2, 5.0);
    const double theta = ut(rng);
    double sum = 0.0;
    for (int m = 0; m <= item.max_level(); ++m) {
      const double p = grmsel::prob_eq(item, m, theta);
      REQUIRE(p >= 0.0);
      REQUIRE(p == Approx(static_cast<double>(oracle::naive_eq(item, m, theta))).margin(1e-14));
      sum += p;
    }
    REQUIRE(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("prob_gte ordering in level and trait", "[grm][property]") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> ut(-6.0, 6.0);
  for (int c = 0; c < 500; ++c) {
    const auto item = oracle::random_item(rng, "r", 1 + c % 4);
    const double t = ut(rng);
    for (int m = 0; m <= item.max_level(); ++m)
      REQUIRE(grmsel::prob_gte(item, m + 1, t) <= grmsel::prob_gte(item, m, t));
    for (int m = 1; m <= item.max_level(); ++m)
      REQUIRE(grmsel::prob_gte(item, m, t + 0.01) > grmsel::prob_gte(item, m, t));
  }
}

TEST_CASE("information properties", "[grm][property]") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> ut(-6.0, 6.0);
  for (int c = 0; c < 300; ++c) {
    // 2-PL reduction
    const auto di = oracle::random_item(rng, "d", 1, 0.2, 5.0);
    const double t = ut(rng);
    const double p = grmsel::prob_gte(di, 1, t);
    const double a = di.discrimination();
    REQUIRE(std::abs(grmsel::item_information(di, t) - a * a * p * (1 - p)) <= 1e-12);

    // agreement with the literal sum, and symmetry about the threshold centre
    const auto item = oracle::random_item(rng, "g", 2 + c % 3);
    REQUIRE(grmsel::item_information(item, t) ==
            Approx(static_cast<double>(oracle::literal_information(item, t))).epsilon(1e-10).margin(1e-300));
    std::vector<double> b = item.thresholds();
    const double centre = 0.5 * (b.front() + b.back());
    std::vector<double> sym(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) sym[i] = centre + 0.5 * (b[i] - b[b.size() - 1 - i]);
    const ItemParams s("s", item.discrimination(), sym);
    const double d = ut(rng);
    REQUIRE(grmsel::item_information(s, centre + d) ==
            Approx(grmsel::item_information(s, centre - d)).epsilon(1e-10).margin(1e-300));
  }
}

TEST_CASE("adding an item never increases the conditional SD", "[grm][property]") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> ut(-5.0, 5.0);
  for (int c = 0; c < 300; ++c) {
    auto bank = oracle::random_bank(rng, 6, 1, 4);
    std::vector<ItemParams> base(bank.items().begin(), bank.items().begin() + 3);
    const double t = ut(rng);
    const double before = grmsel::conditional_sd(base, t);
    for (std::size_t i = 3; i < bank.size(); ++i) {
      auto grown = base;
      grown.push_back(bank[i]);
      REQUIRE(grmsel::conditional_sd(grown, t) <= before);
    }
  }
}

TEST_CASE("information matches Monte-Carlo expected negative curvature", "[grm][oracle]") {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> ut(-2.0, 2.0);
  for (int c = 0; c < 20; ++c) {
    const auto item = oracle::random_item(rng, "m", 1 + c % 4, 0.8, 2.5, -1.5, 1.5);
    const double t = ut(rng);
    const double mc = oracle::mc_information(item, t, 200000, 100 + static_cast<std::uint64_t>(c));
    REQUIRE(grmsel::item_information(item, t) == Approx(mc).epsilon(0.02));
  }
}

TEST_CASE("log-probability derivatives match finite differences", "[grm]") {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> ut(-3.0, 3.0);
  for (int c = 0; c < 100; ++c) {
    const auto item = oracle::random_item(rng, "f", 1 + c % 4);
    const double t = ut(rng);
    const double h = 1e-5;
    for (int m = 0; m <= item.max_level(); ++m) {
      const double fd = (grmsel::log_prob_eq(item, m, t + h) - grmsel::log_prob_eq(item, m, t - h)) / (2 * h);
      REQUIRE(grmsel::dlog_prob_eq(item, m, t) == Approx(fd).epsilon(1e-6).margin(1e-8));
      const double fd2 = -(grmsel::dlog_prob_eq(item, m, t + h) - grmsel::dlog_prob_eq(item, m, t - h)) / (2 * h);
      REQUIRE(grmsel::neg_d2log_prob_eq(item, m, t) == Approx(fd2).epsilon(1e-6).margin(1e-8));
    }
  }
}

TEST_CASE("logistic helpers are stable in the tails", "[grm]") {
  REQUIRE(grmsel::log_logistic(-800.0) == Approx(-800.0));
  REQUIRE(grmsel::log_logistic(800.0) == 0.0);
  REQUIRE(grmsel::logistic_variance(0.0) == 0.25);
  REQUIRE(grmsel::logistic_variance(-800.0) >= 0.0);
  REQUIRE(std::isfinite(grmsel::log_prob_eq(central(), 0, 500.0)));
}

TEST_CASE("bank lookup", "[grm]") {
  const auto bank = grmsel::io::fixtures::figure2_bank();
  REQUIRE(bank.size() == 7);
  const auto idx = bank.index_of(bank[3].id());
  REQUIRE(idx == 3);
  REQUIRE_FALSE(bank.find("nope").has_value());
  REQUIRE_THROWS_AS(bank.index_of("nope"), grmsel::DomainError);
}
