#include "grmsel/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "grmsel/calibration.hpp"
#include "grmsel/estimation.hpp"
#include "grmsel/io.hpp"
#include "grmsel/population.hpp"
#include "grmsel/selection.hpp"

namespace grmsel::cli {

namespace {

using Json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ToleranceFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_to(const std::string& path, std::ostream& fallback,
              const std::function<void(std::ostream&)>& body) {
  if (path.empty() || path == "-") {
    body(fallback);
    return;
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  body(file);
  if (!file) throw IoError("write to '" + path + "' failed");
}

std::string num(double x) { return io::format_double(x); }

// Shared bank/distribution flags.
struct BankFlags {
  std::string bank;
  std::string fixture;
  std::string dist = "normal:0,1";
  int nodes = kDefaultQuadratureNodes;

  void add(CLI::App* app, bool with_dist = true) {
    app->add_option("--bank", bank, "Item bank CSV (item_id,a,b1,...,bM)");
    app->add_option("--fixture", fixture, "Shipped bank instead of --bank: figure2 | synthetic34");
    if (with_dist) {
      app->add_option("--dist", dist, "normal:mean,sd | sample:path | grid:path")->capture_default_str();
      app->add_option("--nodes", nodes, "Gauss-Hermite nodes for normal distributions")
          ->check(CLI::Range(3, 1000))
          ->capture_default_str();
    }
  }

  ItemBank load() const {
    if (bank.empty() == fixture.empty()) throw UsageError("exactly one of --bank or --fixture is required");
    if (!bank.empty()) return io::load_bank(bank);
    if (fixture == "figure2") return io::fixtures::figure2_bank();
    if (fixture == "synthetic34") return io::fixtures::synthetic34_bank();
    throw UsageError("unknown fixture '" + fixture + "'");
  }

  Json echo() const {
    Json j;
    if (!bank.empty()) j["bank"] = bank;
    else j["fixture"] = fixture;
    j["dist"] = dist;
    j["nodes"] = nodes;
    return j;
  }
};

std::vector<double> theta_grid(double lo, double hi, double step) {
  if (!(hi > lo) || !(step > 0.0)) throw UsageError("theta grid needs min < max and step > 0");
  const auto n = static_cast<long>(std::llround((hi - lo) / step));
  std::vector<double> grid;
  for (long i = 0; i < n; ++i) grid.push_back(lo + static_cast<double>(i) * step);
  grid.push_back(hi);
  return grid;
}

Json ids_json(const ItemBank& bank, const std::vector<std::size_t>& items) {
  Json j = Json::array();
  for (auto i : items) j.push_back(bank[i].id());
  return j;
}

Json subset_json(const ItemBank& bank, const SubsetResult& r) {
  Json j;
  j["k"] = r.items.size();
  j["items"] = r.ids;
  j["expected_info"] = r.expected_info;
  j["expected_sd"] = r.expected_sd;
  if (r.method == SelectionMethod::CoordinateDescent) {
    Json t;
    t["init"] = r.trace.init;
    if (r.trace.seed) t["seed"] = *r.trace.seed;
    t["sweeps"] = r.trace.sweeps;
    t["start"] = ids_json(bank, r.trace.start_positions);
    t["final"] = ids_json(bank, r.trace.final_positions);
    Json swaps = Json::array();
    for (const auto& s : r.trace.swaps) {
      swaps.push_back({{"sweep", s.sweep},
                       {"position", s.position + 1},
                       {"out", bank[s.item_out].id()},
                       {"in", bank[s.item_in].id()},
                       {"before", s.before},
                       {"after", s.after}});
    }
    t["swaps"] = std::move(swaps);
    j["trace"] = std::move(t);
  }
  return j;
}

Json bank_json(const ItemBank& bank) {
  Json items = Json::array();
  for (const auto& item : bank) {
    items.push_back({{"id", item.id()}, {"a", item.discrimination()}, {"b", item.thresholds()}});
  }
  return items;
}

void check_k(const std::vector<int>& ks, std::size_t bank_size) {
  if (ks.empty()) throw UsageError("--k is required");
  for (int k : ks) {
    if (k < 1 || static_cast<std::size_t>(k) > bank_size) {
      throw UsageError("--k must lie in 1.." + std::to_string(bank_size) + ", got " + std::to_string(k));
    }
  }
}

io::Dedupe parse_dedupe(const std::string& s) {
  if (s.empty() || s == "none") return io::Dedupe::None;
  if (s == "worst-day") return io::Dedupe::WorstDay;
  throw UsageError("--dedupe accepts none or worst-day");
}

// ---------------------------------------------------------------------------

int cmd_validate(const BankFlags& flags, std::ostream& out) {
  const ItemBank bank = flags.load();
  const auto dist = io::parse_distribution(flags.dist);
  const auto rule = make_quadrature(dist, flags.nodes);
  out << "valid: " << bank.size() << " items\n";
  out << "item_id,a,levels,thresholds,expected_info\n";
  for (const auto& item : bank) {
    out << item.id() << ',' << num(item.discrimination()) << ',' << item.max_level() + 1 << ',';
    for (std::size_t m = 0; m < item.thresholds().size(); ++m) {
      out << (m ? " " : "") << num(item.thresholds()[m]);
    }
    out << ',' << num(expected_item_information(item, rule)) << '\n';
  }
  return kOk;
}

struct InfoFlags {
  double min = -6.0;
  double max = 6.0;
  double step = 0.01;
  std::string output;
  std::string expected;
};

int cmd_info(const BankFlags& flags, const InfoFlags& info, std::ostream& out) {
  const ItemBank bank = flags.load();
  const auto grid = theta_grid(info.min, info.max, info.step);
  write_to(info.output, out, [&](std::ostream& o) {
    o << "theta";
    for (const auto& item : bank) o << ',' << item.id();
    o << '\n';
    for (double t : grid) {
      o << num(t);
      for (const auto& item : bank) o << ',' << num(item_information(item, t));
      o << '\n';
    }
  });
  if (!info.expected.empty()) {
    const auto rule = make_quadrature(io::parse_distribution(flags.dist), flags.nodes);
    write_to(info.expected, out, [&](std::ostream& o) {
      o << "item_id,expected_info\n";
      for (const auto& item : bank) o << item.id() << ',' << num(expected_item_information(item, rule)) << '\n';
    });
  }
  return kOk;
}

struct SelectFlags {
  std::string method;
  std::vector<int> k;
  std::optional<std::uint64_t> seed;
  std::string init = "rank";
  std::size_t restarts = 0;
  std::size_t reps = kDefaultRandomReps;
  int threads = 1;
  bool timing = false;
  std::string output;
};

int cmd_select(const BankFlags& flags, const SelectFlags& sel, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  SelectionMethod method;
  try {
    method = parse_selection_method(sel.method);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const ItemBank bank = flags.load();
  check_k(sel.k, bank.size());
  const SelectionContext ctx(bank, io::parse_distribution(flags.dist), flags.nodes);
  CdOptions opts;
  opts.threads = sel.threads;

  CdInit init = CdInit::rank();
  if (method == SelectionMethod::CoordinateDescent) {
    if (sel.init == "random") {
      init = CdInit::random();
    } else if (sel.init.rfind("ids:", 0) == 0) {
      std::vector<std::string> ids;
      std::stringstream ss(sel.init.substr(4));
      for (std::string id; std::getline(ss, id, ',');) ids.push_back(id);
      init = CdInit::explicit_ids(ids);
    } else if (sel.init != "rank") {
      throw UsageError("--init accepts rank, random or ids:a,b,...");
    }
  }
  const bool randomized = method == SelectionMethod::Random ||
                          (method == SelectionMethod::CoordinateDescent &&
                           (init.kind == CdInit::Kind::Random || sel.restarts > 0));
  if (randomized && !sel.seed) throw UsageError("--seed is required for randomized selection");
  const std::uint64_t seed = sel.seed.value_or(0);

  Json report;
  report["command"] = "select";
  Json inputs = flags.echo();
  inputs["k"] = sel.k;
  if (method == SelectionMethod::CoordinateDescent) {
    inputs["init"] = sel.init;
    inputs["restarts"] = sel.restarts;
  }
  if (method == SelectionMethod::Random) inputs["reps"] = sel.reps;
  report["inputs"] = std::move(inputs);
  report["seed"] = sel.seed ? Json(*sel.seed) : Json(nullptr);
  report["method"] = std::string(to_string(method));

  Json results = Json::array();
  std::optional<RandomBaseline> baseline;
  for (int kk : sel.k) {
    const auto k = static_cast<std::size_t>(kk);
    switch (method) {
      case SelectionMethod::RankByExpectedInfo:
        results.push_back(subset_json(bank, select_by_rank(ctx, k)));
        break;
      case SelectionMethod::CoordinateDescent:
        results.push_back(subset_json(
            bank, sel.restarts > 0 ? coordinate_descent_multistart(ctx, k, sel.restarts, seed, opts)
                                   : coordinate_descent(ctx, k, init, seed, opts)));
        break;
      case SelectionMethod::Adaptive: {
        const auto design = adaptive_design(ctx, k);
        Json nodes = Json::array();
        for (std::size_t q = 0; q < design.node_sets.size(); ++q) {
          nodes.push_back({{"theta", ctx.rule().nodes[q]},
                           {"weight", ctx.rule().weights[q]},
                           {"items", ids_json(bank, design.node_sets[q])}});
        }
        results.push_back({{"k", k}, {"expected_sd", design.expected_sd}, {"nodes", std::move(nodes)}});
        break;
      }
      case SelectionMethod::Random: {
        if (!baseline) baseline = random_baseline(ctx, sel.reps, seed);
        results.push_back({{"k", k},
                           {"expected_sd", baseline->mean[k - 1]},
                           {"spread", baseline->sd[k - 1]},
                           {"reps", baseline->reps}});
        break;
      }
    }
  }
  report["results"] = std::move(results);
  if (sel.timing) {
    report["timing"] = {{"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
  }
  write_to(sel.output, out, [&](std::ostream& o) { o << report.dump(2) << '\n'; });
  return kOk;
}

struct CurvesFlags {
  std::vector<std::string> methods{"rank", "cd", "adaptive"};
  std::size_t reps = kDefaultRandomReps;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string output;
};

int cmd_curves(const BankFlags& flags, const CurvesFlags& c, std::ostream& out) {
  if (!c.seed) throw UsageError("--seed is required (the random baseline is always computed)");
  std::vector<SelectionMethod> methods;
  for (const auto& m : c.methods) {
    try {
      const auto parsed = parse_selection_method(m);
      if (parsed == SelectionMethod::Random) continue;  // always present as the baseline
      methods.push_back(parsed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const ItemBank bank = flags.load();
  const SelectionContext ctx(bank, io::parse_distribution(flags.dist), flags.nodes);
  CdOptions opts;
  opts.threads = c.threads;
  const auto curves = comparison_curves(ctx, methods, c.reps, *c.seed, opts);
  write_to(c.output, out, [&](std::ostream& o) {
    o << 'k';
    for (auto m : curves.methods) o << ',' << to_string(m) << "_sd";
    o << ",random_sd,random_spread";
    for (auto m : curves.methods) o << ',' << to_string(m) << "_pct_vs_random";
    o << '\n';
    for (std::size_t k = 1; k <= curves.max_k(); ++k) {
      o << k;
      for (std::size_t mi = 0; mi < curves.methods.size(); ++mi) o << ',' << num(curves.expected_sd[mi][k - 1]);
      o << ',' << num(curves.random.mean[k - 1]) << ',' << num(curves.random.sd[k - 1]);
      for (std::size_t mi = 0; mi < curves.methods.size(); ++mi) o << ',' << num(curves.percent_decrease(mi, k));
      o << '\n';
    }
  });
  return kOk;
}

struct SimulateFlags {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string truth;
};

int cmd_simulate(const SimulateFlags& s, std::ostream& out) {
  if (!s.seed) throw UsageError("--seed is required");
  auto scenario = io::load_scenario(s.scenario);
  scenario.seed = *s.seed;
  const auto sim = simulate_longitudinal(scenario);
  write_to(s.output, out, [&](std::ostream& o) { io::write_panel_csv(o, sim.panel); });
  if (!s.truth.empty()) {
    write_to(s.truth, out, [&](std::ostream& o) {
      o << "subject_id,u0,u1\n";
      for (std::size_t j = 0; j < sim.subject_ids.size(); ++j) {
        o << sim.subject_ids[j] << ',' << num(sim.effects[j][0]) << ',' << num(sim.effects[j][1]) << '\n';
      }
    });
  }
  return kOk;
}

struct EstimateFlags {
  std::optional<std::string> responses;
  std::string panel;
  std::string subject;
  std::string method = "map";
  std::string prior = "normal:0,1";
  bool trajectory = false;
  TrajectoryPrior population;
  std::string dedupe;
  std::string output;
};

Json summary_json(const PosteriorSummary& p) {
  return {{"estimate", p.estimate},
          {"sd", p.sd},
          {"method", p.method == EstimationMethod::MLE ? "mle" : "map"},
          {"boundary_pattern", p.boundary_pattern},
          {"clipped", p.clipped},
          {"iterations", p.iterations}};
}

int cmd_estimate(const BankFlags& flags, const EstimateFlags& e, std::ostream& out) {
  if (e.method != "mle" && e.method != "map") throw UsageError("--method accepts mle or map");
  if (e.responses.has_value() == !e.panel.empty()) {
    throw UsageError("exactly one of --responses or --panel is required");
  }
  if (e.trajectory && e.panel.empty()) throw UsageError("--trajectory needs --panel");
  const ItemBank bank = flags.load();
  NormalDist prior;
  {
    const auto d = io::parse_distribution(e.prior);
    if (!std::holds_alternative<NormalDist>(d)) throw UsageError("--prior must be normal:mean,sd");
    prior = std::get<NormalDist>(d);
  }
  auto score = [&](const ResponseSet& r) {
    return e.method == "mle" ? estimate_theta_mle(r, bank) : estimate_theta_map(r, bank, prior);
  };

  Json report;
  report["command"] = "estimate";
  if (e.responses) {
    report["inputs"] = {{"responses", *e.responses}, {"method", e.method}, {"prior", e.prior}};
    report["result"] = summary_json(score(io::parse_responses(*e.responses)));
  } else {
    const auto panel = io::load_panel(e.panel, parse_dedupe(e.dedupe));
    const auto subjects = group_by_subject(panel, item_specs(bank));
    Json results = Json::array();
    for (const auto& s : subjects) {
      if (!e.subject.empty() && s.id != e.subject) continue;
      if (e.trajectory) {
        const auto t = estimate_trajectory_map(s.observations, bank, e.population);
        results.push_back({{"subject_id", s.id},
                           {"u0", t.u0},
                           {"u1", t.u1},
                           {"covariance", t.covariance},
                           {"times", t.times},
                           {"severity", t.severity},
                           {"converged", t.converged},
                           {"iterations", t.iterations},
                           {"gradient_norm", t.gradient_norm}});
      } else {
        std::map<double, ResponseSet> visits;
        for (const auto& o : s.observations) visits[o.time].push_back({bank[o.item].id(), o.level});
        for (const auto& [time, responses] : visits) {
          Json r = summary_json(score(responses));
          r["subject_id"] = s.id;
          r["time_years"] = time;
          results.push_back(std::move(r));
        }
      }
    }
    if (!e.subject.empty() && results.empty()) throw DomainError("subject '" + e.subject + "' not in panel");
    Json inputs = {{"panel", e.panel}, {"method", e.trajectory ? "trajectory-map" : e.method}};
    if (e.trajectory) {
      inputs["population"] = {{"beta0", e.population.beta0},
                              {"beta1", e.population.beta1},
                              {"var_u0", e.population.var_u0},
                              {"var_u1", e.population.var_u1},
                              {"rho", e.population.rho}};
    } else {
      inputs["prior"] = e.prior;
    }
    report["inputs"] = std::move(inputs);
    report["results"] = std::move(results);
  }
  write_to(e.output, out, [&](std::ostream& o) { o << report.dump(2) << '\n'; });
  return kOk;
}

struct CalibrateFlags {
  std::string panel;
  std::string stage = "both";
  std::string stage1_bank;
  std::string template_bank;
  std::string priors;
  std::string bank_out;
  std::string dedupe;
  std::string output;
  int max_sweeps = 5000;
  int threads = 1;
};

PriorSpec load_priors(const std::string& path) {
  PriorSpec p = default_priors();
  if (path.empty()) return p;
  std::ifstream in(path);
  if (!in) throw io::ParseError(path, 0, "cannot open file");
  Json j;
  try {
    j = Json::parse(in);
    auto read = [&](const char* key, TruncatedNormal& t) {
      if (!j.contains(key)) return;
      const auto& v = j.at(key);
      t.mean = v.value("mean", t.mean);
      t.variance = v.value("variance", t.variance);
      t.lower = v.value("lower", t.lower);
      t.upper = v.value("upper", t.upper);
    };
    read("slope", p.slope);
    read("slope_variance", p.slope_variance);
    read("threshold_increment", p.threshold_increment);
  } catch (const nlohmann::json::exception& e) {
    throw io::ParseError(path, 0, e.what());
  }
  return p;
}

void print_ledger(std::ostream& o, const ParameterLedger& ledger) {
  o << std::left << std::setw(30) << "Parameter" << std::right << std::setw(8) << "N" << std::setw(8)
    << "Fixed" << std::setw(11) << "Estimated" << std::setw(8) << "Stage1" << std::setw(8) << "Stage2"
    << '\n';
  auto row = [&](const LedgerRow& r) {
    o << std::left << std::setw(30) << r.name << std::right << std::setw(8) << r.n << std::setw(8)
      << r.fixed << std::setw(11) << r.estimated << std::setw(8) << r.stage1 << std::setw(8) << r.stage2
      << '\n';
  };
  for (const auto& r : ledger.rows) row(r);
  row(ledger.total());
}

int cmd_calibrate(const CalibrateFlags& c, std::ostream& out) {
  if (c.stage != "1" && c.stage != "2" && c.stage != "both") throw UsageError("--stage accepts 1, 2 or both");
  if (c.stage == "2" && c.stage1_bank.empty()) throw UsageError("--stage 2 needs --stage1-bank");
  const auto panel = io::load_panel(c.panel, parse_dedupe(c.dedupe));

  Json report;
  report["command"] = "calibrate";
  report["inputs"] = {{"panel", c.panel}, {"stage", c.stage}};
  std::optional<ItemBank> stage_one;
  std::vector<int> max_levels;
  std::size_t n_subjects = 0;

  if (c.stage != "2") {
    std::vector<ItemSpec> specs;
    if (!c.template_bank.empty()) {
      specs = item_specs(io::load_bank(c.template_bank));
    } else {
      std::map<std::string, std::size_t> index;
      for (const auto& r : panel.records) {
        auto [it, inserted] = index.emplace(r.item_id, specs.size());
        if (inserted) specs.push_back({r.item_id, 0});
        specs[it->second].max_level = std::max(specs[it->second].max_level, r.level);
      }
    }
    CrossSectionalOptions opts;
    opts.threads = c.threads;
    const auto fit = fit_grm_cross_sectional(panel, specs, opts);
    stage_one = fit.bank;
    n_subjects = fit.subject_ids.size();
    report["stage1"] = {{"bank", bank_json(fit.bank)},
                        {"converged", fit.converged},
                        {"iterations", fit.iterations},
                        {"marginal_loglik", fit.loglik_trace.back()},
                        {"subjects", fit.subject_ids.size()}};
    if (!c.bank_out.empty() && c.stage == "1") {
      write_to(c.bank_out, out, [&](std::ostream& o) { io::write_bank_csv(o, fit.bank); });
    }
  } else {
    stage_one = io::load_bank(c.stage1_bank);
  }
  for (const auto& item : *stage_one) max_levels.push_back(item.max_level());

  ParameterLedger ledger;
  if (c.stage != "1") {
    LongitudinalOptions opts;
    opts.max_sweeps = c.max_sweeps;
    opts.threads = c.threads;
    const auto fit = fit_longitudinal_map(panel, *stage_one, load_priors(c.priors), opts);
    ledger = fit.ledger;
    Json subjects = Json::array();
    for (const auto& s : fit.subjects) subjects.push_back({{"id", s.id}, {"u0", s.u0}, {"u1", s.u1}});
    report["stage2"] = {{"beta0", fit.beta0},
                        {"beta1", fit.beta1},
                        {"var_u0", fit.var_u0},
                        {"var_u1", fit.var_u1},
                        {"rho", fit.rho},
                        {"bank", bank_json(fit.bank)},
                        {"converged", fit.converged},
                        {"sweeps", fit.sweeps},
                        {"gradient_norm", fit.gradient_norm},
                        {"objective_trace", fit.objective_trace},
                        {"warnings", fit.warnings},
                        {"subjects", std::move(subjects)}};
    if (!c.bank_out.empty()) write_to(c.bank_out, out, [&](std::ostream& o) { io::write_bank_csv(o, fit.bank); });
    out << "beta1 " << num(fit.beta1) << "\nvar_u1 " << num(fit.var_u1) << "\nrho " << num(fit.rho)
        << "\nconverged " << (fit.converged ? "yes" : "no") << " after " << fit.sweeps << " sweeps\n";
    for (const auto& w : fit.warnings) out << "warning: " << w << '\n';
  } else {
    ledger = parameter_ledger(max_levels, n_subjects);
  }
  Json rows = Json::array();
  for (const auto& r : ledger.rows) {
    rows.push_back({{"parameter", r.name}, {"n", r.n}, {"fixed", r.fixed}, {"estimated", r.estimated},
                    {"stage1", r.stage1}, {"stage2", r.stage2}});
  }
  report["ledger"] = std::move(rows);
  print_ledger(out, ledger);
  if (!c.output.empty()) write_to(c.output, out, [&](std::ostream& o) { o << report.dump(2) << '\n'; });
  return kOk;
}

struct Fig2Flags {
  int nodes = kDefaultQuadratureNodes;
  bool json = false;
  std::string plot_data;
};

int cmd_example_fig2(const Fig2Flags& f, std::ostream& out) {
  const ItemBank bank = io::fixtures::figure2_bank();
  const auto rule = gauss_hermite_normal(f.nodes);
  const InformationTable table(bank, rule);
  const auto set1 = io::fixtures::figure2_set1();
  const auto set2 = io::fixtures::figure2_set2();
  struct Row {
    const char* name;
    double reported;
    double computed;
  };
  const Row rows[] = {
      {"set1_expected_info", 4.07, table.expected_set_information(set1)},
      {"set2_expected_info", 2.87, table.expected_set_information(set2)},
      {"set1_expected_sd", 0.77, table.expected_sd(set1)},
      {"set2_expected_sd", 0.64, table.expected_sd(set2)},
  };
  constexpr double kTolerance = 0.02;
  bool all_ok = true;
  if (f.json) {
    Json j;
    j["nodes"] = f.nodes;
    j["tolerance"] = kTolerance;
    Json list = Json::array();
    for (const auto& r : rows) {
      const bool ok = std::abs(r.computed - r.reported) <= kTolerance;
      all_ok = all_ok && ok;
      list.push_back({{"quantity", r.name}, {"reported", r.reported}, {"computed", r.computed}, {"ok", ok}});
    }
    j["comparison"] = std::move(list);
    out << j.dump(2) << '\n';
  } else {
    out << "quantity,reported,computed,ok\n";
    for (const auto& r : rows) {
      const bool ok = std::abs(r.computed - r.reported) <= kTolerance;
      all_ok = all_ok && ok;
      out << r.name << ',' << r.reported << ',' << std::fixed << std::setprecision(4) << r.computed
          << std::defaultfloat << std::setprecision(6) << ',' << (ok ? "yes" : "no") << '\n';
    }
  }
  if (!f.plot_data.empty()) {
    write_to(f.plot_data, out, [&](std::ostream& o) {
      o << "theta";
      for (const auto& item : bank) o << ',' << item.id();
      o << ",set1_info,set2_info,set1_sd,set2_sd\n";
      for (double t : theta_grid(-4.0, 4.0, 0.01)) {
        o << num(t);
        for (const auto& item : bank) o << ',' << num(item_information(item, t));
        o << ',' << num(set_information(bank, set1, t)) << ',' << num(set_information(bank, set2, t)) << ','
          << num(conditional_sd(bank, set1, t)) << ',' << num(conditional_sd(bank, set2, t)) << '\n';
      }
    });
  }
  if (!all_ok) throw ToleranceFailure("computed values outside +-0.02 of the reported ones");
  return kOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Item subset selection for graded-response item banks", "grmsel"};
  app.require_subcommand(1);

  BankFlags bank_flags;

  auto* validate_cmd = app.add_subcommand("validate", "Check a bank and print a per-item summary");
  bank_flags.add(validate_cmd);

  InfoFlags info;
  auto* info_cmd = app.add_subcommand("info", "Item information over a theta grid (CSV)");
  bank_flags.add(info_cmd);
  info_cmd->add_option("--min", info.min)->capture_default_str();
  info_cmd->add_option("--max", info.max)->capture_default_str();
  info_cmd->add_option("--step", info.step)->capture_default_str();
  info_cmd->add_option("--output,-o", info.output);
  info_cmd->add_option("--expected", info.expected, "Also write expected information per item here");

  SelectFlags sel;
  auto* select_cmd = app.add_subcommand("select", "Select K-item subsets; JSON report");
  bank_flags.add(select_cmd);
  select_cmd->add_option("--method", sel.method, "rank | cd | adaptive | random")->required();
  select_cmd->add_option("--k", sel.k, "Subset size(s), comma separated")->delimiter(',')->required();
  select_cmd->add_option("--seed", sel.seed);
  select_cmd->add_option("--init", sel.init, "cd start: rank | random | ids:a,b,...")->capture_default_str();
  select_cmd->add_option("--restarts", sel.restarts, "cd: rank start plus this many random starts");
  select_cmd->add_option("--reps", sel.reps)->check(CLI::PositiveNumber)->capture_default_str();
  select_cmd->add_option("--threads", sel.threads)->check(CLI::PositiveNumber);
  select_cmd->add_flag("--timing", sel.timing, "Add wall-clock timing to the report");
  select_cmd->add_option("--output,-o", sel.output);

  CurvesFlags curves;
  auto* curves_cmd = app.add_subcommand("curves", "Expected SD by K for each method (CSV)");
  bank_flags.add(curves_cmd);
  curves_cmd->add_option("--methods", curves.methods)->delimiter(',')->capture_default_str();
  curves_cmd->add_option("--reps", curves.reps)->check(CLI::PositiveNumber)->capture_default_str();
  curves_cmd->add_option("--seed", curves.seed);
  curves_cmd->add_option("--threads", curves.threads)->check(CLI::PositiveNumber);
  curves_cmd->add_option("--output,-o", curves.output);

  SimulateFlags sim;
  auto* simulate_cmd = app.add_subcommand("simulate", "Simulate a longitudinal panel (CSV)");
  simulate_cmd->add_option("--scenario", sim.scenario, "Scenario JSON")->required();
  simulate_cmd->add_option("--seed", sim.seed);
  simulate_cmd->add_option("--output,-o", sim.output);
  simulate_cmd->add_option("--truth", sim.truth, "Write the true (u0, u1) per subject here");

  EstimateFlags est;
  auto* estimate_cmd = app.add_subcommand("estimate", "Score respondents; JSON report");
  bank_flags.add(estimate_cmd, false);
  estimate_cmd->add_option("--responses", est.responses, "id=level,id=level,...");
  estimate_cmd->add_option("--panel", est.panel);
  estimate_cmd->add_option("--subject", est.subject);
  estimate_cmd->add_option("--method", est.method, "mle | map")->capture_default_str();
  estimate_cmd->add_option("--prior", est.prior, "normal:mean,sd")->capture_default_str();
  estimate_cmd->add_flag("--trajectory", est.trajectory, "Fit (u0, u1) per subject");
  estimate_cmd->add_option("--beta0", est.population.beta0)->capture_default_str();
  estimate_cmd->add_option("--beta1", est.population.beta1)->capture_default_str();
  estimate_cmd->add_option("--var-u0", est.population.var_u0)->capture_default_str();
  estimate_cmd->add_option("--var-u1", est.population.var_u1)->capture_default_str();
  estimate_cmd->add_option("--rho", est.population.rho)->capture_default_str();
  estimate_cmd->add_option("--dedupe", est.dedupe, "none | worst-day");
  estimate_cmd->add_option("--output,-o", est.output);

  CalibrateFlags cal;
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Two-stage calibration of a panel");
  calibrate_cmd->add_option("--panel", cal.panel)->required();
  calibrate_cmd->add_option("--stage", cal.stage, "1 | 2 | both")->capture_default_str();
  calibrate_cmd->add_option("--stage1-bank", cal.stage1_bank, "Stage-1 bank for --stage 2");
  calibrate_cmd->add_option("--bank", cal.template_bank, "Bank whose ids and level counts define the items");
  calibrate_cmd->add_option("--priors", cal.priors, "Prior JSON overriding the defaults");
  calibrate_cmd->add_option("--bank-out", cal.bank_out, "Write the estimated bank CSV here");
  calibrate_cmd->add_option("--max-sweeps", cal.max_sweeps)->check(CLI::PositiveNumber);
  calibrate_cmd->add_option("--threads", cal.threads)->check(CLI::PositiveNumber);
  calibrate_cmd->add_option("--dedupe", cal.dedupe, "none | worst-day");
  calibrate_cmd->add_option("--output,-o", cal.output, "Write the fit report JSON here");

  Fig2Flags fig2;
  auto* fig2_cmd = app.add_subcommand("example-fig2", "Reproduce the seven-item expected information/SD example");
  fig2_cmd->add_option("--nodes", fig2.nodes)->check(CLI::Range(3, 1000))->capture_default_str();
  fig2_cmd->add_flag("--json", fig2.json);
  fig2_cmd->add_option("--plot-data", fig2.plot_data, "Write theta-grid plot data CSV here");

  auto fail = [&](const char* code, const std::string& message, int exit) {
    err << "error: " << code << ": " << one_line(message) << '\n';
    return exit;
  };

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (validate_cmd->parsed()) return cmd_validate(bank_flags, out);
    if (info_cmd->parsed()) return cmd_info(bank_flags, info, out);
    if (select_cmd->parsed()) return cmd_select(bank_flags, sel, out);
    if (curves_cmd->parsed()) return cmd_curves(bank_flags, curves, out);
    if (simulate_cmd->parsed()) return cmd_simulate(sim, out);
    if (estimate_cmd->parsed()) return cmd_estimate(bank_flags, est, out);
    if (calibrate_cmd->parsed()) return cmd_calibrate(cal, out);
    if (fig2_cmd->parsed()) return cmd_example_fig2(fig2, out);
    return fail("USAGE", "no command", kUsage);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail("USAGE", e.what(), kUsage);
  } catch (const UsageError& e) {
    return fail("USAGE", e.what(), kUsage);
  } catch (const io::ParseError& e) {
    return fail("PARSE", e.what(), kValidation);
  } catch (const DegenerateItem& e) {
    return fail("DEGENERATE_ITEM", e.what(), kValidation);
  } catch (const CapExceeded& e) {
    return fail("CAP_EXCEEDED", e.what(), kValidation);
  } catch (const IoError& e) {
    return fail("IO", e.what(), kValidation);
  } catch (const std::invalid_argument& e) {
    return fail("VALIDATION", e.what(), kValidation);
  } catch (const NonInformativeSet& e) {
    return fail("NON_INFORMATIVE", e.what(), kNumerical);
  } catch (const ToleranceFailure& e) {
    return fail("TOLERANCE", e.what(), kNumerical);
  } catch (const std::exception& e) {
    return fail("NUMERICAL", e.what(), kNumerical);
  }
}

}  // namespace grmsel::cli
