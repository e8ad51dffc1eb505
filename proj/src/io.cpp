#include "grmsel/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace grmsel::io {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

bool parse_number(const std::string& cell, double& out) {
  if (cell.empty()) return false;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_integer(const std::string& cell, int& out) {
  if (cell.empty()) return false;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool blank(const std::string& line) { return trim(line).empty(); }

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  return in;
}

}  // namespace

ParseError::ParseError(const std::string& source, std::size_t row, const std::string& what)
    : DomainError(source + (row > 0 ? ":" + std::to_string(row) : std::string()) + ": " + what),
      row_(row) {}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

ItemBank read_bank_csv(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t row = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    if (blank(line)) continue;
    header = split_cells(line);
    break;
  }
  if (header.empty()) throw ParseError(source, 0, "empty bank file");
  if (header.size() < 3 || header[0] != "item_id" || header[1] != "a") {
    throw ParseError(source, row, "header must be item_id,a,b1,...,bM");
  }
  for (std::size_t c = 2; c < header.size(); ++c) {
    if (header[c] != "b" + std::to_string(c - 1)) {
      throw ParseError(source, row, "unexpected column '" + header[c] + "'");
    }
  }

  std::vector<ItemParams> items;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++row;
    if (blank(line)) continue;
    auto cells = split_cells(line);
    if (cells.size() > header.size()) throw ParseError(source, row, "too many cells");
    cells.resize(header.size());
    if (cells[0].empty()) throw ParseError(source, row, "missing item_id");
    if (!seen.insert(cells[0]).second) throw ParseError(source, row, "duplicate item_id '" + cells[0] + "'");
    double a = 0.0;
    if (!parse_number(cells[1], a)) throw ParseError(source, row, "bad discrimination '" + cells[1] + "'");
    std::vector<double> b;
    bool ended = false;
    for (std::size_t c = 2; c < cells.size(); ++c) {
      if (cells[c].empty()) {
        ended = true;
        continue;
      }
      if (ended) throw ParseError(source, row, "threshold after a blank cell");
      double v = 0.0;
      if (!parse_number(cells[c], v)) throw ParseError(source, row, "bad threshold '" + cells[c] + "'");
      b.push_back(v);
    }
    try {
      items.emplace_back(cells[0], a, std::move(b));
    } catch (const DomainError& e) {
      throw ParseError(source, row, e.what());
    }
  }
  if (items.empty()) throw ParseError(source, row, "bank has no items");
  try {
    return ItemBank(std::move(items));
  } catch (const DomainError& e) {
    throw ParseError(source, 0, e.what());
  }
}

ItemBank load_bank(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_bank_csv(in, path.string());
}

void write_bank_csv(std::ostream& out, const ItemBank& bank) {
  int width = 0;
  for (const auto& item : bank) width = std::max(width, item.max_level());
  out << "item_id,a";
  for (int m = 1; m <= width; ++m) out << ",b" << m;
  out << '\n';
  for (const auto& item : bank) {
    out << item.id() << ',' << format_double(item.discrimination());
    for (double b : item.thresholds()) out << ',' << format_double(b);
    for (int m = item.max_level(); m < width; ++m) out << ',';
    out << '\n';
  }
}

ResponsePanel read_panel_csv(std::istream& in, Dedupe dedupe, const std::string& source) {
  std::string line;
  std::size_t row = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++row;
    if (blank(line)) continue;
    const auto header = split_cells(line);
    if (header != std::vector<std::string>{"subject_id", "time_years", "item_id", "level"}) {
      throw ParseError(source, row, "header must be subject_id,time_years,item_id,level");
    }
    have_header = true;
    break;
  }
  if (!have_header) throw ParseError(source, 0, "empty panel file");

  struct Row {
    PanelRecord rec;
    std::size_t line;
    std::size_t administration;
  };
  std::vector<Row> rows;
  std::map<std::tuple<std::string, double, std::string>, std::size_t> occurrences;
  while (std::getline(in, line)) {
    ++row;
    if (blank(line)) continue;
    const auto cells = split_cells(line);
    if (cells.size() != 4) throw ParseError(source, row, "expected 4 cells");
    PanelRecord rec;
    rec.subject_id = cells[0];
    rec.item_id = cells[2];
    if (rec.subject_id.empty() || rec.item_id.empty()) throw ParseError(source, row, "missing id");
    if (!parse_number(cells[1], rec.time) || rec.time < 0.0) {
      throw ParseError(source, row, "bad time_years '" + cells[1] + "'");
    }
    if (!parse_integer(cells[3], rec.level) || rec.level < 0) {
      throw ParseError(source, row, "bad level '" + cells[3] + "'");
    }
    const std::size_t seen = occurrences[{rec.subject_id, rec.time, rec.item_id}]++;
    if (seen > 0 && dedupe == Dedupe::None) {
      throw ParseError(source, row,
                       "duplicate (subject, time, item) record; keeping the worst day is a "
                       "preprocessing choice, pass --dedupe worst-day to apply it");
    }
    rows.push_back({std::move(rec), row, seen});
  }

  ResponsePanel panel;
  if (dedupe == Dedupe::None) {
    for (auto& r : rows) panel.records.push_back(std::move(r.rec));
    return panel;
  }
  // Highest total per (subject, time); ties keep the earlier administration.
  std::map<std::pair<std::string, double>, std::vector<long>> totals;
  for (const auto& r : rows) {
    auto& t = totals[{r.rec.subject_id, r.rec.time}];
    if (t.size() <= r.administration) t.resize(r.administration + 1, 0);
    t[r.administration] += r.rec.level;
  }
  for (auto& r : rows) {
    const auto& t = totals.at({r.rec.subject_id, r.rec.time});
    const auto keep = static_cast<std::size_t>(std::max_element(t.begin(), t.end()) - t.begin());
    if (r.administration == keep) panel.records.push_back(std::move(r.rec));
  }
  return panel;
}

ResponsePanel load_panel(const std::filesystem::path& path, Dedupe dedupe) {
  auto in = open_input(path);
  return read_panel_csv(in, dedupe, path.string());
}

void write_panel_csv(std::ostream& out, const ResponsePanel& panel) {
  out << "subject_id,time_years,item_id,level\n";
  for (const auto& r : panel.records) {
    out << r.subject_id << ',' << format_double(r.time) << ',' << r.item_id << ',' << r.level << '\n';
  }
}

LatentDistribution parse_distribution(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ParseError("--dist", 0, "expected kind:args, got '" + spec + "'");
  const std::string kind = spec.substr(0, colon);
  const std::string args = spec.substr(colon + 1);
  LatentDistribution dist;
  if (kind == "normal") {
    const auto cells = split_cells(args);
    NormalDist n;
    if (cells.size() != 2 || !parse_number(cells[0], n.mean) || !parse_number(cells[1], n.sd)) {
      throw ParseError("--dist", 0, "expected normal:mean,sd");
    }
    dist = n;
  } else if (kind == "sample") {
    auto in = open_input(args);
    EmpiricalSample s;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
      ++row;
      const auto cell = trim(line);
      if (cell.empty()) continue;
      double v = 0.0;
      if (!parse_number(cell, v)) {
        if (row == 1) continue;  // header
        throw ParseError(args, row, "bad value '" + cell + "'");
      }
      s.values.push_back(v);
    }
    if (s.values.empty()) throw ParseError(args, 0, "sample has no values");
    dist = std::move(s);
  } else if (kind == "grid") {
    auto in = open_input(args);
    ExplicitGrid g;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
      ++row;
      if (blank(line)) continue;
      const auto cells = split_cells(line);
      double node = 0.0;
      double weight = 0.0;
      if (cells.size() != 2 || !parse_number(cells[0], node) || !parse_number(cells[1], weight)) {
        if (row == 1) continue;  // header
        throw ParseError(args, row, "expected theta,weight");
      }
      g.nodes.push_back(node);
      g.weights.push_back(weight);
    }
    dist = std::move(g);
  } else {
    throw ParseError("--dist", 0, "unknown distribution kind '" + kind + "'");
  }
  try {
    validate(dist);
  } catch (const DomainError& e) {
    throw ParseError("--dist", 0, e.what());
  }
  return dist;
}

SimulationScenario parse_scenario(const std::string& json_text, const std::filesystem::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("<scenario>", 0, e.what());
  }
  if (!j.is_object()) throw ParseError("<scenario>", 0, "scenario must be a JSON object");
  static const std::set<std::string> known{"bank", "items", "beta0", "beta1", "var_u0", "var_u1",
                                           "rho", "n_subjects", "visit_times", "schedules", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ParseError("<scenario>", 0, "unknown key '" + key + "'");
  }
  try {
    std::vector<ItemParams> items;
    if (j.contains("bank") == j.contains("items")) {
      throw ParseError("<scenario>", 0, "exactly one of 'bank' or 'items' is required");
    }
    ItemBank bank = j.contains("bank") ? load_bank(base_dir / j.at("bank").get<std::string>())
                                       : ItemBank([&] {
                                           std::vector<ItemParams> v;
                                           for (const auto& it : j.at("items")) {
                                             v.emplace_back(it.at("id").get<std::string>(),
                                                            it.at("a").get<double>(),
                                                            it.at("b").get<std::vector<double>>());
                                           }
                                           return v;
                                         }());
    SimulationScenario s{std::move(bank), {}, {}, {}, 100, 1};
    s.visit_times = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
    s.population.beta0 = j.value("beta0", s.population.beta0);
    s.population.beta1 = j.value("beta1", s.population.beta1);
    s.population.var_u0 = j.value("var_u0", s.population.var_u0);
    s.population.var_u1 = j.value("var_u1", s.population.var_u1);
    s.population.rho = j.value("rho", s.population.rho);
    s.n_subjects = j.value("n_subjects", s.n_subjects);
    s.seed = j.value("seed", s.seed);
    if (j.contains("visit_times")) s.visit_times = j.at("visit_times").get<std::vector<double>>();
    if (j.contains("schedules")) s.schedules = j.at("schedules").get<std::vector<std::vector<double>>>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("<scenario>", 0, e.what());
  }
}

SimulationScenario load_scenario(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::stringstream text;
  text << in.rdbuf();
  return parse_scenario(text.str(), path.parent_path().empty() ? "." : path.parent_path());
}

ResponseSet parse_responses(const std::string& text) {
  ResponseSet out;
  if (trim(text).empty()) return out;
  for (const auto& cell : split_cells(text)) {
    const auto eq = cell.find('=');
    int level = 0;
    if (eq == std::string::npos || !parse_integer(trim(cell.substr(eq + 1)), level)) {
      throw ParseError("--responses", 0, "expected id=level, got '" + cell + "'");
    }
    out.push_back({trim(cell.substr(0, eq)), level});
  }
  return out;
}

namespace fixtures {

ItemBank figure2_bank() {
  const double b[] = {-2.0, -0.2, -0.1, 0.0, 0.1, 0.2, 2.0};
  std::vector<ItemParams> items;
  for (int i = 0; i < 7; ++i) items.emplace_back("item" + std::to_string(i + 1), 2.5, std::vector{b[i]});
  return ItemBank(std::move(items));
}

std::vector<std::size_t> figure2_set1() { return {1, 2, 3, 4, 5}; }
std::vector<std::size_t> figure2_set2() { return {0, 2, 3, 4, 6}; }

ItemBank synthetic34_bank() {
  struct Row {
    double a, b1, b2, b3, b4;
  };
  static const Row rows[34] = {
      {1.05, 0.76, 1.66, 3.35, 4.71}, {1.96, 1.55, 2.38, 3.69, 4.81}, {1.29, 1.09, 2.11, 3.33, 5.33},
      {2.75, 1.68, 3.02, 4.71, 6.20}, {2.97, 0.35, 1.51, 2.77, 4.14}, {3.00, 0.02, 0.87, 2.05, 3.75},
      {1.67, 0.90, 1.80, 3.34, 4.47}, {3.01, 1.12, 1.90, 3.56, 4.87}, {1.69, 1.49, 2.96, 4.17, 5.35},
      {1.55, 1.23, 2.42, 3.91, 5.85}, {3.14, 1.12, 1.84, 3.12, 4.64}, {1.94, 1.26, 2.67, 3.96, 5.70},
      {1.96, 0.06, 1.38, 2.60, 4.55}, {2.61, 1.63, 3.02, 4.57, 6.01}, {1.11, 1.63, 2.84, 4.29, 5.83},
      {1.23, 1.61, 2.84, 4.28, 5.45}, {3.22, 0.39, 1.53, 2.76, 3.98}, {2.86, 0.62, 1.58, 2.69, 3.71},
      {2.76, 0.10, 0.98, 1.98, 3.06}, {2.52, 1.06, 1.85, 2.91, 4.80}, {2.24, 0.48, 1.79, 2.77, 4.75},
      {1.13, 0.00, 1.12, 2.09, 3.19}, {3.56, 0.17, 1.04, 2.18, 3.66}, {2.20, 1.20, 2.56, 3.92, 5.41},
      {2.63, 0.76, 2.06, 3.23, 4.97}, {1.46, 0.82, 2.00, 3.63, 5.05}, {2.56, 1.38, 2.14, 3.78, 5.46},
      {2.28, 0.25, 1.52, 2.96, 3.98}, {3.02, 0.56, 1.81, 3.37, 5.34}, {2.63, 1.11, 2.49, 3.59, 4.98},
      {1.48, 0.41, 1.43, 2.43, 3.64}, {1.51, 1.46, 2.39, 3.46, 4.98}, {2.06, 0.49, 1.90, 2.86, 4.23},
      {0.98, 0.45, 1.65, 3.08, 4.92},
  };
  std::vector<ItemParams> items;
  for (int i = 0; i < 34; ++i) {
    char id[8];
    std::snprintf(id, sizeof id, "m%02d", i + 1);
    const auto& r = rows[i];
    items.emplace_back(id, r.a, std::vector{r.b1, r.b2, r.b3, r.b4});
  }
  return ItemBank(std::move(items));
}

}  // namespace fixtures

}  // namespace grmsel::io
