#pragma once

// File formats (bank CSV, panel CSV, distribution flags, scenario JSON) and
// the shipped fixture banks.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "grmsel/calibration.hpp"
#include "grmsel/grm.hpp"
#include "grmsel/population.hpp"

namespace grmsel::io {

/// Malformed input; row() is the 1-based line number, 0 when not tied to a line.
class ParseError : public DomainError {
 public:
  ParseError(const std::string& source, std::size_t row, const std::string& what);
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Shortest round-trip text is not required; 17 significant digits always are.
std::string format_double(double x);

/// Header `item_id,a,b1,...,bM`; rows with fewer thresholds leave trailing cells blank.
ItemBank read_bank_csv(std::istream& in, const std::string& source = "<bank>");
ItemBank load_bank(const std::filesystem::path& path);
void write_bank_csv(std::ostream& out, const ItemBank& bank);

enum class Dedupe { None, WorstDay };

/// Header `subject_id,time_years,item_id,level`. Duplicate (subject, time, item)
/// rows are rejected unless `dedupe` is WorstDay: then the k-th occurrence of an
/// item on a (subject, time) belongs to the k-th administration of that day, and
/// only the administration with the highest total level is kept.
ResponsePanel read_panel_csv(std::istream& in, Dedupe dedupe = Dedupe::None,
                             const std::string& source = "<panel>");
ResponsePanel load_panel(const std::filesystem::path& path, Dedupe dedupe = Dedupe::None);
void write_panel_csv(std::ostream& out, const ResponsePanel& panel);

/// `normal:mean,sd`, `sample:path` (one value per line, optional header) or
/// `grid:path` (CSV `theta,weight`).
LatentDistribution parse_distribution(const std::string& spec);

/// Scenario JSON. Keys: bank (path, relative to the file) or items
/// ([{"id","a","b":[...]}]), beta0, beta1, var_u0, var_u1, rho, n_subjects,
/// visit_times, schedules, seed. Missing population keys take the
/// defaults of TrajectoryPrior.
SimulationScenario parse_scenario(const std::string& json_text,
                                  const std::filesystem::path& base_dir = ".");
SimulationScenario load_scenario(const std::filesystem::path& path);

/// Response list `id=level,id=level`.
ResponseSet parse_responses(const std::string& text);

namespace fixtures {

/// Seven a = 2.5 dichotomous items with b = -2, -0.2, -0.1, 0, 0.1, 0.2, 2.
ItemBank figure2_bank();
/// Items 2-6 (0-based 1..5): the five with information peaking near 0.
std::vector<std::size_t> figure2_set1();
/// Items 1, 3, 4, 5, 7 (0-based 0, 2, 3, 4, 6).
std::vector<std::size_t> figure2_set2();

/// 34 four-threshold items skewed toward high thresholds.
ItemBank synthetic34_bank();

}  // namespace fixtures

}  // namespace grmsel::io
