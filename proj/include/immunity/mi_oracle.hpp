#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace immunity::oracle {

/// Conditional distributions p(c | E = i) over G cells, with a prior p(e).
struct ConditionalTable {
  std::vector<std::vector<double>> rows;
  std::vector<double> prior;  // empty means uniform 1/N

  /// Throws ConfigError unless rows are equal-length, non-negative, and sum to 1 within 1e-12.
  void validate() const;
  std::vector<double> resolved_prior() const;
  bool has_uniform_prior() const;
};

/// I(C, E) = sum_e sum_c p(c,e) log(p(c,e) / (p(c) p(e))) in nats, 0 log 0 := 0.
double mutual_information_exact(const ConditionalTable& table);

/// The mean-log-ratio form valid under a uniform prior:
/// (1/N) sum_i sum_c p(c|i) log(N p(c|i) / sum_j p(c|j)).
/// Throws ConfigError for a non-uniform prior.
double mutual_information_uniform(const ConditionalTable& table);

/// |loss_mi(h) - N (ln N - I(C, E))| with the heatmaps as table rows.
double loss_identity_residual(const std::vector<std::vector<double>>& heatmaps);

struct OptimalityResult {
  std::vector<double> maximizer;     // candidate p(c | E = first)
  double max_information = 0.0;
  std::size_t argmin_cell = 0;       // cell with least mass under the fixed rows
  double distance_to_vertex = 0.0;   // L-inf distance from maximizer to the point mass at argmin_cell
  double grid_step = 0.0;
  bool vertex_within_one_step = false;
  std::size_t candidates = 0;
};

/// Exhaustively enumerates the first expert's distribution on the discretized
/// simplex (step `resolution`) with the remaining rows fixed, and returns the
/// MI maximizer. Ties (within 1e-12) go to the lexicographically largest
/// candidate, so among tied vertices the lowest cell index wins.
OptimalityResult optimality_search(const std::vector<std::vector<double>>& fixed_rows, double resolution);

struct SweepResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;      // largest observed deviation
  double tolerance = 0.0;
  std::size_t cases = 0;
  std::string detail;
};

/// The four property sweeps behind `verify-mi`: rewrite agreement, loss
/// identity, bounds and extremes, and vertex optimality.
std::vector<SweepResult> run_verification(double resolution, std::size_t trials, std::uint64_t seed);

}  // namespace immunity::oracle
