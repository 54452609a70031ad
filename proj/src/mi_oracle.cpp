#include "immunity/mi_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "immunity/error.hpp"
#include "immunity/gradcam.hpp"
#include "immunity/objectives.hpp"

namespace immunity::oracle {

void ConditionalTable::validate() const {
  if (rows.empty() || rows[0].empty()) throw ConfigError("table: empty");
  const std::size_t g = rows[0].size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != g) throw ConfigError("table: row " + std::to_string(i) + " has a different cell count");
    double total = 0.0;
    for (double v : rows[i]) {
      if (!(v >= 0.0)) throw ConfigError("table: row " + std::to_string(i) + " has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConfigError("table: row " + std::to_string(i) + " sums to " + std::to_string(total));
    }
  }
  if (!prior.empty()) {
    if (prior.size() != rows.size()) throw ConfigError("table: prior length differs from row count");
    double total = 0.0;
    for (double v : prior) {
      if (!(v >= 0.0)) throw ConfigError("table: negative prior");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("table: prior does not sum to 1");
  }
}

std::vector<double> ConditionalTable::resolved_prior() const {
  if (!prior.empty()) return prior;
  return std::vector<double>(rows.size(), 1.0 / static_cast<double>(rows.size()));
}

bool ConditionalTable::has_uniform_prior() const {
  if (prior.empty()) return true;
  const double u = 1.0 / static_cast<double>(rows.size());
  return std::all_of(prior.begin(), prior.end(), [u](double p) { return std::abs(p - u) <= 1e-15; });
}

double mutual_information_exact(const ConditionalTable& table) {
  table.validate();
  const auto pe = table.resolved_prior();
  const std::size_t n = table.rows.size(), g = table.rows[0].size();
  std::vector<double> pc(g, 0.0);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t c = 0; c < g; ++c) pc[c] += table.rows[e][c] * pe[e];
  double mi = 0.0;
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t c = 0; c < g; ++c) {
      const double joint = table.rows[e][c] * pe[e];
      if (joint > 0.0) mi += joint * std::log(joint / (pc[c] * pe[e]));
    }
  return mi;
}

double mutual_information_uniform(const ConditionalTable& table) {
  table.validate();
  if (!table.has_uniform_prior()) throw ConfigError("mutual_information_uniform: requires a uniform prior");
  const std::size_t n = table.rows.size(), g = table.rows[0].size();
  const double nd = static_cast<double>(n);
  std::vector<double> col(g, 0.0);
  for (const auto& row : table.rows)
    for (std::size_t c = 0; c < g; ++c) col[c] += row[c];
  double acc = 0.0;
  for (const auto& row : table.rows)
    for (std::size_t c = 0; c < g; ++c) {
      if (row[c] > 0.0) acc += row[c] * std::log(nd * row[c] / col[c]);
    }
  return acc / nd;
}

double loss_identity_residual(const std::vector<std::vector<double>>& heatmaps) {
  if (heatmaps.size() < 2) throw ConfigError("loss_identity_residual: at least 2 heatmaps required");
  std::vector<Heatmap> maps;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    maps.push_back({heatmaps[i], 1, heatmaps[i].size(), true, i});
  }
  const double loss = loss_mi(maps);
  ConditionalTable table{heatmaps, {}};
  const double n = static_cast<double>(heatmaps.size());
  return std::abs(loss - n * (std::log(n) - mutual_information_exact(table)));
}

OptimalityResult optimality_search(const std::vector<std::vector<double>>& fixed_rows, double resolution) {
  if (fixed_rows.empty()) throw ConfigError("optimality_search: at least one fixed row required");
  const std::size_t g = fixed_rows[0].size();
  if (g < 2 || g > 4) throw ConfigError("optimality_search: cell count must be in 2..4, got " + std::to_string(g));
  if (!(resolution > 0.0) || resolution > 1.0) throw ConfigError("optimality_search: resolution must be in (0, 1]");
  const double steps_real = 1.0 / resolution;
  const long steps = std::lround(steps_real);
  if (std::abs(steps_real - static_cast<double>(steps)) > 1e-9 * steps_real) {
    throw ConfigError("optimality_search: resolution " + std::to_string(resolution) + " does not divide 1");
  }
  ConditionalTable table;
  table.rows.push_back(std::vector<double>(g, 0.0));
  for (const auto& r : fixed_rows) table.rows.push_back(r);
  // Validate the fixed rows once with a placeholder first row.
  table.rows[0][0] = 1.0;
  table.validate();

  OptimalityResult result;
  result.grid_step = 1.0 / static_cast<double>(steps);
  double best = -1.0;
  std::vector<long> parts(g, 0);
  // Enumerate compositions of `steps` into g non-negative parts.
  auto visit = [&](auto&& self, std::size_t cell, long left) -> void {
    if (cell + 1 == g) {
      parts[cell] = left;
      auto& row = table.rows[0];
      for (std::size_t c = 0; c < g; ++c) row[c] = static_cast<double>(parts[c]) / static_cast<double>(steps);
      const double value = mutual_information_uniform(table);
      ++result.candidates;
      const bool better = value > best + 1e-12;
      const bool tie_wins = !better && std::abs(value - best) <= 1e-12 &&
                            std::lexicographical_compare(result.maximizer.begin(), result.maximizer.end(),
                                                         row.begin(), row.end());
      if (better || tie_wins) {
        best = std::max(best, value);
        result.maximizer = row;
      }
      return;
    }
    for (long k = left; k >= 0; --k) {
      parts[cell] = k;
      self(self, cell + 1, left - k);
    }
  };
  visit(visit, 0, steps);
  result.max_information = best;

  std::vector<double> other_mass(g, 0.0);
  for (const auto& r : fixed_rows)
    for (std::size_t c = 0; c < g; ++c) other_mass[c] += r[c];
  result.argmin_cell = static_cast<std::size_t>(std::min_element(other_mass.begin(), other_mass.end()) - other_mass.begin());
  for (std::size_t c = 0; c < g; ++c) {
    const double vertex = c == result.argmin_cell ? 1.0 : 0.0;
    result.distance_to_vertex = std::max(result.distance_to_vertex, std::abs(result.maximizer[c] - vertex));
  }
  result.vertex_within_one_step = result.distance_to_vertex <= result.grid_step + 1e-12;
  return result;
}

namespace {

std::vector<double> random_distribution(std::size_t g, std::mt19937_64& rng) {
  // Exponentiated uniforms give a mix of flat and peaked distributions.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> sharp(0.5, 6.0);
  const double k = sharp(rng);
  std::vector<double> p(g);
  double total = 0.0;
  for (double& v : p) {
    v = std::pow(u(rng), k) + 1e-6;
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

std::vector<SweepResult> run_verification(double resolution, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("verify-mi: trials must be at least 1");
  std::mt19937_64 rng(seed);
  const std::size_t expert_counts[] = {2, 3, 5};
  std::vector<SweepResult> results;

  {
    SweepResult r{"rewrite-agreement", true, 0.0, 1e-12, 0, ""};
    std::uniform_int_distribution<std::size_t> cells(2, 16);
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t n = expert_counts[t % 3], g = cells(rng);
      ConditionalTable table;
      for (std::size_t i = 0; i < n; ++i) table.rows.push_back(random_distribution(g, rng));
      r.worst = std::max(r.worst, std::abs(mutual_information_exact(table) - mutual_information_uniform(table)));
      ++r.cases;
    }
    r.passed = r.worst <= r.tolerance;
    r.detail = "max |I_exact - I_uniform_form| = " + fmt(r.worst);
    results.push_back(r);
  }
  {
    SweepResult r{"loss-identity", true, 0.0, 1e-9, 0, ""};
    std::uniform_int_distribution<std::size_t> side(2, 8);
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t n = expert_counts[t % 3], g = side(rng) * side(rng);
      std::vector<std::vector<double>> maps;
      for (std::size_t i = 0; i < n; ++i) maps.push_back(random_distribution(g, rng));
      r.worst = std::max(r.worst, loss_identity_residual(maps));
      ++r.cases;
    }
    r.passed = r.worst <= r.tolerance;
    r.detail = "max |loss_mi - N(ln N - I)| = " + fmt(r.worst);
    results.push_back(r);
  }
  {
    SweepResult r{"bounds-extremes", true, 0.0, 1e-9, 0, ""};
    for (std::size_t n : expert_counts) {
      for (std::size_t side = 2; side <= 8; side += 2) {
        const std::size_t g = side * side;
        const double ln_n = std::log(static_cast<double>(n));
        // identical heatmaps
        auto h = random_distribution(g, rng);
        std::vector<Heatmap> same;
        for (std::size_t i = 0; i < n; ++i) same.push_back({h, side, side, true, i});
        r.worst = std::max(r.worst, std::abs(loss_mi(same) - static_cast<double>(n) * ln_n));
        ConditionalTable same_table{std::vector<std::vector<double>>(n, h), {}};
        r.worst = std::max(r.worst, std::abs(mutual_information_exact(same_table)));
        // Disjoint point masses, floored and renormalized as in training. The
        // 10 * floor * G bound only holds once G outgrows the N(N-1) floor * ln(1/floor)
        // term, so it is checked at input-resolution grids.
        for (std::size_t dside : {std::size_t{16}, std::size_t{32}}) {
          const std::size_t dg = dside * dside;
          std::vector<Heatmap> disjoint;
          ConditionalTable disjoint_table;
          for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> p(dg, kHeatmapFloor);
            p[i] += 1.0;
            double total = 0.0;
            for (double v : p) total += v;
            for (double& v : p) v /= total;
            disjoint.push_back({p, dside, dside, true, i});
            disjoint_table.rows.push_back(p);
          }
          const double loss = loss_mi(disjoint);
          const double bound = 10.0 * kHeatmapFloor * static_cast<double>(dg);
          if (loss > bound || loss < 0.0) r.worst = std::max(r.worst, loss);
          const double mi = mutual_information_exact(disjoint_table);
          if (mi < -1e-12 || mi > ln_n + 1e-12) r.worst = std::max(r.worst, std::abs(mi));
        }
        // random tables stay within [0, ln N]
        ConditionalTable random_table;
        for (std::size_t i = 0; i < n; ++i) random_table.rows.push_back(random_distribution(g, rng));
        const double rmi = mutual_information_exact(random_table);
        if (rmi < -1e-12 || rmi > ln_n + 1e-12) r.worst = std::max(r.worst, 1.0);
        r.cases += 4;
      }
    }
    r.passed = r.worst <= r.tolerance;
    r.detail = "worst extreme deviation = " + fmt(r.worst);
    results.push_back(r);
  }
  {
    SweepResult r{"vertex-optimality", true, 0.0, 0.0, 0, ""};
    const std::size_t configs = std::max<std::size_t>(20, trials / 5);
    std::uniform_int_distribution<std::size_t> cells(2, 4);
    std::size_t failures = 0;
    for (std::size_t t = 0; t < configs; ++t) {
      const std::size_t n = t % 2 == 0 ? 2 : 3, g = cells(rng);
      std::vector<std::vector<double>> fixed;
      for (std::size_t i = 1; i < n; ++i) fixed.push_back(random_distribution(g, rng));
      auto res = optimality_search(fixed, resolution);
      r.worst = std::max(r.worst, res.distance_to_vertex - res.grid_step);
      if (!res.vertex_within_one_step) ++failures;
      ++r.cases;
    }
    r.worst = std::max(r.worst, 0.0);
    r.passed = failures == 0;
    r.detail = std::to_string(failures) + " of " + std::to_string(configs) +
               " maximizers farther than one grid step from the argmin vertex";
    results.push_back(r);
  }
  return results;
}

}  // namespace immunity::oracle
