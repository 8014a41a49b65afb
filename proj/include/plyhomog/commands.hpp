#pragma once

#include "io.hpp"
#include "unfolding.hpp"

#include <iostream>

namespace plyhomog {

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"geometry", "cell", "micro", "macro", "converge", "scaling", "unfold-check"};
  return names;
}

struct CommandResult {
  StudyReport report;
  nlohmann::json extra = nlohmann::json::object();
  std::string dir;
  Manifest manifest;
};

inline std::string output_dir_for(const RunConfig& c, const std::string& command) {
  return (fs::path(c.io.output_dir) / command / c.hash()).string();
}

inline std::string cell_cache_file(const RunConfig& c) {
  return (fs::path(c.cache_path()) / ("cells_" + c.geometry_hash() + "_n" + std::to_string(c.numerics.n_cell) + ".json"))
      .string();
}

/// Loads the on-disk cell cache for this geometry, runs f with it and saves it back.
template <class F>
auto with_cell_cache(const RunConfig& c, nlohmann::json& extra, F&& f) {
  EffectiveCache cache(c.geometry_hash(), c.numerics.n_cell);
  const std::string path = cell_cache_file(c);
  const bool loaded = cache.load(path);
  const std::size_t before = cache.size();
  auto result = f(cache);
  if (cache.size() != before || !loaded) {
    ensure_dir(fs::path(path).parent_path());
    cache.save(path);
  }
  extra["cell_cache"] = {{"file", path}, {"loaded", loaded}, {"entries", cache.size()}};
  return result;
}

inline nlohmann::json anchor_stats_json(const AnchorStats& s) {
  return {{"anchors", s.anchors}, {"solved", s.solved}, {"cached", s.cached}, {"shared", s.shared}, {"n_cell", s.n_cell},
          {"cache_hit", s.solved == 0}};
}

inline std::vector<std::string> monitor_columns() {
  return {"t",      "mass",   "min_c",    "max_c",            "l2_c",        "l2_grad",
          "barrier_excess", "sup_rf", "sup_rb", "trace_sq", "sup_receptor_sum", "surface_mass"};
}

inline std::vector<double> monitor_values(const MonitorRow& m) {
  return {m.t, m.mass, m.min_c, m.max_c, m.l2_c, m.l2_grad, m.barrier_excess, m.sup_rf, m.sup_rb, m.trace_sq,
          m.sup_receptor_sum, m.surface_mass};
}

inline nlohmann::json summary_json(const MonitorSummary& s) {
  return {{"sup_l2_c", s.sup_l2_c},         {"grad_l2_time", s.grad_l2_time}, {"dtc_l2_time", s.dtc_l2_time},
          {"trace_l2_time", s.trace_l2_time}, {"sup_rf", s.sup_rf},           {"sup_rb", s.sup_rb},
          {"dtr_l2_time", s.dtr_l2_time},   {"barrier_excess", s.barrier_excess},
          {"sup_receptor_sum", s.sup_receptor_sum}, {"min_c", s.min_c}, {"min_r", s.min_r}};
}

inline void positivity_verdicts(StudyReport& r, const MonitorSummary& s, double bound) {
  r.verdicts.push_back({"C7", "concentration stays nonnegative", s.min_c >= -1e-10, s.min_c, -1e-10, ""});
  r.verdicts.push_back({"C7", "receptors stay nonnegative", s.min_r >= -1e-10, s.min_r, -1e-10, ""});
  r.verdicts.push_back({"C8", "sup(r_f + r_b) within the super-solution bound", s.sup_receptor_sum <= bound * (1 + 1e-12),
                        s.sup_receptor_sum, bound, ""});
}

// ---------------------------------------------------------------------------

inline CommandResult cmd_geometry(const RunConfig& c) {
  CommandResult out;
  StudyReport& r = out.report;
  r.id = "geometry";
  r.columns = {"eps", "cubes", "samples", "mismatches", "fiber_fraction_nonperiodic", "fiber_fraction_lp"};
  const CounterRng rng{c.io.seed};
  const bool constant = c.geometry.gamma.is_constant() && c.geometry.rho.is_constant();
  const std::size_t n = c.study.n_samples;
  for (std::size_t e = 0; e < c.study.eps_list.size(); ++e) {
    MicrostructureSpec s = c.geometry;
    s.eps = c.study.eps_list[e];
    const Partition part = partition_cubes(s);
    const Box& om = s.omega;
    const std::size_t nb = (n + parallel_block - 1) / parallel_block;
    std::vector<std::array<std::size_t, 3>> part_counts(nb);
    parallel_blocks(n, parallel_block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
      std::array<std::size_t, 3> acc{};
      for (std::size_t i = lo; i < hi; ++i) {
        const Vec3 x = om.lo + rng.uniform3(i, e).cwiseProduct(om.extent());
        const Phase a = classify_nonperiodic(s, x), l = classify_lp(s, part, x);
        acc[0] += a != l;
        acc[1] += a == Phase::fiber;
        acc[2] += l == Phase::fiber;
      }
      part_counts[b] = acc;
    });
    std::array<std::size_t, 3> tot{};
    for (const auto& p : part_counts)
      for (int k = 0; k < 3; ++k) tot[k] += p[k];
    r.rows.push_back({s.eps, double(part.count()), double(n), double(tot[0]), double(tot[1]) / double(n),
                      double(tot[2]) / double(n)});
    if (constant)
      r.verdicts.push_back({"C1", "constant geometry: classifiers agree at eps = " + format_double(s.eps), tot[0] == 0,
                            double(tot[0]), 0.0, ""});
  }
  return out;
}

inline CommandResult cmd_cell(const RunConfig& c) {
  CommandResult out;
  StudyReport& r = out.report;
  r.id = "cell";
  r.columns = {"i", "j", "k", "x1", "x2", "x3", "theta", "A11", "A12", "A13", "A21", "A22", "A23", "A31", "A32", "A33"};
  AnchorStats st;
  const AnchorLattice L = with_cell_cache(c, out.extra, [&](EffectiveCache& cache) {
    return compute_anchor_lattice(c.geometry, c.numerics.n_effective, c.numerics.n_cell, &cache, &st);
  });
  const int n = L.n;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const CachedCell& cell = L.cells[L.index(i, j, k)];
        const Vec3 x = L.point(i, j, k);
        const Mat3 T = c.kinetics.A * cell.tensor;
        r.rows.push_back({double(i), double(j), double(k), x[0], x[1], x[2], cell.theta, T(0, 0), T(0, 1), T(0, 2),
                          T(1, 0), T(1, 1), T(1, 2), T(2, 0), T(2, 1), T(2, 2)});
      }
  double worst_theta = 0.0;
  for (const auto& cell : L.cells) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cell.tensor);
    worst_theta = std::max(worst_theta, es.eigenvalues().maxCoeff() - cell.theta);
  }
  r.verdicts.push_back({"C4", "tensor eigenvalues do not exceed theta", worst_theta <= 1e-8, worst_theta, 1e-8, ""});
  out.extra["anchors"] = anchor_stats_json(st);
  return out;
}

inline MacroAssemblyOptions assembly_options(const RunConfig& c, EffectiveCache* cache) {
  MacroAssemblyOptions o;
  o.n_effective = c.numerics.n_effective;
  o.n_cell = c.numerics.n_cell;
  o.n_axial = c.numerics.n_axial;
  o.n_angular = c.numerics.n_angular;
  o.cache = cache;
  return o;
}

inline CommandResult cmd_micro(const RunConfig& c) {
  CommandResult out;
  StudyReport& r = out.report;
  r.id = "micro";
  r.columns = monitor_columns();
  MicroRunOptions o;
  o.monitor_every = c.numerics.monitor_every;
  o.cg_tol = c.numerics.cg_tol;
  o.cg_max_iter = c.numerics.cg_max_iter;
  const double T = c.study.T;
  const MicroRun run = run_micro(c.geometry, c.kinetics, c.micro_h(c.geometry.eps), c.numerics.dt, T, o);
  for (const auto& m : run.rows) r.rows.push_back(monitor_values(m));
  positivity_verdicts(r, run.summary,
                      receptor_supersolution(c.kinetics, c.kinetics.receptor_initial_max(c.geometry.omega), T));
  out.extra["monitors"] = summary_json(run.summary);
  out.extra["run"] = {{"eps", c.geometry.eps}, {"h", run.domain.h},     {"dt", run.dt},
                      {"steps", run.steps},    {"voxels", run.domain.size()}, {"faces", run.domain.faces.size()}};
  return out;
}

inline CommandResult cmd_macro(const RunConfig& c) {
  CommandResult out;
  StudyReport& r = out.report;
  r.id = "macro";
  r.columns = monitor_columns();
  MacroRunOptions o;
  o.monitor_every = c.numerics.monitor_every;
  o.cg_tol = c.numerics.cg_tol;
  o.cg_max_iter = c.numerics.cg_max_iter;
  const double T = c.study.T;
  const MacroAssembly m = with_cell_cache(c, out.extra, [&](EffectiveCache& cache) {
    return assemble_macro(c.geometry, c.kinetics, c.numerics.n_macro, assembly_options(c, &cache));
  });
  const MacroRun run = run_macro(m, c.kinetics, c.numerics.macro_dt, T, o);
  for (const auto& row : run.rows) r.rows.push_back(monitor_values(row));
  positivity_verdicts(r, run.summary,
                      receptor_supersolution(c.kinetics, c.kinetics.receptor_initial_max(c.geometry.omega), T));
  out.extra["monitors"] = summary_json(run.summary);
  out.extra["anchors"] = anchor_stats_json(m.stats);
  out.extra["run"] = {{"n_macro", c.numerics.n_macro}, {"dt", run.dt}, {"steps", run.steps}, {"clamped", m.clamped}};
  return out;
}

inline CommandResult cmd_converge(const RunConfig& c) {
  CommandResult out;
  ConvergenceOptions o;
  o.h_div = c.numerics.h_div;
  o.n_macro = c.numerics.n_macro;
  o.snapshots = c.numerics.snapshots;
  o.micro_dt = c.numerics.dt;
  o.macro_dt = c.numerics.macro_dt;
  o.cg_tol = c.numerics.cg_tol;
  o.cg_max_iter = c.numerics.cg_max_iter;
  o.config_hash = c.hash();
  o.seed = c.io.seed;
  if (c.numerics.h > 0.0) throw error(errc::validation_error, "converge sets h from eps; use numerics.h_div instead of numerics.h");
  if (c.study.eps_list.size() < 2)
    throw error(errc::validation_error, "study.eps_list needs at least two entries for a convergence study");
  std::vector<double> eps = c.study.eps_list;
  std::sort(eps.begin(), eps.end(), std::greater<>());
  out.report = with_cell_cache(c, out.extra, [&](EffectiveCache& cache) {
    o.assembly = assembly_options(c, &cache);
    return convergence_study(c.geometry, c.kinetics, eps, c.study.T, o);
  });
  return out;
}

inline CommandResult cmd_scaling(const RunConfig& c) {
  CommandResult out;
  if (!(c.geometry.r_exp > 2.0 / 3.0 && c.geometry.r_exp < 1.0))
    throw error(errc::validation_error, "study.r must lie in (2/3, 1) for the chi-difference scaling study");
  ScalingOptions o;
  o.config_hash = c.hash();
  o.seed = c.io.seed;
  out.report = scaling_study(c.geometry, c.study.eps_list, c.study.n_samples, o);
  return out;
}

inline CommandResult cmd_unfold_check(const RunConfig& c) {
  CommandResult out;
  StudyReport& r = out.report;
  r.id = "unfold_check";
  r.columns = {"eps", "lhs", "limit", "rel_gap"};
  std::vector<double> eps = c.study.eps_list;
  std::sort(eps.begin(), eps.end(), std::greater<>());
  const auto rows = boundary_measure_limit_check(manufactured::constant(1.0), c.geometry, eps, 1);
  for (const auto& row : rows) r.rows.push_back({row.eps, row.lhs, row.limit, row.rel_gap});
  r.verdicts.push_back({"C6", "boundary measure gap at the smallest eps", rows.back().rel_gap <= 0.02,
                        rows.back().rel_gap, 0.02, "psi = 1"});
  return out;
}

/// Runs a command and writes its outputs; errors propagate.
inline CommandResult run_command(const RunConfig& c, const std::string& command) {
  const auto t0 = std::chrono::steady_clock::now();
  CommandResult res;
  if (command == "geometry")
    res = cmd_geometry(c);
  else if (command == "cell")
    res = cmd_cell(c);
  else if (command == "micro")
    res = cmd_micro(c);
  else if (command == "macro")
    res = cmd_macro(c);
  else if (command == "converge")
    res = cmd_converge(c);
  else if (command == "scaling")
    res = cmd_scaling(c);
  else if (command == "unfold-check")
    res = cmd_unfold_check(c);
  else
    throw error(errc::validation_error, "unknown command " + command);
  res.report.config_hash = c.hash();
  res.report.seed = c.io.seed;
  res.report.stats["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.report.stats["threads"] = worker_count();
  res.extra["command"] = command;
  res.extra["config"] = c.canonical();
  res.dir = output_dir_for(c, command);
  res.manifest = write_outputs(res.report, res.dir, res.extra);
  return res;
}

inline nlohmann::json error_json(const error& e, const std::string& command) {
  return {{"error", errc_name(e.code())}, {"message", e.what()}, {"command", command}, {"exit_code", exit_code(e.code())}};
}

}  // namespace plyhomog
