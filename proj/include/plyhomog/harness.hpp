#pragma once

#include "lpgeom.hpp"
#include "macrosim.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

namespace plyhomog {

struct Verdict {
  std::string criterion;  // acceptance criterion this check feeds, e.g. "C9"
  std::string check;
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string note;
};

struct FitResult {
  std::string name;
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;
  std::string note;
};

/// Tabular study output. Rows hold numbers only; provenance columns are added when written.
struct StudyReport {
  std::string id;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  std::vector<FitResult> fits;
  std::vector<Verdict> verdicts;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json stats = nlohmann::json::object();  // solver counts and wall clock; JSON only

  bool passed() const {
    for (const auto& v : verdicts)
      if (!v.pass) return false;
    return true;
  }
  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw error(errc::validation_error, "no column " + name + " in study " + id);
  }
  double at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }

  std::string csv() const {
    std::ostringstream o;
    for (const auto& c : columns) o << c << ',';
    o << "config_hash,seed\n";
    for (const auto& r : rows) {
      for (double v : r) o << format_double(v) << ',';
      o << config_hash << ',' << seed << '\n';
    }
    return o.str();
  }

  nlohmann::json summary() const {
    nlohmann::json j;
    j["study"] = id;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["rows"] = rows.size();
    j["passed"] = passed();
    j["fits"] = nlohmann::json::array();
    for (const auto& f : fits)
      j["fits"].push_back({{"name", f.name}, {"slope", f.slope}, {"intercept", f.intercept},
                           {"residual", f.residual}, {"note", f.note}});
    j["verdicts"] = nlohmann::json::array();
    for (const auto& v : verdicts)
      j["verdicts"].push_back({{"criterion", v.criterion}, {"check", v.check}, {"pass", v.pass},
                               {"value", v.value}, {"threshold", v.threshold}, {"note", v.note}});
    j["stats"] = stats;
    return j;
  }

  /// gnuplot script plotting every column against the first, log-log when all values are positive
  std::string gnuplot(const std::string& csv_name) const {
    std::ostringstream o;
    o << "set datafile separator ','\nset key autotitle columnhead\nset xlabel '" << columns.at(0) << "'\n";
    bool logs = !rows.empty();
    for (const auto& r : rows)
      for (double v : r) logs = logs && v > 0.0;
    if (logs) o << "set logscale xy\n";
    o << "set terminal pngcairo size 900,600\nset output '" << id << ".png'\nplot ";
    for (std::size_t c = 1; c < columns.size(); ++c) {
      if (c > 1) o << ", \\\n     ";
      o << "'" << csv_name << "' using 1:" << c + 1 << " with linespoints";
    }
    if (columns.size() < 2) o << "0";
    o << '\n';
    return o.str();
  }
};

/// Trilinear interpolation of a cell-centered field, constant beyond the outermost centers.
inline double sample_grid(const MacroGrid& g, const std::vector<double>& f, const Vec3& x) {
  int i0[3];
  double w[3];
  for (int a = 0; a < 3; ++a) {
    const int n = g.dims[a];
    double s = (x[a] - g.omega.lo[a]) / g.h[a] - 0.5;
    s = std::clamp(s, 0.0, double(n - 1));
    i0[a] = n > 1 ? std::min(int(std::floor(s)), n - 2) : 0;
    w[a] = n > 1 ? s - i0[a] : 0.0;
  }
  double v = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int di = c & 1, dj = (c >> 1) & 1, dk = (c >> 2) & 1;
    const double wt = (di ? w[0] : 1 - w[0]) * (dj ? w[1] : 1 - w[1]) * (dk ? w[2] : 1 - w[2]);
    if (wt == 0.0) continue;
    v += wt * f[g.index(i0[0] + di, i0[1] + dj, i0[2] + dk)];
  }
  return v;
}

// ---------------------------------------------------------------------------
// micro vs macro

struct ConvergenceOptions {
  double h_div = 8.0;  // h = eps / h_div
  int n_macro = 32;
  int snapshots = 16;
  double micro_dt = 0.0;  // <= 0: default rule
  double macro_dt = 0.0;
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
  MacroAssemblyOptions assembly;
  std::string criterion = "C9";
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline bool divergence_error(errc e) {
  return e == errc::solver_diverged || e == errc::positivity_lost || e == errc::no_convergence;
}

inline StudyReport convergence_study(const MicrostructureSpec& spec, const KineticsSpec& k,
                                     const std::vector<double>& eps_list, double T,
                                     const ConvergenceOptions& opt = {}) {
  if (eps_list.size() < 2) throw error(errc::validation_error, "convergence study needs at least two eps values");
  for (std::size_t i = 1; i < eps_list.size(); ++i)
    if (!(eps_list[i] < eps_list[i - 1])) throw error(errc::validation_error, "eps_list must be decreasing");
  if (opt.snapshots < 1) throw error(errc::validation_error, "at least one snapshot interval is needed");
  const auto wall0 = std::chrono::steady_clock::now();
  StudyReport rep;
  rep.id = "convergence";
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  rep.columns = {"eps", "h", "rel_l2_error", "micro_steps", "macro_steps", "fluid_fraction", "receptor_rel_diff",
                 "micro_mass_T", "macro_mass_T"};

  // homogenized run on a fixed grid, sampled at the same instants as the micro runs
  MicrostructureSpec mspec = spec;
  mspec.eps = eps_list.back();
  const MacroAssembly mac = assemble_macro(mspec, k, opt.n_macro, opt.assembly);
  std::vector<std::vector<double>> mac_c;
  MacroState mac_final;
  MacroRunOptions mo;
  mo.snapshots = opt.snapshots;
  mo.monitor_every = 0;
  mo.cg_tol = opt.cg_tol;
  mo.cg_max_iter = opt.cg_max_iter;
  mo.on_sample = [&](const MacroState& s) { mac_c.push_back(s.c); };
  MacroRun mrun;
  try {
    mrun = run_macro(mac, k, opt.macro_dt, T, mo);
  } catch (const error& e) {
    if (divergence_error(e.code())) throw error(errc::study_inconclusive, std::string("macro run: ") + e.what());
    throw;
  }
  const std::vector<double> mac_rf_avg = surface_average(mac, mrun.state.rf);
  rep.stats["macro_anchor_solves"] = mac.stats.solved;
  rep.stats["macro_anchor_cached"] = mac.stats.cached;
  rep.stats["macro_dt"] = mrun.dt;

  std::vector<double> errs;
  for (double eps : eps_list) {
    MicrostructureSpec s = spec;
    s.eps = eps;
    const double h = eps / opt.h_div;
    double e2 = 0.0, n2 = 0.0;
    int j = 0;
    const double wt_end = 0.5 / opt.snapshots, wt_mid = 1.0 / opt.snapshots;
    MicroRunOptions o;
    o.snapshots = opt.snapshots;
    o.monitor_every = 0;
    o.cg_tol = opt.cg_tol;
    o.cg_max_iter = opt.cg_max_iter;
    MicroRun run;
    // same construction run_micro performs; needed up front for the sampling callback
    const VoxelDomain d = build_voxel_domain(s, h);
    std::vector<Vec3> centers(d.size());
    std::vector<double> mac_at(d.size());
    for (std::size_t v = 0; v < d.size(); ++v) centers[v] = d.center(v);
    o.on_sample = [&](const SimState& st) {
      const std::vector<double> ext = extend_field(st, d);
      const std::vector<double>& mc = mac_c.at(std::size_t(j));
      const double wt = (j == 0 || j == opt.snapshots) ? wt_end : wt_mid;
      const double V = d.voxel_volume();
      double a = 0.0, b = 0.0;
      for (std::size_t v = 0; v < ext.size(); ++v) {
        const double m = sample_grid(mac.grid, mc, centers[v]);
        a += V * (ext[v] - m) * (ext[v] - m);
        b += V * m * m;
      }
      e2 += wt * a;
      n2 += wt * b;
      ++j;
    };
    try {
      run = run_micro(s, k, h, opt.micro_dt, T, o);
    } catch (const error& e) {
      if (divergence_error(e.code()))
        throw error(errc::study_inconclusive, "micro run at eps = " + format_double(eps) + ": " + e.what());
      throw;
    }
    if (j != opt.snapshots + 1) throw error(errc::study_inconclusive, "micro run delivered the wrong sample count");
    const double err = n2 > 0.0 ? std::sqrt(e2 / n2) : std::sqrt(e2);
    errs.push_back(err);

    // cell-averaged bound receptors against the macro surface average at the cell center, at T
    double ra = 0.0, rb = 0.0;
    {
      std::vector<double> num(d.cells.size(), 0.0), den(d.cells.size(), 0.0);
      for (std::size_t f = 0; f < d.faces.size(); ++f) {
        num[d.faces[f].cell] += d.faces[f].weight * run.state.rf[f];
        den[d.faces[f].cell] += d.faces[f].weight;
      }
      for (std::size_t c = 0; c < d.cells.size(); ++c) {
        if (den[c] <= 0.0) continue;
        const double micro = num[c] / den[c];
        const double macro = sample_grid(mac.grid, mac_rf_avg, d.cells[c].center);
        ra += (micro - macro) * (micro - macro);
        rb += macro * macro;
      }
    }
    const double rdiff = rb > 0.0 ? std::sqrt(ra / rb) : std::sqrt(ra);
    rep.rows.push_back({eps, h, err, double(run.steps), double(mrun.steps), d.fluid_volume() / d.omega.volume(), rdiff,
                        compute_monitors(run.state, d, run.barrier).mass,
                        compute_macro_monitors(mrun.state, mac, mrun.barrier).mass});
    rep.stats["micro_dt_eps_" + format_double(eps)] = run.dt;
  }
  bool strict = true, within_slack = true;
  for (std::size_t i = 1; i < errs.size(); ++i) {
    strict = strict && errs[i] < errs[i - 1];
    within_slack = within_slack && errs[i] < 1.05 * errs[i - 1];
  }
  Verdict v;
  v.criterion = opt.criterion;
  v.check = "relative L2 error decreases along eps_list";
  v.pass = strict;
  v.value = errs.back() / errs.front();
  v.threshold = 1.0;
  v.note = strict ? "strictly decreasing"
           : within_slack ? "not strictly decreasing; every increase is within 5%"
                          : "error grows by more than 5% somewhere";
  rep.verdicts.push_back(v);
  rep.stats["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// chi-difference scaling

struct SlopeCheck {
  FitResult fit;
  bool exact_zero = false;
  bool fitted = false;
};

/// Fit log value against log eps; all-zero series short-circuit.
inline SlopeCheck fit_series(const std::string& name, const std::vector<double>& eps, const std::vector<double>& v) {
  SlopeCheck s;
  s.fit.name = name;
  bool all_zero = true;
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < v.size(); ++i) {
    all_zero = all_zero && v[i] == 0.0;
    if (v[i] > 0.0) pts.emplace_back(eps[i], v[i]);
  }
  if (all_zero) {
    s.exact_zero = true;
    s.fit.note = "exact zero at every eps";
    return s;
  }
  if (pts.size() < 2) {
    s.fit.note = "fewer than two nonzero values";
    return s;
  }
  const ScalingFit f = scaling_fit(pts);
  s.fit.slope = f.slope;
  s.fit.intercept = f.intercept;
  s.fit.residual = f.residual;
  s.fitted = true;
  if (pts.size() < v.size()) s.fit.note = "zero values left out of the fit";
  return s;
}

struct ScalingOptions {
  std::string criterion = "C2";
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline StudyReport scaling_study(const MicrostructureSpec& spec, const std::vector<double>& eps_list,
                                 std::size_t n_samples, const ScalingOptions& opt = {}) {
  const double r = spec.r_exp;
  if (!(r > 2.0 / 3.0 && r < 1.0)) throw error(errc::validation_error, "scaling study needs r in (2/3, 1)");
  if (eps_list.size() < 2) throw error(errc::validation_error, "scaling study needs at least two eps values");
  const auto wall0 = std::chrono::steady_clock::now();
  StudyReport rep;
  rep.id = "scaling";
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  rep.columns = {"eps", "i1", "stderr_i1", "i2", "stderr_i2", "total", "stderr_total", "n_samples"};
  std::vector<double> e, i1, i2;
  for (double eps : eps_list) {
    MicrostructureSpec s = spec;
    s.eps = eps;
    const Partition part = partition_cubes(s);
    const ChiDiffReport c = chi_l2_difference(s, part, n_samples, opt.seed);
    rep.rows.push_back({eps, c.i1, c.stderr_i1, c.i2, c.stderr_i2, c.total, c.stderr_total, double(c.n_samples)});
    e.push_back(eps);
    i1.push_back(c.i1);
    i2.push_back(c.i2);
  }
  auto judge = [&](const std::string& name, const std::vector<double>& v, double target) {
    const SlopeCheck sc = fit_series(name, e, v);
    rep.fits.push_back(sc.fit);
    Verdict vd;
    vd.criterion = opt.criterion;
    vd.check = name + " slope";
    vd.threshold = target;
    vd.value = sc.fit.slope;
    vd.pass = sc.exact_zero || (sc.fitted && sc.fit.slope >= target);
    vd.note = sc.exact_zero ? "exact-zero short circuit" : sc.fit.note;
    rep.verdicts.push_back(vd);
  };
  judge("i1", i1, r - 0.15);
  judge("i2", i2, 3.0 * r - 2.0 - 0.15);
  rep.stats["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// a-priori monitors

struct MonitorReport {
  double eps = 0.0;
  MonitorSummary summary;
  std::vector<MonitorRow> rows;
  double receptor_bound = 0.0;  // super-solution bound for r_f + r_b at T
};

inline MonitorReport monitor_report(const MicroRun& run, const KineticsSpec& k, double T) {
  MonitorReport m;
  m.eps = run.domain.eps;
  m.summary = run.summary;
  m.rows = run.rows;
  m.receptor_bound = receptor_supersolution(k, k.receptor_initial_max(run.domain.omega), T);
  return m;
}

/// True if every monitor that should not grow under pure decay is nonincreasing along the rows.
inline bool monitors_nonincreasing(const std::vector<MonitorRow>& rows, double tol = 1e-12) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const MonitorRow &a = rows[i - 1], &b = rows[i];
    auto up = [&](double x, double y) { return y > x + tol * std::max(1.0, std::abs(x)); };
    if (up(a.mass, b.mass) || up(a.max_c, b.max_c) || up(a.l2_c, b.l2_c) || up(a.sup_rf, b.sup_rf) ||
        up(a.sup_rb, b.sup_rb) || up(a.barrier_excess, b.barrier_excess))
      return false;
  }
  return true;
}

struct AprioriOptions {
  double ratio_limit = 3.0;
  double barrier_slope = 0.8;
  std::string criterion = "C8";
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline StudyReport apriori_monitor(std::vector<MonitorReport> reports, const AprioriOptions& opt = {}) {
  if (reports.empty()) throw error(errc::validation_error, "no monitor reports");
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.eps > b.eps; });
  StudyReport rep;
  rep.id = "apriori";
  rep.config_hash = opt.config_hash;
  rep.seed = opt.seed;
  rep.columns = {"eps",         "sup_l2_c",       "grad_l2_time", "dtc_l2_time",        "trace_l2_time",
                 "sup_rf",      "sup_rb",         "dtr_l2_time",  "barrier_excess",     "sup_receptor_sum",
                 "receptor_bound", "min_c", "min_r"};
  for (const auto& r : reports) {
    const auto& s = r.summary;
    rep.rows.push_back({r.eps, s.sup_l2_c, s.grad_l2_time, s.dtc_l2_time, s.trace_l2_time, s.sup_rf, s.sup_rb,
                        s.dtr_l2_time, s.barrier_excess, s.sup_receptor_sum, r.receptor_bound, s.min_c, s.min_r});
  }
  // uniform bounds across the series
  for (const char* q : {"sup_l2_c", "grad_l2_time", "dtc_l2_time", "trace_l2_time", "sup_rf", "sup_rb",
                        "dtr_l2_time"}) {
    const std::size_t c = rep.column(q);
    double lo = 1e300, hi = 0.0;
    for (const auto& row : rep.rows) {
      lo = std::min(lo, std::abs(row[c]));
      hi = std::max(hi, std::abs(row[c]));
    }
    Verdict v;
    v.criterion = opt.criterion;
    v.check = std::string(q) + " max/min across eps";
    v.threshold = opt.ratio_limit;
    if (hi == 0.0) {
      v.pass = true;
      v.value = 1.0;
      v.note = "identically zero";
    } else {
      v.value = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
      v.pass = v.value <= opt.ratio_limit;
    }
    rep.verdicts.push_back(v);
  }
  for (const auto& r : reports) {
    Verdict v;
    v.criterion = opt.criterion;
    v.check = "sup(r_f + r_b) within the super-solution bound at eps = " + format_double(r.eps);
    v.value = r.summary.sup_receptor_sum;
    v.threshold = r.receptor_bound;
    v.pass = r.summary.sup_receptor_sum <= r.receptor_bound * (1.0 + 1e-12);
    rep.verdicts.push_back(v);
  }
  // barrier excess <= C eps
  {
    Verdict v;
    v.criterion = opt.criterion;
    v.check = "barrier excess slope in eps";
    v.threshold = opt.barrier_slope;
    std::vector<double> e, x;
    for (const auto& r : reports) {
      e.push_back(r.eps);
      x.push_back(r.summary.barrier_excess);
    }
    if (reports.size() < 2) {
      v.pass = true;
      v.note = "single eps; slope not assessed";
    } else {
      const SlopeCheck sc = fit_series("barrier_excess", e, x);
      rep.fits.push_back(sc.fit);
      if (sc.exact_zero) {
        v.pass = true;
        v.note = "barrier excess identically zero";
      } else if (x.back() == 0.0) {
        v.pass = true;
        v.value = std::numeric_limits<double>::infinity();
        v.note = "excess vanishes at the smallest eps";
      } else if (sc.fitted) {
        v.value = sc.fit.slope;
        v.pass = sc.fit.slope >= opt.barrier_slope;
        v.note = sc.fit.note;
      } else {
        v.pass = false;
        v.note = sc.fit.note;
      }
    }
    rep.verdicts.push_back(v);
  }
  return rep;
}

}  // namespace plyhomog
