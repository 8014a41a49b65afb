#pragma once

#include "kinetics.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <map>

namespace plyhomog {

struct BoundaryFace {
  std::size_t voxel = 0;  // fluid side
  std::size_t fiber = 0;  // fiber side
  int axis = 0;
  int sign = 1;
  std::size_t cell = 0;  // index into VoxelDomain::cells
  double weight = 0.0;   // rescaled area
  Vec3 x = Vec3::Zero();      // face center
  Vec3 y_ref = Vec3::Zero();  // nearest point on the cell's fiber surface, cell coordinates
  Vec3 normal = Vec3::Zero(); // out of the fluid
};

struct CellArea {
  Int3 k = Int3::Zero();
  Vec3 center = Vec3::Zero();
  double analytic = 0.0;
  double staircase = 0.0;
  double scale = 1.0;
  int faces = 0;
};

struct VoxelDomain {
  Box omega;
  Int3 dims = Int3::Zero();
  double h = 0.0;
  double eps = 0.0;
  std::vector<std::uint8_t> fluid;
  std::vector<std::uint8_t> in_cell;  // voxel center lies in an interior lattice cell
  std::vector<BoundaryFace> faces;
  std::vector<CellArea> cells;
  std::size_t fluid_count = 0;

  std::size_t size() const { return fluid.size(); }
  std::size_t index(int i, int j, int k) const { return (std::size_t(k) * dims[1] + j) * dims[0] + i; }
  Int3 unpack(std::size_t id) const {
    return Int3(int(id % dims[0]), int((id / dims[0]) % dims[1]), int(id / (std::size_t(dims[0]) * dims[1])));
  }
  Vec3 center(std::size_t id) const { return omega.lo + h * (unpack(id).cast<double>() + Vec3::Constant(0.5)); }
  double voxel_volume() const { return h * h * h; }
  double fluid_volume() const { return double(fluid_count) * voxel_volume(); }
  /// neighbor across face dir (0..5 = -x,+x,-y,+y,-z,+z), or size() if outside
  std::size_t neighbor(std::size_t id, int dir) const {
    Int3 p = unpack(id);
    const int ax = dir / 2;
    p[ax] += (dir & 1) ? 1 : -1;
    if (p[ax] < 0 || p[ax] >= dims[ax]) return size();
    return index(p[0], p[1], p[2]);
  }
};

inline VoxelDomain build_voxel_domain(const MicrostructureSpec& spec, double h) {
  spec.validate();
  if (!(h > 0.0) || h > spec.eps / 8.0 * (1.0 + 1e-12))
    throw error(errc::resolution_too_coarse, "voxel size must be at most eps/8");
  VoxelDomain d;
  d.omega = spec.omega;
  d.h = h;
  d.eps = spec.eps;
  for (int a = 0; a < 3; ++a) {
    const double m = spec.omega.extent()[a] / h;
    d.dims[a] = int(std::lround(m));
    if (std::abs(m - d.dims[a]) > 1e-9 * m)
      throw error(errc::validation_error, "voxel size must divide the box extents");
  }
  const std::size_t N = std::size_t(d.dims[0]) * d.dims[1] * d.dims[2];
  d.fluid.assign(N, 1);
  d.in_cell.assign(N, 0);
  if (spec.a > 0.0)
    parallel_for(N, [&](std::size_t i) {
      const Vec3 x = d.center(i);
      d.fluid[i] = classify_nonperiodic(spec, x) != Phase::fiber;
      d.in_cell[i] = locate_cell(spec, x).inside;
    });
  for (auto f : d.fluid) d.fluid_count += f;
  if (d.fluid_count == 0) throw error(errc::disconnected_fluid, "no fluid voxels");

  // connectivity of the pore space
  {
    std::vector<std::uint8_t> seen(N, 0);
    std::vector<std::size_t> stack;
    std::size_t start = 0;
    while (!d.fluid[start]) ++start;
    stack.push_back(start);
    seen[start] = 1;
    std::size_t reached = 0;
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      ++reached;
      for (int dir = 0; dir < 6; ++dir) {
        const std::size_t u = d.neighbor(v, dir);
        if (u < N && d.fluid[u] && !seen[u]) {
          seen[u] = 1;
          stack.push_back(u);
        }
      }
    }
    if (reached != d.fluid_count)
      throw error(errc::disconnected_fluid, std::to_string(d.fluid_count - reached) + " fluid voxels unreachable");
  }
  if (spec.a == 0.0) return d;

  std::map<std::array<int, 3>, std::size_t> cell_id;
  for (const auto& lc : fiber_lattice(spec)) {
    if (!lc.inside) continue;
    cell_id[{lc.k[0], lc.k[1], lc.k[2]}] = d.cells.size();
    CellArea ca;
    ca.k = lc.k;
    ca.center = lc.center;
    ca.analytic = 2.0 * pi * spec.rho(lc.center) * spec.a * spec.eps * spec.eps;
    d.cells.push_back(ca);
  }
  const double eps = spec.eps;
  for (std::size_t v = 0; v < N; ++v) {
    if (!d.fluid[v]) continue;
    for (int dir = 0; dir < 6; ++dir) {
      const std::size_t u = d.neighbor(v, dir);
      if (u >= N || d.fluid[u]) continue;
      BoundaryFace f;
      f.voxel = v;
      f.fiber = u;
      f.axis = dir / 2;
      f.sign = (dir & 1) ? 1 : -1;
      f.normal = Vec3::Zero();
      f.normal[f.axis] = f.sign;
      f.x = d.center(v) + 0.5 * h * f.normal;
      const CellLocation loc = locate_cell(spec, d.center(u));
      auto it = cell_id.find({loc.k[0], loc.k[1], loc.k[2]});
      if (!loc.inside || it == cell_id.end()) throw error(errc::no_owning_cell, "fiber voxel without interior cell");
      f.cell = it->second;
      const double rad = spec.rho(loc.center) * spec.a;
      Vec3 y = loc.R.transpose() * (f.x - loc.center) / eps;
      y[0] = std::clamp(y[0], -0.5, 0.5);
      const double r = std::hypot(y[1], y[2]);
      if (r > 0.0) {
        y[1] *= rad / r;
        y[2] *= rad / r;
      } else {
        y[1] = rad;
        y[2] = 0.0;
      }
      f.y_ref = y;
      d.cells[f.cell].staircase += h * h;
      d.cells[f.cell].faces += 1;
      d.faces.push_back(f);
    }
  }
  for (auto& c : d.cells) {
    if (c.faces == 0)
      throw error(errc::resolution_too_coarse, "a fiber cell has no resolved surface faces; refine h");
    c.scale = c.analytic / c.staircase;
  }
  for (auto& f : d.faces) f.weight = h * h * d.cells[f.cell].scale;
  return d;
}

struct SimState {
  double t = 0.0;
  std::size_t step = 0;
  std::vector<double> c;  // per voxel, zero off the fluid
  std::vector<double> rf;  // per boundary face
  std::vector<double> rb;
};

inline SimState init_state(const VoxelDomain& d, const KineticsSpec& k) {
  SimState s;
  s.c.assign(d.size(), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.fluid[i]) {
      s.c[i] = k.c0(d.center(i));
      if (s.c[i] < 0.0) throw error(errc::negative_initial_data, "c0 is negative at a fluid voxel");
    }
  const ProductLaw rf0 = k.rf0(), rb0 = k.rb0();
  s.rf.resize(d.faces.size());
  s.rb.resize(d.faces.size());
  for (std::size_t b = 0; b < d.faces.size(); ++b) {
    s.rf[b] = rf0(d.faces[b].x, d.faces[b].y_ref);
    s.rb[b] = rb0(d.faces[b].x, d.faces[b].y_ref);
    if (s.rf[b] < 0.0 || s.rb[b] < 0.0) throw error(errc::negative_initial_data, "receptor initial data negative");
  }
  return s;
}

struct MonitorRow {
  double t = 0.0;
  double mass = 0.0;
  double min_c = 0.0;
  double max_c = 0.0;
  double l2_c = 0.0;
  double l2_grad = 0.0;
  double barrier_excess = 0.0;
  double sup_rf = 0.0;
  double sup_rb = 0.0;
  double trace_sq = 0.0;  // eps * sum w c^2
  double sup_receptor_sum = 0.0;
  double surface_mass = 0.0;  // eps * sum w r_b
};

inline const char* monitor_csv_header() { return "t,mass,min_c,max_c,l2_c,l2_grad,barrier_excess,sup_rf,sup_rb"; }

inline MonitorRow compute_monitors(const SimState& s, const VoxelDomain& d, const Barrier& bar) {
  MonitorRow m;
  m.t = s.t;
  const double V = d.voxel_volume();
  const double level = bar(s.t);
  double mn = 1e300, mx = -1e300, l2 = 0.0, g2 = 0.0, ex = 0.0, mass = 0.0;
  const std::size_t sx = 1, sy = std::size_t(d.dims[0]), sz = sy * std::size_t(d.dims[1]);
  for (int k = 0; k < d.dims[2]; ++k)
    for (int j = 0; j < d.dims[1]; ++j)
      for (int i = 0; i < d.dims[0]; ++i) {
        const std::size_t id = d.index(i, j, k);
        if (!d.fluid[id]) continue;
        const double c = s.c[id];
        mass += V * c;
        l2 += V * c * c;
        mn = std::min(mn, c);
        mx = std::max(mx, c);
        const double e = std::max(c - level, 0.0);
        ex += V * e * e;
        if (i + 1 < d.dims[0] && d.fluid[id + sx]) g2 += d.h * (s.c[id + sx] - c) * (s.c[id + sx] - c);
        if (j + 1 < d.dims[1] && d.fluid[id + sy]) g2 += d.h * (s.c[id + sy] - c) * (s.c[id + sy] - c);
        if (k + 1 < d.dims[2] && d.fluid[id + sz]) g2 += d.h * (s.c[id + sz] - c) * (s.c[id + sz] - c);
      }
  m.mass = mass;
  m.min_c = mn;
  m.max_c = mx;
  m.l2_c = std::sqrt(l2);
  m.l2_grad = std::sqrt(g2);
  m.barrier_excess = std::sqrt(ex);
  for (std::size_t b = 0; b < d.faces.size(); ++b) {
    const double c = s.c[d.faces[b].voxel];
    m.trace_sq += d.eps * d.faces[b].weight * c * c;
    m.sup_rf = std::max(m.sup_rf, std::abs(s.rf[b]));
    m.sup_rb = std::max(m.sup_rb, std::abs(s.rb[b]));
    m.sup_receptor_sum = std::max(m.sup_receptor_sum, s.rf[b] + s.rb[b]);
    m.surface_mass += d.eps * d.faces[b].weight * s.rb[b];
  }
  return m;
}

struct TraceTerms {
  double trace = 0.0;  // eps * sum w c^2
  double l2sq = 0.0;
  double gradsq = 0.0;
  double ratio(double eps) const { return trace / (l2sq + eps * eps * gradsq); }
};

/// Both sides of the scaled trace inequality for a field sampled at voxel centers.
/// The volume norms run over the fluid part of the interior cells, which carry all of the surface.
inline TraceTerms trace_terms(const VoxelDomain& d, const std::function<double(const Vec3&)>& field) {
  TraceTerms t;
  std::vector<double> c(d.size(), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.fluid[i] && d.in_cell[i]) c[i] = field(d.center(i));
  const double V = d.voxel_volume();
  const std::size_t st[3] = {1, std::size_t(d.dims[0]), std::size_t(d.dims[0]) * d.dims[1]};
  for (int k = 0; k < d.dims[2]; ++k)
    for (int j = 0; j < d.dims[1]; ++j)
      for (int i = 0; i < d.dims[0]; ++i) {
        const std::size_t id = d.index(i, j, k);
        if (!d.fluid[id] || !d.in_cell[id]) continue;
        t.l2sq += V * c[id] * c[id];
        const int p[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          const std::size_t u = id + st[a];
          if (p[a] + 1 < d.dims[a] && d.fluid[u] && d.in_cell[u]) t.gradsq += d.h * (c[u] - c[id]) * (c[u] - c[id]);
        }
      }
  for (const auto& f : d.faces) t.trace += d.eps * f.weight * c[f.voxel] * c[f.voxel];
  return t;
}

/// One-step integrator holding the per-face rates and solver workspace.
class MicroStepper {
 public:
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
  int last_iterations = 0;

  MicroStepper(const VoxelDomain& d, const KineticsSpec& k) : d_(d), k_(k) {
    const ProductLaw al = k.alpha(), be = k.beta();
    alpha_.resize(d.faces.size());
    beta_.resize(d.faces.size());
    for (std::size_t b = 0; b < d.faces.size(); ++b) {
      alpha_[b] = al(d.faces[b].x, d.faces[b].y_ref);
      beta_[b] = be(d.faces[b].x, d.faces[b].y_ref);
    }
    compact_.assign(d.size(), npos);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.fluid[i]) {
        compact_[i] = cells_.size();
        cells_.push_back(i);
      }
    const std::size_t nf = cells_.size();
    nbr_.assign(6 * nf, npos);
    nnbr_.assign(nf, 0);
    for (std::size_t q = 0; q < nf; ++q)
      for (int dir = 0; dir < 6; ++dir) {
        const std::size_t u = d.neighbor(cells_[q], dir);
        if (u < d.size() && d.fluid[u]) {
          nbr_[6 * q + dir] = compact_[u];
          ++nnbr_[q];
        }
      }
  }

  const std::vector<double>& alpha() const { return alpha_; }
  const std::vector<double>& beta() const { return beta_; }

  void step(SimState& s, double dt) {
    if (!(dt > 0.0)) throw error(errc::validation_error, "dt must be positive");
    const std::size_t nf = cells_.size();
    const double V = d_.voxel_volume(), T = k_.A * d_.h, eps = d_.eps;
    diag_.assign(nf, 0.0);
    rhs_.assign(nf, 0.0);
    for (std::size_t q = 0; q < nf; ++q) {
      const double c = s.c[cells_[q]];
      const double dF = k_.F.derivative(c);
      diag_[q] = V / dt - 0.5 * V * dF + T * nnbr_[q];
      rhs_[q] = V * c / dt + V * (k_.F(c) - 0.5 * dF * c);
    }
    for (std::size_t b = 0; b < d_.faces.size(); ++b) {
      const std::size_t q = compact_[d_.faces[b].voxel];
      const double ew = eps * d_.faces[b].weight;
      diag_[q] += ew * alpha_[b] * s.rf[b];
      rhs_[q] += ew * beta_[b] * s.rb[b];
    }
    x_.resize(nf);
    for (std::size_t q = 0; q < nf; ++q) x_[q] = s.c[cells_[q]];
    solve(T);
    for (std::size_t q = 0; q < nf; ++q) {
      if (!std::isfinite(x_[q])) throw error(errc::solver_diverged, "non-finite concentration");
      s.c[cells_[q]] = x_[q];
    }
    // receptors: exchange flux shared with the bulk, intrinsic terms by Heun
    const auto& p = k_.p;
    const double df = k_.d_f, db = k_.d_b;
    for (std::size_t b = 0; b < d_.faces.size(); ++b) {
      const double rf = s.rf[b], rb = s.rb[b];
      const double J = alpha_[b] * rf * s.c[d_.faces[b].voxel] - beta_[b] * rb;
      const double gf = p(rb) - df * rf, gb = -db * rb;
      const double rf1 = rf + dt * (gf - J), rb1 = rb + dt * (gb + J);
      const double gf1 = p(rb1) - df * rf1, gb1 = -db * rb1;
      s.rf[b] = rf + 0.5 * dt * (gf + gf1) - dt * J;
      s.rb[b] = rb + 0.5 * dt * (gb + gb1) + dt * J;
      if (!std::isfinite(s.rf[b]) || !std::isfinite(s.rb[b]))
        throw error(errc::solver_diverged, "non-finite receptor density");
    }
    s.t += dt;
    ++s.step;
    double mc = 0.0, mr = 0.0;
    for (std::size_t q = 0; q < nf; ++q) mc = std::min(mc, x_[q]);
    for (std::size_t b = 0; b < s.rf.size(); ++b) mr = std::min({mr, s.rf[b], s.rb[b]});
    if (mc < -1e-8 || mr < -1e-8)
      throw error(errc::positivity_lost, "min c = " + std::to_string(mc) + ", min r = " + std::to_string(mr) +
                                             " at t = " + std::to_string(s.t));
  }

 private:
  static constexpr std::size_t npos = std::size_t(-1);
  const VoxelDomain& d_;
  KineticsSpec k_;
  std::vector<double> alpha_, beta_;
  std::vector<std::size_t> compact_, cells_, nbr_;
  std::vector<int> nnbr_;
  std::vector<double> diag_, rhs_, x_, r_, z_, p_, Ap_;

  void apply(const std::vector<double>& u, std::vector<double>& out, double T) const {
    out.resize(u.size());
    parallel_for(u.size(), [&](std::size_t q) {
      double s = diag_[q] * u[q];
      for (int dir = 0; dir < 6; ++dir) {
        const std::size_t v = nbr_[6 * q + dir];
        if (v != npos) s -= T * u[v];
      }
      out[q] = s;
    });
  }
  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return parallel_sum(a.size(), [&](std::size_t i) { return a[i] * b[i]; });
  }

  void solve(double T) {
    const std::size_t n = x_.size();
    const double bn = std::sqrt(dot(rhs_, rhs_));
    last_iterations = 0;
    if (bn == 0.0) {
      std::fill(x_.begin(), x_.end(), 0.0);
      return;
    }
    apply(x_, Ap_, T);
    r_.resize(n);
    z_.resize(n);
    for (std::size_t i = 0; i < n; ++i) r_[i] = rhs_[i] - Ap_[i];
    double rn = std::sqrt(dot(r_, r_));
    if (rn <= cg_tol * bn) return;
    for (std::size_t i = 0; i < n; ++i) z_[i] = r_[i] / diag_[i];
    p_ = z_;
    double rz = dot(r_, z_);
    for (int it = 1; it <= cg_max_iter; ++it) {
      apply(p_, Ap_, T);
      const double pAp = dot(p_, Ap_);
      if (!(pAp > 0.0) || !std::isfinite(pAp)) throw error(errc::solver_diverged, "CG breakdown in diffusion step");
      const double al = rz / pAp;
      for (std::size_t i = 0; i < n; ++i) {
        x_[i] += al * p_[i];
        r_[i] -= al * Ap_[i];
      }
      last_iterations = it;
      rn = std::sqrt(dot(r_, r_));
      if (!std::isfinite(rn)) throw error(errc::solver_diverged, "CG residual not finite");
      if (rn <= cg_tol * bn) return;
      for (std::size_t i = 0; i < n; ++i) z_[i] = r_[i] / diag_[i];
      const double rz2 = dot(r_, z_);
      const double be = rz2 / rz;
      rz = rz2;
      for (std::size_t i = 0; i < n; ++i) p_[i] = z_[i] + be * p_[i];
    }
    throw error(errc::solver_diverged, "diffusion CG did not reach tolerance");
  }
};

inline void step_micro(SimState& s, const VoxelDomain& d, const KineticsSpec& k, double dt) {
  MicroStepper st(d, k);
  st.step(s, dt);
}

/// Fills non-fluid voxels by repeated averaging of filled neighbors, then smooths them.
inline std::vector<double> extend_field(const SimState& s, const VoxelDomain& d, int smoothing_sweeps = 3) {
  const std::size_t N = d.size();
  std::vector<double> u(N, 0.0), next;
  std::vector<std::uint8_t> filled(d.fluid);
  for (std::size_t i = 0; i < N; ++i)
    if (d.fluid[i]) u[i] = s.c[i];
  std::size_t missing = N - d.fluid_count;
  while (missing > 0) {
    next = u;
    std::vector<std::uint8_t> now(filled);
    std::size_t got = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (filled[i]) continue;
      double sum = 0.0;
      int cnt = 0;
      for (int dir = 0; dir < 6; ++dir) {
        const std::size_t v = d.neighbor(i, dir);
        if (v < N && filled[v]) {
          sum += u[v];
          ++cnt;
        }
      }
      if (cnt > 0) {
        next[i] = sum / cnt;
        now[i] = 1;
        ++got;
      }
    }
    if (got == 0) break;
    missing -= got;
    u.swap(next);
    filled.swap(now);
  }
  for (int sweep = 0; sweep < smoothing_sweeps; ++sweep) {
    next = u;
    for (std::size_t i = 0; i < N; ++i) {
      if (d.fluid[i]) continue;
      double sum = 0.0;
      int cnt = 0;
      for (int dir = 0; dir < 6; ++dir) {
        const std::size_t v = d.neighbor(i, dir);
        if (v < N) {
          sum += u[v];
          ++cnt;
        }
      }
      next[i] = sum / cnt;
    }
    u.swap(next);
  }
  return u;
}

struct MonitorSummary {
  double sup_l2_c = 0.0;
  double grad_l2_time = 0.0;   // ||grad c|| in L2(0,T; L2)
  double dtc_l2_time = 0.0;    // ||d_t c|| in L2(0,T; L2)
  double trace_l2_time = 0.0;  // eps^{1/2} ||c|| in L2(Gamma_T)
  double sup_rf = 0.0;
  double sup_rb = 0.0;
  double dtr_l2_time = 0.0;  // eps^{1/2} (||d_t r_f|| + ||d_t r_b||) in L2(Gamma_T)
  double barrier_excess = 0.0;  // sup over t
  double sup_receptor_sum = 0.0;
  double min_c = 0.0;
  double min_r = 0.0;
};

struct MicroRunOptions {
  int monitor_every = 1;
  int snapshots = 0;  // equally spaced samples delivered to on_sample, t = 0 included
  std::function<void(const SimState&)> on_sample;
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
};

struct MicroRun {
  VoxelDomain domain;
  SimState state;
  std::vector<MonitorRow> rows;
  MonitorSummary summary;
  Barrier barrier;
  double dt = 0.0;
  std::size_t steps = 0;
  double lipschitz = 0.0;
};

inline double default_micro_dt(const KineticsSpec& k, const Box& omega, double h, double T) {
  const double lip = kinetic_lipschitz(k, omega, T);
  double dt = h * h / (6.0 * k.A);
  if (lip > 0.0) dt = std::min(dt, 0.25 / lip);
  return dt;
}

inline MicroRun run_micro(const MicrostructureSpec& spec, const KineticsSpec& k, double h, double dt, double T,
                          const MicroRunOptions& opt = {}) {
  k.validate(spec.omega);
  if (!(T > 0.0)) throw error(errc::validation_error, "T must be positive");
  MicroRun run;
  run.domain = build_voxel_domain(spec, h);
  const VoxelDomain& d = run.domain;
  run.state = init_state(d, k);
  run.barrier = barrier_constants(k, spec.omega, T);
  run.lipschitz = kinetic_lipschitz(k, spec.omega, T);
  if (!(dt > 0.0)) dt = default_micro_dt(k, spec.omega, h, T);
  std::size_t n = std::size_t(std::ceil(T / dt - 1e-9));
  if (opt.snapshots > 0) n = (n + opt.snapshots - 1) / opt.snapshots * opt.snapshots;
  n = std::max<std::size_t>(n, 1);
  run.dt = T / double(n);
  run.steps = n;
  if (run.dt * run.lipschitz > 0.5)
    throw error(errc::validation_error, "dt * Lip exceeds 0.5 for the explicit kinetic parts");
  MicroStepper st(d, k);
  st.cg_tol = opt.cg_tol;
  st.cg_max_iter = opt.cg_max_iter;
  SimState& s = run.state;
  MonitorSummary& sm = run.summary;
  auto absorb = [&](const MonitorRow& m) {
    sm.sup_l2_c = std::max(sm.sup_l2_c, m.l2_c);
    sm.sup_rf = std::max(sm.sup_rf, m.sup_rf);
    sm.sup_rb = std::max(sm.sup_rb, m.sup_rb);
    sm.barrier_excess = std::max(sm.barrier_excess, m.barrier_excess);
    sm.sup_receptor_sum = std::max(sm.sup_receptor_sum, m.sup_receptor_sum);
    sm.min_c = std::min(sm.min_c, m.min_c);
  };
  MonitorRow m0 = compute_monitors(s, d, run.barrier);
  absorb(m0);
  sm.min_c = m0.min_c;
  run.rows.push_back(m0);
  if (opt.on_sample && opt.snapshots > 0) opt.on_sample(s);
  const std::size_t every = opt.snapshots > 0 ? n / opt.snapshots : 0;
  double g2 = 0.0, tr = 0.0, dtc = 0.0, dtr = 0.0;
  std::vector<double> c_prev, rf_prev, rb_prev;
  const double V = d.voxel_volume();
  for (std::size_t i = 1; i <= n; ++i) {
    c_prev = s.c;
    rf_prev = s.rf;
    rb_prev = s.rb;
    st.step(s, run.dt);
    const MonitorRow m = compute_monitors(s, d, run.barrier);
    absorb(m);
    g2 += run.dt * m.l2_grad * m.l2_grad;
    tr += run.dt * m.trace_sq;
    double a = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j)
      if (d.fluid[j]) a += V * (s.c[j] - c_prev[j]) * (s.c[j] - c_prev[j]);
    dtc += a / run.dt;
    double bf = 0.0, bb = 0.0;
    for (std::size_t b = 0; b < d.faces.size(); ++b) {
      const double w = d.eps * d.faces[b].weight;
      bf += w * (s.rf[b] - rf_prev[b]) * (s.rf[b] - rf_prev[b]);
      bb += w * (s.rb[b] - rb_prev[b]) * (s.rb[b] - rb_prev[b]);
      sm.min_r = std::min({sm.min_r, s.rf[b], s.rb[b]});
    }
    dtr += (std::sqrt(bf) + std::sqrt(bb)) * (std::sqrt(bf) + std::sqrt(bb)) / run.dt;
    if (opt.monitor_every > 0 && (i % std::size_t(opt.monitor_every) == 0 || i == n)) run.rows.push_back(m);
    if (opt.on_sample && every > 0 && i % every == 0) opt.on_sample(s);
  }
  sm.grad_l2_time = std::sqrt(g2);
  sm.trace_l2_time = std::sqrt(tr);
  sm.dtc_l2_time = std::sqrt(dtc);
  sm.dtr_l2_time = std::sqrt(dtr);
  return run;
}

/// Flat little-endian float64 dump (x fastest) plus a JSON sidecar.
inline void write_grid_snapshot(const std::string& base, const Int3& dims, const Vec3& spacing, const Vec3& origin,
                                const std::vector<double>& field, double t, const std::string& tag) {
  {
    std::ofstream out(base + ".bin", std::ios::binary);
    if (!out) throw error(errc::io_error, "cannot open " + base + ".bin");
    out.write(reinterpret_cast<const char*>(field.data()), std::streamsize(field.size() * sizeof(double)));
    if (!out) throw error(errc::io_error, "failed writing " + base + ".bin");
  }
  double mn = 1e300, mx = -1e300;
  for (double v : field) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  nlohmann::json j;
  j["tag"] = tag;
  j["dims"] = {dims[0], dims[1], dims[2]};
  j["h"] = {spacing[0], spacing[1], spacing[2]};
  j["origin"] = {origin[0], origin[1], origin[2]};
  j["t"] = t;
  j["min"] = mn;
  j["max"] = mx;
  j["dtype"] = "float64";
  j["order"] = "x-fastest";
  std::ofstream js(base + ".json");
  if (!js) throw error(errc::io_error, "cannot open " + base + ".json");
  js << j.dump(1) << '\n';
}

inline void write_snapshot(const std::string& base, const VoxelDomain& d, const std::vector<double>& field, double t) {
  write_grid_snapshot(base, d.dims, Vec3::Constant(d.h), d.omega.lo, field, t, "micro");
}

}  // namespace plyhomog
