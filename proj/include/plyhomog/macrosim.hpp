#pragma once

#include "cellsolver.hpp"
#include "microsim.hpp"

#include <array>

namespace plyhomog {

/// Cell-centered grid on omega; n per axis.
struct MacroGrid {
  Box omega;
  Int3 dims = Int3::Zero();
  Vec3 h = Vec3::Zero();

  MacroGrid() = default;
  MacroGrid(const Box& om, int n) : omega(om), dims(n, n, n), h(om.extent() / double(n)) {}

  std::size_t size() const { return std::size_t(dims[0]) * dims[1] * dims[2]; }
  std::size_t index(int i, int j, int k) const { return (std::size_t(k) * dims[1] + j) * dims[0] + i; }
  Int3 unpack(std::size_t id) const {
    return Int3(int(id % dims[0]), int((id / dims[0]) % dims[1]), int(id / (std::size_t(dims[0]) * dims[1])));
  }
  Vec3 center(std::size_t id) const {
    return omega.lo + (unpack(id).cast<double>() + Vec3::Constant(0.5)).cwiseProduct(h);
  }
  double cell_volume() const { return h.prod(); }
};

/// Quadrature points on the reference fiber surface merged where the kinetic cell factors agree.
struct SurfaceGroup {
  Vec3 y = Vec3::Zero();
  double weight = 0.0;
  double bump = 0.0;
  double rf2 = 0.0;
  double rb2 = 0.0;
};

struct SurfaceRuleSet {
  double radius = 0.0;
  std::vector<SurfaceGroup> groups;
  double area() const {
    double s = 0.0;
    for (const auto& g : groups) s += g.weight;
    return s;
  }
};

inline SurfaceRuleSet grouped_surface_rule(const KineticsSpec& k, double radius, int n_axial = 8,
                                           int n_angular = 16) {
  SurfaceRuleSet rs;
  rs.radius = radius;
  const SurfaceQuadrature q = fiber_surface_rule(radius, n_axial, n_angular);
  auto key = [](double v, double scale) { return std::llround(v / scale * 1e12); };
  const double sb = std::max(k.bump.sup(), 1e-300), sf = std::max(k.rf0_2.sup(), 1e-300),
               sr = std::max(k.rb0_2.sup(), 1e-300);
  std::map<std::array<long long, 3>, std::size_t> seen;
  for (std::size_t i = 0; i < q.y.size(); ++i) {
    const double b = k.bump(q.y[i]), f = k.rf0_2(q.y[i]), r = k.rb0_2(q.y[i]);
    const std::array<long long, 3> kk{key(b, sb), key(f, sf), key(r, sr)};
    auto it = seen.find(kk);
    if (it == seen.end()) {
      seen[kk] = rs.groups.size();
      rs.groups.push_back({q.y[i], q.weight[i], b, f, r});
    } else {
      rs.groups[it->second].weight += q.weight[i];
    }
  }
  return rs;
}

struct AnchorStats {
  std::size_t anchors = 0;
  std::size_t solved = 0;   // cell problems actually solved
  std::size_t cached = 0;   // taken from the cache file
  std::size_t shared = 0;   // reused from an anchor with identical geometry
  int n_cell = 0;
};

/// theta and the A = 1 tensor on an n^3 lattice spanning the closed box.
struct AnchorLattice {
  Box omega;
  int n = 0;
  std::vector<CachedCell> cells;

  std::size_t index(int i, int j, int k) const { return (std::size_t(k) * n + j) * n + i; }
  Vec3 point(int i, int j, int k) const {
    return omega.lo + Vec3(i, j, k).cwiseProduct(omega.extent()) / double(n - 1);
  }

  /// trilinear interpolation of (theta, tensor)
  std::pair<double, Mat3> interpolate(const Vec3& x) const {
    Vec3 s = (x - omega.lo).cwiseQuotient(omega.extent()) * double(n - 1);
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      s[a] = std::clamp(s[a], 0.0, double(n - 1));
      i0[a] = std::min(int(std::floor(s[a])), n - 2);
      f[a] = s[a] - i0[a];
    }
    double th = 0.0;
    Mat3 t = Mat3::Zero();
    for (int c = 0; c < 8; ++c) {
      const int di = c & 1, dj = (c >> 1) & 1, dk = (c >> 2) & 1;
      const double w = (di ? f[0] : 1 - f[0]) * (dj ? f[1] : 1 - f[1]) * (dk ? f[2] : 1 - f[2]);
      if (w == 0.0) continue;
      const CachedCell& cc = cells[index(i0[0] + di, i0[1] + dj, i0[2] + dk)];
      th += w * cc.theta;
      t += w * cc.tensor;
    }
    return {th, t};
  }
};

inline AnchorLattice compute_anchor_lattice(const MicrostructureSpec& spec, int n_eff, int n_cell,
                                            EffectiveCache* cache, AnchorStats* stats = nullptr) {
  if (n_eff < 2) throw error(errc::validation_error, "effective lattice needs at least 2 points per axis");
  AnchorLattice L;
  L.omega = spec.omega;
  L.n = n_eff;
  L.cells.resize(std::size_t(n_eff) * n_eff * n_eff);
  AnchorStats st;
  st.anchors = L.cells.size();
  st.n_cell = n_cell;
  const bool use_cache = cache && cache->resolution() == n_cell;
  std::map<std::array<double, 3>, CachedCell> by_geometry;
  CellSolverOptions opt;
  opt.keep_correctors = false;
  for (int k = 0; k < n_eff; ++k)
    for (int j = 0; j < n_eff; ++j)
      for (int i = 0; i < n_eff; ++i) {
        const Int3 idx(i, j, k);
        CachedCell& out = L.cells[L.index(i, j, k)];
        if (use_cache) {
          if (auto hit = cache->find(idx)) {
            out = *hit;
            ++st.cached;
            continue;
          }
        }
        const Vec3 x = L.point(i, j, k);
        const TransformSet tr = transforms_at(spec, x);
        const std::array<double, 3> key{tr.gamma, tr.w, tr.rho};
        auto it = by_geometry.find(key);
        if (it != by_geometry.end()) {
          out = it->second;
          ++st.shared;
        } else {
          try {
            const EffectiveField ef = effective_field_at(spec, x, n_cell, 1.0, opt);
            out = CachedCell{ef.theta, ef.tensor, ef.residual};
          } catch (const error& e) {
            throw error(errc::cell_solve_failed, "anchor (" + std::to_string(i) + "," + std::to_string(j) + "," +
                                                     std::to_string(k) + "): " + errc_name(e.code()) + ": " +
                                                     e.what());
          }
          by_geometry[key] = out;
          ++st.solved;
        }
        if (cache && use_cache) cache->put(idx, out);
      }
  if (stats) *stats = st;
  return L;
}

struct MacroAssembly {
  MacroGrid grid;
  double A = 1.0;
  int n_effective = 0;
  std::vector<double> theta;
  std::vector<Mat3> tensor;  // includes the factor A
  std::vector<SurfaceRuleSet> rules;
  std::vector<std::uint32_t> node_rule;
  std::vector<std::size_t> offset;  // receptor points of node i: [offset[i], offset[i+1])
  std::vector<double> alpha, beta, weight;  // per receptor point
  std::vector<double> rf0, rb0;
  AnchorStats stats;
  std::size_t clamped = 0;

  std::size_t points() const { return offset.empty() ? 0 : offset.back(); }
  double area(std::size_t node) const { return rules.empty() ? 0.0 : rules[node_rule[node]].area(); }
};

/// Eigenvalue clamp at 1e-10; returns true if anything moved.
inline bool clamp_spd(Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (m + m.transpose()));
  Vec3 ev = es.eigenvalues();
  if (ev.minCoeff() >= 1e-10) return false;
  ev = ev.cwiseMax(1e-10);
  m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return true;
}

struct MacroAssemblyOptions {
  int n_effective = 9;
  int n_cell = 64;
  int n_axial = 8;
  int n_angular = 16;
  EffectiveCache* cache = nullptr;
};

inline MacroAssembly assemble_macro(const MicrostructureSpec& spec, const KineticsSpec& k, int n_macro,
                                    const MacroAssemblyOptions& opt = {}) {
  spec.validate();
  k.validate(spec.omega);
  if (n_macro < 2) throw error(errc::validation_error, "n_macro must be at least 2");
  MacroAssembly m;
  m.grid = MacroGrid(spec.omega, n_macro);
  m.A = k.A;
  m.n_effective = opt.n_effective;
  const AnchorLattice L = compute_anchor_lattice(spec, opt.n_effective, opt.n_cell, opt.cache, &m.stats);
  const std::size_t N = m.grid.size();
  m.theta.resize(N);
  m.tensor.resize(N);
  std::vector<std::uint8_t> moved(N, 0);
  parallel_for(N, [&](std::size_t i) {
    auto [th, t] = L.interpolate(m.grid.center(i));
    t = (0.5 * (t + t.transpose())).eval();
    moved[i] = clamp_spd(t);
    m.theta[i] = th;
    m.tensor[i] = k.A * t;
  });
  for (std::size_t i = 0; i < N; ++i) {
    m.clamped += moved[i];
    if (!(m.theta[i] > 0.0 && m.theta[i] <= 1.0 + 1e-12))
      throw error(errc::validation_error, "interpolated porosity outside (0,1]");
    Eigen::SelfAdjointEigenSolver<Mat3> es(m.tensor[i]);
    if (!(es.eigenvalues().minCoeff() > 0.0))
      throw error(errc::spd_violation_after_clamp, "macro tensor not SPD at node " + std::to_string(i));
  }

  // surface rules, shared between nodes with the same fiber radius
  m.node_rule.resize(N);
  m.offset.assign(N + 1, 0);
  if (spec.a > 0.0) {
    std::map<double, std::uint32_t> by_radius;
    for (std::size_t i = 0; i < N; ++i) {
      const double r = spec.rho(m.grid.center(i)) * spec.a;
      auto it = by_radius.find(r);
      if (it == by_radius.end()) {
        it = by_radius.emplace(r, std::uint32_t(m.rules.size())).first;
        m.rules.push_back(grouped_surface_rule(k, r, opt.n_axial, opt.n_angular));
      }
      m.node_rule[i] = it->second;
      m.offset[i + 1] = m.offset[i] + m.rules[it->second].groups.size();
    }
  }
  const std::size_t P = m.points();
  m.alpha.resize(P);
  m.beta.resize(P);
  m.weight.resize(P);
  m.rf0.resize(P);
  m.rb0.resize(P);
  for (std::size_t i = 0; i < N && P > 0; ++i) {
    const Vec3 x = m.grid.center(i);
    const double a1 = k.alpha1(x), b1 = k.beta1(x), f1 = k.rf0_1(x), r1 = k.rb0_1(x);
    const auto& g = m.rules[m.node_rule[i]].groups;
    for (std::size_t q = 0; q < g.size(); ++q) {
      const std::size_t p = m.offset[i] + q;
      m.alpha[p] = a1 * g[q].bump;
      m.beta[p] = b1 * g[q].bump;
      m.weight[p] = g[q].weight;
      m.rf0[p] = f1 * g[q].rf2;
      m.rb0[p] = r1 * g[q].rb2;
      if (m.rf0[p] < 0.0 || m.rb0[p] < 0.0) throw error(errc::negative_initial_data, "receptor initial data negative");
    }
  }
  return m;
}

struct MacroState {
  double t = 0.0;
  std::size_t step = 0;
  std::vector<double> c;
  std::vector<double> rf;  // per receptor point
  std::vector<double> rb;
};

inline MacroState init_macro_state(const MacroAssembly& m, const KineticsSpec& k) {
  MacroState s;
  s.c.resize(m.grid.size());
  for (std::size_t i = 0; i < s.c.size(); ++i) {
    s.c[i] = k.c0(m.grid.center(i));
    if (s.c[i] < 0.0) throw error(errc::negative_initial_data, "c0 is negative at a macro node");
  }
  s.rf = m.rf0;
  s.rb = m.rb0;
  return s;
}

/// Same columns as the micro monitors. Volume norms carry the weight theta; surface sums use |Gamma_x|.
inline MonitorRow compute_macro_monitors(const MacroState& s, const MacroAssembly& m, const Barrier& bar) {
  MonitorRow r;
  r.t = s.t;
  const MacroGrid& g = m.grid;
  const double V = g.cell_volume(), level = bar(s.t);
  double mn = 1e300, mx = -1e300, l2 = 0.0, g2 = 0.0, ex = 0.0, mass = 0.0;
  const std::size_t st[3] = {1, std::size_t(g.dims[0]), std::size_t(g.dims[0]) * g.dims[1]};
  for (int kk = 0; kk < g.dims[2]; ++kk)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t id = g.index(i, j, kk);
        const double c = s.c[id], th = m.theta[id];
        mass += th * V * c;
        l2 += th * V * c * c;
        mn = std::min(mn, c);
        mx = std::max(mx, c);
        const double e = std::max(c - level, 0.0);
        ex += th * V * e * e;
        const int p[3] = {i, j, kk};
        for (int a = 0; a < 3; ++a)
          if (p[a] + 1 < g.dims[a]) {
            const std::size_t u = id + st[a];
            const double d = s.c[u] - c;
            g2 += 0.5 * (th + m.theta[u]) * V / (g.h[a] * g.h[a]) * d * d;
          }
      }
  r.mass = mass;
  r.min_c = mn;
  r.max_c = mx;
  r.l2_c = std::sqrt(l2);
  r.l2_grad = std::sqrt(g2);
  r.barrier_excess = std::sqrt(ex);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t p = m.offset[i]; p < m.offset[i + 1]; ++p) {
      const double w = V * m.weight[p];
      r.trace_sq += w * s.c[i] * s.c[i];
      r.sup_rf = std::max(r.sup_rf, std::abs(s.rf[p]));
      r.sup_rb = std::max(r.sup_rb, std::abs(s.rb[p]));
      r.sup_receptor_sum = std::max(r.sup_receptor_sum, s.rf[p] + s.rb[p]);
      r.surface_mass += w * s.rb[p];
    }
  return r;
}

/// Surface integral term at a node, int_Gamma (beta r_b - alpha r_f c) with |Y_x| = 1.
inline double surface_source(const MacroAssembly& m, const MacroState& s, std::size_t node) {
  double v = 0.0;
  for (std::size_t p = m.offset[node]; p < m.offset[node + 1]; ++p)
    v += m.weight[p] * (m.beta[p] * s.rb[p] - m.alpha[p] * s.rf[p] * s.c[node]);
  return v;
}

/// |Gamma_x|-weighted average of a receptor field at every node (0 where there is no surface).
inline std::vector<double> surface_average(const MacroAssembly& m, const std::vector<double>& r) {
  std::vector<double> out(m.grid.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0, w = 0.0;
    for (std::size_t p = m.offset[i]; p < m.offset[i + 1]; ++p) {
      s += m.weight[p] * r[p];
      w += m.weight[p];
    }
    if (w > 0.0) out[i] = s / w;
  }
  return out;
}

/// Largest dt keeping the explicit cross-diffusion terms below half the implicit diagonal scale.
inline double cross_term_dt_bound(const MacroAssembly& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.grid.size(); ++i) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        if (a != b) s += std::abs(m.tensor[i](a, b)) / (m.grid.h[a] * m.grid.h[b]);
    worst = std::max(worst, s / m.theta[i]);
  }
  return worst > 0.0 ? 0.5 / worst : std::numeric_limits<double>::infinity();
}

/// Implicit face-diagonal diffusion, explicit cross terms, surface exchange semi-implicit in c.
class MacroStepper {
 public:
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
  int last_iterations = 0;

  MacroStepper(const MacroAssembly& m, const KineticsSpec& k) : m_(m), k_(k) {
    const MacroGrid& g = m.grid;
    const std::size_t N = g.size();
    for (int a = 0; a < 3; ++a) {
      trans_[a].assign(N, 0.0);
      const double area_over_h = g.cell_volume() / (g.h[a] * g.h[a]);
      const std::size_t st = stride(a);
      for (std::size_t i = 0; i < N; ++i) {
        if (g.unpack(i)[a] + 1 >= g.dims[a]) continue;
        const double ka = m.tensor[i](a, a), kb = m.tensor[i + st](a, a);
        trans_[a][i] = area_over_h * 2.0 * ka * kb / (ka + kb);
      }
    }
    has_cross_ = false;
    for (const auto& t : m.tensor)
      if (t(0, 1) != 0.0 || t(0, 2) != 0.0 || t(1, 2) != 0.0) has_cross_ = true;
  }

  void step(MacroState& s, double dt) {
    if (!(dt > 0.0)) throw error(errc::validation_error, "dt must be positive");
    const MacroGrid& g = m_.grid;
    const std::size_t N = g.size();
    const double V = g.cell_volume();
    diag_.assign(N, 0.0);
    rhs_.assign(N, 0.0);
    for_rows([&](std::size_t i, const Int3& q) {
      const double c = s.c[i], th = m_.theta[i];
      const double dF = k_.F.derivative(c);
      double dg = th * V / dt - 0.5 * th * V * dF;
      double rh = th * V * c / dt + th * V * (k_.F(c) - 0.5 * dF * c);
      for (std::size_t p = m_.offset[i]; p < m_.offset[i + 1]; ++p) {
        dg += V * m_.weight[p] * m_.alpha[p] * s.rf[p];
        rh += V * m_.weight[p] * m_.beta[p] * s.rb[p];
      }
      for (int a = 0; a < 3; ++a) {
        dg += trans_[a][i];
        if (q[a] > 0) dg += trans_[a][i - stride(a)];
      }
      diag_[i] = dg;
      rhs_[i] = rh;
    });
    if (has_cross_) add_cross_terms(s.c);
    x_ = s.c;
    solve();
    for (std::size_t i = 0; i < N; ++i) {
      if (!std::isfinite(x_[i])) throw error(errc::solver_diverged, "non-finite macro concentration");
      s.c[i] = x_[i];
    }
    const auto& p = k_.p;
    const double df = k_.d_f, db = k_.d_b;
    parallel_for(N, [&](std::size_t i) {
      for (std::size_t b = m_.offset[i]; b < m_.offset[i + 1]; ++b) {
        const double rf = s.rf[b], rb = s.rb[b];
        const double J = m_.alpha[b] * rf * s.c[i] - m_.beta[b] * rb;
        const double gf = p(rb) - df * rf, gb = -db * rb;
        const double rf1 = rf + dt * (gf - J), rb1 = rb + dt * (gb + J);
        const double gf1 = p(rb1) - df * rf1, gb1 = -db * rb1;
        s.rf[b] = rf + 0.5 * dt * (gf + gf1) - dt * J;
        s.rb[b] = rb + 0.5 * dt * (gb + gb1) + dt * J;
      }
    });
    s.t += dt;
    ++s.step;
    double mc = 0.0, mr = 0.0;
    for (double v : s.c) mc = std::min(mc, v);
    for (std::size_t b = 0; b < s.rf.size(); ++b) {
      if (!std::isfinite(s.rf[b]) || !std::isfinite(s.rb[b]))
        throw error(errc::solver_diverged, "non-finite receptor density");
      mr = std::min({mr, s.rf[b], s.rb[b]});
    }
    if (mc < -1e-8 || mr < -1e-8)
      throw error(errc::positivity_lost, "min c = " + std::to_string(mc) + ", min r = " + std::to_string(mr) +
                                             " at t = " + std::to_string(s.t));
  }

 private:
  const MacroAssembly& m_;
  KineticsSpec k_;
  std::array<std::vector<double>, 3> trans_;
  bool has_cross_ = false;
  std::vector<double> diag_, rhs_, x_, r_, z_, p_, Ap_;
  std::array<std::vector<double>, 3> grad_;

  std::size_t stride(int a) const {
    const Int3& d = m_.grid.dims;
    return a == 0 ? 1 : a == 1 ? std::size_t(d[0]) : std::size_t(d[0]) * d[1];
  }

  /// f(id, (i,j,k)) over all nodes, rows of constant (j,k) split across workers
  template <class F>
  void for_rows(F&& f) const {
    const Int3& d = m_.grid.dims;
    parallel_for(std::size_t(d[1]) * d[2], [&](std::size_t row) {
      const int j = int(row % d[1]), k = int(row / d[1]);
      const std::size_t base = m_.grid.index(0, j, k);
      for (int i = 0; i < d[0]; ++i) f(base + i, Int3(i, j, k));
    });
  }

  void add_cross_terms(const std::vector<double>& c) {
    const MacroGrid& g = m_.grid;
    const std::size_t N = g.size();
    // nodal derivatives, one-sided at the boundary
    for (int b = 0; b < 3; ++b) {
      grad_[b].resize(N);
      const std::size_t st = stride(b);
      const double h = g.h[b];
      for_rows([&](std::size_t i, const Int3& q) {
        const bool lo = q[b] > 0, hi = q[b] + 1 < g.dims[b];
        grad_[b][i] = lo && hi ? (c[i + st] - c[i - st]) / (2.0 * h)
                      : hi     ? (c[i + st] - c[i]) / h
                      : lo     ? (c[i] - c[i - st]) / h
                               : 0.0;
      });
    }
    // node i gathers the cross part of the flux through its six faces
    for_rows([&](std::size_t i, const Int3& q) {
      double acc = 0.0;
      for (int a = 0; a < 3; ++a) {
        const std::size_t st = stride(a);
        const double area = g.cell_volume() / g.h[a];
        auto face_flux = [&](std::size_t l) {
          double f = 0.0;
          for (int b = 0; b < 3; ++b) {
            if (b == a) continue;
            const double kab = 0.5 * (m_.tensor[l](a, b) + m_.tensor[l + st](a, b));
            f -= kab * 0.5 * (grad_[b][l] + grad_[b][l + st]);
          }
          return f;
        };
        if (q[a] + 1 < g.dims[a]) acc -= area * face_flux(i);
        if (q[a] > 0) acc += area * face_flux(i - st);
      }
      rhs_[i] += acc;
    });
  }

  void apply(const std::vector<double>& u, std::vector<double>& out) const {
    const MacroGrid& g = m_.grid;
    out.resize(u.size());
    for_rows([&](std::size_t i, const Int3& q) {
      double s = diag_[i] * u[i];
      for (int a = 0; a < 3; ++a) {
        const std::size_t st = stride(a);
        if (q[a] + 1 < g.dims[a]) s -= trans_[a][i] * u[i + st];
        if (q[a] > 0) s -= trans_[a][i - st] * u[i - st];
      }
      out[i] = s;
    });
  }

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return parallel_sum(a.size(), [&](std::size_t i) { return a[i] * b[i]; });
  }

  void solve() {
    const std::size_t n = x_.size();
    const double bn = std::sqrt(dot(rhs_, rhs_));
    last_iterations = 0;
    if (bn == 0.0) {
      std::fill(x_.begin(), x_.end(), 0.0);
      return;
    }
    apply(x_, Ap_);
    r_.resize(n);
    z_.resize(n);
    for (std::size_t i = 0; i < n; ++i) r_[i] = rhs_[i] - Ap_[i];
    double rn = std::sqrt(dot(r_, r_));
    if (rn <= cg_tol * bn) return;
    for (std::size_t i = 0; i < n; ++i) z_[i] = r_[i] / diag_[i];
    p_ = z_;
    double rz = dot(r_, z_);
    for (int it = 1; it <= cg_max_iter; ++it) {
      apply(p_, Ap_);
      const double pAp = dot(p_, Ap_);
      if (!(pAp > 0.0) || !std::isfinite(pAp)) throw error(errc::solver_diverged, "CG breakdown in macro step");
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
    throw error(errc::solver_diverged, "macro CG did not reach tolerance");
  }
};

struct MacroRunOptions {
  int monitor_every = 1;
  int snapshots = 0;
  std::function<void(const MacroState&)> on_sample;
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
};

struct MacroRun {
  MacroState state;
  std::vector<MonitorRow> rows;
  MonitorSummary summary;
  Barrier barrier;
  double dt = 0.0;
  std::size_t steps = 0;
  double lipschitz = 0.0;
};

/// Diffusion is implicit, so the step only has to resolve the slowest mode (1% per step) and the kinetics.
inline double default_macro_dt(const MacroAssembly& m, const KineticsSpec& k, const Box& omega, double T) {
  double kmax = 0.0, thmin = 1.0;
  for (std::size_t i = 0; i < m.grid.size(); ++i) {
    kmax = std::max(kmax, m.tensor[i].diagonal().maxCoeff());
    thmin = std::min(thmin, m.theta[i]);
  }
  const double L = omega.extent().maxCoeff();
  double dt = 0.01 * thmin * L * L / (pi * pi * kmax);
  const double lip = kinetic_lipschitz(k, omega, T);
  if (lip > 0.0) dt = std::min(dt, 0.25 / lip);
  return std::min(dt, cross_term_dt_bound(m));
}

/// Advance a prebuilt assembly to T. dt <= 0 selects the default.
inline MacroRun run_macro(const MacroAssembly& m, const KineticsSpec& k, double dt, double T,
                          const MacroRunOptions& opt = {}) {
  if (!(T > 0.0)) throw error(errc::validation_error, "T must be positive");
  MacroRun run;
  const Box& omega = m.grid.omega;
  run.state = init_macro_state(m, k);
  run.barrier = barrier_constants(k, omega, T);
  run.lipschitz = kinetic_lipschitz(k, omega, T);
  if (!(dt > 0.0)) dt = default_macro_dt(m, k, omega, T);
  std::size_t n = std::size_t(std::ceil(T / dt - 1e-9));
  if (opt.snapshots > 0) n = (n + opt.snapshots - 1) / opt.snapshots * opt.snapshots;
  n = std::max<std::size_t>(n, 1);
  run.dt = T / double(n);
  run.steps = n;
  if (run.dt * run.lipschitz > 0.5)
    throw error(errc::validation_error, "dt * Lip exceeds 0.5 for the explicit kinetic parts");
  if (run.dt > cross_term_dt_bound(m) * (1.0 + 1e-12))
    throw error(errc::validation_error, "dt exceeds the bound for the explicit cross-diffusion terms");
  MacroStepper st(m, k);
  st.cg_tol = opt.cg_tol;
  st.cg_max_iter = opt.cg_max_iter;
  MacroState& s = run.state;
  MonitorSummary& sm = run.summary;
  auto absorb = [&](const MonitorRow& r) {
    sm.sup_l2_c = std::max(sm.sup_l2_c, r.l2_c);
    sm.sup_rf = std::max(sm.sup_rf, r.sup_rf);
    sm.sup_rb = std::max(sm.sup_rb, r.sup_rb);
    sm.barrier_excess = std::max(sm.barrier_excess, r.barrier_excess);
    sm.sup_receptor_sum = std::max(sm.sup_receptor_sum, r.sup_receptor_sum);
    sm.min_c = std::min(sm.min_c, r.min_c);
  };
  const MonitorRow r0 = compute_macro_monitors(s, m, run.barrier);
  absorb(r0);
  sm.min_c = r0.min_c;
  run.rows.push_back(r0);
  if (opt.on_sample && opt.snapshots > 0) opt.on_sample(s);
  const std::size_t every = opt.snapshots > 0 ? n / opt.snapshots : 0;
  const double V = m.grid.cell_volume();
  double g2 = 0.0, tr = 0.0, dtc = 0.0, dtr = 0.0;
  std::vector<double> c_prev, rf_prev, rb_prev;
  for (std::size_t i = 1; i <= n; ++i) {
    c_prev = s.c;
    rf_prev = s.rf;
    rb_prev = s.rb;
    st.step(s, run.dt);
    const MonitorRow r = compute_macro_monitors(s, m, run.barrier);
    absorb(r);
    g2 += run.dt * r.l2_grad * r.l2_grad;
    tr += run.dt * r.trace_sq;
    double a = 0.0, bf = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < s.c.size(); ++j) {
      a += m.theta[j] * V * (s.c[j] - c_prev[j]) * (s.c[j] - c_prev[j]);
      for (std::size_t p = m.offset[j]; p < m.offset[j + 1]; ++p) {
        const double w = V * m.weight[p];
        bf += w * (s.rf[p] - rf_prev[p]) * (s.rf[p] - rf_prev[p]);
        bb += w * (s.rb[p] - rb_prev[p]) * (s.rb[p] - rb_prev[p]);
        sm.min_r = std::min({sm.min_r, s.rf[p], s.rb[p]});
      }
    }
    dtc += a / run.dt;
    dtr += (std::sqrt(bf) + std::sqrt(bb)) * (std::sqrt(bf) + std::sqrt(bb)) / run.dt;
    if (opt.monitor_every > 0 && (i % std::size_t(opt.monitor_every) == 0 || i == n)) run.rows.push_back(r);
    if (opt.on_sample && every > 0 && i % every == 0) opt.on_sample(s);
  }
  sm.grad_l2_time = std::sqrt(g2);
  sm.trace_l2_time = std::sqrt(tr);
  sm.dtc_l2_time = std::sqrt(dtc);
  sm.dtr_l2_time = std::sqrt(dtr);
  return run;
}

inline MacroRun run_macro(const MicrostructureSpec& spec, const KineticsSpec& k, int n_macro, double dt, double T,
                          const MacroAssemblyOptions& aopt = {}, const MacroRunOptions& opt = {}) {
  const MacroAssembly m = assemble_macro(spec, k, n_macro, aopt);
  return run_macro(m, k, dt, T, opt);
}

inline void write_macro_snapshot(const std::string& base, const MacroGrid& g, const std::vector<double>& field,
                                 double t) {
  write_grid_snapshot(base, g.dims, g.h, g.omega.lo, field, t, "macro");
}

}  // namespace plyhomog
