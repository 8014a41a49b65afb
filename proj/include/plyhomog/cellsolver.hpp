#pragma once

#include "microgeom.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>

namespace plyhomog {

/// Reference cell Y = (0,1)^3 with corner holes Ktilde Y0 + k.
///
/// Holes and the pulled-back metric do not depend on yhat_1, so the cell can be
/// resolved either as the full n^3 grid (dim 3) or as its (yhat_2, yhat_3)
/// cross-section (dim 2). Masks are per element, stored with axis 0 fastest.
struct ReferenceCell {
  Vec3 x_anchor = Vec3::Zero();
  TransformSet transform;
  double A = 1.0;
  double hole_radius = 0.0;  // rho(x) a
  int n = 0;
  int dim = 2;
  std::vector<std::uint8_t> fluid;
  Mat3 metric = Mat3::Identity();  // D^{-1} A D^{-T} |det D|
  double fluid_fraction = 1.0;

  /// reference axis carried by grid axis d
  int axis(int d) const { return dim == 3 ? d : d + 1; }
  std::size_t elements() const { return fluid.size(); }
};

/// Hole indicator at a reference point for shear w and hole radius rad.
inline bool in_corner_hole(const Vec3& yh, double w, double rad) {
  const double y3 = yh[2] - std::floor(yh[2] + 0.5);
  const double q = yh[1] + w * y3;
  const double y2 = q - std::floor(q + 0.5);
  return y2 * y2 + y3 * y3 <= rad * rad;
}

inline ReferenceCell build_reference_cell(const MicrostructureSpec& spec, const Vec3& x, int n, int dim = 2,
                                          double A = 1.0) {
  if (n < 16) throw error(errc::validation_error, "cell resolution n must be at least 16");
  if (dim != 2 && dim != 3) throw error(errc::validation_error, "cell dim must be 2 or 3");
  if (!spec.omega.contains_closed(x, 1e-12)) throw error(errc::not_in_domain, "cell anchor outside omega");
  if (!(A > 0.0)) throw error(errc::validation_error, "diffusion coefficient must be positive");
  ReferenceCell c;
  c.x_anchor = x;
  c.transform = transforms_at(spec, x);
  c.A = A;
  c.hole_radius = c.transform.rho * spec.a;
  c.n = n;
  c.dim = dim;
  const double det = c.transform.D.determinant();
  c.metric = A * c.transform.D_inv * c.transform.D_inv.transpose() * std::abs(det);
  c.metric = 0.5 * (c.metric + c.metric.transpose()).eval();
  const std::size_t ne = dim == 3 ? std::size_t(n) * n * n : std::size_t(n) * n;
  c.fluid.assign(ne, 1);
  const double h = 1.0 / n;
  std::size_t nf = 0;
  const std::size_t layer = std::size_t(n) * n;
  // grid axes are yhat (2,3) in dim 2 and yhat (1,2,3) in dim 3
  for (std::size_t e = 0; e < ne; ++e) {
    const int i = int(e % n), j = int((e / n) % n), k = int(e / layer);
    const Vec3 yc = dim == 3 ? Vec3((i + 0.5) * h, (j + 0.5) * h, (k + 0.5) * h) : Vec3(0.0, (i + 0.5) * h, (j + 0.5) * h);
    const bool f = !in_corner_hole(yc, c.transform.w, c.hole_radius);
    c.fluid[e] = f;
    nf += f;
  }
  c.fluid_fraction = double(nf) / double(ne);
  if (c.fluid_fraction < 0.05) throw error(errc::degenerate_cell, "fluid fraction below 0.05");
  return c;
}

struct PorosityEstimate {
  double theta = 1.0;
  double stderr_ = 0.0;
  std::size_t n_samples = 0;
};

/// Monte Carlo fluid fraction of the reference cell at x.
inline PorosityEstimate porosity(const MicrostructureSpec& spec, const Vec3& x, std::size_t n_mc,
                                 std::uint64_t seed = 0) {
  if (n_mc < 10000) throw error(errc::validation_error, "porosity needs at least 1e4 samples");
  const TransformSet t = transforms_at(spec, x);
  const double rad = t.rho * spec.a;
  PorosityEstimate p;
  p.n_samples = n_mc;
  if (rad == 0.0) return p;
  const CounterRng rng{seed};
  const double holes = parallel_sum(n_mc, [&](std::size_t i) {
    return in_corner_hole(rng.uniform3(i), t.w, rad) ? 1.0 : 0.0;
  });
  const double f = holes / double(n_mc);
  p.theta = 1.0 - f;
  p.stderr_ = std::sqrt(f * (1.0 - f) / double(n_mc));
  return p;
}

struct CellSolveStats {
  int iterations = 0;
  double residual = 0.0;  // relative to the source norm
  std::vector<double> history;
};

namespace detail {

/// Periodic Q1 elements on an n^Dim grid with a constant metric and an element mask.
template <int Dim>
struct Q1Cell {
  static constexpr int nv = 1 << Dim;
  static constexpr int ns = Dim == 2 ? 9 : 27;
  int n = 0;
  double h = 0.0;
  const std::vector<std::uint8_t>* fluid = nullptr;
  std::array<std::array<double, nv>, nv> Ke{};
  std::array<std::array<double, nv>, Dim> fe{};  // -int grad phi_a . G e_m
  std::array<double, ns> stencil{};              // fully fluid node
  Eigen::Matrix<double, Dim, Dim> G;
  std::vector<std::uint8_t> active;
  std::vector<std::uint8_t> interior;  // every incident element is fluid
  std::vector<double> diag;
  // assembled rows (2D only): ns values and columns per node
  std::vector<double> row_val;
  std::vector<std::uint32_t> row_col;

  std::size_t nodes() const { return fluid->size(); }
  std::size_t wrap(const std::array<int, Dim>& i) const {
    std::size_t id = 0;
    for (int d = Dim - 1; d >= 0; --d) id = id * n + std::size_t(((i[d] % n) + n) % n);
    return id;
  }
  std::array<int, Dim> unpack(std::size_t id) const {
    std::array<int, Dim> i{};
    for (int d = 0; d < Dim; ++d) {
      i[d] = int(id % n);
      id /= n;
    }
    return i;
  }
  static std::array<int, Dim> bits(int s) {
    std::array<int, Dim> b{};
    for (int d = 0; d < Dim; ++d) b[d] = (s >> d) & 1;
    return b;
  }

  void setup(int n_, const std::vector<std::uint8_t>& mask, const Eigen::Matrix<double, Dim, Dim>& G_) {
    n = n_;
    h = 1.0 / n;
    fluid = &mask;
    G = G_;
    // 2-point Gauss on the unit element is exact for constant G
    const double g[2] = {0.5 - 0.5 / std::sqrt(3.0), 0.5 + 0.5 / std::sqrt(3.0)};
    for (auto& r : Ke) r.fill(0.0);
    for (auto& r : fe) r.fill(0.0);
    for (int q = 0; q < nv; ++q) {
      const auto qb = bits(q);
      std::array<Eigen::Matrix<double, Dim, 1>, nv> grad;
      for (int a = 0; a < nv; ++a) {
        const auto ab = bits(a);
        for (int d = 0; d < Dim; ++d) {
          double v = ab[d] ? 1.0 : -1.0;
          for (int o = 0; o < Dim; ++o)
            if (o != d) v *= ab[o] ? g[qb[o]] : 1.0 - g[qb[o]];
          grad[a][d] = v;
        }
      }
      const double wq = 1.0 / nv;
      for (int a = 0; a < nv; ++a) {
        for (int b = 0; b < nv; ++b) Ke[a][b] += wq * grad[a].dot(G * grad[b]);
        for (int m = 0; m < Dim; ++m) fe[m][a] -= wq * grad[a].dot(G.col(m));
      }
    }
    const double ks = std::pow(h, Dim - 2), fs = std::pow(h, Dim - 1);
    for (auto& r : Ke)
      for (double& v : r) v *= ks;
    for (auto& r : fe)
      for (double& v : r) v *= fs;
    stencil.fill(0.0);
    for (int s = 0; s < nv; ++s)
      for (int b = 0; b < nv; ++b) {
        const auto sb = bits(s), bb = bits(b);
        int off = 0, mul = 1;
        for (int d = 0; d < Dim; ++d) {
          off += (bb[d] - sb[d] + 1) * mul;
          mul *= 3;
        }
        stencil[off] += Ke[s][b];
      }
    const std::size_t N = nodes();
    active.assign(N, 0);
    interior.assign(N, 0);
    diag.assign(N, 0.0);
    for (std::size_t p = 0; p < N; ++p) {
      const auto ip = unpack(p);
      int cnt = 0;
      for (int s = 0; s < nv; ++s) {
        const auto sb = bits(s);
        std::array<int, Dim> e{};
        for (int d = 0; d < Dim; ++d) e[d] = ip[d] - sb[d];
        if ((*fluid)[wrap(e)]) {
          ++cnt;
          diag[p] += Ke[s][s];
        }
      }
      active[p] = cnt > 0;
      interior[p] = cnt == nv;
    }
    if constexpr (Dim == 2) {
      row_val.assign(N * ns, 0.0);
      row_col.assign(N * ns, 0);
      for (std::size_t p = 0; p < N; ++p) {
        const auto ip = unpack(p);
        for (int o = 0; o < ns; ++o) {
          std::array<int, Dim> j{};
          int r = o;
          for (int d = 0; d < Dim; ++d) {
            j[d] = ip[d] + r % 3 - 1;
            r /= 3;
          }
          row_col[p * ns + o] = std::uint32_t(wrap(j));
        }
        if (!active[p]) continue;
        for (int s = 0; s < nv; ++s) {
          const auto sb = bits(s);
          std::array<int, Dim> e{};
          for (int d = 0; d < Dim; ++d) e[d] = ip[d] - sb[d];
          if (!(*fluid)[wrap(e)]) continue;
          for (int b = 0; b < nv; ++b) {
            const auto bb = bits(b);
            int off = 0, mul = 1;
            for (int d = 0; d < Dim; ++d) {
              off += (bb[d] - sb[d] + 1) * mul;
              mul *= 3;
            }
            row_val[p * ns + off] += Ke[s][b];
          }
        }
      }
    }
  }

  /// out = K u on active nodes
  void apply(const std::vector<double>& u, std::vector<double>& out) const {
    const std::size_t N = nodes();
    out.assign(N, 0.0);
    if (!row_val.empty()) {
      for (std::size_t p = 0; p < N; ++p) {
        if (!active[p]) continue;
        const double* v = &row_val[p * ns];
        const std::uint32_t* c = &row_col[p * ns];
        double acc = 0.0;
        for (int o = 0; o < ns; ++o) acc += v[o] * u[c[o]];
        out[p] = acc;
      }
      return;
    }
    for (std::size_t p = 0; p < N; ++p) {
      if (!active[p]) continue;
      const auto ip = unpack(p);
      double acc = 0.0;
      if (interior[p]) {
        for (int o = 0; o < ns; ++o) {
          std::array<int, Dim> j{};
          int r = o;
          for (int d = 0; d < Dim; ++d) {
            j[d] = ip[d] + r % 3 - 1;
            r /= 3;
          }
          acc += stencil[o] * u[wrap(j)];
        }
      } else {
        for (int s = 0; s < nv; ++s) {
          const auto sb = bits(s);
          std::array<int, Dim> e{};
          for (int d = 0; d < Dim; ++d) e[d] = ip[d] - sb[d];
          if (!(*fluid)[wrap(e)]) continue;
          for (int b = 0; b < nv; ++b) {
            const auto bb = bits(b);
            std::array<int, Dim> j{};
            for (int d = 0; d < Dim; ++d) j[d] = e[d] + bb[d];
            acc += Ke[s][b] * u[wrap(j)];
          }
        }
      }
      out[p] = acc;
    }
  }

  void load(int m, std::vector<double>& f) const {
    const std::size_t N = nodes();
    f.assign(N, 0.0);
    for (std::size_t e = 0; e < N; ++e) {
      if (!(*fluid)[e]) continue;
      const auto ie = unpack(e);
      for (int a = 0; a < nv; ++a) {
        const auto ab = bits(a);
        std::array<int, Dim> j{};
        for (int d = 0; d < Dim; ++d) j[d] = ie[d] + ab[d];
        f[wrap(j)] += fe[m][a];
      }
    }
  }

  void remove_mean(std::vector<double>& u) const {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t p = 0; p < u.size(); ++p)
      if (active[p]) {
        s += u[p];
        ++c;
      }
    const double mean = c ? s / double(c) : 0.0;
    for (std::size_t p = 0; p < u.size(); ++p) u[p] = active[p] ? u[p] - mean : 0.0;
  }

  /// Jacobi-preconditioned CG on the singular periodic system
  CellSolveStats solve(const std::vector<double>& f, std::vector<double>& u, double tol, int max_iter) const {
    const std::size_t N = nodes();
    CellSolveStats st;
    u.assign(N, 0.0);
    double fn = 0.0, fscale = 0.0;
    for (std::size_t p = 0; p < N; ++p) fn += f[p] * f[p];
    for (const auto& r : fe)
      for (double v : r) fscale = std::max(fscale, std::abs(v));
    fn = std::sqrt(fn);
    // sources that vanish up to rounding (no holes, invariant directions)
    if (fn <= 1e-13 * fscale * std::sqrt(double(N))) return st;
    std::vector<double> r(f), z(N), p(N), q(N);
    for (std::size_t i = 0; i < N; ++i) r[i] = active[i] ? r[i] : 0.0;
    auto precond = [&] {
      for (std::size_t i = 0; i < N; ++i) z[i] = active[i] ? r[i] / diag[i] : 0.0;
    };
    precond();
    p = z;
    double rz = 0.0;
    for (std::size_t i = 0; i < N; ++i) rz += r[i] * z[i];
    for (int it = 1; it <= max_iter; ++it) {
      apply(p, q);
      double pq = 0.0;
      for (std::size_t i = 0; i < N; ++i) pq += p[i] * q[i];
      if (!(pq > 0.0)) break;
      const double al = rz / pq;
      double rn = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        u[i] += al * p[i];
        r[i] -= al * q[i];
        rn += r[i] * r[i];
      }
      st.iterations = it;
      st.residual = std::sqrt(rn) / fn;
      st.history.push_back(st.residual);
      if (st.residual <= tol) {
        remove_mean(u);
        return st;
      }
      precond();
      double rz2 = 0.0;
      for (std::size_t i = 0; i < N; ++i) rz2 += r[i] * z[i];
      const double be = rz2 / rz;
      rz = rz2;
      for (std::size_t i = 0; i < N; ++i) p[i] = z[i] + be * p[i];
    }
    std::string hist;
    for (std::size_t k = st.history.size() > 5 ? st.history.size() - 5 : 0; k < st.history.size(); ++k)
      hist += " " + std::to_string(st.history[k]);
    throw error(errc::no_convergence,
                "corrector CG stopped after " + std::to_string(st.iterations) + " iterations, residuals" + hist);
  }

  /// int over fluid of (grad u + e_n) . G (grad v + e_m) and the one-sided form e_m . G (grad u + e_n)
  void forms(const std::vector<double>& u, int nn, const std::vector<double>& v, int m, double& energy,
             double& displayed) const {
    energy = displayed = 0.0;
    const std::size_t N = nodes();
    const double cell = std::pow(h, Dim);
    for (std::size_t e = 0; e < N; ++e) {
      if (!(*fluid)[e]) continue;
      const auto ie = unpack(e);
      std::array<double, nv> ue, ve;
      for (int a = 0; a < nv; ++a) {
        const auto ab = bits(a);
        std::array<int, Dim> j{};
        for (int d = 0; d < Dim; ++d) j[d] = ie[d] + ab[d];
        const std::size_t id = wrap(j);
        ue[a] = u[id];
        ve[a] = v[id];
      }
      double uKv = 0.0, uf = 0.0, vf = 0.0;
      for (int a = 0; a < nv; ++a) {
        for (int b = 0; b < nv; ++b) uKv += ue[a] * Ke[a][b] * ve[b];
        uf += ue[a] * fe[m][a];
        vf += ve[a] * fe[nn][a];
      }
      energy += uKv - uf - vf + G(nn, m) * cell;
      displayed += -uf + G(m, nn) * cell;
    }
  }
};

}  // namespace detail

struct SurfaceQuadrature {
  std::vector<Vec3> y;  // centered cell coordinates on the fiber surface
  std::vector<double> weight;
};

/// Midpoint rule on the lateral fiber surface of one cell; weights sum to 2 pi rho a.
inline SurfaceQuadrature fiber_surface_rule(double radius, int n_axial = 8, int n_angular = 16) {
  SurfaceQuadrature q;
  if (radius <= 0.0) return q;
  const double w = 2.0 * pi * radius / (double(n_axial) * n_angular);
  for (int i = 0; i < n_axial; ++i)
    for (int j = 0; j < n_angular; ++j) {
      const double t = -0.5 + (i + 0.5) / n_axial, phi = 2.0 * pi * (j + 0.5) / n_angular;
      q.y.emplace_back(t, radius * std::cos(phi), radius * std::sin(phi));
      q.weight.push_back(w);
    }
  return q;
}

struct EffectiveField {
  double theta = 1.0;
  Mat3 tensor = Mat3::Identity();
  Mat3 reference_tensor = Mat3::Identity();  // in yhat coordinates
  std::array<std::vector<double>, 3> correctors;  // w^j on grid nodes
  std::array<std::vector<double>, 3> reference_correctors;  // chi^m, one per yhat axis
  double residual = 0.0;
  double asymmetry = 0.0;  // of the displayed-form tensor, relative
  int iterations = 0;
  SurfaceQuadrature surface_quad;
};

struct CellSolverOptions {
  double tol = 1e-10;
  int max_iter = 20000;
  bool keep_correctors = true;
};

namespace detail {

template <int Dim>
EffectiveField solve_cell_dim(const ReferenceCell& cell, const CellSolverOptions& opt) {
  Q1Cell<Dim> q;
  Eigen::Matrix<double, Dim, Dim> G;
  for (int a = 0; a < Dim; ++a)
    for (int b = 0; b < Dim; ++b) G(a, b) = cell.metric(cell.axis(a), cell.axis(b));
  q.setup(cell.n, cell.fluid, G);
  EffectiveField ef;
  ef.theta = cell.fluid_fraction;
  std::array<std::vector<double>, Dim> chi;
  std::vector<double> f;
  for (int m = 0; m < Dim; ++m) {
    q.load(m, f);
    const CellSolveStats st = q.solve(f, chi[m], opt.tol, opt.max_iter);
    ef.residual = std::max(ef.residual, st.residual);
    ef.iterations += st.iterations;
  }
  Mat3 Gh = cell.metric * cell.fluid_fraction, Gd = Gh;
  for (int m = 0; m < Dim; ++m)
    for (int nn = 0; nn < Dim; ++nn) {
      double en, disp;
      q.forms(chi[nn], nn, chi[m], m, en, disp);
      Gh(cell.axis(m), cell.axis(nn)) = en;
      Gd(cell.axis(m), cell.axis(nn)) = disp;
    }
  Gh = 0.5 * (Gh + Gh.transpose()).eval();
  const Mat3& D = cell.transform.D;
  const double det = std::abs(D.determinant());
  ef.reference_tensor = Gh;
  ef.tensor = D * Gh * D.transpose() / det;
  ef.tensor = 0.5 * (ef.tensor + ef.tensor.transpose()).eval();
  const Mat3 disp = D * Gd * D.transpose() / det;
  const double nrm = disp.norm();
  ef.asymmetry = nrm > 0.0 ? (disp - disp.transpose()).norm() / nrm : 0.0;
  if (opt.keep_correctors) {
    const std::size_t N = cell.fluid.size();
    for (int m = 0; m < 3; ++m) ef.reference_correctors[m].assign(N, 0.0);
    for (int m = 0; m < Dim; ++m) ef.reference_correctors[cell.axis(m)] = chi[m];
    // w^j = sum_m D_jm chi^m
    for (int j = 0; j < 3; ++j) {
      ef.correctors[j].assign(N, 0.0);
      for (int m = 0; m < 3; ++m)
        if (D(j, m) != 0.0)
          for (std::size_t p = 0; p < N; ++p) ef.correctors[j][p] += D(j, m) * ef.reference_correctors[m][p];
    }
  }
  return ef;
}

}  // namespace detail

/// Correctors and effective tensor of the cell; throws no_convergence, asymmetry_exceeded, spd_violation_after_clamp.
inline EffectiveField solve_cell(const ReferenceCell& cell, const CellSolverOptions& opt = {}) {
  EffectiveField ef = cell.dim == 3 ? detail::solve_cell_dim<3>(cell, opt) : detail::solve_cell_dim<2>(cell, opt);
  if (ef.asymmetry > 1e-6)
    throw error(errc::asymmetry_exceeded,
                "displayed-form tensor asymmetry " + std::to_string(ef.asymmetry) + " exceeds 1e-6");
  Eigen::SelfAdjointEigenSolver<Mat3> es(ef.tensor);
  if (!(es.eigenvalues().minCoeff() > 0.0))
    throw error(errc::spd_violation_after_clamp, "effective tensor is not positive definite");
  ef.surface_quad = fiber_surface_rule(cell.hole_radius);
  return ef;
}

inline EffectiveField effective_field_at(const MicrostructureSpec& spec, const Vec3& x, int n, double A = 1.0,
                                         const CellSolverOptions& opt = {}) {
  return solve_cell(build_reference_cell(spec, x, n, 2, A), opt);
}

/// Per-anchor effective data persisted between runs, keyed by grid index.
struct CachedCell {
  double theta = 1.0;
  Mat3 tensor = Mat3::Identity();
  double residual = 0.0;
};

class EffectiveCache {
 public:
  EffectiveCache(std::string geometry_hash, int n) : hash_(std::move(geometry_hash)), n_(n) {}

  static std::string key(const Int3& idx) {
    return std::to_string(idx[0]) + "," + std::to_string(idx[1]) + "," + std::to_string(idx[2]);
  }
  std::optional<CachedCell> find(const Int3& idx) const {
    auto it = cells_.find(key(idx));
    if (it == cells_.end()) return std::nullopt;
    return it->second;
  }
  void put(const Int3& idx, const CachedCell& c) { cells_[key(idx)] = c; }
  std::size_t size() const { return cells_.size(); }
  const std::string& geometry_hash() const { return hash_; }
  int resolution() const { return n_; }

  /// loads entries when the file matches (hash, n); returns whether anything was loaded
  bool load(const std::string& path) {
    std::ifstream in(path);
    if (!in) return false;
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception&) {
      return false;
    }
    if (j.value("geometry_hash", std::string()) != hash_ || j.value("n", -1) != n_) return false;
    for (const auto& [k, v] : j.at("cells").items()) {
      CachedCell c;
      c.theta = v.at("theta").get<double>();
      c.residual = v.at("residual").get<double>();
      const auto& t = v.at("tensor");
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) c.tensor(a, b) = t.at(3 * a + b).get<double>();
      cells_[k] = c;
    }
    return true;
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["geometry_hash"] = hash_;
    j["n"] = n_;
    nlohmann::json cells = nlohmann::json::object();
    for (const auto& [k, c] : cells_) {
      nlohmann::json t = nlohmann::json::array();
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) t.push_back(c.tensor(a, b));
      cells[k] = {{"theta", c.theta}, {"residual", c.residual}, {"tensor", t}};
    }
    j["cells"] = cells;
    std::ofstream out(path);
    if (!out) throw error(errc::io_error, "cannot write cell cache " + path);
    out << j.dump(1) << '\n';
    if (!out) throw error(errc::io_error, "failed writing cell cache " + path);
  }

 private:
  std::string hash_;
  int n_;
  std::map<std::string, CachedCell> cells_;
};

}  // namespace plyhomog
