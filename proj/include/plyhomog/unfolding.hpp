#pragma once

#include "lpgeom.hpp"

#include <functional>
#include <string>
#include <vector>

namespace plyhomog {

/// psi~(x, yhat), 1-periodic in the reference variable yhat.
struct TwoScaleFunction {
  std::string name;
  std::function<double(const Vec3&, const Vec3&)> eval;

  double operator()(const Vec3& x, const Vec3& yhat) const { return eval(x, yhat); }
};

namespace manufactured {

inline TwoScaleFunction constant(double c) {
  return {"constant", [c](const Vec3&, const Vec3&) { return c; }};
}

inline TwoScaleFunction fast_sine(int axis) {
  return {"fast_sine", [axis](const Vec3&, const Vec3& y) { return std::sin(2.0 * pi * y[axis]); }};
}

/// Lipschitz in x, smooth and periodic in yhat.
inline TwoScaleFunction lipschitz_mix() {
  return {"lipschitz_mix", [](const Vec3& x, const Vec3& y) {
            const double g = 1.0 + 0.5 * x[0] + 0.3 * x[1] * x[2];
            const double h = 1.0 + 0.5 * std::cos(2.0 * pi * y[0]) * std::sin(2.0 * pi * y[1]) +
                             0.25 * std::cos(2.0 * pi * y[2]);
            return g * h;
          }};
}

inline TwoScaleFunction slow(const MacroField& g) {
  return {"slow", [g](const Vec3& x, const Vec3&) { return g(x); }};
}

/// Reference-cell form of a rate law: sum_k f(x, W_x (yhat - k)), one nonzero term.
inline TwoScaleFunction periodized_rate(const MicrostructureSpec& spec, const ProductLaw& f) {
  return {"periodized_rate", [spec, f](const Vec3& x, const Vec3& yh) {
            const double w = shear_at(spec, x);
            const double k3 = std::floor(yh[2] + 0.5);
            const double y3 = yh[2] - k3;
            const double k2 = std::floor(yh[1] + w * y3 + 0.5);
            const double k1 = std::floor(yh[0] + 0.5);
            return f(x, Vec3(yh[0] - k1, yh[1] - k2 + w * y3, y3));
          }};
}

}  // namespace manufactured

enum class LpVariant { full, frozen };

/// Reference coordinate D_n^{-1}(x - x_n)/eps of x in cube n.
inline Vec3 reference_coordinate(const Partition& part, std::size_t n, const Vec3& x) {
  const CubeAnchor& a = part.anchors[n];
  return a.t.D_inv * (x - a.x) / part.eps;
}

/// Locally periodic approximation of psi at x (zero outside omega).
inline double lp_approximation(const TwoScaleFunction& psi, const Partition& part, LpVariant variant,
                               const Vec3& x) {
  if (!part.omega.contains_closed(x)) return 0.0;
  const std::size_t n = part.cube_of(x);
  const Vec3 yh = reference_coordinate(part, n, x);
  return psi(variant == LpVariant::full ? x : part.anchors[n].x, yh);
}

// ---------------------------------------------------------------------------
// smooth partition of unity approximation

namespace detail {
inline double smoothstep(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * (3.0 - 2.0 * u);
}
inline double smoothstep_d(double u) { return (u <= 0.0 || u >= 1.0) ? 0.0 : 6.0 * u * (1.0 - u); }
}  // namespace detail

/// Mollified cube indicators: product of 1D ramps of width delta = min(eps^rho, side/2).
struct SmoothPartition {
  const Partition* part = nullptr;
  double rho_exp = 0.0;
  double delta = 0.0;
  double gradient_constant = 1.5 * std::sqrt(3.0);  // sup |grad phi| * delta

  double phi(std::size_t n, const Vec3& x) const {
    const Box c = part->cube(n);
    double v = 1.0;
    for (int d = 0; d < 3; ++d) {
      v *= detail::smoothstep((x[d] - c.lo[d]) / delta) * detail::smoothstep((c.hi[d] - x[d]) / delta);
      if (v == 0.0) return 0.0;
    }
    return v;
  }
  Vec3 gradient(std::size_t n, const Vec3& x) const {
    const Box c = part->cube(n);
    double f[3], df[3];
    for (int d = 0; d < 3; ++d) {
      const double a = (x[d] - c.lo[d]) / delta, b = (c.hi[d] - x[d]) / delta;
      f[d] = detail::smoothstep(a) * detail::smoothstep(b);
      df[d] = (detail::smoothstep_d(a) * detail::smoothstep(b) - detail::smoothstep(a) * detail::smoothstep_d(b)) / delta;
    }
    return {df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]};
  }
  /// sum_n ||phi_n - chi_n||^2 over omega (closed form, cubes clipped to omega)
  double l2_mismatch_sq() const {
    const double s = part->side, dl = delta;
    // integrals of the 1D profile and of its square over [0, b]
    auto F = [&](double b, int power) {
      auto P = [power](double u) {
        return power == 1 ? u * u * u - 0.5 * u * u * u * u
                          : 1.8 * std::pow(u, 5) - 2.0 * std::pow(u, 6) + 4.0 / 7.0 * std::pow(u, 7);
      };
      b = std::clamp(b, 0.0, s);
      double v = dl * P(std::min(b, dl) / dl);
      v += std::max(0.0, std::min(b, s - dl) - dl);
      if (b > s - dl) v += dl * (P(1.0) - P((s - b) / dl));
      return v;
    };
    double total = 0.0;
    for (std::size_t n = 0; n < part->count(); ++n) {
      const Box c = part->cube(n);
      const Box k = part->clipped_cube(n);
      double i1 = 1.0, i2 = 1.0;
      for (int d = 0; d < 3; ++d) {
        const double a = k.lo[d] - c.lo[d], b = k.hi[d] - c.lo[d];
        i1 *= F(b, 1) - F(a, 1);
        i2 *= F(b, 2) - F(a, 2);
      }
      total += k.volume() - 2.0 * i1 + i2;
    }
    return total;
  }
  /// smoothed l-p approximation sum_n phi_n(x) psi(x, D_n^{-1}(x - x_n)/eps)
  double approximate(const TwoScaleFunction& psi, const Vec3& x) const {
    double v = 0.0;
    const Int3 c = part->index3(part->cube_of(x));
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const Int3 m = c + Int3(dx, dy, dz);
          if ((m.array() < 0).any() || (m.array() >= part->counts.array()).any()) continue;
          const std::size_t n = part->index(m);
          const double p = phi(n, x);
          if (p != 0.0) v += p * psi(x, reference_coordinate(*part, n, x));
        }
    return v;
  }
};

inline SmoothPartition smooth_partition(const Partition& part, double rho_exp) {
  if (!(rho_exp > part.r_exp && rho_exp < 1.0))
    throw error(errc::bad_exponent, "smoothing exponent must lie in (r, 1)");
  SmoothPartition sp;
  sp.part = &part;
  sp.rho_exp = rho_exp;
  sp.delta = std::min(std::pow(part.eps, rho_exp), 0.5 * part.side);
  return sp;
}

// ---------------------------------------------------------------------------
// unfolding

/// One cell eps D_n (Y + xi) + x_n of the union of hat-Omega_n.
struct HatCell {
  std::size_t cube = 0;
  Int3 xi = Int3::Zero();
  Vec3 origin = Vec3::Zero();
  double volume = 0.0;
};

namespace detail {
inline bool sheared_cell_fits(const Partition& part, std::size_t n, const Vec3& origin) {
  const Box c = part.cube(n);
  const Box box{c.lo.cwiseMax(part.omega.lo), c.hi.cwiseMin(part.omega.hi)};
  const Mat3 D = part.eps * part.anchors[n].t.D;
  const double slack = 1e-12 * part.eps;
  for (int k = 0; k < 8; ++k) {
    const Vec3 corner = origin + D * Vec3(k & 1, (k >> 1) & 1, (k >> 2) & 1);
    if (!box.contains_closed(corner, slack)) return false;
  }
  return true;
}
}  // namespace detail

inline std::vector<HatCell> hat_cells(const Partition& part) {
  std::vector<HatCell> cells;
  for (std::size_t n = 0; n < part.count(); ++n) {
    const Box box = part.clipped_cube(n);
    Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
    for (int k = 0; k < 8; ++k) {
      const Vec3 c((k & 1) ? box.hi[0] : box.lo[0], (k & 2) ? box.hi[1] : box.lo[1], (k & 4) ? box.hi[2] : box.lo[2]);
      const Vec3 z = reference_coordinate(part, n, c);
      lo = lo.cwiseMin(z);
      hi = hi.cwiseMax(z);
    }
    const CubeAnchor& a = part.anchors[n];
    const double vol = std::pow(part.eps, 3) * std::abs(a.t.D.determinant());
    for (int i = int(std::floor(lo[0])); i <= int(std::ceil(hi[0])); ++i)
      for (int j = int(std::floor(lo[1])); j <= int(std::ceil(hi[1])); ++j)
        for (int k = int(std::floor(lo[2])); k <= int(std::ceil(hi[2])); ++k) {
          const Vec3 origin = a.x + part.eps * (a.t.D * Vec3(i, j, k));
          if (detail::sheared_cell_fits(part, n, origin)) cells.push_back({n, Int3(i, j, k), origin, vol});
        }
  }
  return cells;
}

/// Cell of x in the unfolding lattice of its cube; false on the boundary layer Lambda.
inline bool unfolding_cell(const Partition& part, const Vec3& x, std::size_t& n, Vec3& origin) {
  if (!part.omega.contains_closed(x)) return false;
  n = part.cube_of(x);
  const Vec3 z = reference_coordinate(part, n, x);
  const Vec3 xi(std::floor(z[0]), std::floor(z[1]), std::floor(z[2]));
  const CubeAnchor& a = part.anchors[n];
  origin = a.x + part.eps * (a.t.D * xi);
  return detail::sheared_cell_fits(part, n, origin);
}

struct UnfoldedField {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<double> values;  // values[i * ny + j]
  std::vector<bool> masked;    // per x node

  double at(std::size_t i, std::size_t j) const { return values[i * ny + j]; }
};

template <class Field>
UnfoldedField unfold(const Field& u, const Partition& part, const std::vector<Vec3>& x_nodes,
                     const std::vector<Vec3>& y_nodes) {
  UnfoldedField f;
  f.nx = x_nodes.size();
  f.ny = y_nodes.size();
  f.values.assign(f.nx * f.ny, 0.0);
  f.masked.assign(f.nx, true);
  for (std::size_t i = 0; i < f.nx; ++i) {
    std::size_t n;
    Vec3 origin;
    if (!unfolding_cell(part, x_nodes[i], n, origin)) continue;
    f.masked[i] = false;
    const Mat3 D = part.eps * part.anchors[n].t.D;
    for (std::size_t j = 0; j < f.ny; ++j) f.values[i * f.ny + j] = u(origin + D * y_nodes[j]);
  }
  return f;
}

/// Boundary unfolding: g at origin + eps D_n Ktilde_n yhat for yhat on the reference cylinder.
template <class Field>
UnfoldedField boundary_unfold(const Field& g, const Partition& part, const std::vector<Vec3>& x_nodes,
                              const std::vector<Vec3>& gamma_nodes) {
  UnfoldedField f;
  f.nx = x_nodes.size();
  f.ny = gamma_nodes.size();
  f.values.assign(f.nx * f.ny, 0.0);
  f.masked.assign(f.nx, true);
  for (std::size_t i = 0; i < f.nx; ++i) {
    std::size_t n;
    Vec3 origin;
    if (!unfolding_cell(part, x_nodes[i], n, origin)) continue;
    f.masked[i] = false;
    const TransformSet& t = part.anchors[n].t;
    const Mat3 M = part.eps * t.D * t.Ktilde;
    for (std::size_t j = 0; j < f.ny; ++j) f.values[i * f.ny + j] = g(origin + M * gamma_nodes[j]);
  }
  return f;
}

/// Midpoint nodes of [0,1)^3.
inline std::vector<Vec3> cell_grid(int n) {
  std::vector<Vec3> pts;
  pts.reserve(std::size_t(n) * n * n);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) pts.emplace_back((i + 0.5) / n, (j + 0.5) / n, (k + 0.5) / n);
  return pts;
}

/// Midpoint nodes of a box.
inline std::vector<Vec3> box_grid(const Box& b, int n) {
  std::vector<Vec3> pts;
  pts.reserve(std::size_t(n) * n * n);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i)
        pts.push_back(b.lo + Vec3((i + 0.5) / n, (j + 0.5) / n, (k + 0.5) / n).cwiseProduct(b.extent()));
  return pts;
}

/// Points (t, a cos phi, a sin phi) of the reference cylinder, t in [-1/2, 1/2).
inline std::vector<Vec3> gamma_grid(double a, int n_axial, int n_angular) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n_axial; ++i)
    for (int j = 0; j < n_angular; ++j) {
      const double t = -0.5 + (i + 0.5) / n_axial, phi = 2.0 * pi * (j + 0.5) / n_angular;
      pts.emplace_back(t, a * std::cos(phi), a * std::sin(phi));
    }
  return pts;
}

/// sum over hat cells of int_Y |T(u)|^2 |det D_n| eps^3, midpoint rule with n_y^3 nodes.
template <class Field>
double unfolded_norm_sq(const Field& u, const Partition& part, const std::vector<HatCell>& cells, int n_y = 16) {
  const auto ys = cell_grid(n_y);
  const double wq = 1.0 / double(ys.size());
  return parallel_sum(cells.size(), [&](std::size_t c) {
    const HatCell& hc = cells[c];
    const Mat3 D = part.eps * part.anchors[hc.cube].t.D;
    double s = 0.0;
    for (const Vec3& y : ys) {
      const double v = u(hc.origin + D * y);
      s += v * v;
    }
    return hc.volume * wq * s;
  });
}

/// Measure of the boundary layer Lambda (complement of the hat cells in omega).
inline double masked_volume(const Partition& part, const std::vector<HatCell>& cells) {
  double v = 0.0;
  for (const auto& c : cells) v += c.volume;
  return part.omega.volume() - v;
}

// ---------------------------------------------------------------------------
// surface measure limit

struct BoundaryLimitRow {
  double eps = 0.0;
  double lhs = 0.0;
  double limit = 0.0;
  double rel_gap = 0.0;
};

struct BoundaryQuadrature {
  int n_angular = 32;    // angle midpoints on the l-p fibers
  int gauss_points = 3;  // per axial panel
  double panel = 0.25;   // axial panel length in cell units
  int n_x = 16;          // limit: x midpoint grid per axis
  int n_axial_limit = 16;
  int n_angular_limit = 32;
};

/// eps * int over all locally periodic fiber surfaces in omega of |L psi|^p.
///
/// Every fiber line of every cube array is clipped against cube and omega, so
/// fibers crossing the outer boundary contribute their part inside omega.
inline double lp_boundary_integral(const TwoScaleFunction& psi, const MicrostructureSpec& spec, const Partition& part,
                                   int p, const BoundaryQuadrature& q = {}) {
  std::vector<double> gx, gw;
  gauss_legendre01(q.gauss_points, gx, gw);
  const double eps = spec.eps;
  return parallel_sum(part.count(), [&](std::size_t n) {
    const Box box = part.clipped_cube(n);
    const CubeAnchor& an = part.anchors[n];
    const Mat3& R = an.t.R;
    const double w = an.t.w;
    const double rad = an.t.rho * spec.a;
    if (rad == 0.0) return 0.0;
    double z2lo = 1e300, z2hi = -1e300;
    for (int k = 0; k < 4; ++k) {
      const Vec3 c((k & 1) ? box.hi[0] : box.lo[0], (k & 2) ? box.hi[1] : box.lo[1], 0.0);
      const double z2 = (R.transpose() * c)[1] / eps;
      z2lo = std::min(z2lo, z2);
      z2hi = std::max(z2hi, z2);
    }
    const Vec3 dir = eps * R.col(0);  // dx/dt
    const double wgt = eps * eps * eps * rad * (2.0 * pi / q.n_angular);
    double total = 0.0;
    for (int k3 = int(std::floor(box.lo[2] / eps - rad)) - 1; k3 <= int(std::ceil(box.hi[2] / eps + rad)) + 1; ++k3) {
      const double shift = w * (k3 - an.kappa[2]);
      for (int k2 = int(std::floor(z2lo - rad - shift)) - 1; k2 <= int(std::ceil(z2hi + rad - shift)) + 1; ++k2) {
        for (int j = 0; j < q.n_angular; ++j) {
          const double phi = 2.0 * pi * (j + 0.5) / q.n_angular;
          const double z2 = k2 + shift + rad * std::cos(phi), z3 = k3 + rad * std::sin(phi);
          const Vec3 p0 = eps * (R * Vec3(0.0, z2, z3));
          if (!(p0[2] > box.lo[2] && p0[2] < box.hi[2])) continue;
          double t0 = -1e300, t1 = 1e300;
          bool empty = false;
          for (int d = 0; d < 2 && !empty; ++d) {
            if (std::abs(dir[d]) < 1e-300) {
              empty = !(p0[d] > box.lo[d] && p0[d] < box.hi[d]);
              continue;
            }
            double a = (box.lo[d] - p0[d]) / dir[d], b = (box.hi[d] - p0[d]) / dir[d];
            if (a > b) std::swap(a, b);
            t0 = std::max(t0, a);
            t1 = std::min(t1, b);
          }
          if (empty || !(t1 > t0)) continue;
          const int panels = std::max(1, int(std::ceil((t1 - t0) / q.panel)));
          const double h = (t1 - t0) / panels;
          double line = 0.0;
          for (int pi_ = 0; pi_ < panels; ++pi_)
            for (int g = 0; g < q.gauss_points; ++g) {
              const Vec3 x = p0 + (t0 + h * (pi_ + gx[g])) * dir;
              const double v = std::abs(psi(x, reference_coordinate(part, n, x)));
              line += gw[g] * h * (p == 1 ? v : v * v);
            }
          total += wgt * line;
        }
      }
    }
    return total;
  });
}

/// int_Omega |Y~_x|^{-1} int over the cell fiber surface of |psi|^p.
inline double boundary_limit_integral(const TwoScaleFunction& psi, const MicrostructureSpec& spec, int p,
                                      const BoundaryQuadrature& q = {}) {
  const auto xs = box_grid(spec.omega, q.n_x);
  const double wx = spec.omega.volume() / double(xs.size());
  return parallel_sum(xs.size(), [&](std::size_t i) {
    const Vec3& x = xs[i];
    const TransformSet t = transforms_at(spec, x);
    const double rad = t.rho * spec.a;
    double s = 0.0;
    for (int a = 0; a < q.n_axial_limit; ++a)
      for (int b = 0; b < q.n_angular_limit; ++b) {
        const double tt = (a + 0.5) / q.n_axial_limit, phi = 2.0 * pi * (b + 0.5) / q.n_angular_limit;
        const Vec3 yh = t.Ktilde * Vec3(tt, spec.a * std::cos(phi), spec.a * std::sin(phi));
        const double v = std::abs(psi(x, yh));
        s += p == 1 ? v : v * v;
      }
    const double dsigma = rad * (1.0 / q.n_axial_limit) * (2.0 * pi / q.n_angular_limit);
    return wx * s * dsigma / std::abs(t.D.determinant());
  });
}

inline std::vector<BoundaryLimitRow> boundary_measure_limit_check(const TwoScaleFunction& psi, MicrostructureSpec spec,
                                                                  const std::vector<double>& eps_list, int p,
                                                                  const BoundaryQuadrature& q = {}) {
  if (p != 1 && p != 2) throw error(errc::validation_error, "exponent p must be 1 or 2");
  const double limit = boundary_limit_integral(psi, spec, p, q);
  std::vector<BoundaryLimitRow> rows;
  for (double e : eps_list) {
    spec.eps = e;
    const Partition part = partition_cubes(spec);
    BoundaryLimitRow r;
    r.eps = e;
    r.lhs = lp_boundary_integral(psi, spec, part, p, q);
    r.limit = limit;
    r.rel_gap = limit != 0.0 ? std::abs(r.lhs - limit) / std::abs(limit) : std::abs(r.lhs);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace plyhomog
