#pragma once

#include "core.hpp"

#include <array>
#include <string>
#include <vector>

namespace plyhomog {

// ---------------------------------------------------------------------------
// parametric laws

/// Fiber angle as a function of depth x3. Closed family with exact derivatives.
struct AngleLaw {
  enum class Kind { constant, linear, sinusoidal };
  Kind kind = Kind::constant;
  double c0 = 0.0;  // constant value / offset
  double c1 = 0.0;  // slope or sine amplitude

  static AngleLaw constant(double c) { return {Kind::constant, c, 0.0}; }
  static AngleLaw linear(double slope, double offset = 0.0) { return {Kind::linear, offset, slope}; }
  static AngleLaw sinusoidal(double c0, double c1) { return {Kind::sinusoidal, c0, c1}; }

  double operator()(double x3) const {
    switch (kind) {
      case Kind::constant: return c0;
      case Kind::linear: return c0 + c1 * x3;
      case Kind::sinusoidal: return c0 + c1 * std::sin(pi * x3);
    }
    return c0;
  }
  double derivative(double x3) const {
    switch (kind) {
      case Kind::constant: return 0.0;
      case Kind::linear: return c1;
      case Kind::sinusoidal: return c1 * pi * std::cos(pi * x3);
    }
    return 0.0;
  }
  bool is_constant() const { return kind == Kind::constant || c1 == 0.0; }
};

/// Fiber radius scaling rho(x) = rho0 + grad . x
struct RadiusLaw {
  enum class Kind { constant, affine };
  Kind kind = Kind::constant;
  double rho0 = 1.0;
  Vec3 grad = Vec3::Zero();

  static RadiusLaw constant(double r) { return {Kind::constant, r, Vec3::Zero()}; }
  static RadiusLaw affine(double r0, const Vec3& g) { return {Kind::affine, r0, g}; }

  double operator()(const Vec3& x) const { return kind == Kind::constant ? rho0 : rho0 + grad.dot(x); }
  bool is_constant() const { return kind == Kind::constant || grad.isZero(0.0); }
};

/// Smooth macroscopic factor, used for alpha1, beta1, c0 and receptor initial data.
struct MacroField {
  enum class Kind { constant, affine, cosine, bump };
  Kind kind = Kind::constant;
  double v0 = 0.0;
  double amp = 0.0;
  Vec3 vec = Vec3::Zero();      // affine gradient, cosine modes, or bump center
  double width = 1.0;           // bump width

  static MacroField constant(double v) { return {Kind::constant, v, 0.0, Vec3::Zero(), 1.0}; }
  static MacroField affine(double v, const Vec3& g) { return {Kind::affine, v, 0.0, g, 1.0}; }
  /// v + amp * prod_i cos(pi m_i x_i)
  static MacroField cosine(double v, double amp, const Vec3& modes) { return {Kind::cosine, v, amp, modes, 1.0}; }
  /// v + amp * prod_i cos^2(pi (x_i - c_i)/w) on |x_i - c_i| < w/2
  static MacroField bump(double v, double amp, const Vec3& center, double w) { return {Kind::bump, v, amp, center, w}; }

  double operator()(const Vec3& x) const {
    switch (kind) {
      case Kind::constant: return v0;
      case Kind::affine: return v0 + vec.dot(x);
      case Kind::cosine:
        return v0 + amp * std::cos(pi * vec[0] * x[0]) * std::cos(pi * vec[1] * x[1]) * std::cos(pi * vec[2] * x[2]);
      case Kind::bump: {
        double p = 1.0;
        for (int i = 0; i < 3; ++i) {
          double t = (x[i] - vec[i]) / width;
          if (std::abs(t) >= 0.5) return v0;
          double c = std::cos(pi * t);
          p *= c * c;
        }
        return v0 + amp * p;
      }
    }
    return v0;
  }
  /// Conservative bounds over a box (exact for constant and affine).
  std::pair<double, double> range(const Box& box) const {
    switch (kind) {
      case Kind::constant: return {v0, v0};
      case Kind::affine: {
        double lo = 1e300, hi = -1e300;
        for (int c = 0; c < 8; ++c) {
          Vec3 p((c & 1) ? box.hi[0] : box.lo[0], (c & 2) ? box.hi[1] : box.lo[1], (c & 4) ? box.hi[2] : box.lo[2]);
          lo = std::min(lo, (*this)(p));
          hi = std::max(hi, (*this)(p));
        }
        return {lo, hi};
      }
      case Kind::cosine: return {v0 - std::abs(amp), v0 + std::abs(amp)};
      case Kind::bump: return {v0 + std::min(amp, 0.0), v0 + std::max(amp, 0.0)};
    }
    return {v0, v0};
  }
};

/// Cell factor B(y) supported in the centered cell Y1 = (-1/2,1/2)^3.
struct CellFactor {
  enum class Kind { constant, cosine };
  Kind kind = Kind::constant;
  double amp = 1.0;

  static CellFactor constant(double v) { return {Kind::constant, v}; }
  /// amp * prod cos^2(pi y_i): C1, vanishing with its gradient on the cell boundary
  static CellFactor cosine(double v) { return {Kind::cosine, v}; }

  double operator()(const Vec3& y) const {
    if (std::abs(y[0]) > 0.5 || std::abs(y[1]) > 0.5 || std::abs(y[2]) > 0.5) return 0.0;
    if (kind == Kind::constant) return amp;
    double p = amp;
    for (int i = 0; i < 3; ++i) {
      double c = std::cos(pi * y[i]);
      p *= c * c;
    }
    return p;
  }
  double sup() const { return std::abs(amp); }
};

/// Product law f(x, y) = macro(x) * cell(y).
struct ProductLaw {
  MacroField macro = MacroField::constant(0.0);
  CellFactor cell = CellFactor::constant(1.0);

  double operator()(const Vec3& x, const Vec3& y) const {
    double m = macro(x);
    return m == 0.0 ? 0.0 : m * cell(y);
  }
  bool is_zero() const { return macro.kind == MacroField::Kind::constant && macro.v0 == 0.0; }
};

// ---------------------------------------------------------------------------
// microstructure

struct MicrostructureSpec {
  Box omega;
  AngleLaw gamma;
  RadiusLaw rho;
  double a = 0.2;
  double eps = 0.25;
  double r_exp = 0.75;

  /// Standing assumptions; throws validation_error.
  void validate() const {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw error(errc::validation_error, "eps must be positive");
    if (!(r_exp > 0.0 && r_exp < 1.0)) throw error(errc::validation_error, "r_exp must lie in (0,1)");
    if (!(a >= 0.0)) throw error(errc::validation_error, "base radius a must be nonnegative");
    if (!((omega.hi - omega.lo).array() > 0.0).all()) throw error(errc::validation_error, "omega must be a nondegenerate box");
    for (int i = 0; i <= 256; ++i) {
      double x3 = omega.lo[2] + omega.extent()[2] * i / 256.0;
      double g = gamma(x3);
      if (g < -1e-12 || g > pi + 1e-12)
        throw error(errc::validation_error, "fiber angle gamma(x3) must stay within [0, pi] on omega");
    }
    constexpr int n = 32;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          Vec3 t(i / double(n - 1), j / double(n - 1), k / double(n - 1));
          double r = rho(omega.lo + t.cwiseProduct(omega.extent()));
          if (!(r > 0.0)) throw error(errc::validation_error, "radius law rho must be positive on omega");
          if (r * a > 0.4 + 1e-12) throw error(errc::validation_error, "rho*a exceeds 2/5 on omega");
        }
  }
};

inline Mat3 rotation_matrix(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Mat3 R;
  R << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return R;
}

/// Point-local matrices of the locally periodic construction.
struct TransformSet {
  Mat3 R, W, D, K, Ktilde;
  Mat3 R_inv, W_inv, D_inv, K_inv, Ktilde_inv;
  double w = 0.0;
  double rho = 1.0;
  double gamma = 0.0;
};

inline TransformSet make_transforms(double gamma, double w, double rho) {
  if (rho * rho < 1e-12) throw error(errc::singular_transform, "|det K| below 1e-12");
  TransformSet t;
  t.gamma = gamma;
  t.w = w;
  t.rho = rho;
  t.R = rotation_matrix(gamma);
  t.R_inv = t.R.transpose();
  t.W.setIdentity();
  t.W(1, 2) = w;
  t.W_inv.setIdentity();
  t.W_inv(1, 2) = -w;
  t.D = t.R * t.W;
  t.D_inv = t.W_inv * t.R_inv;
  t.K = Vec3(1.0, rho, rho).asDiagonal();
  t.K_inv = Vec3(1.0, 1.0 / rho, 1.0 / rho).asDiagonal();
  t.Ktilde = t.W_inv * t.K;
  t.Ktilde_inv = t.K_inv * t.W;
  return t;
}

inline double shear_at(const MicrostructureSpec& spec, const Vec3& x) {
  const double g = spec.gamma(x[2]);
  return spec.gamma.derivative(x[2]) * (std::cos(g) * x[0] + std::sin(g) * x[1]);
}

inline TransformSet transforms_at(const MicrostructureSpec& spec, const Vec3& x) {
  return make_transforms(spec.gamma(x[2]), shear_at(spec, x), spec.rho(x));
}

// ---------------------------------------------------------------------------
// lattice

struct LatticeCell {
  Int3 k = Int3::Zero();
  Vec3 center = Vec3::Zero();
  bool inside = false;
};

enum class Phase { intercellular, fiber, outside };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::intercellular: return "intercellular";
    case Phase::fiber: return "fiber";
    case Phase::outside: return "outside";
  }
  return "?";
}

/// Closed-box test of the 8 corners of center + eps*R*[-1/2,1/2]^3.
template <class Region>
bool rotated_cell_inside(const Region& region, const Mat3& R, const Vec3& center, double eps) {
  const double slack = 1e-12 * eps;
  for (int c = 0; c < 8; ++c) {
    Vec3 s((c & 1) ? 0.5 : -0.5, (c & 2) ? 0.5 : -0.5, (c & 4) ? 0.5 : -0.5);
    if (!region.contains_closed(center + eps * (R * s), slack)) return false;
  }
  return true;
}

// Separating-axis test between a cell rotated about e3 and an axis-aligned box.
inline bool rotated_cell_meets_box(const Box& box, const Mat3& R, const Vec3& center, double eps) {
  const Vec3 half_box = 0.5 * box.extent();
  const Vec3 d = center - box.center();
  const Vec3 axes[5] = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ(), R.col(0), R.col(1)};
  for (const Vec3& u : axes) {
    double rc = 0.5 * eps * (std::abs(u.dot(R.col(0))) + std::abs(u.dot(R.col(1))) + std::abs(u[2]));
    double rb = half_box.cwiseProduct(u.cwiseAbs()).sum();
    if (std::abs(u.dot(d)) >= rc + rb) return false;
  }
  return true;
}

/// Lattice cells meeting the bounding box of `region`; `inside` marks cells contained in it.
template <class Region>
std::vector<LatticeCell> fiber_lattice(const MicrostructureSpec& spec, const Region& region) {
  const double eps = spec.eps;
  const Box b = region.bounds();
  std::vector<LatticeCell> out;
  bool any_inside = false;
  const int k3lo = static_cast<int>(std::floor(b.lo[2] / eps)) - 1;
  const int k3hi = static_cast<int>(std::ceil(b.hi[2] / eps)) + 1;
  for (int k3 = k3lo; k3 <= k3hi; ++k3) {
    const Mat3 R = rotation_matrix(spec.gamma(eps * k3));
    double zmin[2] = {1e300, 1e300}, zmax[2] = {-1e300, -1e300};
    for (int c = 0; c < 4; ++c) {
      Vec3 p((c & 1) ? b.hi[0] : b.lo[0], (c & 2) ? b.hi[1] : b.lo[1], 0.0);
      Vec3 z = R.transpose() * p / eps;
      for (int i = 0; i < 2; ++i) {
        zmin[i] = std::min(zmin[i], z[i]);
        zmax[i] = std::max(zmax[i], z[i]);
      }
    }
    for (int k1 = int(std::floor(zmin[0])) - 1; k1 <= int(std::ceil(zmax[0])) + 1; ++k1)
      for (int k2 = int(std::floor(zmin[1])) - 1; k2 <= int(std::ceil(zmax[1])) + 1; ++k2) {
        LatticeCell cell;
        cell.k = Int3(k1, k2, k3);
        cell.center = R * (eps * cell.k.cast<double>());
        if (!rotated_cell_meets_box(b, R, cell.center, eps)) continue;
        cell.inside = rotated_cell_inside(region, R, cell.center, eps);
        any_inside = any_inside || cell.inside;
        out.push_back(cell);
      }
  }
  if (!any_inside) throw error(errc::empty_lattice, "no lattice cell fits inside the domain");
  return out;
}

inline std::vector<LatticeCell> fiber_lattice(const MicrostructureSpec& spec) {
  if (spec.eps > spec.omega.shortest_edge())
    throw error(errc::empty_lattice, "eps exceeds the shortest edge of omega");
  return fiber_lattice(spec, spec.omega);
}

/// Unique owning cell of a point together with its local coordinate.
struct CellLocation {
  Int3 k = Int3::Zero();
  Vec3 center = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 y = Vec3::Zero();  // R^{-1}(x - center)/eps, in [-1/2,1/2)^3
  bool inside = false;
};

inline CellLocation locate_cell(const MicrostructureSpec& spec, const Vec3& x) {
  CellLocation loc;
  const double eps = spec.eps;
  const int n3 = round_half_up(x[2] / eps);
  loc.R = rotation_matrix(spec.gamma(eps * n3));
  const Vec3 z = loc.R.transpose() * x / eps;
  loc.k = Int3(round_half_up(z[0]), round_half_up(z[1]), n3);
  loc.y = Vec3(z[0] - loc.k[0], z[1] - loc.k[1], x[2] / eps - n3);
  loc.center = loc.R * (eps * loc.k.cast<double>());
  loc.inside = rotated_cell_inside(spec.omega, loc.R, loc.center, eps);
  return loc;
}

inline Phase classify_nonperiodic(const MicrostructureSpec& spec, const Vec3& x) {
  if (!spec.omega.contains(x)) return Phase::outside;
  const CellLocation loc = locate_cell(spec, x);
  if (!loc.inside) return Phase::intercellular;
  const double rad = spec.rho(loc.center) * spec.a;
  const double r2 = loc.y[1] * loc.y[1] + loc.y[2] * loc.y[2];
  return r2 <= rad * rad ? Phase::fiber : Phase::intercellular;
}

struct SurfacePoint {
  Vec3 point;
  Vec3 normal;
  double weight;
  Vec3 y;  // local cell coordinate
};

/// Midpoint rule in (axial, angle) on the lateral fiber surface of one cell.
inline std::vector<SurfacePoint> surface_points_nonperiodic(const MicrostructureSpec& spec, const LatticeCell& cell,
                                                            int n_axial, int n_angular) {
  if (!cell.inside) throw error(errc::not_in_domain, "surface points requested for a cell outside omega");
  if (n_axial < 2 || n_angular < 2) throw error(errc::validation_error, "surface rule needs at least 2x2 points");
  const Mat3 R = rotation_matrix(spec.gamma(spec.eps * cell.k[2]));
  const double rad = spec.rho(cell.center) * spec.a;
  const double wgt = spec.eps * spec.eps * rad * (1.0 / n_axial) * (2.0 * pi / n_angular);
  std::vector<SurfacePoint> pts;
  pts.reserve(std::size_t(n_axial) * n_angular);
  for (int i = 0; i < n_axial; ++i) {
    const double s = -0.5 + (i + 0.5) / n_axial;
    for (int j = 0; j < n_angular; ++j) {
      const double phi = 2.0 * pi * (j + 0.5) / n_angular;
      const Vec3 y(s, rad * std::cos(phi), rad * std::sin(phi));
      pts.push_back({cell.center + spec.eps * (R * y), R * Vec3(0.0, std::cos(phi), std::sin(phi)), wgt, y});
    }
  }
  return pts;
}

/// Rate law evaluated at a point of the fiber surfaces, attributed to its owning cell.
inline double reaction_rate_at(const MicrostructureSpec& spec, const ProductLaw& rate, const Vec3& x) {
  const CellLocation loc = locate_cell(spec, x);
  if (!loc.inside) throw error(errc::no_owning_cell, "point is not attributable to an interior lattice cell");
  return rate(x, loc.y);
}

}  // namespace plyhomog
