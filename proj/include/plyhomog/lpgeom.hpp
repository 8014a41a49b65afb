#pragma once

#include "microgeom.hpp"

#include <array>
#include <vector>

namespace plyhomog {

struct CubeAnchor {
  Int3 kappa = Int3::Zero();  // lattice index of the anchor center
  Vec3 x = Vec3::Zero();      // anchor point x_n
  TransformSet t;             // matrices frozen at x_n
};

/// Cubes of side eps^r aligned with omega.lo, with one lattice anchor each.
struct Partition {
  Box omega;
  double eps = 0.0;
  double r_exp = 0.0;
  double side = 0.0;
  Int3 counts = Int3::Zero();
  std::vector<CubeAnchor> anchors;

  std::size_t count() const { return anchors.size(); }
  std::size_t index(const Int3& i) const {
    return (std::size_t(i[2]) * counts[1] + i[1]) * counts[0] + i[0];
  }
  Int3 index3(std::size_t n) const {
    return Int3(int(n % counts[0]), int((n / counts[0]) % counts[1]), int(n / (std::size_t(counts[0]) * counts[1])));
  }
  Box cube(std::size_t n) const {
    const Vec3 lo = omega.lo + side * index3(n).cast<double>();
    return {lo, lo + Vec3::Constant(side)};
  }
  Box clipped_cube(std::size_t n) const {
    Box c = cube(n);
    return {c.lo.cwiseMax(omega.lo), c.hi.cwiseMin(omega.hi)};
  }
  /// cube holding x; points on the far boundary go to the last cube
  std::size_t cube_of(const Vec3& x) const {
    Int3 i;
    for (int d = 0; d < 3; ++d) {
      int v = static_cast<int>(std::floor((x[d] - omega.lo[d]) / side));
      i[d] = std::clamp(v, 0, counts[d] - 1);
    }
    return index(i);
  }
};

inline Partition partition_cubes(const MicrostructureSpec& spec) {
  Partition p;
  p.omega = spec.omega;
  p.eps = spec.eps;
  p.r_exp = spec.r_exp;
  p.side = std::pow(spec.eps, spec.r_exp);
  // a square lattice of spacing eps, in any rotation, meets every square of side sqrt(2) eps
  if (p.side < std::sqrt(2.0) * spec.eps)
    throw error(errc::anchor_missing, "cube side eps^r is below sqrt(2) eps; cubes need not hold a lattice center");
  for (int d = 0; d < 3; ++d) p.counts[d] = static_cast<int>(std::ceil(spec.omega.extent()[d] / p.side - 1e-9));
  const std::size_t n = std::size_t(p.counts[0]) * p.counts[1] * p.counts[2];
  p.anchors.resize(n);
  const double eps = spec.eps;
  const int window = static_cast<int>(std::ceil(p.side / (2.0 * eps))) + 1;
  // nearest lattice center to the box center, strictly inside the box
  auto search = [&](const Box& box, Int3& kbest) {
    const Vec3 target = box.center();
    double best = 1e300;
    for (int k3 = int(std::floor(box.lo[2] / eps)); k3 <= int(std::ceil(box.hi[2] / eps)); ++k3) {
      const double z3 = eps * k3;
      if (!(z3 > box.lo[2] && z3 < box.hi[2])) continue;
      const Mat3 R = rotation_matrix(spec.gamma(z3));
      const Vec3 zc = R.transpose() * target / eps;
      const int k1c = round_half_up(zc[0]), k2c = round_half_up(zc[1]);
      for (int k1 = k1c - window; k1 <= k1c + window; ++k1)
        for (int k2 = k2c - window; k2 <= k2c + window; ++k2) {
          const Vec3 xk = R * (eps * Vec3(k1, k2, k3));
          if (!box.contains(xk)) continue;
          const double d = (xk - target).squaredNorm();
          if (d < best) {
            best = d;
            kbest = Int3(k1, k2, k3);
          }
        }
    }
    return best < 1e300;
  };
  for (std::size_t c = 0; c < n; ++c) {
    Int3 kbest = Int3::Zero();
    // thin boundary cubes may miss every center inside omega; fall back to the whole cube
    if (!search(p.clipped_cube(c), kbest) && !search(p.cube(c), kbest))
      throw error(errc::anchor_missing, "cube " + std::to_string(c) + " holds no lattice center");
    CubeAnchor& a = p.anchors[c];
    a.kappa = kbest;
    const Mat3 R = rotation_matrix(spec.gamma(eps * kbest[2]));
    a.x = R * (eps * kbest.cast<double>());
    a.t = transforms_at(spec, a.x);
  }
  return p;
}

/// Cell of the frozen periodic array of cube n that holds x.
struct LpCell {
  Int3 k = Int3::Zero();  // absolute index, k = kappa + xi
  Vec3 center = Vec3::Zero();
  Vec3 y = Vec3::Zero();  // R_n^{-1}(x - center)/eps
  bool inside = false;
};

inline LpCell locate_lp_cell(const MicrostructureSpec& spec, const Partition& part, std::size_t n, const Vec3& x) {
  const CubeAnchor& an = part.anchors[n];
  const Mat3& R = an.t.R;
  const double w = an.t.w;
  const double eps = spec.eps;
  // absolute rotated coordinates; the array of cube n has centers kappa + W xi there
  const Vec3 z = R.transpose() * x / eps;
  LpCell c;
  c.k[2] = round_half_up(x[2] / eps);
  const double shift = w * (c.k[2] - an.kappa[2]);
  c.k[1] = round_half_up(z[1] - shift);
  c.k[0] = round_half_up(z[0]);
  const Vec3 zc(c.k[0], c.k[1] + shift, c.k[2]);
  c.y = Vec3(z[0] - zc[0], z[1] - zc[1], x[2] / eps - zc[2]);
  c.center = R * (eps * zc);
  c.inside = rotated_cell_inside(spec.omega, R, c.center, eps);
  return c;
}

inline Phase classify_lp(const MicrostructureSpec& spec, const Partition& part, const Vec3& x) {
  if (!spec.omega.contains(x)) return Phase::outside;
  const std::size_t n = part.cube_of(x);
  const LpCell c = locate_lp_cell(spec, part, n, x);
  if (!c.inside) return Phase::intercellular;
  const double rad = part.anchors[n].t.rho * spec.a;
  return c.y[1] * c.y[1] + c.y[2] * c.y[2] <= rad * rad ? Phase::fiber : Phase::intercellular;
}

struct ChiDiffReport {
  double eps = 0.0;
  double r_exp = 0.0;
  double i1 = 0.0;
  double i2 = 0.0;
  double total = 0.0;
  double stderr_i1 = 0.0;
  double stderr_i2 = 0.0;
  double stderr_total = 0.0;
  std::size_t n_samples = 0;
};

/// Monte Carlo estimate of the squared L2 distance between the fiber indicators.
///
/// Three indicators per sample: the true one, the true lattice with the radius
/// frozen at the cube anchor, and the fully frozen array. i1 compares the first
/// two, i2 the last two, total the first and last.
inline ChiDiffReport chi_l2_difference(const MicrostructureSpec& spec, const Partition& part, std::size_t n_samples,
                                       std::uint64_t seed = 0) {
  if (n_samples < 10000) throw error(errc::validation_error, "chi_l2_difference needs at least 1e4 samples");
  constexpr int nbatch = 16;
  const CounterRng rng{seed};
  const Box& om = spec.omega;
  const double vol = om.volume();
  std::array<double, nbatch> b1{}, b2{}, bt{};
  for (int b = 0; b < nbatch; ++b) {
    const std::size_t lo = n_samples * b / nbatch, hi = n_samples * (b + 1) / nbatch;
    std::array<double, 3> acc{};
    std::vector<std::array<double, 3>> partial((hi - lo + parallel_block - 1) / parallel_block);
    parallel_blocks(hi - lo, parallel_block, [&](std::size_t blk, std::size_t s, std::size_t e) {
      std::array<double, 3> a{};
      for (std::size_t i = lo + s; i < lo + e; ++i) {
        Vec3 x = om.lo + rng.uniform3(i).cwiseProduct(om.extent());
        if (!om.contains(x)) continue;  // measure-zero rounding onto the boundary
        const std::size_t n = part.cube_of(x);
        const double rad_n = part.anchors[n].t.rho * spec.a;
        const CellLocation tl = locate_cell(spec, x);
        const double ry = tl.y[1] * tl.y[1] + tl.y[2] * tl.y[2];
        const double rad_k = spec.rho(tl.center) * spec.a;
        const bool t = tl.inside && ry <= rad_k * rad_k;
        const bool m = tl.inside && ry <= rad_n * rad_n;
        const LpCell lc = locate_lp_cell(spec, part, n, x);
        const bool l = lc.inside && lc.y[1] * lc.y[1] + lc.y[2] * lc.y[2] <= rad_n * rad_n;
        a[0] += t != m;
        a[1] += m != l;
        a[2] += t != l;
      }
      partial[blk] = a;
    });
    for (const auto& a : partial)
      for (int j = 0; j < 3; ++j) acc[j] += a[j];
    const double cnt = double(hi - lo);
    b1[b] = vol * acc[0] / cnt;
    b2[b] = vol * acc[1] / cnt;
    bt[b] = vol * acc[2] / cnt;
  }
  auto mean_se = [&](const std::array<double, nbatch>& v, double& mean, double& se) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= nbatch;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    se = std::sqrt(ss / (nbatch - 1) / nbatch);
  };
  ChiDiffReport r;
  r.eps = spec.eps;
  r.r_exp = spec.r_exp;
  r.n_samples = n_samples;
  mean_se(b1, r.i1, r.stderr_i1);
  mean_se(b2, r.i2, r.stderr_i2);
  mean_se(bt, r.total, r.stderr_total);
  return r;
}

/// Area of the intersection of two discs of radius r with centers d apart.
inline double disc_lens_area(double r, double d) {
  if (d >= 2.0 * r) return 0.0;
  return 2.0 * r * r * std::acos(d / (2.0 * r)) - 0.5 * d * std::sqrt(4.0 * r * r - d * d);
}

enum class CylinderMode { infinite, finite };

struct ShiftBound {
  double lhs = 0.0;
  double bound = 0.0;
  double constant = 8.0;
};

/// Squared L2 distance between a cylinder indicator and its translate, against C r L |tau|.
///
/// The cylinder axis is e1. In infinite mode the axial part of tau is ignored
/// (the indicator per unit length is translation invariant along the axis).
inline ShiftBound fiber_shift_bound_check(double radius, double length, const Vec3& tau,
                                          CylinderMode mode = CylinderMode::infinite) {
  if (!(radius > 0.0) || !(length > 0.0)) throw error(errc::validation_error, "radius and length must be positive");
  ShiftBound b;
  const double d = tau.tail<2>().norm();
  const double disc = pi * radius * radius;
  if (mode == CylinderMode::infinite) {
    b.lhs = length * 2.0 * (disc - disc_lens_area(radius, d));
  } else {
    const double overlap_len = std::max(length - std::abs(tau[0]), 0.0);
    b.lhs = 2.0 * (disc * length - disc_lens_area(radius, d) * overlap_len);
  }
  b.bound = b.constant * radius * length * tau.norm();
  return b;
}

struct ScalingFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;
};

/// Least squares line through (log eps, log value).
inline ScalingFit scaling_fit(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 2) throw error(errc::validation_error, "scaling_fit needs at least two points");
  const double n = double(pairs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [e, v] : pairs) {
    if (!(e > 0.0) || !(v > 0.0)) throw error(errc::non_positive_value, "log-log fit of a nonpositive value");
    const double lx = std::log(e), ly = std::log(v);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  ScalingFit f;
  f.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  f.intercept = (sy - f.slope * sx) / n;
  for (const auto& [e, v] : pairs)
    f.residual = std::max(f.residual, std::abs(f.intercept + f.slope * std::log(e) - std::log(v)));
  return f;
}

}  // namespace plyhomog
