#pragma once

#include "microgeom.hpp"

namespace plyhomog {

/// Bulk reaction F(c): f0 - lambda c, or lambda c (1 - c/cmax).
struct ReactionLaw {
  enum class Kind { linear, logistic };
  Kind kind = Kind::linear;
  double f0 = 0.0;
  double lambda = 0.0;
  double cmax = 1.0;

  static ReactionLaw linear(double f0, double lambda) { return {Kind::linear, f0, lambda, 1.0}; }
  static ReactionLaw logistic(double lambda, double cmax) { return {Kind::logistic, 0.0, lambda, cmax}; }
  static ReactionLaw none() { return linear(0.0, 0.0); }

  double operator()(double c) const {
    return kind == Kind::linear ? f0 - lambda * c : lambda * c * (1.0 - c / cmax);
  }
  double derivative(double c) const { return kind == Kind::linear ? -lambda : lambda * (1.0 - 2.0 * c / cmax); }
  /// sup |F'| on [0, c_hi]
  double lipschitz(double c_hi) const {
    if (kind == Kind::linear) return std::abs(lambda);
    return std::max(std::abs(derivative(0.0)), std::abs(derivative(c_hi)));
  }
  bool is_zero() const { return kind == Kind::linear ? f0 == 0.0 && lambda == 0.0 : lambda == 0.0; }
};

/// Receptor production p(r_b): p0 r_b/(1 + r_b), or p0 + p1 r_b.
struct ProductionLaw {
  enum class Kind { saturating, affine };
  Kind kind = Kind::affine;
  double p0 = 0.0;
  double p1 = 0.0;

  static ProductionLaw saturating(double p0) { return {Kind::saturating, p0, 0.0}; }
  static ProductionLaw affine(double p0, double p1) { return {Kind::affine, p0, p1}; }
  static ProductionLaw none() { return affine(0.0, 0.0); }

  double operator()(double r) const { return kind == Kind::saturating ? p0 * r / (1.0 + r) : p0 + p1 * r; }
  double lipschitz() const { return kind == Kind::saturating ? std::abs(p0) : std::abs(p1); }
  bool is_zero() const { return p0 == 0.0 && p1 == 0.0; }
};

struct KineticsSpec {
  double A = 1.0;
  double d_f = 0.0;
  double d_b = 0.0;
  ReactionLaw F = ReactionLaw::none();
  ProductionLaw p = ProductionLaw::none();
  MacroField alpha1 = MacroField::constant(0.0);
  MacroField beta1 = MacroField::constant(0.0);
  CellFactor bump = CellFactor::constant(1.0);
  MacroField c0 = MacroField::constant(1.0);
  MacroField rf0_1 = MacroField::constant(0.0);
  CellFactor rf0_2 = CellFactor::constant(1.0);
  MacroField rb0_1 = MacroField::constant(0.0);
  CellFactor rb0_2 = CellFactor::constant(1.0);

  ProductLaw alpha() const { return {alpha1, bump}; }
  ProductLaw beta() const { return {beta1, bump}; }
  ProductLaw rf0() const { return {rf0_1, rf0_2}; }
  ProductLaw rb0() const { return {rb0_1, rb0_2}; }

  /// Load-time checks of the standing kinetic assumptions on omega; throws validation_error.
  void validate(const Box& omega) const {
    auto fail = [](const std::string& m) { throw error(errc::validation_error, m); };
    if (!(A > 0.0)) fail("diffusion coefficient A must be positive");
    if (d_f < 0.0 || d_b < 0.0) fail("decay rates d_f, d_b must be nonnegative");
    if (F.kind == ReactionLaw::Kind::linear) {
      // F(x-) x- = f0 x- - lambda x-^2 <= |lambda| x-^2 needs f0 >= 0
      if (F.f0 < 0.0) fail("reaction F(c) = f0 - lambda c needs f0 >= 0 for the sign condition on c < 0");
    } else {
      if (!(F.cmax > 0.0)) fail("logistic reaction needs cmax > 0");
      if (F.lambda < 0.0) fail("logistic reaction needs lambda >= 0");
    }
    for (int i = 0; i <= 1000; ++i) {
      const double xi = 0.1 * i;
      if (p(xi) < 0.0) fail("production p must be nonnegative for nonnegative arguments");
    }
    auto nonneg_macro = [&](const MacroField& m, const char* name) {
      if (m.range(omega).first < 0.0) fail(std::string(name) + " must be nonnegative on omega");
    };
    auto nonneg_cell = [&](const CellFactor& c, const char* name) {
      if (c.amp < 0.0) fail(std::string(name) + " must be nonnegative");
    };
    nonneg_macro(alpha1, "alpha1");
    nonneg_macro(beta1, "beta1");
    nonneg_cell(bump, "bump");
    nonneg_macro(c0, "c0");
    nonneg_macro(rf0_1, "rf0_1");
    nonneg_macro(rb0_1, "rb0_1");
    nonneg_cell(rf0_2, "rf0_2");
    nonneg_cell(rb0_2, "rb0_2");
  }

  double alpha_max(const Box& omega) const { return std::max(alpha1.range(omega).second, 0.0) * bump.sup(); }
  double beta_max(const Box& omega) const { return std::max(beta1.range(omega).second, 0.0) * bump.sup(); }
  double c0_max(const Box& omega) const { return std::max(c0.range(omega).second, 0.0); }
  double receptor_initial_max(const Box& omega) const {
    return std::max(rf0_1.range(omega).second, 0.0) * rf0_2.sup() +
           std::max(rb0_1.range(omega).second, 0.0) * rb0_2.sup();
  }
};

/// Super-solution for r_f + r_b from s' = p(r_b) - d_b r_b - d_f r_f <= p(r_b), started at s0.
inline double receptor_supersolution(const KineticsSpec& k, double s0, double t) {
  if (k.p.kind == ProductionLaw::Kind::saturating) return s0 + std::max(k.p.p0, 0.0) * t;
  if (k.p.p1 <= 0.0) return s0 + std::max(k.p.p0, 0.0) * t;
  const double q = k.p.p0 / k.p.p1;
  return (s0 + q) * std::exp(k.p.p1 * t) - q;
}

/// Barrier constants M1, M2 of the uniform bound, with the generic constant taken as 1.
struct Barrier {
  double M1 = 0.0;
  double M2 = 0.0;
  double operator()(double t) const { return M1 * std::exp(M2 * t); }
};

inline Barrier barrier_constants(const KineticsSpec& k, const Box& omega, double T) {
  Barrier b;
  b.M1 = std::max(k.c0_max(omega), 1e-12);
  const double rb_bound = receptor_supersolution(k, k.receptor_initial_max(omega), T);
  b.M2 = (std::abs(k.F(0.0)) + std::abs(k.F(1.0)) + k.beta_max(omega) * rb_bound) / b.M1;
  return b;
}

/// Rate scale used for the explicit parts of a step.
inline double kinetic_lipschitz(const KineticsSpec& k, const Box& omega, double T) {
  const Barrier b = barrier_constants(k, omega, T);
  const double c_hi = b(T);
  const double r_hi = receptor_supersolution(k, k.receptor_initial_max(omega), T);
  return k.F.lipschitz(c_hi) + k.alpha_max(omega) * std::max(c_hi, r_hi) + k.beta_max(omega) + k.p.lipschitz() +
         k.d_f + k.d_b;
}

}  // namespace plyhomog
