// One line per acceptance criterion; exit status is the number of failures.

#include <plyhomog/commands.hpp>

#include <chrono>
#include <cstdio>
#include <functional>

using namespace plyhomog;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < limit_s;
  const bool ok = o.pass && in_time;
  failures += !ok;
  std::printf("C%-2d %s  %s  %s  [%.1f s, limit %.0f s%s]\n", id, ok ? "PASS" : "FAIL", name, o.detail.c_str(), secs,
              limit_s, in_time ? "" : ", over time");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char b[128];
  std::snprintf(b, sizeof b, f, a);
  return b;
}

MicrostructureSpec spec_of(AngleLaw g, double a, double eps, RadiusLaw rho = RadiusLaw::constant(1.0)) {
  MicrostructureSpec s;
  s.gamma = g;
  s.rho = rho;
  s.a = a;
  s.eps = eps;
  return s;
}

KineticsSpec full_kinetics() {
  KineticsSpec k;
  k.A = 1.0;
  k.d_f = 0.1;
  k.d_b = 0.2;
  k.F = ReactionLaw::linear(0.5, 1.0);
  k.p = ProductionLaw::saturating(0.5);
  k.alpha1 = MacroField::cosine(1.0, 0.5, Vec3(1, 0, 1));
  k.beta1 = MacroField::constant(0.5);
  k.bump = CellFactor::cosine(1.0);
  k.c0 = MacroField::cosine(1.0, 0.5, Vec3(1, 1, 1));
  k.rf0_1 = MacroField::constant(1.0);
  k.rf0_2 = CellFactor::cosine(1.0);
  k.rb0_1 = MacroField::affine(0.2, Vec3(0.3, 0, 0));
  k.rb0_2 = CellFactor::cosine(1.0);
  return k;
}

double fluid_mass(const SimState& s, const VoxelDomain& d) {
  double m = 0.0;
  for (std::size_t i = 0; i < s.c.size(); ++i)
    if (d.fluid[i]) m += s.c[i];
  return m * d.voxel_volume();
}

// smooth field with random trigonometric content
struct RandomField {
  Vec3 k[3];
  double amp[3], phase[3];
  RandomField(const CounterRng& rng, int id) {
    for (int j = 0; j < 3; ++j) {
      k[j] = Vec3(rng.uniform(100 * id + 10 * j), rng.uniform(100 * id + 10 * j + 1), rng.uniform(100 * id + 10 * j + 2)) * 6.0;
      amp[j] = 0.2 + rng.uniform(100 * id + 10 * j + 3);
      phase[j] = 2 * pi * rng.uniform(100 * id + 10 * j + 4);
    }
  }
  double operator()(const Vec3& x) const {
    double v = 1.0;
    for (int j = 0; j < 3; ++j) v += amp[j] * std::sin(k[j].dot(x) + phase[j]);
    return v;
  }
};

}  // namespace

int main() {
  const std::uint64_t seed = 20240601;

  criterion(1, "constant geometry: l-p and non-periodic classifiers agree", 10, [&] {
    std::size_t mismatches = 0;
    const std::size_t n = 1000000;
    const CounterRng rng{seed};
    // 10^6 points split over two constant layouts
    int stream = 0;
    for (const auto& s : {spec_of(AngleLaw::constant(0.7), 0.3, 1.0 / 32), spec_of(AngleLaw::constant(2.2), 0.2, 1.0 / 16, RadiusLaw::constant(1.5))}) {
      const Partition part = partition_cubes(s);
      const std::size_t m = n / 2;
      std::vector<std::size_t> counts((m + parallel_block - 1) / parallel_block, 0);
      parallel_blocks(m, parallel_block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
        std::size_t c = 0;
        for (std::size_t i = lo; i < hi; ++i) {
          const Vec3 x = rng.uniform3(i, stream);
          c += classify_lp(s, part, x) != classify_nonperiodic(s, x);
        }
        counts[b] = c;
      });
      for (auto c : counts) mismatches += c;
      ++stream;
    }
    return Outcome{mismatches == 0, "mismatches=" + std::to_string(mismatches) + " of 1000000"};
  });

  criterion(2, "chi-difference scaling, gamma = pi x3, r = 0.75", 300, [&] {
    MicrostructureSpec s = spec_of(AngleLaw::linear(pi), 0.2, 0.125);
    s.r_exp = 0.75;
    ScalingOptions o;
    o.seed = seed;
    const auto rep = scaling_study(s, {0.125, 0.0625, 0.03125, 0.015625}, 1000000, o);
    std::string d;
    for (const auto& v : rep.verdicts)
      d += v.check + "=" + (v.note == "exact-zero short circuit" ? std::string("exact 0") : fmt("%.3f", v.value)) + " (>= " +
           fmt("%.2f", v.threshold) + ") ";
    d += "i2:";
    for (std::size_t i = 0; i < rep.rows.size(); ++i) d += fmt(" %.4g", rep.at(i, "i2"));
    return Outcome{rep.passed(), d};
  });

  criterion(3, "single-fiber shift bound on a 5x5x5 grid, exact zeros", 1, [&] {
    bool ok = true;
    double worst = 0.0;
    const double rs[] = {0.05, 0.1, 0.2, 0.3, 0.4}, Ls[] = {0.5, 0.75, 1.0, 1.5, 2.0}, ts[] = {0.0, 0.1, 0.25, 0.4, 0.5};
    const Vec3 dir = Vec3(0.3, 1.0, 0.6).normalized();
    for (double r : rs)
      for (double L : Ls)
        for (double t : ts) {
          const Vec3 tau = t * r * dir;
          for (auto mode : {CylinderMode::infinite, CylinderMode::finite}) {
            const ShiftBound b = fiber_shift_bound_check(r, L, tau, mode);
            const double bound = 8.0 * r * L * tau.norm();
            ok = ok && b.lhs <= bound * (1 + 1e-12) && std::abs(b.bound - bound) <= 1e-12 * std::max(bound, 1.0);
            if (bound > 0) worst = std::max(worst, b.lhs / bound);
          }
        }
    const bool zeros = fiber_shift_bound_check(0.2, 1.0, Vec3::Zero()).lhs == 0.0 &&
                       fiber_shift_bound_check(0.2, 1.0, Vec3(0.07, 0, 0)).lhs == 0.0 &&
                       fiber_shift_bound_check(0.2, 1.0, Vec3::Zero(), CylinderMode::finite).lhs == 0.0;
    return Outcome{ok && zeros, "max lhs/bound=" + fmt("%.3f", worst) + (zeros ? " zeros exact" : " zeros NOT exact")};
  });

  criterion(4, "cell problem: no-hole, rho a = 0.25 checks, refinement order", 180, [&] {
    const Vec3 mid(0.5, 0.5, 0.5);
    std::string d;
    // (a)
    const auto e0 = effective_field_at(spec_of(AngleLaw::linear(pi), 0.0, 0.25), mid, 64, 1.7);
    const bool a_ok = (e0.tensor - 1.7 * Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-10 && std::abs(e0.theta - 1.0) <= 1e-10;
    d += std::string("(a) ") + (a_ok ? "ok" : "bad");
    // (b)
    const auto s = spec_of(AngleLaw::constant(0.0), 0.25, 0.25);
    const auto e = effective_field_at(s, mid, 64);
    const double theta_exact = 1.0 - pi / 16.0;
    Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (e.tensor + e.tensor.transpose()));
    const double a11_err = std::abs(e.tensor(0, 0) - theta_exact) / theta_exact;
    const double a23_gap = std::abs(e.tensor(1, 1) - e.tensor(2, 2)) / e.tensor(2, 2);
    const double asym = (e.tensor - e.tensor.transpose()).cwiseAbs().maxCoeff();
    const bool b_ok = a11_err <= 0.01 && a23_gap <= 0.01 && asym <= 1e-8 && es.eigenvalues().minCoeff() > 0.0 &&
                      es.eigenvalues().maxCoeff() <= e.theta * (1 + 1e-12);
    d += fmt("; (b) A11 err %.2e", a11_err) + fmt(" A22/A33 gap %.2e", a23_gap) + fmt(" asym %.1e", asym);
    // (c)
    const double a32 = effective_field_at(s, mid, 32).tensor(1, 1);
    const double a64 = e.tensor(1, 1);
    const double a128 = effective_field_at(s, mid, 128).tensor(1, 1);
    const double order = std::log2(std::abs(a64 - a32) / std::abs(a128 - a64));
    d += fmt("; (c) order %.2f", order);
    return Outcome{a_ok && b_ok && order >= 0.8, d};
  });

  criterion(5, "rotation covariance at gamma = 0.7", 120, [&] {
    const Vec3 mid(0.5, 0.5, 0.5);
    const Mat3 A0 = effective_field_at(spec_of(AngleLaw::constant(0.0), 0.25, 0.25), mid, 64).tensor;
    const Mat3 Ag = effective_field_at(spec_of(AngleLaw::constant(0.7), 0.25, 0.25), mid, 64).tensor;
    const Mat3 R = rotation_matrix(0.7);
    const double err = (Ag - R * A0 * R.transpose()).cwiseAbs().maxCoeff() / A0.cwiseAbs().maxCoeff();
    return Outcome{err <= 0.01, fmt("max entry error / max entry = %.2e", err)};
  });

  criterion(6, "unfolding isometry and boundary measure limit", 120, [&] {
    MicrostructureSpec s = spec_of(AngleLaw::linear(pi), 0.2, 1.0 / 16);
    s.r_exp = 0.5;
    const Partition part = partition_cubes(s);
    const auto cells = hat_cells(part);
    // independent: enumerate whole sheared cells per cube, Gauss quadrature in physical variables
    struct Cell {
      Vec3 origin;
      Mat3 D;
    };
    std::vector<Cell> oracle;
    for (std::size_t n = 0; n < part.count(); ++n) {
      const Box box = part.clipped_cube(n);
      const auto& an = part.anchors[n];
      const Mat3 D = s.eps * an.t.D;
      const int span = int(std::ceil(part.side / s.eps * (1 + std::abs(an.t.w)))) + 3;
      const Vec3 z0 = an.t.D_inv * (box.center() - an.x) / s.eps;
      for (int i = int(z0[0]) - span; i <= int(z0[0]) + span; ++i)
        for (int j = int(z0[1]) - span; j <= int(z0[1]) + span; ++j)
          for (int k = int(z0[2]) - span; k <= int(z0[2]) + span; ++k) {
            const Vec3 o = an.x + D * Vec3(i, j, k);
            bool fits = true;
            for (int c = 0; c < 8 && fits; ++c)
              fits = box.contains_closed(o + D * Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1), 1e-14);
            if (fits) oracle.push_back({o, D});
          }
    }
    if (oracle.size() != cells.size())
      return Outcome{false, "cell count " + std::to_string(cells.size()) + " vs " + std::to_string(oracle.size())};
    std::vector<double> gx, gw;
    gauss_legendre01(5, gx, gw);
    const CounterRng rng{seed};
    double worst = 0.0;
    for (int f = 0; f < 20; ++f) {
      const RandomField u(rng, f);
      const double lhs = unfolded_norm_sq(u, part, cells, 16);
      double rhs = 0.0;
      for (const auto& c : oracle) {
        const double jac = std::abs(c.D.determinant());
        for (int i = 0; i < 5; ++i)
          for (int j = 0; j < 5; ++j)
            for (int k = 0; k < 5; ++k) {
              const double v = u(c.origin + c.D * Vec3(gx[i], gx[j], gx[k]));
              rhs += gw[i] * gw[j] * gw[k] * jac * v * v;
            }
      }
      worst = std::max(worst, std::abs(lhs / rhs - 1.0));
    }
    const auto rows = boundary_measure_limit_check(manufactured::constant(1.0), spec_of(AngleLaw::constant(0.0), 0.2, 1.0 / 32),
                                                   {1.0 / 32}, 1);
    const double gap = std::abs(rows[0].lhs - 2 * pi * 0.2) / (2 * pi * 0.2);
    return Outcome{worst <= 1e-3 && gap <= 0.02, fmt("isometry max rel err %.2e", worst) + fmt("; boundary gap %.3f", gap)};
  });

  criterion(7, "micro solver: mass, detailed balance, nonnegativity over T = 1", 300, [&] {
    const auto s = spec_of(AngleLaw::linear(pi), 0.2, 0.25);
    const VoxelDomain d = build_voxel_domain(s, 0.25 / 8);
    // pure diffusion
    KineticsSpec k;
    k.c0 = MacroField::cosine(1.0, 0.5, Vec3(1, 1, 1));
    SimState st = init_state(d, k);
    MicroStepper step(d, k);
    double worst_mass = 0.0, m0 = fluid_mass(st, d);
    for (int i = 0; i < 50; ++i) {
      step.step(st, 1e-3);
      const double m = fluid_mass(st, d);
      worst_mass = std::max(worst_mass, std::abs(m - m0) / m0);
      m0 = m;
    }
    // detailed balance
    KineticsSpec kb;
    kb.alpha1 = MacroField::constant(1.5);
    kb.beta1 = MacroField::constant(0.5);
    kb.bump = CellFactor::constant(1.0);
    kb.c0 = MacroField::constant(0.7);
    SimState sb = init_state(d, kb);
    MicroStepper stb(d, kb);
    for (std::size_t b = 0; b < sb.rf.size(); ++b) {
      sb.rf[b] = 0.4;
      sb.rb[b] = stb.alpha()[b] * 0.7 * 0.4 / stb.beta()[b];
    }
    const SimState before = sb;
    for (int i = 0; i < 20; ++i) stb.step(sb, 1e-3);
    double drift = 0.0;
    for (std::size_t i = 0; i < sb.c.size(); ++i) drift = std::max(drift, std::abs(sb.c[i] - before.c[i]));
    for (std::size_t b = 0; b < sb.rf.size(); ++b)
      drift = std::max({drift, std::abs(sb.rf[b] - before.rf[b]), std::abs(sb.rb[b] - before.rb[b])});
    // full kinetics battery over T = 1
    const KineticsSpec kf = full_kinetics();
    MicroRunOptions o;
    o.monitor_every = 10;
    const MicroRun run = run_micro(s, kf, 0.25 / 8, 0.0, 1.0, o);
    const bool ok = worst_mass <= 1e-10 && drift <= 1e-12 && run.summary.min_c >= 0.0 && run.summary.min_r >= 0.0;
    return Outcome{ok, fmt("mass/step %.1e", worst_mass) + fmt("; balance drift %.1e", drift) +
                           fmt("; min c %.3e", run.summary.min_c) + fmt(" min r %.3e", run.summary.min_r) +
                           " steps " + std::to_string(run.steps)};
  });

  criterion(8, "barrier excess slope over eps = 1/4, 1/8", 1200, [&] {
    KineticsSpec k;
    k.d_f = 0.1;
    k.d_b = 0.1;
    k.p = ProductionLaw::saturating(0.2);
    k.alpha1 = MacroField::constant(0.1);
    k.beta1 = MacroField::constant(2.0);
    k.bump = CellFactor::cosine(1.0);
    k.c0 = MacroField::constant(1.0);
    k.rf0_1 = MacroField::constant(0.2);
    k.rf0_2 = CellFactor::cosine(1.0);
    k.rb0_1 = MacroField::constant(1.0);
    k.rb0_2 = CellFactor::cosine(1.0);
    const double T = 0.02;
    std::vector<MonitorReport> reps;
    for (double eps : {0.25, 0.125}) {
      const MicroRun r = run_micro(spec_of(AngleLaw::linear(pi), 0.2, eps), k, eps / 8, 0.0, T);
      reps.push_back(monitor_report(r, k, T));
    }
    AprioriOptions o;
    const StudyReport rep = apriori_monitor(reps, o);
    const Verdict* slope = nullptr;
    for (const auto& v : rep.verdicts)
      if (v.check == "barrier excess slope in eps") slope = &v;
    return Outcome{slope && slope->pass, fmt("excess %.3e", reps[0].summary.barrier_excess) +
                                             fmt(" -> %.3e", reps[1].summary.barrier_excess) +
                                             fmt(", slope %.2f (>= 0.8)", slope ? slope->value : 0.0)};
  });

  criterion(9, "micro vs macro error decreases from eps = 1/4 to 1/8", 3600, [&] {
    ConvergenceOptions o;
    o.n_macro = 32;
    o.assembly.n_effective = 9;
    o.assembly.n_cell = 64;
    o.seed = seed;
    const auto s = spec_of(AngleLaw::linear(pi), 0.2, 0.25);
    KineticsSpec zero;
    zero.c0 = MacroField::cosine(1.0, 0.5, Vec3(1, 1, 1));
    EffectiveCache cache("acceptance", 64);
    o.assembly.cache = &cache;
    const auto r1 = convergence_study(s, zero, {0.25, 0.125}, 0.1, o);
    const auto r2 = convergence_study(s, full_kinetics(), {0.25, 0.125}, 0.1, o);
    const std::string d = fmt("(i) %.3e", r1.at(0, "rel_l2_error")) + fmt(" -> %.3e", r1.at(1, "rel_l2_error")) +
                          fmt("; (ii) %.3e", r2.at(0, "rel_l2_error")) + fmt(" -> %.3e", r2.at(1, "rel_l2_error"));
    return Outcome{r1.passed() && r2.passed(), d};
  });

  criterion(10, "reruns give byte-identical CSVs", 600, [&] {
    const fs::path base = fs::temp_directory_path() / "plyhomog_acceptance_rerun";
    fs::remove_all(base);
    const std::string text =
        "geometry: {eps: 0.25, a: 0.2}\n"
        "kinetics:\n"
        "  d_f: 0.1\n  d_b: 0.2\n  F: {kind: linear, f0: 0.5, lambda: 1}\n  p: {kind: saturating, p0: 0.5}\n"
        "  alpha1: {kind: cosine, value: 1, amplitude: 0.5, modes: [1, 0, 1]}\n  beta1: {kind: constant, value: 0.5}\n"
        "  bump: {kind: cosine, value: 1}\n  c0: {kind: cosine, value: 1, amplitude: 0.5, modes: [1, 1, 1]}\n"
        "  rf0_1: {kind: constant, value: 1}\n  rf0_2: {kind: cosine, value: 1}\n"
        "numerics: {n_cell: 32, n_effective: 3, n_macro: 16, snapshots: 4}\n"
        "study: {eps_list: [1/4, 1/8], T: 0.01, n_samples: 100000}\n"
        "io: {seed: 11}\n";
    std::size_t compared = 0, identical = 0;
    for (const char* cmd : {"geometry", "scaling", "cell", "micro", "macro", "converge", "unfold-check"}) {
      std::string csv[2];
      for (int run = 0; run < 2; ++run) {
        RunConfig c = parse_config_text(text);
        c.io.output_dir = (base / ("run" + std::to_string(run))).string();
        const auto res = run_command(c, cmd);
        csv[run] = read_text_file(fs::path(res.dir) / (res.report.id + ".csv"));
      }
      ++compared;
      identical += csv[0] == csv[1] && !csv[0].empty();
    }
    fs::remove_all(base);
    return Outcome{identical == compared,
                   std::to_string(identical) + "/" + std::to_string(compared) + " command CSVs identical"};
  });

  std::printf("%d criteria failed\n", failures);
  return failures;
}
