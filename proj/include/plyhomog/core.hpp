#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace plyhomog {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Int3 = Eigen::Vector3i;

inline constexpr double pi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// errors

enum class errc {
  singular_transform,
  empty_lattice,
  not_in_domain,
  no_owning_cell,
  anchor_missing,
  non_positive_value,
  bad_exponent,
  degenerate_cell,
  no_convergence,
  asymmetry_exceeded,
  resolution_too_coarse,
  disconnected_fluid,
  negative_initial_data,
  solver_diverged,
  positivity_lost,
  cell_solve_failed,
  spd_violation_after_clamp,
  study_inconclusive,
  parse_error,
  validation_error,
  io_error,
};

inline const char* errc_name(errc e) {
  switch (e) {
    case errc::singular_transform: return "SingularTransform";
    case errc::empty_lattice: return "EmptyLattice";
    case errc::not_in_domain: return "NotInDomain";
    case errc::no_owning_cell: return "NoOwningCell";
    case errc::anchor_missing: return "AnchorMissing";
    case errc::non_positive_value: return "NonPositiveValue";
    case errc::bad_exponent: return "BadExponent";
    case errc::degenerate_cell: return "DegenerateCell";
    case errc::no_convergence: return "NoConvergence";
    case errc::asymmetry_exceeded: return "AsymmetryExceeded";
    case errc::resolution_too_coarse: return "ResolutionTooCoarse";
    case errc::disconnected_fluid: return "DisconnectedFluid";
    case errc::negative_initial_data: return "NegativeInitialData";
    case errc::solver_diverged: return "SolverDiverged";
    case errc::positivity_lost: return "PositivityLost";
    case errc::cell_solve_failed: return "CellSolveFailed";
    case errc::spd_violation_after_clamp: return "SPDViolationAfterClamp";
    case errc::study_inconclusive: return "StudyInconclusive";
    case errc::parse_error: return "ParseError";
    case errc::validation_error: return "ValidationError";
    case errc::io_error: return "IoError";
  }
  return "Unknown";
}

/// Process exit status associated with an error kind.
inline int exit_code(errc e) {
  switch (e) {
    case errc::io_error: return 4;
    case errc::no_convergence:
    case errc::asymmetry_exceeded:
    case errc::solver_diverged:
    case errc::positivity_lost:
    case errc::cell_solve_failed:
    case errc::spd_violation_after_clamp:
    case errc::study_inconclusive: return 3;
    default: return 2;
  }
}

/// %.17g: reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

// ---------------------------------------------------------------------------
// boxes

struct Box {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();

  Vec3 extent() const { return hi - lo; }
  double volume() const { return extent().prod(); }
  double shortest_edge() const { return extent().minCoeff(); }
  Vec3 center() const { return 0.5 * (lo + hi); }
  bool contains(const Vec3& x) const {
    return (x.array() > lo.array()).all() && (x.array() < hi.array()).all();
  }
  // closed membership with an absolute slack
  bool contains_closed(const Vec3& x, double slack = 0.0) const {
    return (x.array() >= lo.array() - slack).all() && (x.array() <= hi.array() + slack).all();
  }
  Box bounds() const { return *this; }
};

// ---------------------------------------------------------------------------
// counter-based random numbers
//
// Every draw is a pure function of (seed, index, stream) so Monte Carlo
// estimates do not depend on how samples are split across workers.

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct CounterRng {
  std::uint64_t seed = 0;

  std::uint64_t bits(std::uint64_t index, std::uint64_t stream = 0) const {
    return splitmix64(splitmix64(seed ^ (stream * 0xd1b54a32d192ed03ULL)) + index);
  }
  /// uniform in [0,1) with 53 random bits
  double uniform(std::uint64_t index, std::uint64_t stream = 0) const {
    return static_cast<double>(bits(index, stream) >> 11) * 0x1.0p-53;
  }
  Vec3 uniform3(std::uint64_t index, std::uint64_t stream = 0) const {
    return {uniform(3 * index, stream), uniform(3 * index + 1, stream), uniform(3 * index + 2, stream)};
  }
  CounterRng split(std::uint64_t stream) const { return {splitmix64(seed + 0x632be59bd9b4e019ULL * (stream + 1))}; }
};

// ---------------------------------------------------------------------------
// parallel loops
//
// Work is cut into blocks whose size does not depend on the worker count, and
// reductions combine block partials in block order. Results are therefore
// bitwise reproducible for any PLYHOMOG_THREADS.

inline unsigned worker_count() {
  if (const char* env = std::getenv("PLYHOMOG_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1u : hc;
}

inline constexpr std::size_t parallel_block = 4096;

template <class F>
void parallel_blocks(std::size_t n, std::size_t block, F&& f) {
  const std::size_t nblocks = (n + block - 1) / block;
  const unsigned nw = static_cast<unsigned>(std::min<std::size_t>(worker_count(), nblocks));
  if (nw <= 1) {
    for (std::size_t b = 0; b < nblocks; ++b) f(b, b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nw);
  for (unsigned w = 0; w < nw; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t b = w; b < nblocks; b += nw) f(b, b * block, std::min(n, (b + 1) * block));
    });
  }
  for (auto& t : pool) t.join();
}

template <class F>
void parallel_for(std::size_t n, F&& f) {
  parallel_blocks(n, parallel_block, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) f(i);
  });
}

/// Deterministic sum of f(i) over [0, n).
template <class F>
double parallel_sum(std::size_t n, F&& f) {
  const std::size_t nblocks = (n + parallel_block - 1) / parallel_block;
  std::vector<double> partial(nblocks, 0.0);
  parallel_blocks(n, parallel_block, [&](std::size_t blk, std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) s += f(i);
    partial[blk] = s;
  });
  double s = 0.0;
  for (double p : partial) s += p;
  return s;
}

// ---------------------------------------------------------------------------
// small numerics

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

/// Gauss-Legendre nodes/weights on [0,1].
inline void gauss_legendre01(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 1; j <= n; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j - 1.0) * z * p1 - (j - 1.0) * p2) / j;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[i] = 0.5 * (1.0 - z);
    w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
  }
}

}  // namespace plyhomog
