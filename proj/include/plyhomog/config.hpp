#pragma once

#include "kinetics.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <openssl/evp.h>
#include <set>
#include <sstream>

namespace plyhomog {

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw error(errc::io_error, "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string s(2 * len, '0');
  for (unsigned i = 0; i < len; ++i) {
    s[2 * i] = hex[md[i] >> 4];
    s[2 * i + 1] = hex[md[i] & 15];
  }
  return s;
}

struct NumericsConfig {
  double h_div = 8.0;  // micro voxel size h = eps / h_div unless h > 0
  double h = 0.0;
  double dt = 0.0;  // micro; <= 0 picks the stability rule
  double macro_dt = 0.0;
  int n_macro = 32;
  int n_cell = 64;
  int n_effective = 9;
  double cg_tol = 1e-10;
  int cg_max_iter = 5000;
  int n_axial = 8;
  int n_angular = 16;
  int snapshots = 16;
  int monitor_every = 1;
};

struct StudyConfig {
  std::vector<double> eps_list{0.25, 0.125};
  std::size_t n_samples = 1000000;
  double T = 0.1;
  std::string kind = "none";  // study the config is meant for: none, converge, scaling
};

struct IoConfig {
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  std::string cache_dir;  // empty: <output_dir>/cache
};

struct RunConfig {
  MicrostructureSpec geometry;
  KineticsSpec kinetics;
  NumericsConfig numerics;
  StudyConfig study;
  IoConfig io;

  double micro_h(double eps) const { return numerics.h > 0.0 ? numerics.h : eps / numerics.h_div; }
  std::string cache_path() const { return io.cache_dir.empty() ? io.output_dir + "/cache" : io.cache_dir; }

  /// canonical text; equal for equal configs, whatever the source layout
  std::string canonical() const;
  std::string hash() const { return sha256_hex(canonical()).substr(0, 16); }
  /// identifies the anchor lattice of cell solves
  std::string geometry_hash() const;
};

// ---------------------------------------------------------------------------
// canonical form

inline std::string vec_text(const Vec3& v) {
  return format_double(v[0]) + " " + format_double(v[1]) + " " + format_double(v[2]);
}

inline std::string law_text(const AngleLaw& g) {
  const char* k = g.kind == AngleLaw::Kind::constant ? "constant" : g.kind == AngleLaw::Kind::linear ? "linear" : "sinusoidal";
  return std::string(k) + " " + format_double(g.c0) + " " + format_double(g.c1);
}
inline std::string law_text(const RadiusLaw& r) {
  return std::string(r.kind == RadiusLaw::Kind::constant ? "constant " : "affine ") + format_double(r.rho0) + " " +
         vec_text(r.grad);
}
inline std::string law_text(const MacroField& f) {
  static const char* names[] = {"constant", "affine", "cosine", "bump"};
  return std::string(names[int(f.kind)]) + " " + format_double(f.v0) + " " + format_double(f.amp) + " " + vec_text(f.vec) +
         " " + format_double(f.width);
}
inline std::string law_text(const CellFactor& c) {
  return std::string(c.kind == CellFactor::Kind::constant ? "constant " : "cosine ") + format_double(c.amp);
}
inline std::string law_text(const ReactionLaw& f) {
  return std::string(f.kind == ReactionLaw::Kind::linear ? "linear " : "logistic ") + format_double(f.f0) + " " +
         format_double(f.lambda) + " " + format_double(f.cmax);
}
inline std::string law_text(const ProductionLaw& p) {
  return std::string(p.kind == ProductionLaw::Kind::affine ? "affine " : "saturating ") + format_double(p.p0) + " " +
         format_double(p.p1);
}

inline std::string geometry_text(const MicrostructureSpec& g) {
  std::ostringstream o;
  o << "geometry.a=" << format_double(g.a) << '\n'
    << "geometry.eps=" << format_double(g.eps) << '\n'
    << "geometry.gamma=" << law_text(g.gamma) << '\n'
    << "geometry.omega=" << vec_text(g.omega.lo) << " " << vec_text(g.omega.hi) << '\n'
    << "geometry.rho=" << law_text(g.rho) << '\n';
  return o.str();
}

inline std::string RunConfig::canonical() const {
  // keys sorted within sections, sections sorted; io paths do not change results and stay out
  std::ostringstream o;
  o << geometry_text(geometry);
  o << "io.seed=" << io.seed << '\n';
  const KineticsSpec& k = kinetics;
  o << "kinetics.A=" << format_double(k.A) << '\n'
    << "kinetics.F=" << law_text(k.F) << '\n'
    << "kinetics.alpha1=" << law_text(k.alpha1) << '\n'
    << "kinetics.beta1=" << law_text(k.beta1) << '\n'
    << "kinetics.bump=" << law_text(k.bump) << '\n'
    << "kinetics.c0=" << law_text(k.c0) << '\n'
    << "kinetics.d_b=" << format_double(k.d_b) << '\n'
    << "kinetics.d_f=" << format_double(k.d_f) << '\n'
    << "kinetics.p=" << law_text(k.p) << '\n'
    << "kinetics.rb0_1=" << law_text(k.rb0_1) << '\n'
    << "kinetics.rb0_2=" << law_text(k.rb0_2) << '\n'
    << "kinetics.rf0_1=" << law_text(k.rf0_1) << '\n'
    << "kinetics.rf0_2=" << law_text(k.rf0_2) << '\n';
  const NumericsConfig& n = numerics;
  o << "numerics.cg_max_iter=" << n.cg_max_iter << '\n'
    << "numerics.cg_tol=" << format_double(n.cg_tol) << '\n'
    << "numerics.dt=" << format_double(n.dt) << '\n'
    << "numerics.h=" << format_double(n.h) << '\n'
    << "numerics.h_div=" << format_double(n.h_div) << '\n'
    << "numerics.macro_dt=" << format_double(n.macro_dt) << '\n'
    << "numerics.monitor_every=" << n.monitor_every << '\n'
    << "numerics.n_angular=" << n.n_angular << '\n'
    << "numerics.n_axial=" << n.n_axial << '\n'
    << "numerics.n_cell=" << n.n_cell << '\n'
    << "numerics.n_effective=" << n.n_effective << '\n'
    << "numerics.n_macro=" << n.n_macro << '\n'
    << "numerics.snapshots=" << n.snapshots << '\n';
  o << "study.T=" << format_double(study.T) << '\n' << "study.eps_list=";
  for (std::size_t i = 0; i < study.eps_list.size(); ++i) o << (i ? " " : "") << format_double(study.eps_list[i]);
  o << '\n'
    << "study.kind=" << study.kind << '\n'
    << "study.n_samples=" << study.n_samples << '\n'
    << "study.r=" << format_double(geometry.r_exp) << '\n';
  return o.str();
}

inline std::string RunConfig::geometry_hash() const {
  MicrostructureSpec g = geometry;
  g.eps = 1.0;  // effective coefficients do not depend on eps
  std::ostringstream o;
  o << geometry_text(g) << "n_cell=" << numerics.n_cell << "\nn_effective=" << numerics.n_effective << '\n';
  return sha256_hex(o.str()).substr(0, 16);
}

// ---------------------------------------------------------------------------
// parsing

inline std::string mark_text(const YAML::Mark& m) {
  return "line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1);
}

[[noreturn]] inline void parse_fail(const YAML::Node& n, const std::string& what) {
  throw error(errc::parse_error, mark_text(n.Mark()) + ": " + what);
}

/// Number with the extras configs need: fractions, powers of two, multiples of pi.
inline double parse_number(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) parse_fail(n, key + " must be a number");
  std::string s = n.Scalar();
  s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }), s.end());
  auto plain = [&](const std::string& t, double& v) {
    if (t == "pi") {
      v = pi;
      return true;
    }
    const char* b = t.data();
    const char* e = b + t.size();
    if (!t.empty() && *b == '+') ++b;
    auto r = std::from_chars(b, e, v);
    return r.ec == std::errc() && r.ptr == e && std::isfinite(v);
  };
  auto term = [&](const std::string& t, double& v) {
    // a*b, a/b, a^b with plain operands; one operator at most
    for (char op : {'*', '/', '^'}) {
      const auto p = t.find(op, 1);
      if (p == std::string::npos) continue;
      double x, y;
      if (!plain(t.substr(0, p), x) || !plain(t.substr(p + 1), y)) return false;
      v = op == '*' ? x * y : op == '/' ? x / y : std::pow(x, y);
      return std::isfinite(v);
    }
    return plain(t, v);
  };
  double v = 0.0;
  if (!term(s, v)) parse_fail(n, key + ": cannot read '" + n.Scalar() + "' as a number");
  return v;
}

inline std::int64_t parse_integer(const YAML::Node& n, const std::string& key) {
  const double v = parse_number(n, key);
  if (v != std::floor(v) || std::abs(v) > 9e15) parse_fail(n, key + " must be an integer");
  return std::int64_t(v);
}

inline Vec3 parse_vec3(const YAML::Node& n, const std::string& key) {
  if (!n.IsSequence() || n.size() != 3) parse_fail(n, key + " must be a list of three numbers");
  return Vec3(parse_number(n[0], key), parse_number(n[1], key), parse_number(n[2], key));
}

inline std::string parse_string(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) parse_fail(n, key + " must be a string");
  return n.Scalar();
}

/// Map reader that rejects keys it was not asked about.
class Section {
 public:
  // absent or empty sections read as an empty map, which answers lookups with undefined nodes
  Section(const YAML::Node& n, std::string path)
      : node_(n && !n.IsNull() ? n : YAML::Node(YAML::NodeType::Map)), path_(std::move(path)) {
    if (!node_.IsMap()) parse_fail(n, path_ + " must be a mapping");
  }
  YAML::Node get(const std::string& key) {
    seen_.insert(key);
    const YAML::Node& n = node_;
    return n[key];
  }
  std::string path(const std::string& key) const { return path_ + "." + key; }
  const YAML::Node& node() const { return node_; }

  void number(const std::string& key, double& v) {
    if (auto n = get(key)) v = parse_number(n, path(key));
  }
  template <class I>
  void integer(const std::string& key, I& v) {
    if (auto n = get(key)) v = I(parse_integer(n, path(key)));
  }
  void text(const std::string& key, std::string& v) {
    if (auto n = get(key)) v = parse_string(n, path(key));
  }
  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const std::string k = it->first.as<std::string>();
      if (!seen_.count(k)) parse_fail(it->first, "unknown key " + path_ + "." + k);
    }
  }

 private:
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string law_kind(Section& s) {
  auto n = s.get("kind");
  if (!n) parse_fail(s.node(), s.path("kind") + " is required");
  return parse_string(n, s.path("kind"));
}

[[noreturn]] inline void bad_kind(Section& s, const std::string& kind, const char* allowed) {
  parse_fail(s.get("kind"), s.path("kind") + ": unknown kind '" + kind + "' (expected " + allowed + ")");
}

inline AngleLaw parse_angle(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  AngleLaw g;
  if (kind == "constant") {
    g.kind = AngleLaw::Kind::constant;
    s.number("value", g.c0);
  } else if (kind == "linear") {
    g.kind = AngleLaw::Kind::linear;
    s.number("offset", g.c0);
    s.number("slope", g.c1);
  } else if (kind == "sinusoidal") {
    g.kind = AngleLaw::Kind::sinusoidal;
    s.number("offset", g.c0);
    s.number("amplitude", g.c1);
  } else {
    bad_kind(s, kind, "constant, linear, sinusoidal");
  }
  s.finish();
  return g;
}

inline RadiusLaw parse_radius(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  RadiusLaw r;
  s.number("value", r.rho0);
  if (kind == "constant") {
    r.kind = RadiusLaw::Kind::constant;
  } else if (kind == "affine") {
    r.kind = RadiusLaw::Kind::affine;
    if (auto g = s.get("grad")) r.grad = parse_vec3(g, s.path("grad"));
  } else {
    bad_kind(s, kind, "constant, affine");
  }
  s.finish();
  return r;
}

inline MacroField parse_macro_field(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  MacroField f;
  s.number("value", f.v0);
  if (kind == "constant") {
    f.kind = MacroField::Kind::constant;
  } else if (kind == "affine") {
    f.kind = MacroField::Kind::affine;
    if (auto g = s.get("grad")) f.vec = parse_vec3(g, s.path("grad"));
  } else if (kind == "cosine") {
    f.kind = MacroField::Kind::cosine;
    s.number("amplitude", f.amp);
    if (auto g = s.get("modes")) f.vec = parse_vec3(g, s.path("modes"));
  } else if (kind == "bump") {
    f.kind = MacroField::Kind::bump;
    s.number("amplitude", f.amp);
    if (auto g = s.get("center")) f.vec = parse_vec3(g, s.path("center"));
    s.number("width", f.width);
    if (!(f.width > 0.0)) parse_fail(n, s.path("width") + " must be positive");
  } else {
    bad_kind(s, kind, "constant, affine, cosine, bump");
  }
  s.finish();
  return f;
}

inline CellFactor parse_cell_factor(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  CellFactor c;
  s.number("value", c.amp);
  if (kind == "constant")
    c.kind = CellFactor::Kind::constant;
  else if (kind == "cosine")
    c.kind = CellFactor::Kind::cosine;
  else
    bad_kind(s, kind, "constant, cosine");
  s.finish();
  return c;
}

inline ReactionLaw parse_reaction(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  ReactionLaw f;
  s.number("lambda", f.lambda);
  if (kind == "linear") {
    f.kind = ReactionLaw::Kind::linear;
    s.number("f0", f.f0);
  } else if (kind == "logistic") {
    f.kind = ReactionLaw::Kind::logistic;
    s.number("cmax", f.cmax);
  } else {
    bad_kind(s, kind, "linear, logistic");
  }
  s.finish();
  return f;
}

inline ProductionLaw parse_production(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  const std::string kind = law_kind(s);
  ProductionLaw p;
  s.number("p0", p.p0);
  if (kind == "affine") {
    p.kind = ProductionLaw::Kind::affine;
    s.number("p1", p.p1);
  } else if (kind == "saturating") {
    p.kind = ProductionLaw::Kind::saturating;
  } else {
    bad_kind(s, kind, "affine, saturating");
  }
  s.finish();
  return p;
}

/// Checks that need the whole config; throws validation_error naming the violated condition.
inline void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw error(errc::validation_error, m); };
  c.geometry.validate();
  c.kinetics.validate(c.geometry.omega);
  const NumericsConfig& n = c.numerics;
  if (!(n.h_div >= 8.0)) fail("numerics.h_div must be at least 8 (micro voxels resolve eps/8)");
  if (n.h < 0.0 || n.dt < 0.0 || n.macro_dt < 0.0) fail("numerics.h, dt and macro_dt must be nonnegative");
  if (n.n_macro < 2) fail("numerics.n_macro must be at least 2");
  if (n.n_cell < 16) fail("numerics.n_cell must be at least 16");
  if (n.n_effective < 2) fail("numerics.n_effective must be at least 2");
  if (!(n.cg_tol > 0.0 && n.cg_tol < 1e-2)) fail("numerics.cg_tol must lie in (0, 1e-2)");
  if (n.cg_max_iter < 1) fail("numerics.cg_max_iter must be positive");
  if (n.n_axial < 1 || n.n_angular < 3) fail("numerics.n_axial >= 1 and numerics.n_angular >= 3 are required");
  if (n.snapshots < 1) fail("numerics.snapshots must be at least 1");
  if (n.monitor_every < 0) fail("numerics.monitor_every must be nonnegative");
  if (c.study.eps_list.empty()) fail("study.eps_list must not be empty");
  for (double e : c.study.eps_list)
    if (!(e > 0.0 && e <= 1.0)) fail("study.eps_list entries must lie in (0, 1]");
  if (!(c.study.T > 0.0)) fail("study.T must be positive");
  if (c.study.n_samples < 10000) fail("study.n_samples must be at least 10000");
  if (c.study.kind != "none" && c.study.kind != "converge" && c.study.kind != "scaling")
    fail("study.kind must be none, converge or scaling");
  if (c.study.kind == "scaling" && !(c.geometry.r_exp > 2.0 / 3.0 && c.geometry.r_exp < 1.0))
    fail("study.r must lie in (2/3, 1) for the chi-difference scaling study");
  if (c.study.kind == "converge" && c.study.eps_list.size() < 2)
    fail("study.eps_list needs at least two entries for a convergence study");
}

inline RunConfig config_from_yaml(const YAML::Node& root) {
  RunConfig c;
  Section top(root, "config");
  {
    Section s(top.get("geometry"), "geometry");
    s.number("eps", c.geometry.eps);
    s.number("a", c.geometry.a);
    c.geometry.gamma = AngleLaw::linear(pi);
    if (auto n = s.get("gamma")) c.geometry.gamma = parse_angle(n, s.path("gamma"));
    if (auto n = s.get("rho")) c.geometry.rho = parse_radius(n, s.path("rho"));
    if (auto o = s.get("omega")) {
      Section b(o, s.path("omega"));
      if (auto lo = b.get("lo")) c.geometry.omega.lo = parse_vec3(lo, b.path("lo"));
      if (auto hi = b.get("hi")) c.geometry.omega.hi = parse_vec3(hi, b.path("hi"));
      b.finish();
    }
    s.finish();
  }
  {
    Section s(top.get("kinetics"), "kinetics");
    KineticsSpec& k = c.kinetics;
    s.number("A", k.A);
    s.number("d_f", k.d_f);
    s.number("d_b", k.d_b);
    if (auto n = s.get("F")) k.F = parse_reaction(n, s.path("F"));
    if (auto n = s.get("p")) k.p = parse_production(n, s.path("p"));
    for (auto [key, field] : {std::pair{"alpha1", &k.alpha1}, {"beta1", &k.beta1}, {"c0", &k.c0},
                              {"rf0_1", &k.rf0_1}, {"rb0_1", &k.rb0_1}})
      if (auto n = s.get(key)) *field = parse_macro_field(n, s.path(key));
    for (auto [key, field] : {std::pair{"bump", &k.bump}, {"rf0_2", &k.rf0_2}, {"rb0_2", &k.rb0_2}})
      if (auto n = s.get(key)) *field = parse_cell_factor(n, s.path(key));
    s.finish();
  }
  {
    Section s(top.get("numerics"), "numerics");
    NumericsConfig& n = c.numerics;
    s.number("h_div", n.h_div);
    s.number("h", n.h);
    s.number("dt", n.dt);
    s.number("macro_dt", n.macro_dt);
    s.integer("n_macro", n.n_macro);
    s.integer("n_cell", n.n_cell);
    s.integer("n_effective", n.n_effective);
    s.number("cg_tol", n.cg_tol);
    s.integer("cg_max_iter", n.cg_max_iter);
    s.integer("n_axial", n.n_axial);
    s.integer("n_angular", n.n_angular);
    s.integer("snapshots", n.snapshots);
    s.integer("monitor_every", n.monitor_every);
    s.finish();
  }
  {
    Section s(top.get("study"), "study");
    if (auto n = s.get("eps_list")) {
      if (!n.IsSequence()) parse_fail(n, "study.eps_list must be a list");
      c.study.eps_list.clear();
      for (const auto& e : n) c.study.eps_list.push_back(parse_number(e, "study.eps_list"));
    }
    s.number("r", c.geometry.r_exp);
    if (auto n = s.get("n_samples")) {
      const auto v = parse_integer(n, "study.n_samples");
      if (v < 0) parse_fail(n, "study.n_samples must be nonnegative");
      c.study.n_samples = std::size_t(v);
    }
    s.number("T", c.study.T);
    s.text("kind", c.study.kind);
    s.finish();
  }
  {
    Section s(top.get("io"), "io");
    s.text("output_dir", c.io.output_dir);
    if (auto n = s.get("seed")) {
      const auto v = parse_integer(n, "io.seed");
      if (v < 0) parse_fail(n, "io.seed must be nonnegative");
      c.io.seed = std::uint64_t(v);
    }
    s.text("cache_dir", c.io.cache_dir);
    s.finish();
  }
  top.finish();
  validate_config(c);
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw error(errc::parse_error, mark_text(e.mark) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) parse_fail(root, "config must be a mapping of sections");
  return config_from_yaml(root);
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error(errc::io_error, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace plyhomog
