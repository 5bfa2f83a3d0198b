#pragma once

// Declarative experiments: JSON configuration, dispatch by kind, artifacts
// and manifest. Shared by the command-line driver and the acceptance runner.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "shlab/carleman.hpp"
#include "shlab/geometry.hpp"
#include "shlab/identity_lab.hpp"
#include "shlab/inverse.hpp"
#include "shlab/io.hpp"
#include "shlab/spde.hpp"

namespace shlab {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Field access with the path of the field in every error message.

class ConfigNode {
 public:
  ConfigNode(const Json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const std::string& key) const { return j_->contains(key) && !(*j_)[key].is_null(); }
  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json& raw(const std::string& key) const {
    if (!has(key)) throw ConfigError("field '" + path(key) + "': required");
    return (*j_)[key];
  }

  double num(const std::string& key) const {
    const Json& v = raw(key);
    if (!v.is_number()) throw ConfigError("field '" + path(key) + "': expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError("field '" + path(key) + "': must be finite");
    return x;
  }
  double num(const std::string& key, double def) const { return has(key) ? num(key) : def; }

  std::uint64_t count(const std::string& key) const {
    const Json& v = raw(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError("field '" + path(key) + "': expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }
  std::uint64_t count(const std::string& key, std::uint64_t def) const { return has(key) ? count(key) : def; }

  std::string str(const std::string& key) const {
    const Json& v = raw(key);
    if (!v.is_string()) throw ConfigError("field '" + path(key) + "': expected a string");
    return v.get<std::string>();
  }
  std::string str(const std::string& key, const std::string& def) const { return has(key) ? str(key) : def; }

  bool flag(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const Json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError("field '" + path(key) + "': expected true or false");
    return v.get<bool>();
  }

  std::vector<double> nums(const std::string& key) const {
    const Json& v = raw(key);
    if (!v.is_array()) throw ConfigError("field '" + path(key) + "': expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError("field '" + path(key) + "': expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  ConfigNode sub(const std::string& key) const { return {raw(key), path(key)}; }

  void only(std::initializer_list<const char*> keys) const {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!ok.count(it.key())) throw ConfigError("field '" + path(it.key()) + "': unknown field");
  }

  const Json& json() const { return *j_; }

 private:
  std::string where() const { return path_.empty() ? "config: " : "field '" + path_ + "': "; }
  const Json* j_;
  std::string path_;
};

// ---------------------------------------------------------------------------
// Parsed configuration.

struct CoefficientConfig {
  std::optional<PrincipalForm> form;  // closed form, or
  std::vector<Sym2> table;            // tabulated b from file
  std::optional<double> s0;
  ScalarFunction b1, b3, b4;
  std::array<ScalarFunction, 2> b2{};
  ScalarFunction g1 = ScalarFunction::constant(1.0);
  ScalarFunction g2;  // spatial factor, sampled on the mesh
};

struct ExperimentConfig {
  Json raw;
  fs::path base_dir;
  std::string kind;
  std::uint64_t seed = 0;
  std::string output;
  std::vector<std::string> formats{"csv", "json"};

  Domain domain = Domain::interval(0.0, 1.0);
  std::array<std::size_t, 2> resolution{0, 0};
  CoefficientConfig coeffs;
  bool has_weight = false;
  WeightFunction d;
  CarlemanParams prm;
  bool mu0_given = false;
  std::optional<std::vector<double>> lambda_grid;
  std::size_t paths = 1;
  double T = 0.0;    // simulation horizon
  double dt = 0.0;   // 0: cfl * dx_min / sqrt(max eig b)
  double cfl = 0.5;
  Json block = Json::object();  // kind-specific section

  bool wants(const std::string& format) const {
    return std::find(formats.begin(), formats.end(), format) != formats.end();
  }
};

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k{"audit",     "forward",     "identity",         "carleman_ratio",
                                          "stability", "reconstruct", "uniqueness_probe", "counterexample"};
  return k;
}

inline ScalarFunction parse_scalar(const Json& v, const std::string& path) {
  if (v.is_number()) return ScalarFunction::constant(v.get<double>());
  ConfigNode n(v, path);
  n.only({"tag", "amp", "k", "omega"});
  ScalarFunction f{n.str("tag"), n.num("amp", 1.0), n.num("k", 1.0), n.num("omega", 1.0)};
  if (f.tag == "zero") f.amp = 0.0;
  try {
    f.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("field '" + n.path("tag") + "': " + e.what());
  }
  return f;
}

inline Point parse_point(const ConfigNode& n, const std::string& key, Point def) {
  if (!n.has(key)) return def;
  const Json& v = n.raw(key);
  if (v.is_number()) return {v.get<double>(), 0.0};
  const auto xs = n.nums(key);
  if (xs.empty() || xs.size() > 2) throw ConfigError("field '" + n.path(key) + "': expected 1 or 2 coordinates");
  return {xs[0], xs.size() > 1 ? xs[1] : 0.0};
}

inline std::vector<Sym2> read_principal_table(const fs::path& file, const std::string& field) {
  if (!fs::exists(file)) throw ConfigError("field '" + field + "': file " + file.string() + " does not exist");
  std::istringstream in(read_text(file));
  std::string line;
  std::getline(in, line);
  std::vector<Sym2> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    double b11, b12, b22;
    if (!(ls >> b11 >> b12 >> b22))
      throw ConfigError("field '" + field + "': " + file.string() + " needs columns b11,b12,b22");
    out.push_back({b11, b12, b12, b22});
  }
  return out;
}

inline std::vector<double> parse_lambda_grid(const ConfigNode& n, const std::string& key) {
  const Json& v = n.raw(key);
  std::vector<double> g;
  if (v.is_array()) {
    g = n.nums(key);
  } else {
    const auto s = n.sub(key);
    s.only({"doubling"});
    const auto dbl = s.sub("doubling");
    dbl.only({"first", "count"});
    g = doubling_grid(dbl.num("first"), dbl.count("count"));
  }
  if (g.empty()) throw ConfigError("field '" + n.path(key) + "': empty lambda grid");
  for (double l : g)
    if (!(l > 0.0)) throw ConfigError("field '" + n.path(key) + "': lambda values must be positive");
  return g;
}

inline ExperimentConfig parse_config(const Json& raw, const fs::path& base_dir = fs::current_path()) {
  ExperimentConfig c;
  c.raw = raw;
  c.base_dir = base_dir;
  const ConfigNode root(raw, "");
  std::vector<const char*> keys{"kind",   "seed",        "output", "formats", "domain", "resolution",
                                "coefficients", "weight", "lambda_grid", "paths", "T", "dt", "cfl", "description"};
  for (const auto& k : experiment_kinds()) keys.push_back(k.c_str());
  for (auto it = raw.begin(); it != raw.end(); ++it)
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) == keys.end())
      throw ConfigError("field '" + it.key() + "': unknown field");

  c.kind = root.str("kind");
  if (std::find(experiment_kinds().begin(), experiment_kinds().end(), c.kind) == experiment_kinds().end())
    throw ConfigError("field 'kind': unknown experiment kind '" + c.kind + "'");
  c.seed = root.count("seed");
  c.output = root.str("output", "");
  if (root.has("formats")) {
    const Json& f = root.raw("formats");
    if (!f.is_array()) throw ConfigError("field 'formats': expected an array");
    c.formats.clear();
    for (const auto& e : f) {
      if (!e.is_string() || (e != "csv" && e != "json"))
        throw ConfigError("field 'formats': unsupported format (use \"csv\" or \"json\")");
      c.formats.push_back(e.get<std::string>());
    }
  }

  if (root.has("domain")) {
    const auto dn = root.sub("domain");
    dn.only({"type", "lo", "hi"});
    const std::string type = dn.str("type", "interval");
    if (type == "interval") {
      c.domain = Domain::interval(dn.num("lo", 0.0), dn.num("hi", 1.0));
    } else if (type == "rectangle") {
      c.domain = Domain::rectangle(parse_point(dn, "lo", {0.0, 0.0}), parse_point(dn, "hi", {1.0, 1.0}));
    } else {
      throw ConfigError("field 'domain.type': expected \"interval\" or \"rectangle\"");
    }
  }
  if (c.kind != "identity") {
    const Json& r = root.raw("resolution");
    if (r.is_array()) {
      const auto v = root.nums("resolution");
      if (v.size() != static_cast<std::size_t>(c.domain.dim))
        throw ConfigError("field 'resolution': expected one entry per axis");
      c.resolution = {static_cast<std::size_t>(v[0]), v.size() > 1 ? static_cast<std::size_t>(v[1]) : 1};
    } else {
      const auto n = static_cast<std::size_t>(root.count("resolution"));
      c.resolution = {n, n};
    }
  }

  if (root.has("coefficients")) {
    const auto cn = root.sub("coefficients");
    cn.only({"b", "s0", "b1", "b2", "b3", "b4", "g1", "g2"});
    if (cn.has("b")) {
      const auto bn = cn.sub("b");
      if (bn.has("file")) {
        bn.only({"file"});
        fs::path file = bn.str("file");
        if (file.is_relative()) file = base_dir / file;
        c.coeffs.table = read_principal_table(file, bn.path("file"));
      } else {
        bn.only({"tag", "b11", "b12", "b22", "base", "amp", "k"});
        PrincipalForm f;
        f.tag = bn.str("tag", "constant");
        f.b11 = bn.num("b11", 1.0);
        f.b12 = bn.num("b12", 0.0);
        f.b22 = bn.num("b22", 1.0);
        f.base = bn.num("base", 1.0);
        f.amp = bn.num("amp", 0.0);
        f.k = bn.num("k", 1.0);
        try {
          f.validate();
        } catch (const ConfigError& e) {
          throw ConfigError("field '" + bn.path("tag") + "': " + e.what());
        }
        c.coeffs.form = f;
      }
    }
    if (cn.has("s0")) c.coeffs.s0 = cn.num("s0");
    for (auto [key, dst] : {std::pair{"b1", &c.coeffs.b1}, {"b3", &c.coeffs.b3}, {"b4", &c.coeffs.b4},
                            {"g1", &c.coeffs.g1}, {"g2", &c.coeffs.g2}})
      if (cn.has(key)) *dst = parse_scalar(cn.raw(key), cn.path(key));
    if (cn.has("b2")) {
      const Json& v = cn.raw("b2");
      if (!v.is_array() || v.empty() || v.size() > 2) throw ConfigError("field 'coefficients.b2': expected 1 or 2 entries");
      for (std::size_t i = 0; i < v.size(); ++i) c.coeffs.b2[i] = parse_scalar(v[i], "coefficients.b2[" + std::to_string(i) + "]");
    }
    if (c.coeffs.g1.tag == "sine" || c.coeffs.g1.tag == "sine_cos_t")
      throw ConfigError("field 'coefficients.g1': g1 must depend on time only");
  }
  if (!c.coeffs.form && c.coeffs.table.empty()) c.coeffs.form = PrincipalForm::identity();

  if (root.has("weight")) {
    c.has_weight = true;
    const auto wn = root.sub("weight");
    wn.only({"d", "c0", "c1", "T", "mu0", "lambda"});
    const auto dn = wn.sub("d");
    dn.only({"tag", "a", "x0", "offset"});
    c.d.tag = dn.str("tag", "shifted_quadratic");
    c.d.a = dn.num("a", 1.0);
    c.d.x0 = parse_point(dn, "x0", {0.0, 0.0});
    c.d.offset = dn.num("offset", 0.0);
    try {
      c.d.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("field 'weight.d.tag': " + std::string(e.what()));
    }
    c.prm.c0 = wn.num("c0");
    c.prm.c1 = wn.num("c1");
    c.prm.T = wn.num("T");
    c.mu0_given = wn.has("mu0");
    c.prm.mu0 = wn.num("mu0", 32.0);
    c.prm.lambda = wn.num("lambda", 1.0);
  }
  const bool needs_weight = c.kind != "forward" && c.kind != "counterexample";
  if (needs_weight && !c.has_weight) throw ConfigError("field 'weight': required for kind '" + c.kind + "'");

  if (root.has("lambda_grid")) c.lambda_grid = parse_lambda_grid(root, "lambda_grid");
  c.paths = static_cast<std::size_t>(root.count("paths", 1));
  if (c.paths == 0) throw ConfigError("field 'paths': must be positive");
  c.T = root.has("T") ? root.num("T") : (c.has_weight ? c.prm.T : 0.0);
  const bool simulates = c.kind == "forward" || c.kind == "reconstruct" || c.kind == "uniqueness_probe" ||
                         c.kind == "counterexample";
  if (simulates && !(c.T > 0.0)) throw ConfigError("field 'T': required positive horizon");
  c.dt = root.num("dt", 0.0);
  c.cfl = root.num("cfl", 0.5);
  if (c.dt < 0.0) throw ConfigError("field 'dt': must be positive");
  if (!(c.cfl > 0.0 && c.cfl <= 0.5)) throw ConfigError("field 'cfl': must lie in (0, 0.5]");

  if (root.has(c.kind)) {
    c.block = root.raw(c.kind);
    ConfigNode(c.block, c.kind);
  }
  for (const auto& k : experiment_kinds())
    if (k != c.kind && root.has(k)) throw ConfigError("field '" + k + "': section does not match kind '" + c.kind + "'");
  return c;
}

// ---------------------------------------------------------------------------
// Shared setup.

struct Setup {
  SpatialMesh mesh;
  CoefficientSet coeffs;
  double dt = 0.0;

  explicit Setup(const ExperimentConfig& c) : mesh(build_mesh(c.domain, c.resolution)) {
    const auto& cc = c.coeffs;
    if (cc.form) {
      coeffs.b = PrincipalField::from_form(*cc.form, mesh, 1.0);
    } else {
      if (cc.table.size() != mesh.size())
        throw ConfigError("field 'coefficients.b.file': " + std::to_string(cc.table.size()) + " rows for " +
                          std::to_string(mesh.size()) + " mesh nodes");
      coeffs.b = PrincipalField::tabulated(cc.table, 1.0);
    }
    const auto ell = check_ellipticity(coeffs.b, mesh);
    coeffs.b.s0 = cc.s0.value_or(ell.min_eigenvalue);
    if (!(coeffs.b.s0 > 0.0) || !ell.pass)
      throw InvalidFieldError("principal coefficients are not uniformly elliptic (min eigenvalue " +
                              fmt(ell.min_eigenvalue) + ")");
    coeffs.b1 = cc.b1;
    coeffs.b2 = cc.b2;
    coeffs.b3 = cc.b3;
    coeffs.b4 = cc.b4;
    Field g2 = sample(cc.g2);
    if (!cc.g2.is_zero()) coeffs.g = ForceSpec::separable(cc.g1, g2);
    coeffs.validate(mesh);
    if (c.dt > 0.0) {
      dt = c.dt;
    } else {
      double emax = 0.0;
      for (const auto& v : coeffs.b.values) emax = std::max(emax, v.max_eigenvalue(mesh.dim()));
      dt = c.cfl * mesh.min_spacing() / std::sqrt(emax);
    }
  }

  Field sample(const ScalarFunction& f) const {
    return zero_on_boundary(mesh, mesh.sample([&](const Point& x) { return f(0.0, x, mesh.dim()); }));
  }
};

inline Csv gamma0_csv(const SpatialMesh& mesh, const BoundarySubset& g) {
  Csv c;
  c.header = {"node_index", "x"};
  if (mesh.dim() == 2) c.header.push_back("y");
  c.header.push_back("sigma");
  c.header.push_back("in_gamma0");
  for (std::size_t p = 0; p < mesh.boundary().size(); ++p) {
    const auto node = mesh.boundary()[p].node;
    const Point x = mesh.coord(node);
    std::vector<std::string> row{fmt(node), fmt(x[0])};
    if (mesh.dim() == 2) row.push_back(fmt(x[1]));
    row.push_back(fmt(g.sigma[p]));
    row.push_back(g.member[p] ? "1" : "0");
    c.add(row);
  }
  return c;
}

/// Output sink: collects artifact names and honours the requested formats.
class Artifacts {
 public:
  Artifacts(const ExperimentConfig& c, fs::path dir) : cfg_(&c), dir_(std::move(dir)) {}

  void json(const std::string& name, const Json& j) {
    if (!cfg_->wants("json")) return;
    write_json(dir_ / name, j);
    names_.push_back(name);
  }
  void csv(const std::string& name, const Csv& c) {
    if (!cfg_->wants("csv")) return;
    write_csv(dir_ / name, c);
    names_.push_back(name);
  }
  void binary(const std::string& name, const TrajectoryBlock& b) {
    write_trajectories(dir_ / name, b);
    names_.push_back(name);
  }
  void observation(const std::string& stem, const ObservationRecord& r) {
    write_observation(dir_ / stem, r);
    for (const char* ext : {".trace.bin", ".terminal.bin", ".json"}) names_.push_back(stem + ext);
  }
  const fs::path& dir() const { return dir_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  const ExperimentConfig* cfg_;
  fs::path dir_;
  std::vector<std::string> names_;
};

struct RunOutcome {
  Json summary = Json::object();
};

// ---------------------------------------------------------------------------
// Kinds.

inline Json audit_json(const ConditionDReport& cd, const ConditionParamsReport& cp, const AuditReport& au) {
  Json j;
  j["condition_d"] = {{"mu0_max", jnum(cd.mu0_max)}, {"min_grad_d", jnum(cd.min_grad_d)}, {"pass", cd.pass}};
  j["condition_params"] = {{"part1_margin", jnum(cp.part1_margin)},
                           {"part2_lower_margin", jnum(cp.part2_lower_margin)},
                           {"part2_upper_margin", jnum(cp.part2_upper_margin)},
                           {"pass", cp.pass}};
  j["audit"] = {{"psi_residual_max", jnum(au.psi_residual_max)},
                {"cross_term_max", jnum(au.cross_term_max)},
                {"lambda0", au.lambda0 ? Json(*au.lambda0) : Json(nullptr)},
                {"lambda1", au.lambda1 ? Json(*au.lambda1) : Json(nullptr)}};
  j["details"] = {{"q_inf", jnum(cp.q_inf)},
                  {"q_sup", jnum(cp.q_sup)},
                  {"part2_upper_bound", jnum(cp.upper_bound)},
                  {"part2_middle", jnum(cp.middle)},
                  {"min_d", jnum(cd.min_d)},
                  {"d2_pass", cd.d2_pass},
                  {"b_margin_constant", jnum(au.b_margin_constant)},
                  {"worst_t0", {{"lambda", au.worst_t0.lambda}, {"t", au.worst_t0.t}, {"node", au.worst_t0.node},
                                {"value", jnum(au.worst_t0.value)}}}};
  const auto lt = audit_threshold(au);
  j["lambda_tilde"] = lt ? Json(*lt) : Json(nullptr);
  return j;
}

struct AuditRun {
  ConditionDReport cd;
  ConditionParamsReport cp;
  AuditReport au;
  BoundarySubset gamma0;
  CarlemanParams prm;
};

inline AuditRun run_audit_core(const ExperimentConfig& c, const Setup& s, const std::vector<double>& grid,
                               std::size_t time_samples) {
  AuditRun r;
  r.cd = verify_condition_d(c.d, s.coeffs.b, s.mesh);
  r.prm = c.prm;
  if (!c.mu0_given) r.prm.mu0 = r.cd.mu0_max;
  r.cp = verify_condition_params(r.prm, c.d, s.coeffs.b, s.mesh);
  r.au = audit_proof_coefficients(r.prm, c.d, s.coeffs.b, s.mesh, grid, time_samples);
  r.gamma0 = extract_gamma0(s.mesh, s.coeffs.b, c.d);
  return r;
}

inline RunOutcome run_audit(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"time_samples"});
  const Setup s(c);
  const auto grid = c.lambda_grid.value_or(doubling_grid(1.0, 11));
  const auto r = run_audit_core(c, s, grid, b.count("time_samples", 17));
  Json j = audit_json(r.cd, r.cp, r.au);
  j["mu0"] = r.prm.mu0;
  j["gamma0_size"] = r.gamma0.count();
  out.json("audit.json", j);
  out.csv("gamma0.csv", gamma0_csv(s.mesh, r.gamma0));
  return {{{"condition_d_pass", r.cd.pass}, {"condition_params_pass", r.cp.pass}, {"lambda_tilde", j["lambda_tilde"]}}};
}

inline RunOutcome run_forward(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"z0", "z1", "dump_trajectories"});
  const Setup s(c);
  const auto z0f = b.has("z0") ? parse_scalar(b.raw("z0"), b.path("z0")) : ScalarFunction::sine(1.0);
  const auto z1f = b.has("z1") ? parse_scalar(b.raw("z1"), b.path("z1")) : ScalarFunction::zero();
  const bool dump = b.flag("dump_trajectories", false);
  SimulationOptions opt{c.T, s.dt, c.paths, c.seed, dump};
  const auto ens = simulate_forward(s.coeffs, s.sample(z0f), s.sample(z1f), s.mesh, opt);
  const auto tr = boundary_normal_trace(ens, full_boundary(s.mesh));
  const SpatialOperators ops(s.mesh, s.coeffs.b);

  Csv csv;
  csv.header = {"path", "terminal_l2", "terminal_velocity_l2", "trace_l2", "terminal_energy", "noise_sum"};
  double mean_end = 0.0, mean_energy = 0.0;
  for (std::size_t p = 0; p < ens.P; ++p) {
    const double e = l2_norm(s.mesh, ens.zT[p]);
    const double en = discrete_energy(ops, s.mesh, ens.zT[p], ens.ztT[p]);
    double bsum = 0.0;
    for (double v : ens.dB[p]) bsum += v;
    mean_end += e;
    mean_energy += en;
    csv.add({fmt(p), fmt(e), fmt(l2_norm(s.mesh, ens.ztT[p])), fmt(std::sqrt(tr.path_sq[p])), fmt(en), fmt(bsum)});
  }
  const double P = static_cast<double>(ens.P);
  const double den = data_norm(s.mesh, ens.z0, ens.z1) + force_norm(s.coeffs, s.mesh, ens.T, ens.K);
  Json j{{"P", ens.P},
         {"K", ens.K},
         {"N", ens.N},
         {"T", ens.T},
         {"dt", ens.dt},
         {"mean_terminal_l2", jnum(mean_end / P)},
         {"mean_terminal_energy", jnum(mean_energy / P)},
         {"trace_norm", jnum(tr.norm)},
         {"data_norm", jnum(data_norm(s.mesh, ens.z0, ens.z1))},
         {"force_norm", jnum(force_norm(s.coeffs, s.mesh, ens.T, ens.K))},
         {"hidden_regularity_ratio", den > 0.0 ? jnum(tr.norm / den) : Json(nullptr)}};
  out.csv("ensemble.csv", csv);
  out.json("ensemble.json", j);
  if (dump) out.binary("trajectories.bin", ensemble_block(ens));
  for (std::size_t p = 0; p < ens.P; ++p)
    for (double v : ens.zT[p])
      if (!std::isfinite(v)) throw NumericalError("non-finite terminal state on path " + std::to_string(p));
  return {{{"trace_norm", j["trace_norm"]}, {"mean_terminal_l2", j["mean_terminal_l2"]}}};
}

inline RunOutcome run_identity(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"mode", "profile", "base_nodes", "base_steps", "levels", "refine_space", "h0", "h1_0", "drift",
          "diffusion"});
  if (!c.coeffs.form) throw ConfigError("field 'coefficients.b': identity needs a closed-form principal field");
  IdentityLadderSpec sp;
  sp.prm = c.prm;
  sp.d = c.d;
  sp.form = *c.coeffs.form;
  sp.domain = c.domain;
  if (b.has("profile")) {
    const auto pn = b.sub("profile");
    pn.only({"amp", "k"});
    sp.phi = {pn.num("amp", 1.0), pn.num("k", 1.0)};
  }
  sp.base_nodes = static_cast<std::size_t>(b.count("base_nodes", 9));
  sp.base_steps = static_cast<std::size_t>(b.count("base_steps", 8));
  sp.levels = static_cast<std::size_t>(b.count("levels", 4));
  sp.refine_space = b.flag("refine_space", true);
  if (sp.levels < 2) throw ConfigError("field 'identity.levels': need at least 2 levels");
  const std::string mode = b.str("mode", "deterministic");
  const double T = c.prm.T;
  IdentityReport rep;
  if (mode == "deterministic") {
    // h = t^2 (T - t)
    rep = verify_pointwise_identity(
        sp, [T](double t) { return t * t * (T - t); }, [T](double t) { return 2 * T * t - 3 * t * t; },
        [T](double t) { return 2 * T - 6 * t; });
  } else if (mode == "stochastic") {
    const auto drift = b.has("drift") ? parse_scalar(b.raw("drift"), b.path("drift")) : ScalarFunction::zero();
    const auto diff = b.has("diffusion") ? parse_scalar(b.raw("diffusion"), b.path("diffusion"))
                                         : ScalarFunction::constant(1.0);
    for (const auto* f : {&drift, &diff})
      if (f->tag == "sine" || f->tag == "sine_cos_t")
        throw ConfigError("field 'identity': drift and diffusion must depend on time only");
    rep = verify_pointwise_identity(
        sp, b.num("h0", 0.0), b.num("h1_0", 0.0), [drift](double t) { return drift(t, Point{}, 1); },
        [diff](double t) { return diff(t, Point{}, 1); }, c.paths, c.seed);
  } else {
    throw ConfigError("field 'identity.mode': expected \"deterministic\" or \"stochastic\"");
  }
  Csv csv;
  csv.header = {"refinement_level", "dt", "dx", "residual", "normalized_residual"};
  Json levels = Json::array();
  for (const auto& l : rep.levels) {
    csv.add({fmt(l.level), fmt(l.dt), fmt(l.dx), fmt(l.residual), fmt(l.normalized_residual)});
    levels.push_back({{"level", l.level},
                      {"dt", l.dt},
                      {"dx", l.dx},
                      {"residual", jnum(l.residual)},
                      {"normalized_residual", jnum(l.normalized_residual)},
                      {"path_rms", jnum(l.path_rms)},
                      {"empirical_residual", jnum(l.empirical_residual)},
                      {"mean_lhs", jnum(l.mean_lhs)},
                      {"mean_rhs", jnum(l.mean_rhs)},
                      {"paths", l.paths}});
  }
  out.csv("identity.csv", csv);
  out.json("identity.json", {{"mode", mode}, {"observed_order", jnum(rep.observed_order)}, {"levels", levels}});
  return {{{"observed_order", jnum(rep.observed_order)}}};
}

/// Random smooth terminal velocities and their reversed solutions (z(T) = 0).
inline std::vector<DeterministicTrajectory> reversed_samples(const Setup& s, double T, std::uint64_t seed,
                                                             std::size_t samples, std::size_t modes) {
  std::vector<DeterministicTrajectory> trs(samples);
  parallel_for(samples, [&](std::size_t i) {
    trs[i] = solve_deterministic_reversed(s.coeffs, random_smooth_field(s.mesh, seed, i, modes), s.mesh, T, s.dt);
  });
  return trs;
}

inline Csv ratio_csv(const RatioStudy& st) {
  Csv csv;
  csv.header = {"lambda", "lhs_init", "lhs_force", "rhs_boundary", "ratio", "stderr", "samples"};
  for (const auto& r : st.rows)
    csv.add({fmt(r.lambda), fmt(r.lhs_init), fmt(r.lhs_force), fmt(r.rhs_boundary), fmt(r.ratio), fmt(r.stderr_ratio),
             fmt(r.samples)});
  return csv;
}

inline Json ratio_json(const RatioStudy& st) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < st.rows.size(); ++i) {
    const auto& r = st.rows[i];
    rows.push_back({{"lambda", r.lambda},
                    {"log_lhs_init", jnum(r.log_lhs_init)},
                    {"log_lhs_force", jnum(r.log_lhs_force)},
                    {"log_rhs_boundary", jnum(r.log_rhs_boundary)},
                    {"log_ratio", jnum(r.log_ratio)},
                    {"log_ratio_per_lambda", jnum(st.log_ratio_per_lambda[i])},
                    {"log_z0_term", jnum(r.log_z0_term)},
                    {"stderr", jnum(r.stderr_ratio)},
                    {"samples", r.samples},
                    {"trivial", r.trivial},
                    {"violations", r.violations}});
  }
  return {{"rows", rows},
          {"max_ratio_spread", jnum(st.max_ratio_spread)},
          {"log_max_ratio_spread", jnum(st.log_max_ratio_spread)},
          {"z0_slope", jnum(st.z0_slope)}};
}

inline RunOutcome run_carleman_ratio(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"samples", "modes", "multiples", "audit_grid", "time_samples"});
  const Setup s(c);
  const auto samples = static_cast<std::size_t>(b.count("samples", 50));
  const auto modes = static_cast<std::size_t>(b.count("modes", 8));
  const auto gamma0 = extract_gamma0(s.mesh, s.coeffs.b, c.d);
  if (gamma0.empty()) throw DataError("Gamma0 is empty for this weight and domain");
  Json head = Json::object();
  std::vector<double> lambdas;
  if (c.lambda_grid) {
    lambdas = *c.lambda_grid;
  } else {
    // multiples of lambda-tilde from an audit on the same configuration
    const auto grid = b.has("audit_grid") ? parse_lambda_grid(b, "audit_grid") : doubling_grid(1.0, 8);
    const auto a = run_audit_core(c, s, grid, b.count("time_samples", 17));
    const auto lt = audit_threshold(a.au);
    if (!lt) throw NumericalError("audit found no lambda threshold on the audit grid");
    head["lambda_tilde"] = *lt;
    const auto mult = b.has("multiples") ? b.nums("multiples") : std::vector<double>{1.0, 2.0, 4.0};
    for (double m : mult) lambdas.push_back(m * *lt);
  }
  const auto trs = reversed_samples(s, c.prm.T, c.seed, samples, modes);
  const auto st = carleman_ratio(trs, c.prm, c.d, s.mesh, gamma0, lambdas);
  Json j = head;
  const Json body = ratio_json(st);
  for (auto it = body.begin(); it != body.end(); ++it) j[it.key()] = it.value();
  out.csv("ratio.csv", ratio_csv(st));
  out.json("ratio.json", j);
  out.csv("gamma0.csv", gamma0_csv(s.mesh, gamma0));
  std::size_t violations = 0;
  for (const auto& r : st.rows) violations += r.violations;
  if (violations) throw InvariantViolation(std::to_string(violations) + " samples with zero boundary term and positive left side");
  return {{{"max_ratio_spread", jnum(st.max_ratio_spread)}, {"z0_slope", jnum(st.z0_slope)}}};
}

inline RunOutcome run_stability(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"samples", "modes", "source", "tol", "z0", "z1"});
  const Setup s(c);
  const auto gamma0 = extract_gamma0(s.mesh, s.coeffs.b, c.d);
  if (gamma0.empty()) throw DataError("Gamma0 is empty for this weight and domain");
  const std::string source = b.str("source", "reversed");
  StabilityStudy st;
  if (source == "reversed") {
    const auto trs = reversed_samples(s, c.prm.T, c.seed, static_cast<std::size_t>(b.count("samples", 100)),
                                      static_cast<std::size_t>(b.count("modes", 8)));
    st = stability_ratio(trs, c.prm, c.d, s.mesh, gamma0);
  } else if (source == "forward") {
    const auto z0f = b.has("z0") ? parse_scalar(b.raw("z0"), b.path("z0")) : ScalarFunction::sine(1.0);
    const auto z1f = b.has("z1") ? parse_scalar(b.raw("z1"), b.path("z1")) : ScalarFunction::zero();
    SimulationOptions opt{c.prm.T, s.dt, c.paths, c.seed, true};
    const auto ens = simulate_forward(s.coeffs, s.sample(z0f), s.sample(z1f), s.mesh, opt);
    st = stability_ratio(ens, s.coeffs, c.prm, c.d, gamma0, b.num("tol", 1e-3));
  } else {
    throw ConfigError("field 'stability.source': expected \"reversed\" or \"forward\"");
  }
  Csv csv;
  csv.header = {"sample", "numerator", "denominator", "s", "admissible"};
  for (const auto& r : st.rows)
    csv.add({fmt(r.sample), fmt(r.numerator), fmt(r.denominator), fmt(r.s), r.admissible ? "1" : "0"});
  out.csv("stability.csv", csv);
  out.json("stability.json", {{"lambda", c.prm.lambda},
                              {"source", source},
                              {"samples", st.rows.size()},
                              {"admissible", st.admissible},
                              {"max_s", jnum(st.max_s)},
                              {"min_s", jnum(st.min_s)},
                              {"spread", jnum(st.spread)}});
  return {{{"spread", jnum(st.spread)}}};
}

struct InverseSetup {
  Setup s;
  BoundarySubset gamma0;
  explicit InverseSetup(const ExperimentConfig& c) : s(c) {
    gamma0 = extract_gamma0(s.mesh, s.coeffs.b, c.d);
    if (gamma0.empty()) throw DataError("Gamma0 is empty for this weight and domain");
  }
};

inline ReconstructionOptions parse_solver(const ConfigNode& b, double tol) {
  ReconstructionOptions o;
  o.epsilon = b.num("epsilon", 1e-6);
  o.tol = b.num("tol", tol);
  o.max_iter = static_cast<std::size_t>(b.count("max_iter", 2000));
  o.precondition = b.flag("precondition", true);
  if (!(o.epsilon > 0.0)) throw ConfigError("field '" + b.path("epsilon") + "': must be positive");
  return o;
}

inline Json result_json(const ReconstructionResult& r) {
  Json j{{"epsilon", r.epsilon},
         {"misfit", jnum(r.misfit)},
         {"regularization", jnum(r.regularization)},
         {"initial_residual", jnum(r.initial_residual)},
         {"normal_residual", jnum(r.normal_residual)},
         {"iterations", r.iterations},
         {"converged", r.converged}};
  if (r.relative_errors)
    j["relative_errors"] = {{"z0", jnum((*r.relative_errors)[0])},
                            {"z1", jnum((*r.relative_errors)[1])},
                            {"force", jnum((*r.relative_errors)[2])}};
  return j;
}

inline RunOutcome run_reconstruct(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"truth", "epsilon", "tol", "max_iter", "precondition", "mode", "blind", "fit_seed", "noise",
          "adjoint_pairs", "dump_observation"});
  const InverseSetup is(c);
  const auto& s = is.s;
  const std::string mode_s = b.str("mode", "separable");
  if (mode_s != "separable" && mode_s != "tabulated")
    throw ConfigError("field 'reconstruct.mode': expected \"separable\" or \"tabulated\"");
  const ForceMode mode = mode_s == "separable" ? ForceMode::separable : ForceMode::tabulated;
  const bool blind = b.flag("blind", false);
  const auto opt = parse_solver(b, 1e-8);

  ScalarFunction tz0 = ScalarFunction::sine(1.0), tz1 = ScalarFunction::zero(), tg2 = ScalarFunction::sine(1.0, 2.0);
  if (b.has("truth")) {
    const auto tn = b.sub("truth");
    tn.only({"z0", "z1", "g2"});
    if (tn.has("z0")) tz0 = parse_scalar(tn.raw("z0"), tn.path("z0"));
    if (tn.has("z1")) tz1 = parse_scalar(tn.raw("z1"), tn.path("z1"));
    if (tn.has("g2")) tg2 = parse_scalar(tn.raw("g2"), tn.path("g2"));
  }
  Unknowns truth{s.sample(tz0), s.sample(tz1), s.sample(tg2), {}};
  if (mode == ForceMode::tabulated) {
    // g(t, x) = g1(t) g2(x) on the time grid
    const std::size_t K = time_levels_for(c.T, s.dt);
    const double h = c.T / static_cast<double>(K);
    for (std::size_t k = 0; k <= K; ++k) {
      Field lv = truth.g2;
      const double a = c.coeffs.g1(static_cast<double>(k) * h, Point{}, 1);
      for (auto& v : lv) v *= a;
      truth.g_table.push_back(lv);
    }
    truth.g2.clear();
  }

  const ObservationOperator gen(s.coeffs, s.mesh, is.gamma0, c.coeffs.g1, c.T, s.dt, c.paths, c.seed, mode, blind);
  auto obs = forward_observation_map(gen, truth);
  double delta = 0.0;
  if (b.has("noise")) {
    const auto nn = b.sub("noise");
    nn.only({"delta", "pattern_seed"});
    delta = nn.num("delta", 0.0);
    if (delta < 0.0) throw ConfigError("field 'reconstruct.noise.delta': must be nonnegative");
    if (delta > 0.0) obs.axpy(delta, random_observation(gen, nn.count("pattern_seed", c.seed + 1)));
  }
  if (b.flag("dump_observation", false)) out.observation("observation", obs);

  const std::uint64_t fit_seed = blind ? b.count("fit_seed", c.seed + 1) : c.seed;
  std::optional<ObservationOperator> fit_op;
  if (blind) fit_op.emplace(s.coeffs, s.mesh, is.gamma0, c.coeffs.g1, c.T, s.dt, c.paths, fit_seed, mode, blind);
  const ObservationOperator& op = blind ? *fit_op : gen;
  const double adj = adjoint_mismatch(op, c.seed ^ 0xad70u, static_cast<std::size_t>(b.count("adjoint_pairs", 10)));
  auto res = reconstruct(op, obs, opt);
  res.relative_errors = reconstruction_errors(op, res.estimate, truth);

  Json j = result_json(res);
  j["adjoint_mismatch"] = jnum(adj);
  j["mode"] = mode_s;
  j["blind"] = blind;
  j["delta"] = delta;
  j["P"] = op.P();
  j["K"] = op.K();
  j["N"] = op.N();
  j["T"] = op.T();
  j["dt"] = op.dt();
  j["gamma0_size"] = is.gamma0.count();
  out.json("reconstruction.json", j);

  Csv csv;
  csv.header = {"node_index", "x"};
  if (s.mesh.dim() == 2) csv.header.push_back("y");
  for (const char* h : {"z0", "z1"}) csv.header.push_back(h);
  if (mode == ForceMode::separable) csv.header.push_back("g2");
  for (std::size_t n = 0; n < s.mesh.size(); ++n) {
    const Point x = s.mesh.coord(n);
    std::vector<std::string> row{fmt(n), fmt(x[0])};
    if (s.mesh.dim() == 2) row.push_back(fmt(x[1]));
    row.push_back(fmt(res.estimate.z0[n]));
    row.push_back(fmt(res.estimate.z1[n]));
    if (mode == ForceMode::separable) row.push_back(fmt(res.estimate.g2[n]));
    csv.add(row);
  }
  out.csv("reconstruction_fields.csv", csv);
  if (mode == ForceMode::tabulated) {
    Csv g;
    g.header = {"time_level", "t", "node_index", "g"};
    for (std::size_t k = 0; k < res.estimate.g_table.size(); ++k)
      for (std::size_t n = 0; n < s.mesh.size(); ++n)
        g.add({fmt(k), fmt(static_cast<double>(k) * op.dt()), fmt(n), fmt(res.estimate.g_table[k][n])});
    out.csv("reconstruction_force.csv", g);
  }
  out.csv("gamma0.csv", gamma0_csv(s.mesh, is.gamma0));
  if (adj > 1e-10) throw InvariantViolation("adjoint inner-product test failed: relative mismatch " + fmt(adj));
  if (!res.converged) throw NumericalError("CG did not converge in " + std::to_string(res.iterations) + " iterations");
  return {{{"relative_errors", j["relative_errors"]}, {"iterations", res.iterations}, {"adjoint_mismatch", jnum(adj)}}};
}

inline RunOutcome run_uniqueness(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"deltas", "epsilon", "tol", "max_iter", "precondition", "mode"});
  const InverseSetup is(c);
  const std::string mode_s = b.str("mode", "separable");
  if (mode_s != "separable" && mode_s != "tabulated")
    throw ConfigError("field 'uniqueness_probe.mode': expected \"separable\" or \"tabulated\"");
  const auto deltas = b.has("deltas") ? b.nums("deltas") : std::vector<double>{0.0, 1e-2, 1e-3, 1e-4};
  const auto opt = parse_solver(b, 1e-10);
  const ObservationOperator op(is.s.coeffs, is.s.mesh, is.gamma0, c.coeffs.g1, c.T, is.s.dt, c.paths, c.seed,
                               mode_s == "separable" ? ForceMode::separable : ForceMode::tabulated);
  const auto rep = uniqueness_probe(op, deltas, c.seed, opt);
  Csv csv;
  csv.header = {"delta", "estimate_norm", "z0", "z1", "force", "iterations", "converged"};
  Json rows = Json::array();
  bool zero_ok = true, converged = true;
  for (const auto& r : rep.rows) {
    csv.add({fmt(r.delta), fmt(r.estimate_norm), fmt(r.z0), fmt(r.z1), fmt(r.force), fmt(r.iterations),
             r.converged ? "1" : "0"});
    if (r.delta == 0.0 && r.estimate_norm != 0.0) zero_ok = false;
    converged = converged && r.converged;
  }
  out.csv("uniqueness.csv", csv);
  out.json("uniqueness.json", {{"slope", jnum(rep.slope)}, {"zero_delta_exact", zero_ok}, {"epsilon", opt.epsilon}});
  if (!zero_ok) throw InvariantViolation("zero observation did not give a zero estimate");
  if (!converged) throw NumericalError("CG did not converge for every delta");
  return {{{"slope", jnum(rep.slope)}}};
}

inline RunOutcome run_counterexample(const ExperimentConfig& c, Artifacts& out) {
  const ConfigNode b(c.block, c.kind);
  b.only({"source", "bump", "dump_fields"});
  const Setup s(c);
  if (!c.coeffs.form) throw ConfigError("field 'coefficients.b': counterexample needs a closed-form principal field");
  auto bump = BumpSpec::standard(s.mesh, c.T);
  if (b.has("bump")) {
    const auto bn = b.sub("bump");
    bn.only({"t_center", "t_radius", "x_center", "x_radius", "amplitude"});
    bump.t_center = bn.num("t_center", bump.t_center);
    bump.t_radius = bn.num("t_radius", bump.t_radius);
    bump.x_center = parse_point(bn, "x_center", bump.x_center);
    bump.x_radius = parse_point(bn, "x_radius", bump.x_radius);
    bump.amplitude = bn.num("amplitude", bump.amplitude);
  }
  const std::string src = b.str("source", "discrete");
  if (src != "discrete" && src != "analytic")
    throw ConfigError("field 'counterexample.source': expected \"discrete\" or \"analytic\"");
  const auto ce = deterministic_counterexample(bump, s.coeffs, *c.coeffs.form, s.mesh, c.T, s.dt,
                                               src == "discrete" ? SourceMode::discrete : SourceMode::analytic);
  const double rep = counterexample_reproduction_error(ce, s.coeffs, s.mesh);
  Json j{{"source", src},
         {"K", ce.K},
         {"N", ce.N},
         {"T", ce.T},
         {"dt", ce.dt},
         {"trace_norm", jnum(ce.trace_norm)},
         {"terminal_norm", jnum(ce.terminal_norm)},
         {"initial_norm", jnum(ce.initial_norm)},
         {"f_norm", jnum(ce.f_norm)},
         {"y_norm", jnum(ce.y_norm)},
         {"f_over_y", jnum(ce.y_norm > 0.0 ? ce.f_norm / ce.y_norm : 0.0)},
         {"reproduction_error", jnum(rep)},
         {"bump",
          {{"t_center", bump.t_center},
           {"t_radius", bump.t_radius},
           {"x_center", {bump.x_center[0], bump.x_center[1]}},
           {"x_radius", {bump.x_radius[0], bump.x_radius[1]}},
           {"amplitude", bump.amplitude}}}};
  out.json("counterexample.json", j);
  if (b.flag("dump_fields", false)) {
    out.binary("counterexample_y.bin", {1, ce.K + 1, ce.N, {ce.y}});
    out.binary("counterexample_f.bin", {1, ce.K + 1, ce.N, {ce.f}});
  }
  if (ce.trace_norm != 0.0 || ce.terminal_norm != 0.0 || ce.initial_norm != 0.0)
    throw InvariantViolation("counterexample has nonzero boundary trace or endpoint data");
  return {{{"trace_norm", jnum(ce.trace_norm)}, {"f_over_y", j["f_over_y"]}}};
}

inline RunOutcome run_experiment(const ExperimentConfig& c, Artifacts& out) {
  if (c.kind == "audit") return run_audit(c, out);
  if (c.kind == "forward") return run_forward(c, out);
  if (c.kind == "identity") return run_identity(c, out);
  if (c.kind == "carleman_ratio") return run_carleman_ratio(c, out);
  if (c.kind == "stability") return run_stability(c, out);
  if (c.kind == "reconstruct") return run_reconstruct(c, out);
  if (c.kind == "uniqueness_probe") return run_uniqueness(c, out);
  if (c.kind == "counterexample") return run_counterexample(c, out);
  throw ConfigError("field 'kind': unknown experiment kind '" + c.kind + "'");
}

// ---------------------------------------------------------------------------
// Orchestration: parse, run, write the manifest (and a failure report).

struct ExecuteOptions {
  fs::path config_path;     // for relative file references and the manifest
  fs::path out_dir;         // overrides the config's "output"
  std::size_t threads = 1;
  bool verbose = false;
};

struct ExecuteResult {
  ExitCode code = ExitCode::ok;
  std::string message;
  fs::path out_dir;
  Json summary;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline ExecuteResult execute(const Json& raw, const ExecuteOptions& eo) {
  const auto start = std::chrono::steady_clock::now();
  ExecuteResult res;
  ExperimentConfig cfg;
  std::optional<Artifacts> out;
  auto finish = [&](const char* status) {
    if (res.out_dir.empty()) return;
    Json m;
    m["tool"] = "shlab";
    m["version"] = kVersion;
    m["status"] = status;
    m["exit_code"] = static_cast<int>(res.code);
    m["kind"] = cfg.kind;
    m["config_path"] = eo.config_path.empty() ? Json(nullptr) : Json(fs::absolute(eo.config_path).string());
    m["config"] = raw;
    m["threads"] = eo.threads;
    m["artifacts"] = out ? out->names() : std::vector<std::string>{};
    m["summary"] = res.summary;
    m["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m["timestamp"] = utc_timestamp();
    try {
      write_json(res.out_dir / "manifest.json", m);
    } catch (const Error&) {
    }
  };
  try {
    const fs::path base = eo.config_path.empty() ? fs::current_path() : fs::absolute(eo.config_path).parent_path();
    // resolved first so that configuration errors get a failure report too
    fs::path dir = eo.out_dir;
    if (dir.empty() && raw.is_object() && raw.contains("output") && raw["output"].is_string()) {
      dir = raw["output"].get<std::string>();
      if (dir.is_relative()) dir = base / dir;
    }
    if (dir.empty()) throw ConfigError("field 'output': required when --out is not given");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ConfigError("output directory " + dir.string() + " is not writable");
    res.out_dir = dir;
    fs::remove(res.out_dir / "failure.json", ec);
    cfg = parse_config(raw, base);
    set_worker_count(eo.threads);
    out.emplace(cfg, res.out_dir);
    res.summary = run_experiment(cfg, *out).summary;
    finish("ok");
    return res;
  } catch (const Error& e) {
    res.code = e.exit_code();
    res.message = std::string(e.kind()) + ": " + e.what();
    if (!res.out_dir.empty()) {
      try {
        write_json(res.out_dir / "failure.json",
                   {{"error", e.kind()}, {"message", e.what()}, {"exit_code", static_cast<int>(res.code)}});
      } catch (const Error&) {
      }
    }
    finish("failed");
    return res;
  } catch (const nlohmann::json::exception& e) {
    res.code = ExitCode::config;
    res.message = std::string("config: ") + e.what();
    finish("failed");
    return res;
  }
}

inline Json load_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace shlab
