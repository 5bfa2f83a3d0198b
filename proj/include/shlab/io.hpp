#pragma once

// Report writers and the binary trajectory format. Data files carry no
// timestamps, so identical inputs give identical bytes.

#include <cstring>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "shlab/errors.hpp"
#include "shlab/inverse.hpp"

namespace shlab {

using Json = nlohmann::ordered_json;

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt(std::size_t v) { return std::to_string(v); }

/// JSON has no inf/nan; those are written as strings.
inline Json jnum(double v) {
  if (std::isfinite(v)) return v;
  return fmt(v);
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != header.size()) throw InvariantViolation("csv row width does not match the header");
    rows.push_back(std::move(row));
  }

  std::string str() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) s += ',';
        s += r[i];
      }
      s += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!f) throw ConfigError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline void write_csv(const std::filesystem::path& path, const Csv& c) { write_text(path, c.str()); }

// ---------------------------------------------------------------------------
// Binary trajectories: header {P, K, N} as uint64 little-endian, then per path
// a row-major K x N block of float64 little-endian (K rows of time).

struct TrajectoryBlock {
  std::uint64_t P = 0, K = 0, N = 0;
  std::vector<Field> paths;  // each K * N
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(sizeof(T) == 8);
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

template <class T>
T get_le(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated trajectory file");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  T v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace detail

inline void write_trajectories(const std::filesystem::path& path, const TrajectoryBlock& blk) {
  if (blk.paths.size() != blk.P) throw InvariantViolation("trajectory block has the wrong number of paths");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  detail::put_le(f, blk.P);
  detail::put_le(f, blk.K);
  detail::put_le(f, blk.N);
  for (const auto& p : blk.paths) {
    if (p.size() != blk.K * blk.N) throw InvariantViolation("trajectory path has the wrong size");
    for (double v : p) detail::put_le(f, v);
  }
  if (!f) throw ConfigError("write failed for " + path.string());
}

inline TrajectoryBlock read_trajectories(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  TrajectoryBlock blk;
  blk.P = detail::get_le<std::uint64_t>(f);
  blk.K = detail::get_le<std::uint64_t>(f);
  blk.N = detail::get_le<std::uint64_t>(f);
  const auto expect = 24 + 8 * blk.P * blk.K * blk.N;
  if (std::filesystem::file_size(path) != expect) throw DataError("trajectory file size does not match its header");
  blk.paths.assign(blk.P, Field(blk.K * blk.N));
  for (auto& p : blk.paths)
    for (auto& v : p) v = detail::get_le<double>(f);
  return blk;
}

/// z of every stored path, (K + 1) x N.
inline TrajectoryBlock ensemble_block(const PathEnsemble& ens) {
  if (!ens.stored) throw ConfigError("ensemble has no stored trajectories");
  return {ens.P, ens.K + 1, ens.N, ens.z};
}

// Observation records: <stem>.trace.bin {P, K + 1, |Gamma0|}, <stem>.terminal.bin
// {P, 1, N} and <stem>.json with the time grid, seed and Gamma0 positions.

inline void write_observation(const std::filesystem::path& stem, const ObservationRecord& r) {
  write_trajectories(stem.string() + ".trace.bin", {r.P, r.K + 1, r.m(), r.trace});
  write_trajectories(stem.string() + ".terminal.bin", {r.P, 1, r.N, r.zT});
  Json j;
  j["P"] = r.P;
  j["K"] = r.K;
  j["N"] = r.N;
  j["T"] = r.T;
  j["dt"] = r.dt;
  j["seed"] = r.seed;
  j["gamma0"] = r.gamma0;
  write_json(stem.string() + ".json", j);
}

inline ObservationRecord read_observation(const std::filesystem::path& stem) {
  ObservationRecord r;
  try {
    const Json j = Json::parse(read_text(stem.string() + ".json"));
    r.P = j.at("P").get<std::size_t>();
    r.K = j.at("K").get<std::size_t>();
    r.N = j.at("N").get<std::size_t>();
    r.T = j.at("T").get<double>();
    r.dt = j.at("dt").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.gamma0 = j.at("gamma0").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad observation metadata: ") + e.what());
  }
  auto tr = read_trajectories(stem.string() + ".trace.bin");
  auto te = read_trajectories(stem.string() + ".terminal.bin");
  if (tr.P != r.P || tr.K != r.K + 1 || tr.N != r.m() || te.P != r.P || te.K != 1 || te.N != r.N)
    throw DataError("observation files disagree with their metadata");
  r.trace = std::move(tr.paths);
  r.zT = std::move(te.paths);
  return r;
}

}  // namespace shlab
