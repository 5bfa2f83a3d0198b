#include "shlab/io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <numbers>

namespace shlab {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("shlab_io_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(FormatTest, SeventeenDigitsRoundTrip) {
  for (double v : {0.1, std::numbers::pi, -1e-300, 6.02214076e23, 1.0 / 3.0}) EXPECT_EQ(std::strtod(fmt(v).c_str(), nullptr), v);
  EXPECT_EQ(fmt(0.1), "0.10000000000000001");
  EXPECT_EQ(fmt(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(fmt(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_EQ(fmt(std::nan("")), "nan");
  EXPECT_EQ(jnum(std::numeric_limits<double>::infinity()), Json("inf"));
}

TEST(CsvTest, HeaderAndRows) {
  Csv c;
  c.header = {"a", "b"};
  c.add({"1", "2"});
  EXPECT_EQ(c.str(), "a,b\n1,2\n");
  EXPECT_THROW(c.add({"1"}), InvariantViolation);
}

TEST(TrajectoryFileTest, RoundTripAndLittleEndianHeader) {
  const auto dir = scratch("traj");
  TrajectoryBlock b{2, 3, 4, {Field(12), Field(12)}};
  for (std::size_t i = 0; i < 12; ++i) {
    b.paths[0][i] = std::sin(static_cast<double>(i)) * 1e-7;
    b.paths[1][i] = -static_cast<double>(i) / 7.0;
  }
  write_trajectories(dir / "t.bin", b);
  EXPECT_EQ(fs::file_size(dir / "t.bin"), 24u + 8u * 24u);
  const std::string bytes = read_text(dir / "t.bin");
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 4u);
  for (int i = 1; i < 8; ++i) EXPECT_EQ(bytes[static_cast<std::size_t>(i)], 0);
  // 1.0 as float64 LE: 00 .. 00 f0 3f
  TrajectoryBlock one{1, 1, 1, {Field{1.0}}};
  write_trajectories(dir / "one.bin", one);
  const std::string ob = read_text(dir / "one.bin");
  EXPECT_EQ(static_cast<unsigned char>(ob[24 + 6]), 0xf0u);
  EXPECT_EQ(static_cast<unsigned char>(ob[24 + 7]), 0x3fu);

  const auto r = read_trajectories(dir / "t.bin");
  EXPECT_EQ(r.P, 2u);
  EXPECT_EQ(r.K, 3u);
  EXPECT_EQ(r.N, 4u);
  EXPECT_EQ(r.paths, b.paths);
}

TEST(TrajectoryFileTest, TruncatedOrInconsistentRejected) {
  const auto dir = scratch("bad");
  write_trajectories(dir / "t.bin", {1, 2, 2, {Field(4, 1.0)}});
  std::string bytes = read_text(dir / "t.bin");
  write_text(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_trajectories(dir / "short.bin"), DataError);
  EXPECT_THROW(write_trajectories(dir / "x.bin", {1, 2, 2, {Field(3)}}), InvariantViolation);
  EXPECT_THROW(read_trajectories(dir / "missing.bin"), ConfigError);
}

TEST(TrajectoryFileTest, EnsembleDump) {
  const auto dir = scratch("ens");
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  auto c = wave_coefficients(mesh);
  c.b4 = ScalarFunction::constant(0.4);
  const Field z0 = zero_on_boundary(mesh, mesh.sample([](const Point& x) { return x[0] * (1 - x[0]); }));
  const auto ens = simulate_forward(c, z0, Field(mesh.size(), 0.0), mesh, {0.5, 0.0, 3, 4});
  write_trajectories(dir / "z.bin", ensemble_block(ens));
  const auto r = read_trajectories(dir / "z.bin");
  EXPECT_EQ(r.K, ens.K + 1);
  EXPECT_EQ(r.paths, ens.z);
}

TEST(ObservationFileTest, RoundTripIsExact) {
  const auto dir = scratch("obs");
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  const auto c = wave_coefficients(mesh);
  const auto field = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  const auto g0 = extract_gamma0(mesh, field, WeightFunction::shifted_quadratic(1.0, Point{-1.0, 0.0}));
  const ObservationOperator op(c, mesh, g0, ScalarFunction::constant(1.0), 1.0, cfl_limit(mesh, c.b), 3, 12);
  const Field s = zero_on_boundary(mesh, mesh.sample([](const Point& x) { return std::sin(std::numbers::pi * x[0]); }));
  const auto rec = forward_observation_map(op, {s, Field(mesh.size(), 0.0), s, {}});
  write_observation(dir / "obs", rec);
  const auto back = read_observation(dir / "obs");
  EXPECT_EQ(back.P, rec.P);
  EXPECT_EQ(back.K, rec.K);
  EXPECT_EQ(back.N, rec.N);
  EXPECT_EQ(back.T, rec.T);
  EXPECT_EQ(back.dt, rec.dt);
  EXPECT_EQ(back.seed, rec.seed);
  EXPECT_EQ(back.gamma0, rec.gamma0);
  EXPECT_EQ(back.trace, rec.trace);
  EXPECT_EQ(back.zT, rec.zT);
  // a record read back is usable by the solver
  EXPECT_EQ(op.inner(back, rec), op.inner(rec, rec));
}

}  // namespace
}  // namespace shlab
