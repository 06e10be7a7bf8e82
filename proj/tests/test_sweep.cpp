#include <doctest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "xreg/array_io.hpp"
#include "xreg/sweep.hpp"

using namespace xreg;
using namespace xreg::sweep;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("default sweep values") {
  CHECK(SweepSpec::defaults(Axis::observed_fraction).values == std::vector<double>{0.4, 0.6, 0.8, 1.0});
  CHECK(SweepSpec::defaults(Axis::train_size).values == std::vector<double>{20, 30, 40, 70});
  CHECK(axis_from_string("train_size") == Axis::train_size);
  CHECK_THROWS_AS(axis_from_string("size"), std::invalid_argument);
  auto s = SweepSpec::defaults(Axis::train_size);
  s.values = {2.5};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SweepSpec::defaults(Axis::observed_fraction);
  s.values = {0.0};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("point configs and directories") {
  const auto base = support::tiny_experiment();
  auto spec = SweepSpec::defaults(Axis::observed_fraction);
  spec.fixed_train_size = 3;
  const auto c = point_config(base, spec, 0.6, Method::mc_dropout, 4);
  CHECK(c.method == Method::mc_dropout);
  CHECK(c.train.seed == 4);
  CHECK(c.data.observed_fraction.value() == 0.6);
  CHECK(c.data.train_trajectories == 3);
  CHECK(point_dir(spec, 0.6, Method::mc_dropout, 4) == fs::path("runs/observed_fraction=0.6/mc_dropout/seed4"));

  spec = SweepSpec::defaults(Axis::train_size);
  const auto t = point_config(base, spec, 20, Method::xreg, 0);
  CHECK(t.data.train_trajectories == 20);
  CHECK(t.data.observed_fraction.value() == 0.7);
}

TEST_CASE("a full sweep writes one row per point and the plot tables") {
  support::TempDir tmp;
  auto base = support::tiny_experiment();
  base.train.total_steps = 5;
  const auto stored = data::generate_dataset(base.ks, base.generate);
  auto spec = SweepSpec::defaults(Axis::observed_fraction);
  spec.fixed_train_size = 4;
  std::size_t seen = 0;
  const auto points = run_sweep(stored, base, spec, tmp.path, "tiny", [&](const PointResult&) { ++seen; });
  CHECK(points.size() == 12);
  CHECK(seen == 12);
  for (const auto& p : points) {
    INFO(p.status);
    CHECK(p.status == "ok");
    CHECK(std::isfinite(p.test_nll_mc));
    CHECK(fs::exists(p.run_dir / "metrics.csv"));
  }

  const auto summary = lines(tmp.path / "summary.csv");
  REQUIRE(summary.size() == 13);
  CHECK(summary[0] == kSummaryHeader);
  CHECK(summary[0] == "axis,value,method,seed,test_nll_mc,test_ece_mix,reg_ece_mix,mean_std_mu,status");

  const auto back = read_summary(tmp.path / "summary.csv");
  REQUIRE(back.size() == points.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].value == points[i].value);
    CHECK(back[i].method == points[i].method);
    CHECK(back[i].test_ece_mix == doctest::Approx(points[i].test_ece_mix).epsilon(1e-9));
    CHECK(back[i].run_dir == points[i].run_dir);
  }

  for (const char* name : {"nll_vs_axis.csv", "ece_vs_axis.csv", "std_mu_vs_axis.csv", "reg_ece_vs_axis.csv"}) {
    const auto rows = lines(tmp.path / "plot_data" / name);
    REQUIRE(rows.size() == 13);
    CHECK(rows[0] == "axis,value,method,n_seeds,mean,min,max");
  }
  CHECK(fs::exists(tmp.path / "sweep_manifest.json"));
}

TEST_CASE("a failing point is recorded and the sweep continues") {
  support::TempDir tmp;
  auto base = support::tiny_experiment();
  base.train.total_steps = 2;
  const auto stored = data::generate_dataset(base.ks, base.generate);
  SweepSpec spec;
  spec.axis = Axis::train_size;
  spec.values = {2, 99};
  spec.methods = {Method::xreg};
  const auto points = run_sweep(stored, base, spec, tmp.path, "tiny");
  REQUIRE(points.size() == 2);
  CHECK(points[0].status == "ok");
  CHECK(points[1].status.rfind("failed: ", 0) == 0);
  CHECK(std::isnan(points[1].test_nll_mc));

  const auto back = read_summary(tmp.path / "summary.csv");
  CHECK(back[1].status == points[1].status);
  // Failed points are left out of the aggregates.
  CHECK(lines(tmp.path / "plot_data" / "nll_vs_axis.csv").size() == 2);
}

TEST_CASE("malformed summaries are rejected") {
  support::TempDir tmp;
  std::ofstream(tmp.path / "s.csv") << "axis,value\n";
  CHECK_THROWS_AS(read_summary(tmp.path / "s.csv"), io::FormatError);
  CHECK_THROWS_AS(read_summary(tmp.path / "none.csv"), io::FormatError);
}
