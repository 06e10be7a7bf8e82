#include <doctest.h>

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "xreg/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const fs::path& cwd, const std::string& args) {
  const fs::path log = cwd / "stdout.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" XREG_CLI_PATH "' " + args + " > '" + log.string() + "' 2> /dev/null";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream s;
  s << in.rdbuf();
  o.out = s.str();
  return o;
}

fs::path write_tiny_config(const fs::path& dir) {
  auto j = xreg::serialize::to_json(support::tiny_experiment());
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("generate, train, eval and report from the command line") {
  support::TempDir tmp;
  write_tiny_config(tmp.path);

  const auto dry = cli(tmp.path, "generate -c tiny.json -o data --dry-run");
  CHECK(dry.code == 0);
  CHECK(json::parse(dry.out).at("generate").at("n_train") == 4);
  CHECK_FALSE(fs::exists(tmp.path / "data"));

  REQUIRE(cli(tmp.path, "generate -c tiny.json -o data").code == 0);
  CHECK(fs::exists(tmp.path / "data" / "manifest.json"));

  const auto tr = cli(tmp.path, "train -c tiny.json -d data -o run --steps 10 --k-reg 5");
  INFO(tr.out);
  REQUIRE(tr.code == 0);
  CHECK(tr.out.find("reg_updates=2") != std::string::npos);
  std::ifstream man(tmp.path / "run" / "manifest.json");
  const json m = json::parse(man);
  CHECK(m.dump().find("\"reg_updates\":2") != std::string::npos);

  const auto ev = cli(tmp.path, "eval -r run -d data --split reg");
  REQUIRE(ev.code == 0);
  const json e = json::parse(ev.out);
  CHECK(e.at("split") == "reg");
  CHECK(e.at("coverage").size() == 9);

  const auto sw = cli(tmp.path,
                      "sweep -c tiny.json -d data -o sweep --axis observed_fraction --values 0.5 1.0 --methods xreg "
                      "--fixed-train-size 2 --set train.total_steps=2");
  REQUIRE(sw.code == 0);
  fs::remove_all(tmp.path / "sweep" / "plot_data");
  const auto rep = cli(tmp.path, "report -s sweep");
  CHECK(rep.code == 0);
  CHECK(fs::exists(tmp.path / "sweep" / "plot_data" / "ece_vs_axis.csv"));
}

TEST_CASE("bad configuration and missing inputs exit with code 2") {
  support::TempDir tmp;
  write_tiny_config(tmp.path);
  CHECK(cli(tmp.path, "train -c tiny.json -d data --set train.k_reg=0 --dry-run").code == 2);
  CHECK(cli(tmp.path, "train -c tiny.json -d data --set train.bogus=1 --dry-run").code == 2);
  CHECK(cli(tmp.path, "train -c missing.json -d data").code == 2);
  CHECK(cli(tmp.path, "train -c tiny.json -d nowhere -o run").code == 2);
  CHECK(cli(tmp.path, "report -s nowhere").code == 2);
  CHECK(cli(tmp.path, "sweep -c tiny.json --axis sideways --dry-run").code == 2);

  const auto dry = cli(tmp.path, "train -c tiny.json --steps 7 --dry-run");
  CHECK(dry.code == 0);
  CHECK(json::parse(dry.out).at("train").at("total_steps") == 7);
}

TEST_CASE("relative outputs land under the run root") {
  support::TempDir tmp;
  write_tiny_config(tmp.path);
  fs::create_directories(tmp.path / "root");
  const auto o = cli(tmp.path, "generate -c tiny.json -o data");
  REQUIRE(o.code == 0);
  const std::string env = "XREG_RUN_ROOT='" + (tmp.path / "root").string() + "' ";
  const std::string cmd = "cd '" + tmp.path.string() + "' && " + env + "'" XREG_CLI_PATH "' generate -c tiny.json -o d2 > /dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(tmp.path / "root" / "d2" / "manifest.json"));
}
