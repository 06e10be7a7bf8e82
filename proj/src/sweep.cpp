#include "xreg/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "xreg/array_io.hpp"
#include "xreg/serialize.hpp"
#include "xreg/trainer.hpp"

namespace xreg::sweep {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Axis a) { return a == Axis::observed_fraction ? "observed_fraction" : "train_size"; }

Axis axis_from_string(const std::string& s) {
  if (s == "observed_fraction") return Axis::observed_fraction;
  if (s == "train_size") return Axis::train_size;
  throw std::invalid_argument("unknown sweep axis '" + s + "' (expected observed_fraction or train_size)");
}

SweepSpec SweepSpec::defaults(Axis axis) {
  SweepSpec s;
  s.axis = axis;
  s.values = axis == Axis::observed_fraction ? std::vector<double>{0.4, 0.6, 0.8, 1.0} : std::vector<double>{20, 30, 40, 70};
  return s;
}

void SweepSpec::validate() const {
  if (values.empty()) throw std::invalid_argument("sweep needs at least one axis value");
  if (methods.empty()) throw std::invalid_argument("sweep needs at least one method");
  if (seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
  if (workers < 1) throw std::invalid_argument("sweep workers must be >= 1");
  for (double v : values) {
    if (axis == Axis::observed_fraction && !(v > 0.0 && v <= 1.0)) {
      throw std::invalid_argument("observed_fraction values must lie in (0, 1]");
    }
    if (axis == Axis::train_size && !(v >= 1.0 && v == std::floor(v))) {
      throw std::invalid_argument("train_size values must be positive integers");
    }
  }
  if (!(fixed_observed_fraction > 0.0 && fixed_observed_fraction <= 1.0)) {
    throw std::invalid_argument("fixed observed fraction must lie in (0, 1]");
  }
  if (fixed_train_size < 1) throw std::invalid_argument("fixed train size must be >= 1");
}

std::string value_label(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

fs::path point_dir(const SweepSpec& spec, double value, Method method, std::uint64_t seed) {
  return fs::path("runs") / (to_string(spec.axis) + "=" + value_label(value)) / to_string(method) / ("seed" + std::to_string(seed));
}

ExperimentConfig point_config(const ExperimentConfig& base, const SweepSpec& spec, double value, Method method,
                              std::uint64_t seed) {
  ExperimentConfig c = base;
  c.method = method;
  c.train.seed = seed;
  if (spec.axis == Axis::observed_fraction) {
    c.data.observed_fraction = value;
    c.data.train_trajectories = spec.fixed_train_size;
  } else {
    c.data.observed_fraction = spec.fixed_observed_fraction;
    c.data.train_trajectories = static_cast<std::size_t>(value);
  }
  return c;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<PointResult> run_sweep(const data::DatasetBundle& stored, const ExperimentConfig& base, const SweepSpec& spec,
                                   const fs::path& dir, const std::string& dataset_ref,
                                   const std::function<void(const PointResult&)>& progress) {
  spec.validate();
  std::vector<PointResult> points;
  for (double v : spec.values)
    for (Method m : spec.methods)
      for (auto seed : spec.seeds) points.push_back(PointResult{v, m, seed, dir / point_dir(spec, v, m, seed), "pending"});

  fs::create_directories(dir);
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      PointResult& p = points[i];
      try {
        const ExperimentConfig cfg = point_config(base, spec, p.value, p.method, p.seed);
        train::RunOptions opts;
        opts.run_dir = p.run_dir;
        opts.provenance = {{"dataset", dataset_ref},
                           {"sweep", {{"axis", to_string(spec.axis)}, {"value", p.value}, {"method", to_string(p.method)}}}};
        const auto r = train::run(stored, cfg, opts);
        const auto& f = r.final();
        p.test_nll_mc = f.test.calibration.nll_mc;
        p.test_ece_mix = f.test.calibration.ece_mix;
        p.reg_ece_mix = f.reg.calibration.ece_mix;
        p.mean_std_mu = f.test.mean_std_mu;
        p.status = "ok";
      } catch (const std::exception& e) {
        p.status = std::string("failed: ") + e.what();
        p.test_nll_mc = p.test_ece_mix = p.reg_ece_mix = p.mean_std_mu = std::nan("");
      }
      if (progress) {
        std::lock_guard lock(mu);
        progress(p);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < spec.workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  write_summary(dir / "summary.csv", spec, points);
  const auto plots = write_plot_data(dir, spec.axis, points);
  json manifest = {{"format", "xreg-sweep/1"},
                   {"axis", to_string(spec.axis)},
                   {"values", spec.values},
                   {"methods", json::array()},
                   {"seeds", spec.seeds},
                   {"fixed_observed_fraction", spec.fixed_observed_fraction},
                   {"fixed_train_size", spec.fixed_train_size},
                   {"workers", spec.workers},
                   {"dataset", dataset_ref},
                   {"base_config", serialize::to_json(base)},
                   {"code_digest", train::code_digest()},
                   {"runs", json::array()},
                   {"files", json::array()}};
  for (Method m : spec.methods) manifest["methods"].push_back(to_string(m));
  for (const auto& p : points) {
    manifest["runs"].push_back({{"dir", fs::relative(p.run_dir, dir).generic_string()}, {"status", p.status}});
  }
  std::vector<fs::path> files{dir / "summary.csv"};
  files.insert(files.end(), plots.begin(), plots.end());
  for (const auto& f : files) {
    manifest["files"].push_back({{"path", fs::relative(f, dir).generic_string()}, {"digest", io::file_digest(f)}});
  }
  std::ofstream(dir / "sweep_manifest.json") << manifest.dump(2) << '\n';
  return points;
}

void write_summary(const fs::path& path, const SweepSpec& spec, const std::vector<PointResult>& points) {
  std::ofstream out(path);
  out << kSummaryHeader << '\n';
  for (const auto& p : points) {
    out << to_string(spec.axis) << ',' << value_label(p.value) << ',' << to_string(p.method) << ',' << p.seed << ','
        << num(p.test_nll_mc) << ',' << num(p.test_ece_mix) << ',' << num(p.reg_ece_mix) << ',' << num(p.mean_std_mu) << ','
        << csv_escape(p.status) << '\n';
  }
  if (!out) throw io::FormatError("cannot write " + path.string());
}

std::vector<PointResult> read_summary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io::FormatError("missing " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kSummaryHeader) throw io::FormatError(path.string() + ": unexpected header '" + line + "'");
  std::vector<PointResult> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 9) throw io::FormatError(path.string() + ": malformed row '" + line + "'");
    PointResult p;
    p.value = std::stod(f[1]);
    p.method = method_from_string(f[2]);
    p.seed = std::stoull(f[3]);
    p.test_nll_mc = std::stod(f[4]);
    p.test_ece_mix = std::stod(f[5]);
    p.reg_ece_mix = std::stod(f[6]);
    p.mean_std_mu = std::stod(f[7]);
    p.status = f[8];
    SweepSpec spec;
    spec.axis = axis_from_string(f[0]);
    p.run_dir = path.parent_path() / point_dir(spec, p.value, p.method, p.seed);
    points.push_back(p);
  }
  return points;
}

std::vector<fs::path> write_plot_data(const fs::path& dir, Axis axis, const std::vector<PointResult>& points) {
  const fs::path out_dir = dir / "plot_data";
  fs::create_directories(out_dir);
  const std::vector<std::pair<std::string, double PointResult::*>> series{{"nll_vs_axis.csv", &PointResult::test_nll_mc},
                                                                          {"ece_vs_axis.csv", &PointResult::test_ece_mix},
                                                                          {"reg_ece_vs_axis.csv", &PointResult::reg_ece_mix},
                                                                          {"std_mu_vs_axis.csv", &PointResult::mean_std_mu}};
  std::vector<fs::path> written;
  for (const auto& [name, field] : series) {
    std::map<std::pair<std::string, double>, std::vector<double>> groups;
    std::vector<std::pair<std::string, double>> order;
    for (const auto& p : points) {
      const auto key = std::make_pair(to_string(p.method), p.value);
      if (!groups.count(key)) order.push_back(key);
      auto& g = groups[key];
      if (p.status == "ok") g.push_back(p.*field);
    }
    std::ofstream out(out_dir / name);
    out << kPlotHeader << '\n';
    for (const auto& key : order) {
      const auto& g = groups[key];
      if (g.empty()) continue;
      double mean = 0.0;
      for (double v : g) mean += v;
      mean /= static_cast<double>(g.size());
      out << to_string(axis) << ',' << value_label(key.second) << ',' << key.first << ',' << g.size() << ',' << num(mean) << ','
          << num(*std::min_element(g.begin(), g.end())) << ',' << num(*std::max_element(g.begin(), g.end())) << '\n';
    }
    written.push_back(out_dir / name);
  }
  return written;
}

}  // namespace xreg::sweep
