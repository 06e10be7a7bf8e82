// xreg: dataset generation, training, sweeps, re-scoring and reports.
//
// Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
// missing input, 3 training diverged (last good checkpoint kept).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xreg/array_io.hpp"
#include "xreg/dataset.hpp"
#include "xreg/serialize.hpp"
#include "xreg/sweep.hpp"
#include "xreg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xreg;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitDiverged = 3;

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Relative output paths live under $XREG_RUN_ROOT when it is set.
fs::path under_root(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("XREG_RUN_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  bool dry_run = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON config file (defaults apply to missing keys)");
    app->add_option("--set", sets, "Override, e.g. --set train.k_reg=5")->take_all();
    app->add_flag("--dry-run", dry_run, "Print the resolved config and exit without writing");
  }
};

ExperimentConfig resolve(const Common& c, const std::vector<std::string>& extra) {
  std::vector<std::string> all = c.sets;
  all.insert(all.end(), extra.begin(), extra.end());
  for (const auto& o : all) std::cerr << "override: " << o << '\n';
  return serialize::load_experiment(c.config, all);
}

data::DatasetBundle load_or_fail(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw InputError("dataset not found: " + dir.string());
  return data::load_dataset(dir);
}

void print_eval(const std::string& label, const train::EvalRecord& r) {
  std::cout << label << ": nll_mc=" << r.calibration.nll_mc << " ece_mix=" << r.calibration.ece_mix
            << " mean_std_mu=" << r.mean_std_mu << " pairs=" << r.pairs << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  ad::configure_allocator();
  CLI::App app{"Cross-regularized dual-noise uncertainty for 1D Fourier neural operators"};
  app.require_subcommand(1);

  Common gen_common;
  std::string gen_out = "dataset";
  auto* gen = app.add_subcommand("generate", "Generate a Kuramoto-Sivashinsky pair dataset");
  gen_common.attach(gen);
  gen->add_option("-o,--out", gen_out, "Dataset directory");

  Common train_common;
  std::string train_dataset = "dataset", train_out = "run", method;
  std::size_t steps = 0, k_reg = 0;
  double dropout_p = -1.0;
  double fraction = -1.0;
  long long seed = -1;
  bool fresh = false;
  auto* tr = app.add_subcommand("train", "Train one run");
  train_common.attach(tr);
  tr->add_option("-d,--dataset", train_dataset, "Dataset directory");
  tr->add_option("-o,--out", train_out, "Run directory");
  tr->add_option("--method", method, "xreg | mc_dropout | deep_ensemble");
  tr->add_option("--steps", steps, "Total train steps");
  tr->add_option("--k-reg", k_reg, "Train steps per regularization update");
  tr->add_option("--p", dropout_p, "MC-dropout rate");
  tr->add_option("--observed-fraction", fraction, "Observation mask fraction");
  tr->add_option("--seed", seed, "Training seed");
  tr->add_flag("--fresh", fresh, "Ignore an existing checkpoint in the run directory");

  Common sweep_common;
  std::string sweep_dataset, sweep_out = "sweep", axis = "observed_fraction";
  std::vector<double> values;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  double fixed_fraction = 0.7;
  std::size_t fixed_train = 50;
  auto* sw = app.add_subcommand("sweep", "Run a sweep over one axis");
  sweep_common.attach(sw);
  sw->add_option("-d,--dataset", sweep_dataset, "Existing dataset (generated into the sweep directory when absent)");
  sw->add_option("-o,--out", sweep_out, "Sweep directory");
  sw->add_option("--axis", axis, "observed_fraction | train_size");
  sw->add_option("--values", values, "Axis values (default per axis)");
  sw->add_option("--methods", methods, "Subset of xreg mc_dropout deep_ensemble");
  sw->add_option("--seeds", seeds, "Training seeds");
  sw->add_option("--workers", workers, "Concurrent runs");
  sw->add_option("--fixed-observed-fraction", fixed_fraction, "Observed fraction on the train-size axis");
  sw->add_option("--fixed-train-size", fixed_train, "Train trajectories on the observed-fraction axis");

  std::string eval_run, eval_dataset = "dataset", eval_split = "test";
  std::size_t eval_max = 0;
  auto* ev = app.add_subcommand("eval", "Re-score the checkpoint of an existing run");
  ev->add_option("-r,--run", eval_run, "Run directory")->required();
  ev->add_option("-d,--dataset", eval_dataset, "Dataset directory");
  ev->add_option("--split", eval_split, "train | reg | test");
  ev->add_option("--max-pairs", eval_max, "Strided subset size (0 = all)");

  std::string report_sweep;
  auto* rep = app.add_subcommand("report", "Rebuild summary and plot data of a sweep from its run directories");
  rep->add_option("-s,--sweep", report_sweep, "Sweep directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const ExperimentConfig cfg = resolve(gen_common, {});
      if (gen_common.dry_run) {
        std::cout << json{{"ks", serialize::to_json(cfg.ks)}, {"generate", serialize::to_json(cfg.generate)}}.dump(2) << '\n';
        return 0;
      }
      const fs::path out = under_root(gen_out);
      const auto bundle = data::generate_dataset(cfg.ks, cfg.generate);
      data::save_dataset(bundle, out);
      std::cout << "dataset " << out.string() << ": train " << bundle.train.size() << " pairs, reg " << bundle.reg.size()
                << " pairs, test " << bundle.test.size() << " pairs\n";
      return 0;
    }

    if (tr->parsed()) {
      std::vector<std::string> extra;
      if (!method.empty()) extra.push_back("method=" + method);
      if (steps > 0) extra.push_back("train.total_steps=" + std::to_string(steps));
      if (k_reg > 0) extra.push_back("train.k_reg=" + std::to_string(k_reg));
      if (dropout_p >= 0.0) extra.push_back("baseline.dropout_p=" + std::to_string(dropout_p));
      if (fraction >= 0.0) extra.push_back("data.observed_fraction=" + std::to_string(fraction));
      if (seed >= 0) extra.push_back("train.seed=" + std::to_string(seed));
      const ExperimentConfig cfg = resolve(train_common, extra);
      if (train_common.dry_run) {
        std::cout << serialize::to_json(cfg).dump(2) << '\n';
        return 0;
      }
      const fs::path dataset = under_root(train_dataset);
      const auto stored = load_or_fail(dataset);
      train::RunOptions opts;
      opts.run_dir = under_root(train_out);
      opts.resume = !fresh;
      opts.provenance = {{"dataset", fs::absolute(dataset).string()},
                         {"dataset_manifest_digest", io::file_digest(dataset / "manifest.json")},
                         {"overrides", train_common.sets},
                         {"cli_overrides", extra}};
      opts.on_eval = [](const train::MetricsRow& r) {
        std::cerr << "step " << r.step << " train_loss=" << r.train_loss << " reg_loss=" << r.reg_loss
                  << " test_nll_mc=" << r.test.calibration.nll_mc << " test_ece=" << r.test.calibration.ece_mix << '\n';
      };
      const auto result = train::run(stored, cfg, opts);
      print_eval("test", result.final().test);
      print_eval("reg", result.final().reg);
      std::cout << "method=" << to_string(cfg.method) << " reg_updates=" << result.reg_updates
                << " overhead_estimate=" << result.timing.overhead_estimate() << '\n';
      return 0;
    }

    if (sw->parsed()) {
      ExperimentConfig cfg = resolve(sweep_common, {});
      sweep::SweepSpec spec = sweep::SweepSpec::defaults(sweep::axis_from_string(axis));
      if (!values.empty()) spec.values = values;
      if (!methods.empty()) {
        spec.methods.clear();
        for (const auto& m : methods) spec.methods.push_back(method_from_string(m));
      }
      if (!seeds.empty()) spec.seeds = seeds;
      spec.workers = workers;
      spec.fixed_observed_fraction = fixed_fraction;
      spec.fixed_train_size = fixed_train;
      spec.validate();
      const fs::path out = under_root(sweep_out);
      if (sweep_common.dry_run) {
        json plan = json::array();
        for (double v : spec.values)
          for (Method m : spec.methods)
            for (auto s : spec.seeds) {
              plan.push_back({{"dir", sweep::point_dir(spec, v, m, s).generic_string()},
                              {"config", serialize::to_json(sweep::point_config(cfg, spec, v, m, s))}});
            }
        std::cout << plan.dump(2) << '\n';
        return 0;
      }
      fs::path dataset = sweep_dataset.empty() ? out / "dataset" : under_root(sweep_dataset);
      if (sweep_dataset.empty() && !fs::exists(dataset / "manifest.json")) {
        if (spec.axis == sweep::Axis::train_size) {
          double most = 0;
          for (double v : spec.values) most = std::max(most, v);
          cfg.generate.n_train = std::max(cfg.generate.n_train, static_cast<std::size_t>(most));
        } else {
          cfg.generate.n_train = std::max(cfg.generate.n_train, spec.fixed_train_size);
        }
        data::save_dataset(data::generate_dataset(cfg.ks, cfg.generate), dataset);
      }
      const auto stored = load_or_fail(dataset);
      const auto points = sweep::run_sweep(stored, cfg, spec, out, fs::absolute(dataset).string(), [](const sweep::PointResult& p) {
        std::cerr << to_string(p.method) << " value=" << sweep::value_label(p.value) << " seed=" << p.seed << " " << p.status
                  << " test_ece=" << p.test_ece_mix << " mean_std_mu=" << p.mean_std_mu << '\n';
      });
      std::size_t failed = 0;
      for (const auto& p : points) failed += p.status == "ok" ? 0 : 1;
      std::cout << "sweep " << out.string() << ": " << points.size() - failed << " ok, " << failed << " failed\n";
      return failed == 0 ? 0 : 1;
    }

    if (ev->parsed()) {
      const auto stored = load_or_fail(under_root(eval_dataset));
      data::Split split = data::Split::test;
      if (eval_split == "train") split = data::Split::train;
      else if (eval_split == "reg") split = data::Split::reg;
      else if (eval_split != "test") throw serialize::ConfigError("unknown split " + eval_split);
      const auto r = train::evaluate_run(under_root(eval_run), stored, split, eval_max);
      std::cout << json{{"split", eval_split},
                        {"nll_mc", r.calibration.nll_mc},
                        {"ece_mix", r.calibration.ece_mix},
                        {"alphas", r.calibration.alphas},
                        {"coverage", r.calibration.coverage},
                        {"mean_std_mu", r.mean_std_mu},
                        {"pairs", r.pairs}}
                       .dump(2)
                << '\n';
      return 0;
    }

    if (rep->parsed()) {
      const fs::path dir = under_root(report_sweep);
      const fs::path summary = dir / "summary.csv";
      if (!fs::exists(summary)) throw InputError("no summary.csv in " + dir.string());
      const auto points = sweep::read_summary(summary);
      if (points.empty()) throw InputError("empty summary in " + dir.string());
      std::ifstream in(dir / "sweep_manifest.json");
      const sweep::Axis ax = sweep::axis_from_string(json::parse(in).at("axis").get<std::string>());
      for (const auto& f : sweep::write_plot_data(dir, ax, points)) std::cout << f.string() << '\n';
      return 0;
    }
  } catch (const serialize::ConfigError& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const InputError& e) {
    std::cerr << e.what() << '\n';
    return kExitInvalid;
  } catch (const train::TrainingDiverged& e) {
    std::cerr << e.what() << " (last good checkpoint kept)\n";
    return kExitDiverged;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
