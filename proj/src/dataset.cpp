#include "xreg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "xreg/array_io.hpp"
#include "xreg/serialize.hpp"

namespace xreg::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::reg: return "reg";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<double> ObservationMask::indicator() const {
  std::vector<double> out(n_points, 0.0);
  for (auto i : indices) out[i] = 1.0;
  return out;
}

ObservationMask make_mask(std::size_t n_points, double observed_fraction, std::uint64_t seed) {
  if (!(observed_fraction > 0.0 && observed_fraction <= 1.0)) {
    throw std::invalid_argument("observed_fraction must lie in (0, 1]");
  }
  ObservationMask mask;
  mask.observed_fraction = observed_fraction;
  mask.seed = seed;
  mask.n_points = n_points;
  const auto keep = static_cast<std::size_t>(std::llround(observed_fraction * static_cast<double>(n_points)));
  std::vector<std::size_t> order(n_points);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, "observation-mask");
  // Fisher-Yates with our own index draws so the permutation is portable
  // across standard library implementations of std::shuffle.
  for (std::size_t i = n_points; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  mask.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::max<std::size_t>(keep, 1)));
  std::sort(mask.indices.begin(), mask.indices.end());
  return mask;
}

MaskedField apply_mask(const Field& field, const ObservationMask& mask) {
  MaskedField out{Field(field.size(), 0.0), Field(field.size(), 0.0)};
  for (auto i : mask.indices) {
    out.values[i] = field.at(i);
    out.indicator[i] = 1.0;
  }
  return out;
}

std::size_t PairDataset::n_trajectories() const {
  return trajectory.empty() ? 0 : std::set<std::size_t>(trajectory.begin(), trajectory.end()).size();
}

const PairDataset& DatasetBundle::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::reg: return reg;
    case Split::test: return test;
  }
  return test;
}

namespace {

PairDataset build_split(const ks::KsConfig& cfg, const ks::EtdRk4Solver& solver, Split split, std::size_t count,
                        std::size_t horizon, std::size_t max_retries, const ObservationMask& mask) {
  PairDataset ds;
  ds.split = split;
  ds.n_points = cfg.n_points;
  ds.mask = mask;
  ds.inputs.reserve(count * horizon);
  ds.targets.reserve(count * horizon);
  for (std::size_t tr = 0; tr < count; ++tr) {
    ks::Trajectory traj;
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= max_retries && !ok; ++attempt) {
      const std::string label = to_string(split) + "/" + std::to_string(tr) + "/" + std::to_string(attempt);
      Rng rng(cfg.seed, label);
      try {
        traj = ks::simulate(cfg, solver, ks::random_initial_condition(cfg, rng), horizon);
        ok = true;
      } catch (const ks::BlowUpError&) {
      }
    }
    if (!ok) {
      throw std::runtime_error("KS trajectory " + std::to_string(tr) + " of split " + to_string(split) +
                               " blew up on every retry");
    }
    for (std::size_t t = 0; t < horizon; ++t) {
      ds.inputs.push_back(traj.states[t]);
      ds.targets.push_back(traj.states[t + 1]);
      ds.trajectory.push_back(tr);
      ds.time.push_back(t);
    }
  }
  return ds;
}

}  // namespace

DatasetBundle generate_dataset(const ks::KsConfig& cfg, const GenerateOptions& opts) {
  cfg.validate();
  if (opts.n_train < 1 || opts.n_reg < 1 || opts.n_test < 1) throw std::invalid_argument("split counts must be >= 1");
  const ks::EtdRk4Solver solver(cfg.n_points, cfg.domain_length, cfg.dt);
  const ObservationMask mask = make_mask(cfg.n_points, opts.observed_fraction, opts.mask_seed);
  DatasetBundle bundle;
  bundle.ks = cfg;
  bundle.n_train = opts.n_train;
  bundle.n_reg = opts.n_reg;
  bundle.n_test = opts.n_test;
  bundle.max_retries = opts.max_retries;
  bundle.train = build_split(cfg, solver, Split::train, opts.n_train, cfg.train_horizon, opts.max_retries, mask);
  bundle.reg = build_split(cfg, solver, Split::reg, opts.n_reg, cfg.train_horizon, opts.max_retries, mask);
  bundle.test = build_split(cfg, solver, Split::test, opts.n_test, cfg.test_horizon, opts.max_retries, mask);
  return bundle;
}

PairDataset first_trajectories(const PairDataset& ds, std::size_t n_traj) {
  if (n_traj < 1 || n_traj > ds.n_trajectories()) {
    throw std::invalid_argument("cannot keep " + std::to_string(n_traj) + " of " + std::to_string(ds.n_trajectories()) +
                                " trajectories");
  }
  PairDataset out;
  out.split = ds.split;
  out.n_points = ds.n_points;
  out.mask = ds.mask;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.trajectory[i] >= n_traj) continue;
    out.inputs.push_back(ds.inputs[i]);
    out.targets.push_back(ds.targets[i]);
    out.trajectory.push_back(ds.trajectory[i]);
    out.time.push_back(ds.time[i]);
  }
  return out;
}

void set_mask(DatasetBundle& bundle, const ObservationMask& mask) {
  if (mask.n_points != bundle.ks.n_points) throw std::invalid_argument("mask length differs from the grid");
  bundle.train.mask = mask;
  bundle.reg.mask = mask;
  bundle.test.mask = mask;
}

ad::Tensor model_input(const PairDataset& ds, const std::vector<std::size_t>& rows) {
  const std::size_t n = ds.n_points;
  ad::Tensor x(ad::Shape{rows.size(), n, 2});
  const auto indicator = ds.mask.indicator();
  auto& v = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Field& f = ds.inputs.at(rows[r]);
    for (std::size_t j = 0; j < n; ++j) {
      v[(r * n + j) * 2] = f[j] * indicator[j];
      v[(r * n + j) * 2 + 1] = indicator[j];
    }
  }
  return x;
}

ad::Tensor target_tensor(const PairDataset& ds, const std::vector<std::size_t>& rows) {
  const std::size_t n = ds.n_points;
  ad::Tensor y(ad::Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Field& f = ds.targets.at(rows[r]);
    std::copy(f.begin(), f.end(), y.values().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return y;
}

std::vector<double> target_weights(const PairDataset& ds, std::size_t batch) {
  const auto indicator = ds.mask.indicator();
  std::vector<double> w;
  w.reserve(batch * indicator.size());
  for (std::size_t r = 0; r < batch; ++r) w.insert(w.end(), indicator.begin(), indicator.end());
  return w;
}

// --- persistence -------------------------------------------------------------

namespace {

io::ArrayF64 stack_fields(const std::vector<Field>& fields, std::size_t n) {
  io::ArrayF64 a;
  a.shape = {fields.size(), n};
  a.values.reserve(fields.size() * n);
  for (const auto& f : fields) a.values.insert(a.values.end(), f.begin(), f.end());
  return a;
}

std::vector<Field> unstack_fields(const io::ArrayF64& a, const fs::path& path) {
  if (a.shape.size() != 2) throw io::FormatError("expected rank-2 field array in " + path.string());
  std::vector<Field> out(a.shape[0]);
  const std::size_t n = a.shape[1];
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].assign(a.values.begin() + static_cast<std::ptrdiff_t>(i * n), a.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  return out;
}

}  // namespace

void save_dataset(const DatasetBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  json files = json::array();
  json splits = json::object();
  for (Split s : {Split::train, Split::reg, Split::test}) {
    const PairDataset& ds = bundle.split(s);
    const std::string name = to_string(s);
    const fs::path inputs = dir / (name + "_inputs.f64");
    const fs::path targets = dir / (name + "_targets.f64");
    const fs::path mask = dir / (name + "_mask.i64");
    const fs::path index = dir / (name + "_index.i64");
    io::write_array(inputs, stack_fields(ds.inputs, ds.n_points));
    io::write_array(targets, stack_fields(ds.targets, ds.n_points));
    io::ArrayI64 m{{ds.mask.indices.size()}, {}};
    for (auto i : ds.mask.indices) m.values.push_back(static_cast<std::int64_t>(i));
    io::write_array(mask, m);
    io::ArrayI64 idx{{ds.size(), 2}, {}};
    for (std::size_t i = 0; i < ds.size(); ++i) {
      idx.values.push_back(static_cast<std::int64_t>(ds.trajectory[i]));
      idx.values.push_back(static_cast<std::int64_t>(ds.time[i]));
    }
    io::write_array(index, idx);
    json split_files = json::object();
    for (const auto& [role, path] : {std::pair{"inputs", inputs}, {"targets", targets}, {"mask", mask}, {"index", index}}) {
      split_files[role] = path.filename().string();
      files.push_back({{"path", path.filename().string()}, {"digest", io::file_digest(path)}});
    }
    splits[name] = {{"trajectories", ds.n_trajectories()}, {"pairs", ds.size()},
                    {"horizon", s == Split::test ? bundle.ks.test_horizon : bundle.ks.train_horizon},
                    {"files", split_files}};
  }
  json manifest = {
      {"format", "xreg-dataset/1"},
      {"ks", serialize::to_json(bundle.ks)},
      {"split_sizes", {{"train", bundle.n_train}, {"reg", bundle.n_reg}, {"test", bundle.n_test}}},
      {"split_size_unit", "trajectories"},
      {"max_retries", bundle.max_retries},
      {"mask",
       {{"observed_fraction", bundle.train.mask.observed_fraction},
        {"seed", bundle.train.mask.seed},
        {"observed_points", bundle.train.mask.observed()}}},
      {"seeds", {{"trajectories", bundle.ks.seed}, {"mask", bundle.train.mask.seed}}},
      {"splits", splits},
      {"files", files},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw io::FormatError("cannot write " + (dir / "manifest.json").string());
}

DatasetBundle load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw io::FormatError("missing dataset manifest in " + dir.string());
  json manifest = json::parse(in);
  if (manifest.value("format", "") != "xreg-dataset/1") throw io::FormatError("unknown dataset format in " + dir.string());
  DatasetBundle bundle;
  bundle.ks = serialize::ks_from_json(manifest.at("ks"));
  bundle.n_train = manifest.at("split_sizes").at("train");
  bundle.n_reg = manifest.at("split_sizes").at("reg");
  bundle.n_test = manifest.at("split_sizes").at("test");
  bundle.max_retries = manifest.value("max_retries", std::size_t{10});
  for (const auto& f : manifest.at("files")) {
    const fs::path p = dir / f.at("path").get<std::string>();
    if (io::file_digest(p) != f.at("digest").get<std::string>()) throw io::FormatError("digest mismatch for " + p.string());
  }
  const double fraction = manifest.at("mask").at("observed_fraction");
  const std::uint64_t mask_seed = manifest.at("mask").at("seed");
  for (Split s : {Split::train, Split::reg, Split::test}) {
    const std::string name = to_string(s);
    const json& files = manifest.at("splits").at(name).at("files");
    PairDataset ds;
    ds.split = s;
    ds.n_points = bundle.ks.n_points;
    const fs::path inputs = dir / files.at("inputs").get<std::string>();
    const fs::path targets = dir / files.at("targets").get<std::string>();
    ds.inputs = unstack_fields(io::read_f64(inputs), inputs);
    ds.targets = unstack_fields(io::read_f64(targets), targets);
    const auto m = io::read_i64(dir / files.at("mask").get<std::string>());
    ds.mask.observed_fraction = fraction;
    ds.mask.seed = mask_seed;
    ds.mask.n_points = ds.n_points;
    for (auto v : m.values) ds.mask.indices.push_back(static_cast<std::size_t>(v));
    const auto idx = io::read_i64(dir / files.at("index").get<std::string>());
    for (std::size_t i = 0; i + 1 < idx.values.size(); i += 2) {
      ds.trajectory.push_back(static_cast<std::size_t>(idx.values[i]));
      ds.time.push_back(static_cast<std::size_t>(idx.values[i + 1]));
    }
    if (ds.inputs.size() != ds.targets.size() || ds.trajectory.size() != ds.inputs.size()) {
      throw io::FormatError("inconsistent pair counts for split " + name);
    }
    switch (s) {
      case Split::train: bundle.train = std::move(ds); break;
      case Split::reg: bundle.reg = std::move(ds); break;
      case Split::test: bundle.test = std::move(ds); break;
    }
  }
  return bundle;
}

}  // namespace xreg::data
