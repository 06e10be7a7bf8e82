#include "xreg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "xreg/array_io.hpp"
#include "xreg/objectives.hpp"
#include "xreg/serialize.hpp"

namespace xreg::train {

namespace fs = std::filesystem;
using ad::Tensor;
using nlohmann::json;

double TimingRecord::c_train() const { return train_steps == 0 ? 0.0 : train_seconds / static_cast<double>(train_steps); }
double TimingRecord::c_reg() const { return reg_steps == 0 ? 0.0 : reg_seconds / static_cast<double>(reg_steps); }

double TimingRecord::overhead_estimate() const {
  const double ct = c_train();
  return ct > 0.0 ? train::overhead_estimate(k_reg, c_reg() / ct) : 1.0;
}

double overhead_estimate(std::size_t k_reg, double cost_ratio) {
  if (k_reg < 1) throw std::invalid_argument("k_reg must be >= 1");
  if (!(cost_ratio >= 0.0)) throw std::invalid_argument("cost ratio must be nonnegative");
  return 1.0 + cost_ratio / static_cast<double>(k_reg);
}

GroupRates rates_from(const TrainConfig& cfg) {
  return GroupRates{cfg.lr_theta_psi, cfg.lr_psi_internal, cfg.lr_rho_internal, cfg.lr_rho_head};
}

// --- single steps ----------------------------------------------------------

Batch make_batch(const data::PairDataset& ds, const std::vector<std::size_t>& rows) {
  Batch b;
  b.x = data::model_input(ds, rows);
  b.y = ad::reshape(data::target_tensor(ds, rows), {rows.size() * ds.n_points});
  b.weights = data::target_weights(ds, rows.size());
  return b;
}

std::vector<std::size_t> sample_rows(std::size_t n_pairs, std::size_t batch, Rng& rng) {
  if (n_pairs == 0) throw std::invalid_argument("cannot sample a batch from an empty split");
  std::vector<std::size_t> rows(batch);
  for (auto& r : rows) r = rng.index(n_pairs);
  return rows;
}

namespace {

// Per-sample moments flattened to [S, B * n].
struct SampledMoments {
  Tensor mu, var_pred, var_gen;
};

Tensor variance(const Tensor& log_sigma) { return ad::exp(ad::scale(log_sigma, 2.0)); }

SampledMoments sampled_moments(const fno::Model& model, const Tensor& x, std::size_t samples, Rng& noise) {
  const std::size_t batch = x.dim(0), n = x.dim(1);
  SampledMoments m;
  if (model.config().head_mode == fno::HeadMode::head_only) {
    const auto pm = model.forward(x);
    m.mu = ad::reshape(pm.mu, {1, batch * n});
    m.var_pred = ad::reshape(variance(pm.log_sigma_pred), {1, batch * n});
    m.var_gen = ad::reshape(variance(pm.log_sigma_gen), {1, batch * n});
    return m;
  }
  const Tensor xs = samples > 1 ? ad::repeat_batch(x, samples) : x;
  const auto omega = model.sample_noise(samples * batch, n, noise);
  const auto pm = model.forward(xs, &omega);
  m.mu = ad::reshape(pm.mu, {samples, batch * n});
  m.var_pred = ad::reshape(variance(pm.log_sigma_pred), {samples, batch * n});
  return m;
}

template <typename LossFn>
double descend(fno::Model& model, LossFn loss_fn, const std::function<void()>& update) {
  model.zero_grad();
  ad::Tape tape;
  double value = 0.0;
  try {
    ad::TapeScope scope(tape);
    const Tensor loss = loss_fn();
    value = loss.item();
    if (!std::isfinite(value)) throw TrainingDiverged(0, "non-finite loss");
    tape.backward(loss);
  } catch (const fno::NonFiniteError& e) {
    throw TrainingDiverged(0, e.what());
  } catch (const obj::NumericalGuardError& e) {
    throw TrainingDiverged(0, e.what());
  }
  update();
  model.zero_grad();
  return value;
}

}  // namespace

Tensor xreg_train_loss(const fno::Model& model, const Batch& b, std::size_t samples, Rng& noise) {
  const auto m = sampled_moments(model, b.x, samples, noise);
  return obj::train_nll_hierarchical(m.mu, m.var_pred, m.var_gen, b.y, b.weights);
}

Tensor xreg_reg_loss(const fno::Model& model, const Batch& b, std::size_t samples, RegObjective objective, Rng& noise) {
  const auto m = sampled_moments(model, b.x, samples, noise);
  const Tensor var = m.var_gen.defined() ? ad::add(m.var_pred, m.var_gen) : m.var_pred;
  const obj::MixtureBatch batch{m.mu, var, b.y, b.weights};
  return objective == RegObjective::mixture ? obj::reg_nll_mixture(batch) : obj::reg_nll_moment_matched(batch).loss;
}

double train_step(fno::Model& model, Optimizer& opt, const Batch& b, std::size_t samples, Rng& noise) {
  return descend(
      model, [&] { return xreg_train_loss(model, b, samples, noise); }, [&] { opt.step(RouteGroup::train); });
}

double reg_step(fno::Model& model, Optimizer& opt, const Batch& b, std::size_t samples, RegObjective objective, Rng& noise) {
  return descend(
      model, [&] { return xreg_reg_loss(model, b, samples, objective, noise); },
      [&] {
        opt.step(RouteGroup::rho_internal);
        opt.step(RouteGroup::rho_head);
      });
}

double baseline_step(fno::Model& model, Optimizer& opt, const Batch& b, double dropout_p, Rng& noise) {
  return descend(
      model,
      [&] {
        const std::size_t p = b.y.size();
        const auto pm = dropout_p > 0.0 ? model.dropout_forward(b.x, dropout_p, noise) : model.forward(b.x);
        return obj::train_nll_hierarchical(ad::reshape(pm.mu, {1, p}), ad::reshape(variance(pm.log_sigma_pred), {1, p}), Tensor(),
                                           b.y, b.weights);
      },
      [&] { opt.step(RouteGroup::train); });
}

// --- prediction --------------------------------------------------------------

namespace {

SampleBlock to_block(std::size_t samples, const Tensor& mu, const Tensor& log_sigma_pred, const Tensor* log_sigma_gen) {
  SampleBlock b;
  b.samples = samples;
  b.mu = mu.values();
  b.var_pred.reserve(log_sigma_pred.size());
  for (double v : log_sigma_pred.values()) b.var_pred.push_back(std::exp(2.0 * v));
  if (log_sigma_gen) {
    for (double v : log_sigma_gen->values()) b.var_gen.push_back(std::exp(2.0 * v));
  }
  return b;
}

}  // namespace

Sampler xreg_sampler(const fno::Model& model, std::size_t samples) {
  return [&model, samples](const Tensor& x, Rng& rng) {
    ad::NoGradScope no_grad;
    if (model.config().head_mode == fno::HeadMode::head_only) {
      const auto pm = model.forward(x);
      return to_block(1, pm.mu, pm.log_sigma_pred, &pm.log_sigma_gen);
    }
    const auto omega = model.sample_noise(samples * x.dim(0), x.dim(1), rng);
    const auto pm = model.forward(ad::repeat_batch(x, samples), &omega);
    return to_block(samples, pm.mu, pm.log_sigma_pred, nullptr);
  };
}

Sampler dropout_sampler(const fno::Model& model, double p, std::size_t samples) {
  return [&model, p, samples](const Tensor& x, Rng& rng) {
    ad::NoGradScope no_grad;
    const auto pm = model.dropout_forward(ad::repeat_batch(x, samples), p, rng);
    return to_block(samples, pm.mu, pm.log_sigma_pred, nullptr);
  };
}

Sampler ensemble_sampler(std::vector<const fno::Model*> members) {
  if (members.empty()) throw std::invalid_argument("ensemble needs at least one member");
  return [members](const Tensor& x, Rng&) {
    ad::NoGradScope no_grad;
    SampleBlock out;
    out.samples = members.size();
    for (const auto* m : members) {
      const auto pm = m->forward(x);
      const auto b = to_block(1, pm.mu, pm.log_sigma_pred, nullptr);
      out.mu.insert(out.mu.end(), b.mu.begin(), b.mu.end());
      out.var_pred.insert(out.var_pred.end(), b.var_pred.begin(), b.var_pred.end());
    }
    return out;
  };
}

metrics::MixturePrediction predict(const Sampler& sampler, const data::PairDataset& ds, const std::vector<std::size_t>& rows,
                                   Rng& rng) {
  constexpr std::size_t kChunk = 16;
  const std::size_t n = ds.n_points;
  std::vector<SampleBlock> blocks;
  for (std::size_t at = 0; at < rows.size(); at += kChunk) {
    const std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(at),
                                         rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), at + kChunk)));
    blocks.push_back(sampler(data::model_input(ds, chunk), rng));
    if (blocks.back().samples != blocks.front().samples) throw std::logic_error("sampler changed its sample count");
  }
  metrics::MixturePrediction pred;
  pred.points = rows.size() * n;
  pred.samples = blocks.empty() ? 1 : blocks.front().samples;
  const bool head = !blocks.empty() && !blocks.front().var_gen.empty();
  pred.mu.reserve(pred.samples * pred.points);
  for (std::size_t s = 0; s < pred.samples; ++s) {
    for (const auto& b : blocks) {
      const std::size_t width = b.mu.size() / b.samples;
      const auto from = static_cast<std::ptrdiff_t>(s * width), to = static_cast<std::ptrdiff_t>((s + 1) * width);
      pred.mu.insert(pred.mu.end(), b.mu.begin() + from, b.mu.begin() + to);
      pred.var_pred.insert(pred.var_pred.end(), b.var_pred.begin() + from, b.var_pred.begin() + to);
      if (head) pred.var_gen.insert(pred.var_gen.end(), b.var_gen.begin() + from, b.var_gen.begin() + to);
    }
  }
  pred.y = data::target_tensor(ds, rows).values();
  pred.weights = data::target_weights(ds, rows.size());
  return pred;
}

std::vector<std::size_t> eval_rows(const data::PairDataset& ds, std::size_t max_pairs) {
  std::vector<std::size_t> rows;
  if (max_pairs == 0 || ds.size() <= max_pairs) {
    for (std::size_t i = 0; i < ds.size(); ++i) rows.push_back(i);
    return rows;
  }
  const double stride = static_cast<double>(ds.size()) / static_cast<double>(max_pairs);
  for (std::size_t i = 0; i < max_pairs; ++i) rows.push_back(static_cast<std::size_t>(std::floor(i * stride)));
  return rows;
}

EvalRecord evaluate(const Sampler& sampler, const data::PairDataset& ds, const std::vector<std::size_t>& rows, Rng& rng) {
  const auto pred = predict(sampler, ds, rows, rng);
  EvalRecord r;
  r.pairs = rows.size();
  r.calibration = metrics::calibrate(pred);
  const bool head = !pred.var_gen.empty();
  if (head || pred.samples >= 2) {
    const auto u = metrics::decompose_uncertainty(pred);
    r.mean_std_mu = metrics::mean_std_mu(pred, u);
    double sp = 0.0, lg = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < pred.points; ++p) {
      if (!pred.observed(p)) continue;
      sp += std::sqrt(u.u_pred[p]);
      if (head) lg += 0.5 * std::log(u.u_gen[p]);
      ++count;
    }
    if (count > 0) {
      r.mean_sigma_pred = sp / static_cast<double>(count);
      r.mean_log_sigma_gen_head = lg / static_cast<double>(count);
    }
  }
  return r;
}

metrics::SpatialMaps spatial_maps(const Sampler& sampler, const data::PairDataset& test, std::size_t steps, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.trajectory[i] == 0) order.emplace_back(test.time[i], i);
  std::sort(order.begin(), order.end());
  if (order.size() > steps) order.resize(steps);
  std::vector<std::size_t> rows;
  for (const auto& [t, i] : order) rows.push_back(i);
  const auto pred = predict(sampler, test, rows, rng);
  return metrics::spatial_diagnostics(pred, rows.size(), test.n_points);
}

// --- runs --------------------------------------------------------------------

data::DatasetBundle prepare_data(const data::DatasetBundle& stored, const DataConfig& cfg) {
  data::DatasetBundle out = stored;
  if (cfg.observed_fraction || cfg.mask_seed) {
    const double fraction = cfg.observed_fraction.value_or(stored.train.mask.observed_fraction);
    const std::uint64_t seed = cfg.mask_seed.value_or(stored.train.mask.seed);
    data::set_mask(out, data::make_mask(stored.ks.n_points, fraction, seed));
  }
  if (cfg.train_trajectories > 0) {
    out.train = data::first_trajectories(out.train, cfg.train_trajectories);
    out.n_train = cfg.train_trajectories;
  }
  return out;
}

std::string metrics_header(const ExperimentConfig& cfg) {
  std::string h =
      "step,train_loss,reg_loss,loss_gap,reg_nll_mc,test_nll_mc,reg_ece_mix,test_ece_mix,mean_std_mu,mean_sigma_pred";
  if (cfg.method == Method::xreg) {
    if (cfg.model.head_mode == fno::HeadMode::head_only) {
      h += ",log_sigma_gen_head";
    } else {
      for (std::size_t l = 0; l < cfg.model.n_layers; ++l) h += ",log_sigma_gen_layer" + std::to_string(l);
      h += ",log_sigma_gen_prehead";
    }
  }
  return h;
}

namespace {

struct Learner {
  std::uint64_t seed;
  fno::Model model;
  Optimizer opt;
  Rng batch_rng, reg_rng, noise_rng;

  Learner(const ExperimentConfig& cfg, std::uint64_t s)
      : seed(s),
        model(cfg.model, derive_seed(s, "model")),
        opt(model, rates_from(cfg.train)),
        batch_rng(s, "train-batches"),
        reg_rng(s, "reg-batches"),
        noise_rng(s, "noise") {}
};

std::vector<std::uint64_t> learner_seeds(const ExperimentConfig& cfg) {
  if (cfg.method != Method::deep_ensemble) return {cfg.train.seed};
  std::vector<std::uint64_t> seeds;
  for (std::size_t m = 0; m < cfg.baseline.ensemble_members; ++m) {
    seeds.push_back(derive_seed(cfg.train.seed, "member/" + std::to_string(m)));
  }
  return seeds;
}

Sampler make_sampler(const ExperimentConfig& cfg, const std::vector<const fno::Model*>& models) {
  switch (cfg.method) {
    case Method::xreg: return xreg_sampler(*models.front(), cfg.train.eval_samples);
    case Method::mc_dropout: return dropout_sampler(*models.front(), cfg.baseline.dropout_p, cfg.train.eval_samples);
    case Method::deep_ensemble: return ensemble_sampler(models);
  }
  throw std::logic_error("unknown method");
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(12) << v;
  return s.str();
}

json eval_to_json(const EvalRecord& r) {
  return {{"coverage", r.calibration.coverage}, {"alphas", r.calibration.alphas},   {"ece_mix", r.calibration.ece_mix},
          {"nll_mc", r.calibration.nll_mc},     {"mean_std_mu", r.mean_std_mu},     {"mean_sigma_pred", r.mean_sigma_pred},
          {"mean_log_sigma_gen_head", r.mean_log_sigma_gen_head}, {"pairs", r.pairs}};
}

EvalRecord eval_from_json(const json& j) {
  EvalRecord r;
  r.calibration.coverage = j.at("coverage").get<std::vector<double>>();
  r.calibration.alphas = j.at("alphas").get<std::vector<double>>();
  r.calibration.ece_mix = j.at("ece_mix");
  r.calibration.nll_mc = j.at("nll_mc");
  r.mean_std_mu = j.at("mean_std_mu");
  r.mean_sigma_pred = j.at("mean_sigma_pred");
  r.mean_log_sigma_gen_head = j.at("mean_log_sigma_gen_head");
  r.pairs = j.at("pairs");
  return r;
}

// NaN survives the round trip as null.
json nan_safe(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double from_nan_safe(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

json row_to_json(const MetricsRow& r) {
  return {{"step", r.step},          {"train_loss", nan_safe(r.train_loss)}, {"reg_loss", nan_safe(r.reg_loss)},
          {"reg", eval_to_json(r.reg)}, {"test", eval_to_json(r.test)},        {"log_sigma_gen", r.log_sigma_gen}};
}

MetricsRow row_from_json(const json& j) {
  MetricsRow r;
  r.step = j.at("step");
  r.train_loss = from_nan_safe(j.at("train_loss"));
  r.reg_loss = from_nan_safe(j.at("reg_loss"));
  r.reg = eval_from_json(j.at("reg"));
  r.test = eval_from_json(j.at("test"));
  r.log_sigma_gen = j.at("log_sigma_gen").get<std::vector<double>>();
  return r;
}

json timing_to_json(const TimingRecord& t) {
  return {{"k_reg", t.k_reg},
          {"train_steps", t.train_steps},
          {"reg_steps", t.reg_steps},
          {"train_seconds", t.train_seconds},
          {"reg_seconds", t.reg_seconds},
          {"c_train", t.c_train()},
          {"c_reg", t.c_reg()},
          {"overhead_estimate", t.overhead_estimate()}};
}

TimingRecord timing_from_json(const json& j) {
  TimingRecord t;
  t.k_reg = j.at("k_reg");
  t.train_steps = j.at("train_steps");
  t.reg_steps = j.at("reg_steps");
  t.train_seconds = j.at("train_seconds");
  t.reg_seconds = j.at("reg_seconds");
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << text;
    if (!out) throw io::FormatError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

void write_metrics(const fs::path& dir, const ExperimentConfig& cfg, const std::vector<MetricsRow>& history) {
  std::ostringstream m;
  m << metrics_header(cfg) << '\n';
  for (const auto& r : history) {
    m << r.step << ',' << num(r.train_loss) << ',' << num(r.reg_loss) << ',' << num(r.reg_loss - r.train_loss) << ','
      << num(r.reg.calibration.nll_mc) << ',' << num(r.test.calibration.nll_mc) << ',' << num(r.reg.calibration.ece_mix) << ','
      << num(r.test.calibration.ece_mix) << ',' << num(r.test.mean_std_mu) << ',' << num(r.test.mean_sigma_pred);
    if (cfg.method == Method::xreg) {
      if (cfg.model.head_mode == fno::HeadMode::head_only) {
        m << ',' << num(r.test.mean_log_sigma_gen_head);
      } else {
        for (double v : r.log_sigma_gen) m << ',' << num(v);
      }
    }
    m << '\n';
  }
  write_text(dir / "metrics.csv", m.str());

  std::ostringstream c;
  c << "step,split,alpha,coverage\n";
  for (const auto& r : history) {
    for (const auto& [split, rec] : {std::pair<const char*, const EvalRecord*>{"reg", &r.reg}, {"test", &r.test}}) {
      for (std::size_t i = 0; i < rec->calibration.alphas.size(); ++i) {
        c << r.step << ',' << split << ',' << num(rec->calibration.alphas[i]) << ',' << num(rec->calibration.coverage[i]) << '\n';
      }
    }
  }
  write_text(dir / "calibration_curve.csv", c.str());
}

void write_spatial(const fs::path& dir, const metrics::SpatialMaps& maps) {
  std::ostringstream s;
  s << "t,x,truth,abs_error,std_mu,total_std\n";
  for (std::size_t t = 0; t < maps.steps; ++t) {
    for (std::size_t x = 0; x < maps.n_points; ++x) {
      const std::size_t i = t * maps.n_points + x;
      s << t << ',' << x << ',' << num(maps.truth[i]) << ',' << num(maps.abs_error[i]) << ',' << num(maps.std_mu[i]) << ','
        << num(maps.total_std[i]) << '\n';
    }
  }
  write_text(dir / "spatial_maps.csv", s.str());
  const json meta = {{"steps", maps.steps},
                     {"n_points", maps.n_points},
                     {"color_range", {maps.range_lo, maps.range_hi}},
                     {"color_range_source", "total_std"},
                     {"shared_panels", {"abs_error", "std_mu", "total_std"}},
                     {"spearman_abs_error_total_std", nan_safe(maps.spearman_error_total)}};
  write_text(dir / "spatial_maps.json", meta.dump(2) + '\n');
}

json run_config_json(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const data::DatasetBundle& data,
                     const json& provenance) {
  return {{"format", "xreg-run-config/1"},
          {"config", serialize::to_json(cfg)},
          {"seeds",
           {{"train", cfg.train.seed},
            {"learners", seeds},
            {"mask", data.train.mask.seed},
            {"trajectories", data.ks.seed}}},
          {"mask", {{"observed_fraction", data.train.mask.observed_fraction}, {"observed_points", data.train.mask.observed()}}},
          {"train_trajectories", data.train.n_trajectories()},
          {"code_digest", code_digest()},
          {"provenance", provenance}};
}

void save_state(const fs::path& run_dir, std::vector<std::unique_ptr<Learner>>& learners, std::size_t step,
                const std::vector<MetricsRow>& history, const TimingRecord& timing, std::size_t reg_updates) {
  const fs::path next = run_dir / "checkpoint.next";
  fs::remove_all(next);
  fs::create_directories(next);
  json state = {{"format", "xreg-trainer-state/1"}, {"step", step}, {"reg_updates", reg_updates},
                {"timing", timing_to_json(timing)}, {"learners", json::array()}, {"history", json::array()}};
  for (std::size_t m = 0; m < learners.size(); ++m) {
    auto& L = *learners[m];
    const std::string name = "member" + std::to_string(m);
    fno::save_checkpoint(L.model, next / name, step);
    const auto opt_state = L.opt.export_state();
    io::write_array(next / name / "optimizer.f64", io::ArrayF64{{opt_state.size()}, opt_state});
    state["learners"].push_back({{"seed", L.seed},
                                 {"dir", name},
                                 {"batch_rng", L.batch_rng.state()},
                                 {"reg_rng", L.reg_rng.state()},
                                 {"noise_rng", L.noise_rng.state()}});
  }
  for (const auto& r : history) state["history"].push_back(row_to_json(r));
  write_text(next / "trainer_state.json", state.dump() + '\n');
  const fs::path cur = run_dir / "checkpoint", prev = run_dir / "checkpoint.prev";
  fs::remove_all(prev);
  if (fs::exists(cur)) fs::rename(cur, prev);
  fs::rename(next, cur);
  fs::remove_all(prev);
}

fs::path find_checkpoint(const fs::path& run_dir) {
  for (const char* name : {"checkpoint", "checkpoint.prev"}) {
    if (fs::exists(run_dir / name / "trainer_state.json")) return run_dir / name;
  }
  return {};
}

struct Resumed {
  std::size_t step = 0;
  std::size_t reg_updates = 0;
  TimingRecord timing;
  std::vector<MetricsRow> history;
};

Resumed load_state(const fs::path& ckpt, std::vector<std::unique_ptr<Learner>>& learners) {
  std::ifstream in(ckpt / "trainer_state.json");
  const json state = json::parse(in);
  if (state.value("format", "") != "xreg-trainer-state/1") throw io::FormatError("unknown trainer state format");
  if (state.at("learners").size() != learners.size()) throw io::FormatError("trainer state has a different learner count");
  Resumed r;
  r.step = state.at("step");
  r.reg_updates = state.at("reg_updates");
  r.timing = timing_from_json(state.at("timing"));
  for (const auto& h : state.at("history")) r.history.push_back(row_from_json(h));
  for (std::size_t m = 0; m < learners.size(); ++m) {
    auto& L = *learners[m];
    const json& s = state.at("learners")[m];
    const fs::path dir = ckpt / s.at("dir").get<std::string>();
    auto loaded = fno::load_checkpoint(dir);
    L.model.unflatten(loaded.model.flatten());
    L.opt.import_state(io::read_f64(dir / "optimizer.f64").values);
    L.batch_rng.restore(s.at("batch_rng"));
    L.reg_rng.restore(s.at("reg_rng"));
    L.noise_rng.restore(s.at("noise_rng"));
  }
  return r;
}

std::string concat_digests(const fno::Model& model, bool train_side) {
  std::string s;
  for (fno::Group g : {fno::Group::theta, fno::Group::psi, fno::Group::rho_internal, fno::Group::rho_head}) {
    if (fno::train_routed(g) == train_side) s += model.group_digest(g);
  }
  return s;
}

void write_manifest(const fs::path& run_dir, const ExperimentConfig& cfg, const RunResult& result, const std::string& started,
                    const json& provenance) {
  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    files.push_back({{"path", fs::relative(p, run_dir).generic_string()}, {"digest", io::file_digest(p)}, {"bytes", fs::file_size(p)}});
  }
  const auto& f = result.final();
  json manifest = {{"format", "xreg-run/1"},
                   {"method", to_string(cfg.method)},
                   {"code_digest", code_digest()},
                   {"provenance", provenance},
                   {"seeds", {{"train", cfg.train.seed}}},
                   {"started_at", started},
                   {"finished_at", utc_now()},
                   {"steps", f.step},
                   {"reg_updates", result.reg_updates},
                   {"resumed_from", result.resumed_from},
                   {"timing", timing_to_json(result.timing)},
                   {"final",
                    {{"test_nll_mc", f.test.calibration.nll_mc},
                     {"test_ece_mix", f.test.calibration.ece_mix},
                     {"reg_nll_mc", f.reg.calibration.nll_mc},
                     {"reg_ece_mix", f.reg.calibration.ece_mix},
                     {"mean_std_mu", f.test.mean_std_mu},
                     {"test_pairs", f.test.pairs}}},
                   {"spatial_maps", {{"spearman_abs_error_total_std", nan_safe(result.maps.spearman_error_total)}}},
                   {"files", files}};
  write_text(run_dir / "manifest.json", manifest.dump(2) + '\n');
}

RunResult run_loop(const data::DatasetBundle& stored, const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const data::DatasetBundle data = prepare_data(stored, cfg.data);
  const TrainConfig& tc = cfg.train;
  const bool xreg = cfg.method == Method::xreg;
  const std::string started = utc_now();

  std::vector<std::unique_ptr<Learner>> learners;
  const auto seeds = learner_seeds(cfg);
  for (auto s : seeds) learners.push_back(std::make_unique<Learner>(cfg, s));
  std::vector<const fno::Model*> models;
  for (const auto& L : learners) models.push_back(&L->model);
  const Sampler sampler = make_sampler(cfg, models);

  RunResult result;
  result.timing.k_reg = tc.k_reg;
  std::size_t start = 0;
  const bool persist = !options.run_dir.empty();
  const json provenance = options.provenance;
  if (persist) {
    fs::create_directories(options.run_dir);
    const json config = run_config_json(cfg, seeds, data, provenance);
    const fs::path config_path = options.run_dir / "config.json";
    const fs::path ckpt = find_checkpoint(options.run_dir);
    if (options.resume && !ckpt.empty()) {
      std::ifstream in(config_path);
      const json existing = in ? json::parse(in) : json();
      if (existing.is_null() || existing.at("config") != config.at("config") || existing.at("seeds") != config.at("seeds")) {
        throw std::invalid_argument("run directory " + options.run_dir.string() + " holds a run with a different configuration");
      }
      if (existing.at("code_digest") != code_digest()) {
        throw std::invalid_argument("run directory " + options.run_dir.string() + " was written by a different build");
      }
      auto r = load_state(ckpt, learners);
      start = r.step;
      result.reg_updates = r.reg_updates;
      result.timing = r.timing;
      result.history = std::move(r.history);
      result.resumed_from = start;
    } else {
      fs::remove_all(options.run_dir / "checkpoint");
      fs::remove_all(options.run_dir / "checkpoint.prev");
      write_text(config_path, config.dump(2) + '\n');
    }
  }

  double train_acc = 0.0, reg_acc = 0.0;
  std::size_t train_n = 0, reg_n = 0;
  using clock = std::chrono::steady_clock;
  const auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };

  for (std::size_t t = start + 1; t <= tc.total_steps; ++t) {
    try {
      for (auto& Lp : learners) {
        Learner& L = *Lp;
        const Batch b = make_batch(data.train, sample_rows(data.train.size(), tc.batch_size, L.batch_rng));
        const std::string before = options.audit_routing ? concat_digests(L.model, false) : "";
        const auto t0 = clock::now();
        const double loss = xreg ? train_step(L.model, L.opt, b, tc.samples, L.noise_rng)
                                 : baseline_step(L.model, L.opt, b,
                                                 cfg.method == Method::mc_dropout ? cfg.baseline.dropout_p : 0.0, L.noise_rng);
        result.timing.train_seconds += seconds(t0, clock::now());
        ++result.timing.train_steps;
        if (options.audit_routing && concat_digests(L.model, false) != before) {
          throw RoutingViolation("train update at step " + std::to_string(t) + " wrote a rho parameter");
        }
        train_acc += loss;
        ++train_n;
        if (options.on_step) options.on_step(StepEvent{t, StepKind::train, loss, L.model});
      }
      if (xreg && tc.reg_updates && t % tc.k_reg == 0) {
        Learner& L = *learners.front();
        const Batch b = make_batch(data.reg, sample_rows(data.reg.size(), tc.batch_size, L.reg_rng));
        const std::string before = options.audit_routing ? concat_digests(L.model, true) : "";
        const auto t0 = clock::now();
        const double loss = reg_step(L.model, L.opt, b, tc.samples, tc.reg_objective, L.noise_rng);
        result.timing.reg_seconds += seconds(t0, clock::now());
        ++result.timing.reg_steps;
        if (options.audit_routing && concat_digests(L.model, true) != before) {
          throw RoutingViolation("regularization update at step " + std::to_string(t) + " wrote a theta/psi parameter");
        }
        ++result.reg_updates;
        reg_acc += loss;
        ++reg_n;
        if (options.on_step) options.on_step(StepEvent{t, StepKind::reg, loss, L.model});
      }
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged(t, "training diverged at step " + std::to_string(t) + ": " + e.what());
    }

    if (t % tc.eval_interval != 0 && t != tc.total_steps) continue;
    const bool final = t == tc.total_steps;
    const std::size_t max_pairs = final ? tc.final_eval_max_pairs : tc.eval_max_pairs;
    MetricsRow row;
    row.step = t;
    row.train_loss = train_n ? train_acc / static_cast<double>(train_n) : std::numeric_limits<double>::quiet_NaN();
    row.reg_loss = reg_n ? reg_acc / static_cast<double>(reg_n) : std::numeric_limits<double>::quiet_NaN();
    train_acc = reg_acc = 0.0;
    train_n = reg_n = 0;
    Rng reg_eval(tc.seed, "eval/" + std::to_string(t) + "/reg");
    Rng test_eval(tc.seed, "eval/" + std::to_string(t) + "/test");
    row.reg = evaluate(sampler, data.reg, eval_rows(data.reg, max_pairs), reg_eval);
    row.test = evaluate(sampler, data.test, eval_rows(data.test, max_pairs), test_eval);
    if (!std::isfinite(row.test.calibration.nll_mc) || !std::isfinite(row.reg.calibration.nll_mc)) {
      throw TrainingDiverged(t, "non-finite evaluation NLL at step " + std::to_string(t));
    }
    if (xreg) row.log_sigma_gen = learners.front()->model.latent_log_scales();
    result.history.push_back(row);
    if (options.on_eval) options.on_eval(row);
    if (persist) {
      write_metrics(options.run_dir, cfg, result.history);
      save_state(options.run_dir, learners, t, result.history, result.timing, result.reg_updates);
    }
  }

  if (result.history.empty()) throw std::logic_error("run finished without an evaluation");
  const bool head_only = xreg && cfg.model.head_mode == fno::HeadMode::head_only;
  const std::size_t components = cfg.method == Method::deep_ensemble ? learners.size() : tc.eval_samples;
  if (head_only || components >= 2) {
    Rng maps_rng(tc.seed, "spatial-maps");
    result.maps = spatial_maps(sampler, data.test, tc.spatial_segment, maps_rng);
  }
  if (persist) {
    write_metrics(options.run_dir, cfg, result.history);
    if (options.write_spatial_maps && result.maps.steps > 0) write_spatial(options.run_dir, result.maps);
    write_manifest(options.run_dir, cfg, result, started, provenance);
  }
  return result;
}

}  // namespace

RunResult run(const data::DatasetBundle& stored, const ExperimentConfig& cfg, const RunOptions& options) {
  return run_loop(stored, cfg, options);
}

RunResult run_xreg(const data::DatasetBundle& stored, const ExperimentConfig& cfg, const RunOptions& options) {
  ExperimentConfig c = cfg;
  c.method = Method::xreg;
  return run_loop(stored, c, options);
}

RunResult run_mc_dropout(const data::DatasetBundle& stored, const ExperimentConfig& cfg, const RunOptions& options) {
  ExperimentConfig c = cfg;
  c.method = Method::mc_dropout;
  return run_loop(stored, c, options);
}

RunResult run_deep_ensemble(const data::DatasetBundle& stored, const ExperimentConfig& cfg, const RunOptions& options) {
  ExperimentConfig c = cfg;
  c.method = Method::deep_ensemble;
  return run_loop(stored, c, options);
}

EvalRecord evaluate_run(const fs::path& run_dir, const data::DatasetBundle& stored, data::Split split, std::size_t max_pairs) {
  std::ifstream in(run_dir / "config.json");
  if (!in) throw io::FormatError("missing config.json in " + run_dir.string());
  const json config = json::parse(in);
  const ExperimentConfig cfg = serialize::experiment_from_json(config.at("config"));
  const data::DatasetBundle data = prepare_data(stored, cfg.data);
  const fs::path ckpt = find_checkpoint(run_dir);
  if (ckpt.empty()) throw io::FormatError("no checkpoint in " + run_dir.string());
  std::vector<fno::Model> owned;
  for (std::size_t m = 0;; ++m) {
    const fs::path dir = ckpt / ("member" + std::to_string(m));
    if (!fs::exists(dir / "checkpoint.json")) break;
    owned.push_back(fno::load_checkpoint(dir).model);
  }
  if (owned.empty()) throw io::FormatError("checkpoint in " + run_dir.string() + " holds no model");
  std::vector<const fno::Model*> models;
  for (const auto& m : owned) models.push_back(&m);
  const Sampler sampler = make_sampler(cfg, models);
  Rng rng(cfg.train.seed, "rescore/" + data::to_string(split));
  const auto& ds = data.split(split);
  return evaluate(sampler, ds, eval_rows(ds, max_pairs), rng);
}

}  // namespace xreg::train
