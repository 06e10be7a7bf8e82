#include "xreg/fno.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "xreg/array_io.hpp"
#include "xreg/serialize.hpp"

namespace xreg::fno {

namespace fs = std::filesystem;
using ad::Shape;
using ad::Tensor;
using nlohmann::json;

std::string to_string(HeadMode mode) { return mode == HeadMode::head_only ? "head_only" : "internal"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "head_only") return HeadMode::head_only;
  if (s == "internal") return HeadMode::internal;
  throw std::invalid_argument("unknown head_mode '" + s + "' (expected head_only or internal)");
}

std::string to_string(Group g) {
  switch (g) {
    case Group::theta: return "theta";
    case Group::psi: return "psi";
    case Group::rho_internal: return "rho_internal";
    case Group::rho_head: return "rho_head";
  }
  return "?";
}

bool train_routed(Group g) { return g == Group::theta || g == Group::psi; }

void FnoConfig::validate(std::size_t n_points) const {
  if (n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
  if (width < 1) throw std::invalid_argument("width must be >= 1");
  if (n_modes < 1 || n_modes > n_points / 2 + 1) {
    throw std::invalid_argument("n_modes must lie in [1, n_points/2 + 1]");
  }
  if (in_channels != 2) throw std::invalid_argument("in_channels must be 2 (field + mask indicator)");
  if (!(log_scale_min < log_scale_init && log_scale_init < log_scale_max)) {
    throw std::invalid_argument("log_scale_init must lie strictly inside the clamp range");
  }
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor out(std::move(shape));
  for (auto& v : out.values()) v = stddev * rng.normal();
  return out;
}

void check_finite(const Tensor& t, std::size_t layer, const char* where) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(layer, std::string("non-finite activation ") + where + " at layer " + std::to_string(layer));
    }
  }
}

}  // namespace

Model::Model(const FnoConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed, "fno-init");
  const std::size_t w = cfg.width;
  const auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  lift_w_ = params_.size();
  add("lift.weight", Group::theta, normal_tensor({cfg.in_channels, w}, fan_in(cfg.in_channels), rng));
  lift_b_ = params_.size();
  add("lift.bias", Group::theta, Tensor(Shape{w}));

  // Complex normal with total variance 1 / (width^2 * n_modes), split over re/im.
  const double kernel_sd = std::sqrt(0.5 / (static_cast<double>(w * w) * static_cast<double>(cfg.n_modes)));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    kernel_.push_back(params_.size());
    add(p + ".spectral", Group::theta, normal_tensor({cfg.n_modes, w, w, 2}, kernel_sd, rng));
    conv_w_.push_back(params_.size());
    add(p + ".pointwise.weight", Group::theta, normal_tensor({w, w}, fan_in(w), rng));
    conv_b_.push_back(params_.size());
    add(p + ".pointwise.bias", Group::theta, Tensor(Shape{w}));
  }
  proj_w_ = params_.size();
  add("projection.weight", Group::theta, normal_tensor({w, w}, fan_in(w), rng));
  proj_b_ = params_.size();
  add("projection.bias", Group::theta, Tensor(Shape{w}));
  mu_w_ = params_.size();
  add("head.mu.weight", Group::theta, normal_tensor({w, 1}, fan_in(w), rng));
  mu_b_ = params_.size();
  add("head.mu.bias", Group::theta, Tensor(Shape{1}));

  sp_w_ = params_.size();
  add("head.log_sigma_pred.weight", Group::psi, Tensor(Shape{w, 1}));
  sp_b_ = params_.size();
  add("head.log_sigma_pred.bias", Group::psi, Tensor(Shape{1}, cfg.log_scale_init));

  if (cfg.head_mode == HeadMode::head_only) {
    sg_w_ = params_.size();
    add("head.log_sigma_gen.weight", Group::rho_head, Tensor(Shape{w, 1}));
    sg_b_ = params_.size();
    add("head.log_sigma_gen.bias", Group::rho_head, Tensor(Shape{1}, cfg.log_scale_init));
  } else {
    for (std::size_t s = 0; s < cfg.latent_sites(); ++s) {
      const std::string name = s < cfg.n_layers ? "layer" + std::to_string(s) : std::string("prehead");
      gen_scale_.push_back(params_.size());
      add(name + ".log_sigma_gen", Group::rho_internal, Tensor(Shape{1}, cfg.log_scale_init), true);
    }
    if (cfg.spectral_noise) {
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        spec_scale_.push_back(params_.size());
        add("layer" + std::to_string(l) + ".spectral.log_sigma_gen", Group::rho_internal,
            Tensor(Shape{cfg.n_modes}, cfg.log_scale_init), true);
      }
    }
    if (cfg.internal_predictive_noise) {
      for (std::size_t s = 0; s < cfg.latent_sites(); ++s) {
        const std::string name = s < cfg.n_layers ? "layer" + std::to_string(s) : std::string("prehead");
        pred_scale_.push_back(params_.size());
        add(name + ".log_sigma_pred", Group::psi, Tensor(Shape{1}, cfg.log_scale_init), true);
      }
    }
  }
}

Model Model::clone() const {
  Model copy(cfg_, 0);
  copy.unflatten(flatten());
  return copy;
}

Param& Model::add(std::string name, Group group, Tensor value, bool internal_scale) {
  value.set_requires_grad(true);
  params_.push_back(Param{std::move(name), group, std::move(value), internal_scale});
  return params_.back();
}

const Param& Model::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named " + name);
}

Param& Model::param(const std::string& name) {
  return const_cast<Param&>(static_cast<const Model&>(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t Model::parameter_count(Group g) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == g) n += p.value.size();
  return n;
}

std::vector<double> Model::latent_log_scales() const {
  std::vector<double> out;
  for (auto i : gen_scale_) out.push_back(std::clamp(t(i)[0], cfg_.log_scale_min, cfg_.log_scale_max));
  return out;
}

std::vector<double> Model::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
  return flat;
}

void Model::unflatten(const std::vector<double>& flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("flat parameter vector has wrong length");
  std::size_t at = 0;
  for (auto& p : params_) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + p.value.size()),
              p.value.values().begin());
    at += p.value.size();
  }
}

std::string Model::group_digest(Group g) const {
  std::vector<double> v;
  for (const auto& p : params_)
    if (p.group == g) v.insert(v.end(), p.value.values().begin(), p.value.values().end());
  return io::digest_bytes(v.data(), v.size() * sizeof(double));
}

std::string Model::layout_digest(Group g) const {
  std::string s;
  for (const auto& p : params_) {
    if (p.group != g) continue;
    s += p.name + ":" + ad::shape_str(p.value.shape()) + ";";
  }
  return io::digest_bytes(s.data(), s.size());
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

Tensor Model::noise_scale(const Tensor& log_scale) const {
  // A log-scale at the clamp floor switches the site off exactly.
  bool all_floor = true;
  for (double v : log_scale.values()) all_floor = all_floor && v <= cfg_.log_scale_min;
  if (all_floor) return Tensor(log_scale.shape(), 0.0);
  return ad::exp(ad::clamp(log_scale, cfg_.log_scale_min, cfg_.log_scale_max));
}

NoiseRealization Model::sample_noise(std::size_t rows, std::size_t n, Rng& rng) const {
  NoiseRealization omega;
  if (cfg_.head_mode != HeadMode::internal) return omega;
  const std::size_t w = cfg_.width;
  for (std::size_t s = 0; s < cfg_.latent_sites(); ++s) omega.latent.push_back(ad::gaussian_noise({rows, n, w}, rng));
  if (cfg_.spectral_noise) {
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      Tensor eps(Shape{rows, cfg_.n_modes, w, 2});
      auto& v = eps.values();
      for (std::size_t i = 0; i < v.size(); i += 2) v[i] = v[i + 1] = rng.normal();
      omega.spectral.push_back(std::move(eps));
    }
  }
  if (cfg_.internal_predictive_noise) {
    for (std::size_t s = 0; s < cfg_.latent_sites(); ++s) omega.predictive.push_back(ad::gaussian_noise({rows, n, w}, rng));
  }
  return omega;
}

PredictionMoments Model::forward(const Tensor& x, const NoiseRealization* omega) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.in_channels) {
    throw ad::ShapeError("model input must be [batch, n, " + std::to_string(cfg_.in_channels) + "], got " + ad::shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1);
  const bool noisy = omega != nullptr && cfg_.head_mode == HeadMode::internal;
  if (noisy) {
    if (omega->latent.size() != cfg_.latent_sites() || (cfg_.spectral_noise && omega->spectral.size() != cfg_.n_layers) ||
        (cfg_.internal_predictive_noise && omega->predictive.size() != cfg_.latent_sites())) {
      throw std::invalid_argument("noise realization does not match the model's noise sites");
    }
    if (omega->latent.front().dim(0) != batch) throw ad::ShapeError("noise realization batch does not match input");
  }

  const auto perturb = [&](Tensor h, std::size_t site) {
    if (!noisy) return h;
    h = ad::multiplicative_noise(h, omega->latent[site], noise_scale(t(gen_scale_[site])));
    if (cfg_.internal_predictive_noise) {
      h = ad::multiplicative_noise(h, omega->predictive[site], noise_scale(t(pred_scale_[site])));
    }
    return h;
  };

  Tensor h = ad::affine(x, t(lift_w_), t(lift_b_));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    ad::ComplexTensor spec = ad::complex_mix(ad::rfft(h, cfg_.n_modes), ad::ComplexTensor{t(kernel_[l])});
    if (noisy && cfg_.spectral_noise) {
      const Tensor factor = ad::add_scalar(ad::mul_along_axis(omega->spectral[l], noise_scale(t(spec_scale_[l])), 1), 1.0);
      spec.parts = ad::mul(spec.parts, factor);
    }
    h = ad::gelu(ad::add(ad::irfft(spec, n), ad::affine(h, t(conv_w_[l]), t(conv_b_[l]))));
    h = perturb(std::move(h), l);
    check_finite(h, l, "after spectral layer");
  }
  h = ad::gelu(ad::affine(h, t(proj_w_), t(proj_b_)));
  h = perturb(std::move(h), cfg_.n_layers);
  check_finite(h, cfg_.n_layers, "after projection");

  PredictionMoments out;
  out.mu = ad::reshape(ad::affine(h, t(mu_w_), t(mu_b_)), {batch, n});
  out.log_sigma_pred =
      ad::reshape(ad::clamp(ad::affine(h, t(sp_w_), t(sp_b_)), cfg_.log_scale_min, cfg_.log_scale_max), {batch, n});
  if (sg_w_) {
    out.log_sigma_gen =
        ad::reshape(ad::clamp(ad::affine(h, t(*sg_w_), t(*sg_b_)), cfg_.log_scale_min, cfg_.log_scale_max), {batch, n});
  }
  return out;
}

Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(shape);
  for (auto& v : mask.values()) v = rng.uniform() < p ? 0.0 : keep_scale;
  return mask;
}

PredictionMoments Model::dropout_forward(const Tensor& x, double p, Rng& rng) const {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout p must lie in [0, 1)");
  if (p == 0.0) return forward(x);
  const std::size_t batch = x.dim(0), n = x.dim(1);
  const auto drop = [&](const Tensor& h) { return ad::mul(h, dropout_mask(h.shape(), p, rng)); };
  Tensor h = ad::affine(x, t(lift_w_), t(lift_b_));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    ad::ComplexTensor spec = ad::complex_mix(ad::rfft(h, cfg_.n_modes), ad::ComplexTensor{t(kernel_[l])});
    h = drop(ad::gelu(ad::add(ad::irfft(spec, n), ad::affine(h, t(conv_w_[l]), t(conv_b_[l])))));
    check_finite(h, l, "after spectral layer");
  }
  h = drop(ad::gelu(ad::affine(h, t(proj_w_), t(proj_b_))));
  PredictionMoments out;
  out.mu = ad::reshape(ad::affine(h, t(mu_w_), t(mu_b_)), {batch, n});
  out.log_sigma_pred =
      ad::reshape(ad::clamp(ad::affine(h, t(sp_w_), t(sp_b_)), cfg_.log_scale_min, cfg_.log_scale_max), {batch, n});
  return out;
}

// --- checkpoints ---------------------------------------------------------------

void save_checkpoint(const Model& model, const fs::path& dir, std::size_t step) {
  fs::create_directories(dir);
  json layout = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    layout.push_back({{"name", p.name}, {"group", to_string(p.group)}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.size();
  }
  const auto flat = model.flatten();
  const fs::path params_path = dir / "params.f64";
  const fs::path tmp_params = dir / "params.f64.tmp";
  io::write_array(tmp_params, io::ArrayF64{{flat.size()}, flat});
  json partition = json::object();
  for (Group g : {Group::theta, Group::psi, Group::rho_internal, Group::rho_head}) {
    partition[to_string(g)] = {{"count", model.parameter_count(g)}, {"layout_digest", model.layout_digest(g)}};
  }
  json manifest = {{"format", "xreg-checkpoint/1"},
                   {"model", serialize::to_json(model.config())},
                   {"step", step},
                   {"layout", layout},
                   {"partition", partition},
                   {"params_file", "params.f64"},
                   {"params_digest", io::file_digest(tmp_params)}};
  const fs::path tmp_manifest = dir / "checkpoint.json.tmp";
  {
    std::ofstream out(tmp_manifest);
    out << manifest.dump(2) << '\n';
    if (!out) throw io::FormatError("cannot write checkpoint manifest in " + dir.string());
  }
  // Rename last so an interrupted save leaves the previous checkpoint intact.
  fs::rename(tmp_params, params_path);
  fs::rename(tmp_manifest, dir / "checkpoint.json");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw io::FormatError("missing checkpoint.json in " + dir.string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "xreg-checkpoint/1") throw io::FormatError("unknown checkpoint format");
  const FnoConfig cfg = serialize::fno_from_json(manifest.at("model"));
  Model model(cfg, 0);
  const json& layout = manifest.at("layout");
  if (layout.size() != model.params().size()) throw io::FormatError("checkpoint layout has a different parameter count");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& p = model.params()[i];
    if (layout[i].at("name") != p.name || layout[i].at("group") != to_string(p.group) ||
        layout[i].at("shape").get<Shape>() != p.value.shape()) {
      throw io::FormatError("checkpoint layout mismatch at parameter " + p.name);
    }
  }
  for (Group g : {Group::theta, Group::psi, Group::rho_internal, Group::rho_head}) {
    if (manifest.at("partition").at(to_string(g)).at("layout_digest") != model.layout_digest(g)) {
      throw io::FormatError("partition digest mismatch for group " + to_string(g));
    }
  }
  const fs::path params_path = dir / manifest.at("params_file").get<std::string>();
  if (io::file_digest(params_path) != manifest.at("params_digest")) throw io::FormatError("parameter file digest mismatch");
  model.unflatten(io::read_f64(params_path).values);
  return LoadedCheckpoint{std::move(model), manifest.at("step").get<std::size_t>()};
}

}  // namespace xreg::fno
