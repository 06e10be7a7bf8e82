#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "xreg/config.hpp"
#include "xreg/dataset.hpp"
#include "xreg/tensor.hpp"

namespace support {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("xreg-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

// |a - b| relative to the larger magnitude, with a small floor so that
// gradients that vanish analytically are compared in absolute terms.
inline double rel_err(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
};

// Compares tape gradients of `loss` with central differences for every
// element of every tensor in `params`.
inline GradCheck check_gradients(const std::function<xreg::ad::Tensor()>& loss, std::vector<xreg::ad::Tensor> params,
                                 double h = 1e-5, double floor = 1e-5) {
  using namespace xreg::ad;
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor l = loss();
    tape.backward(l);
  }
  GradCheck r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p.values()[i];
      double fp, fm;
      {
        NoGradScope ng;
        p.values()[i] = keep + h;
        fp = loss().item();
        p.values()[i] = keep - h;
        fm = loss().item();
      }
      p.values()[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double e = rel_err(a, numeric, floor);
      ++r.checked;
      if (e > r.worst) {
        r.worst = e;
        r.where = "param " + std::to_string(k) + " element " + std::to_string(i) + ": analytic " + std::to_string(a) +
                  " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline xreg::ks::KsConfig tiny_ks(std::uint64_t seed = 0) {
  xreg::ks::KsConfig c;
  c.n_points = 32;
  c.domain_length = 22.0;
  c.dt = 0.1;
  c.n_warmup = 100;
  c.train_horizon = 5;
  c.test_horizon = 12;
  c.ic_modes = 4;
  c.seed = seed;
  return c;
}

inline xreg::data::DatasetBundle tiny_bundle(std::size_t n_train = 4, std::size_t n_reg = 3, std::size_t n_test = 2,
                                             double fraction = 1.0, std::uint64_t seed = 0) {
  xreg::data::GenerateOptions o;
  o.n_train = n_train;
  o.n_reg = n_reg;
  o.n_test = n_test;
  o.observed_fraction = fraction;
  o.mask_seed = seed + 11;
  return xreg::data::generate_dataset(tiny_ks(seed), o);
}

inline xreg::fno::FnoConfig tiny_model(xreg::fno::HeadMode mode = xreg::fno::HeadMode::internal) {
  xreg::fno::FnoConfig c;
  c.n_layers = 2;
  c.n_modes = 6;
  c.width = 4;
  c.head_mode = mode;
  return c;
}

// Small end-to-end configuration matching tiny_bundle().
inline xreg::ExperimentConfig tiny_experiment() {
  xreg::ExperimentConfig c;
  c.ks = tiny_ks();
  c.generate.n_train = 4;
  c.generate.n_reg = 3;
  c.generate.n_test = 2;
  c.model = tiny_model();
  c.train.total_steps = 10;
  c.train.batch_size = 4;
  c.train.samples = 3;
  c.train.k_reg = 5;
  c.train.eval_interval = 5;
  c.train.eval_samples = 3;
  c.train.spatial_segment = 4;
  c.baseline.ensemble_members = 2;
  return c;
}

}  // namespace support
