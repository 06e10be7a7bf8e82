#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "support.hpp"
#include "xreg/metrics.hpp"
#include "xreg/objectives.hpp"
#include "xreg/trainer.hpp"

using namespace xreg;
using namespace xreg::metrics;

namespace {

// Random S-component mixtures with targets drawn from the mixture itself.
MixturePrediction self_consistent(std::size_t S, std::size_t P, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MixturePrediction pred;
  pred.samples = S;
  pred.points = P;
  pred.mu.resize(S * P);
  pred.var_pred.resize(S * P);
  pred.y.resize(P);
  for (std::size_t i = 0; i < S * P; ++i) {
    pred.mu[i] = 2.0 * z(g);
    pred.var_pred[i] = 0.1 + 2.0 * u(g);
  }
  for (std::size_t p = 0; p < P; ++p) {
    const auto s = static_cast<std::size_t>(u(g) * static_cast<double>(S)) % S;
    pred.y[p] = pred.mu[s * P + p] + std::sqrt(pred.var_pred[s * P + p]) * z(g);
  }
  return pred;
}

}  // namespace

TEST_CASE("coverage grid") {
  const auto g = CoverageGrid::standard();
  REQUIRE(g.alphas.size() == 9);
  CHECK(g.alphas.front() == doctest::Approx(0.1));
  CHECK(g.alphas.back() == doctest::Approx(0.9));
  CHECK_NOTHROW(g.validate());
  CHECK_THROWS_AS((CoverageGrid{{0.5, 0.4}}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((CoverageGrid{{0.0, 0.4}}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((CoverageGrid{{}}).validate(), std::invalid_argument);
}

TEST_CASE("target at the centre is covered at every level") {
  MixturePrediction p;
  p.samples = 1;
  p.points = 3;
  p.mu = {0.5, -1.0, 2.0};
  p.var_pred = {1.0, 0.2, 3.0};
  p.y = p.mu;
  const auto r = calibrate(p);
  for (double c : r.coverage) CHECK(c == 1.0);
  CHECK(r.ece_mix == doctest::Approx(0.5));

  // Huge variance: F(y) -> 0.5.
  p.y = {3.0, 3.0, 3.0};
  p.var_pred = {1e20, 1e20, 1e20};
  for (double a : CoverageGrid::standard().alphas) CHECK(central_interval_coverage(p, a) == 1.0);
}

TEST_CASE("ECE arithmetic") {
  const auto g = CoverageGrid::standard();
  CHECK(ece_mix(g.alphas, g) == 0.0);
  CHECK(ece_mix(std::vector<double>(9, 1.0), g) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(ece_mix(std::vector<double>(9, 0.5), g) == doctest::Approx(2.0 / 9.0).epsilon(1e-14));
  CHECK_THROWS_AS(ece_mix(std::vector<double>(8, 0.5), g), std::invalid_argument);
}

TEST_CASE("targets drawn from the mixture are calibrated") {
  const auto pred = self_consistent(3, 100000, 7);
  const auto r = calibrate(pred);
  for (std::size_t i = 0; i < r.alphas.size(); ++i) CHECK(std::abs(r.coverage[i] - r.alphas[i]) < 0.01);
  CHECK(r.ece_mix < 0.015);
}

TEST_CASE("coverage is monotone in alpha") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto pred = self_consistent(4, 500, seed);
    for (auto& v : pred.var_pred) v *= 0.3 + 0.2 * static_cast<double>(seed);
    CoverageGrid fine;
    for (int i = 1; i < 100; ++i) fine.alphas.push_back(i / 100.0);
    const auto r = calibrate(pred, fine);
    for (std::size_t i = 1; i < r.coverage.size(); ++i) CHECK(r.coverage[i] >= r.coverage[i - 1]);
    for (double c : r.coverage) CHECK((c >= 0.0 && c <= 1.0));
  }
}

TEST_CASE("unobserved points are ignored") {
  auto pred = self_consistent(2, 4, 1);
  pred.weights = {1.0, 0.0, 1.0, 0.0};
  pred.y[1] = 1e9;
  pred.y[3] = -1e9;
  const auto r = calibrate(pred);
  CHECK(std::isfinite(r.nll_mc));
  CHECK(r.coverage.back() > 0.0);
}

TEST_CASE("nll_mc equals the mixture objective") {
  const auto pred = self_consistent(5, 64, 3);
  std::vector<double> var(pred.samples * pred.points);
  for (std::size_t i = 0; i < var.size(); ++i) var[i] = pred.var_pred[i];
  const double ref = obj::reg_nll_mixture({ad::Tensor({5, 64}, pred.mu), ad::Tensor({5, 64}, var), ad::Tensor({64}, pred.y), {}}).item();
  CHECK(nll_mc(pred) == ref);
}

TEST_CASE("uncertainty decomposition branches") {
  MixturePrediction head;
  head.samples = 1;
  head.points = 4;
  head.mu = {0.0, 1.0, 2.0, 3.0};
  head.var_pred = {0.5, 0.5, 2.0, 2.0};
  head.var_gen = {1.0, 1.0, 1.0, 1.0};  // log sigma_gen = 0
  head.y = {0.0, 0.0, 0.0, 0.0};
  const auto u = decompose_uncertainty(head);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(u.u_gen[p] == 1.0);
    CHECK(u.u_tot[p] == u.u_pred[p] + u.u_gen[p]);
    CHECK(head.component_var(0, p) == u.u_tot[p]);
  }

  MixturePrediction single;
  single.samples = 1;
  single.points = 1;
  single.mu = {0.0};
  single.var_pred = {1.0};
  single.y = {0.0};
  CHECK_THROWS_AS(decompose_uncertainty(single), ad::UsageError);

  MixturePrediction two;
  two.samples = 2;
  two.points = 1;
  two.mu = {1.0, 3.0};
  two.var_pred = {1.0, 3.0};
  two.y = {0.0};
  const auto v = decompose_uncertainty(two);
  CHECK(v.u_pred[0] == 2.0);
  CHECK(v.u_gen[0] == 2.0);
  CHECK(mean_std_mu(two, v) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("model noise at the floor gives no generalization variance") {
  fno::Model m(fno::FnoConfig{}, 0);
  for (auto& p : m.params())
    if (p.internal_scale) p.value.values()[0] = m.config().log_scale_min;
  const auto data = support::tiny_bundle(1, 1, 1);
  Rng rng(0);
  const auto pred = train::predict(train::xreg_sampler(m, 4), data.test, {0, 1}, rng);
  const auto u = decompose_uncertainty(pred);
  for (double g : u.u_gen) CHECK(g < 1e-8);
}

TEST_CASE("sampled generalization variance converges") {
  const fno::Model m(fno::FnoConfig{}, 3);
  const auto data = support::tiny_bundle(1, 1, 1);
  const auto x = data::model_input(data.test, {0});
  const auto mean_var = [&](std::uint64_t seed) {
    Rng rng(seed, "mc");
    const auto block = train::xreg_sampler(m, 10000)(x, rng);
    const std::size_t P = block.mu.size() / block.samples;
    double total = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t k = 0; k < block.samples; ++k) {
        const double v = block.mu[k * P + p];
        s += v;
        s2 += v * v;
      }
      const double n = static_cast<double>(block.samples);
      total += (s2 - s * s / n) / (n - 1.0);
    }
    return total / static_cast<double>(P);
  };
  const double a = mean_var(1), b = mean_var(2);
  CHECK(a > 0.0);
  CHECK(std::abs(a - b) / b < 0.05);
}

TEST_CASE("Spearman correlation") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  CHECK(spearman(a, std::vector<double>{2, 4, 6, 8, 10}) == doctest::Approx(1.0));
  CHECK(spearman(a, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(a, std::vector<double>{1, 3, 2, 5, 4}) == doctest::Approx(0.8));
  // Ties take average ranks: x ranks 1.5,1.5,3,4; y ranks 1,2,3,4.
  CHECK(spearman(std::vector<double>{1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4}) ==
        doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)));
  CHECK(std::isnan(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3})));
  CHECK(std::isnan(spearman(std::vector<double>{1}, std::vector<double>{1})));
}

TEST_CASE("spatial diagnostics shapes, perfect model and shared range") {
  const std::size_t T = 100, n = 160;
  MixturePrediction pred;
  pred.samples = 3;
  pred.points = T * n;
  std::mt19937_64 g(1);
  std::normal_distribution<double> z;
  pred.mu.resize(3 * T * n);
  pred.var_pred.assign(3 * T * n, 0.25);
  pred.y.resize(T * n);
  for (std::size_t p = 0; p < T * n; ++p) {
    pred.y[p] = z(g);
    for (std::size_t s = 0; s < 3; ++s) pred.mu[s * T * n + p] = pred.y[p];
  }
  const auto maps = spatial_diagnostics(pred, T, n);
  CHECK(maps.steps == T);
  CHECK(maps.n_points == n);
  CHECK(maps.truth.size() == T * n);
  CHECK(maps.abs_error.size() == T * n);
  CHECK(maps.std_mu.size() == T * n);
  CHECK(maps.total_std.size() == T * n);
  for (double e : maps.abs_error) CHECK(e < 1e-14);
  CHECK(maps.range_lo == doctest::Approx(0.5));
  CHECK(maps.range_hi == doctest::Approx(0.5));
  CHECK_THROWS_AS(spatial_diagnostics(pred, T, n + 1), ad::ShapeError);
}
