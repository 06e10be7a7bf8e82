#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "xreg/optimizer.hpp"

using namespace xreg;
using namespace xreg::train;
using fno::Group;

namespace {

// Fills every parameter gradient with +1.
void unit_grads(fno::Model& m) {
  for (auto& p : m.params()) {
    p.value.impl()->ensure_grad();
    std::fill(p.value.impl()->grad.begin(), p.value.impl()->grad.end(), 1.0);
  }
}

std::vector<std::string> digests(const fno::Model& m) {
  std::vector<std::string> d;
  for (Group g : {Group::theta, Group::psi, Group::rho_internal, Group::rho_head}) d.push_back(m.group_digest(g));
  return d;
}

}  // namespace

TEST_CASE("route groups follow parameter ownership") {
  CHECK(route_of(Group::theta) == RouteGroup::train);
  CHECK(route_of(Group::psi) == RouteGroup::train);
  CHECK(route_of(Group::rho_internal) == RouteGroup::rho_internal);
  CHECK(route_of(Group::rho_head) == RouteGroup::rho_head);
}

TEST_CASE("a step writes only the parameters of its group") {
  for (auto mode : {fno::HeadMode::internal, fno::HeadMode::head_only}) {
    fno::Model m(support::tiny_model(mode), 0);
    Optimizer opt(m, GroupRates{});
    const auto before = digests(m);
    unit_grads(m);
    opt.step(RouteGroup::train);
    auto after = digests(m);
    CHECK(after[0] != before[0]);
    CHECK(after[1] != before[1]);
    CHECK(after[2] == before[2]);
    CHECK(after[3] == before[3]);

    const auto mid = after;
    unit_grads(m);
    opt.step(RouteGroup::rho_internal);
    opt.step(RouteGroup::rho_head);
    after = digests(m);
    CHECK(after[0] == mid[0]);
    CHECK(after[1] == mid[1]);
    if (mode == fno::HeadMode::internal) CHECK(after[2] != mid[2]);
    else CHECK(after[3] != mid[3]);
  }
}

TEST_CASE("first Adam step moves each parameter by the learning rate") {
  fno::Model m(support::tiny_model(), 0);
  GroupRates rates;
  rates.train = 0.01;
  Optimizer opt(m, rates);
  const auto w0 = m.param("lift.weight").value.values();
  unit_grads(m);
  opt.step(RouteGroup::train);
  const auto& w1 = m.param("lift.weight").value.values();
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w0[i] - w1[i] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(opt.steps(RouteGroup::train) == 1);
  CHECK(opt.steps(RouteGroup::rho_internal) == 0);
}

TEST_CASE("zero learning rates and missing gradients leave values unchanged") {
  fno::Model m(support::tiny_model(), 0);
  Optimizer opt(m, GroupRates{0.0, 0.0, 0.0, 0.0});
  const auto flat = m.flatten();
  unit_grads(m);
  opt.step(RouteGroup::train);
  opt.step(RouteGroup::rho_internal);
  CHECK(m.flatten() == flat);

  Optimizer live(m, GroupRates{});
  m.zero_grad();
  live.step(RouteGroup::train);
  CHECK(m.flatten() == flat);
  CHECK_THROWS_AS(Optimizer(m, GroupRates{-1.0, 0.0, 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("optimizer state round trips") {
  fno::Model a(support::tiny_model(), 0), b(support::tiny_model(), 0);
  Optimizer oa(a, GroupRates{}), ob(b, GroupRates{});
  for (int i = 0; i < 3; ++i) {
    unit_grads(a);
    oa.step(RouteGroup::train);
    unit_grads(a);
    oa.step(RouteGroup::rho_internal);
  }
  b.unflatten(a.flatten());
  ob.import_state(oa.export_state());
  CHECK(ob.steps(RouteGroup::train) == 3);
  unit_grads(a);
  unit_grads(b);
  oa.step(RouteGroup::train);
  ob.step(RouteGroup::train);
  CHECK(a.flatten() == b.flatten());
  auto bad = oa.export_state();
  bad.push_back(1.0);
  CHECK_THROWS_AS(ob.import_state(bad), std::invalid_argument);
}
