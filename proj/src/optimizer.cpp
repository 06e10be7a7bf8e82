#include "xreg/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace xreg::train {

std::string to_string(RouteGroup g) {
  switch (g) {
    case RouteGroup::train: return "theta_psi";
    case RouteGroup::rho_internal: return "rho_internal";
    case RouteGroup::rho_head: return "rho_head";
  }
  return "?";
}

RouteGroup route_of(fno::Group g) {
  switch (g) {
    case fno::Group::theta:
    case fno::Group::psi: return RouteGroup::train;
    case fno::Group::rho_internal: return RouteGroup::rho_internal;
    case fno::Group::rho_head: return RouteGroup::rho_head;
  }
  throw std::logic_error("unknown parameter group");
}

Optimizer::Optimizer(fno::Model& model, GroupRates rates, AdamSettings adam) : rates_(rates), adam_(adam) {
  for (auto& p : model.params()) {
    const RouteGroup route = route_of(p.group);
    double lr = 0.0;
    switch (route) {
      case RouteGroup::train: lr = (p.group == fno::Group::psi && p.internal_scale) ? rates.psi_internal : rates.train; break;
      case RouteGroup::rho_internal: lr = rates.rho_internal; break;
      case RouteGroup::rho_head: lr = rates.rho_head; break;
    }
    if (!(lr >= 0.0)) throw std::invalid_argument("learning rates must be nonnegative");
    state_[index(route)].slots.push_back(Slot{&p, lr, std::vector<double>(p.value.size(), 0.0), std::vector<double>(p.value.size(), 0.0)});
  }
}

void Optimizer::step(RouteGroup group) {
  GroupState& gs = state_[index(group)];
  ++gs.steps;
  const double t = static_cast<double>(gs.steps);
  const double bc1 = 1.0 - std::pow(adam_.beta1, t);
  const double bc2 = 1.0 - std::pow(adam_.beta2, t);
  for (Slot& slot : gs.slots) {
    auto grad = slot.param->value.grad();
    if (grad.empty()) continue;
    auto& values = slot.param->value.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      slot.m[i] = adam_.beta1 * slot.m[i] + (1.0 - adam_.beta1) * g;
      slot.v[i] = adam_.beta2 * slot.v[i] + (1.0 - adam_.beta2) * g * g;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      values[i] -= slot.lr * m_hat / (std::sqrt(v_hat) + adam_.eps);
    }
  }
}

std::vector<double> Optimizer::export_state() const {
  std::vector<double> flat;
  for (const auto& gs : state_) {
    flat.push_back(static_cast<double>(gs.steps));
    for (const auto& s : gs.slots) {
      flat.insert(flat.end(), s.m.begin(), s.m.end());
      flat.insert(flat.end(), s.v.begin(), s.v.end());
    }
  }
  return flat;
}

void Optimizer::import_state(const std::vector<double>& flat) {
  std::size_t at = 0;
  const auto take = [&](std::vector<double>& dst) {
    if (at + dst.size() > flat.size()) throw std::invalid_argument("optimizer state too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + dst.size()), dst.begin());
    at += dst.size();
  };
  for (auto& gs : state_) {
    if (at >= flat.size()) throw std::invalid_argument("optimizer state too short");
    gs.steps = static_cast<std::size_t>(flat[at++]);
    for (auto& s : gs.slots) {
      take(s.m);
      take(s.v);
    }
  }
  if (at != flat.size()) throw std::invalid_argument("optimizer state has trailing values");
}

}  // namespace xreg::train
