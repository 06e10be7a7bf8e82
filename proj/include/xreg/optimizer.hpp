#pragma once

// Adam with ownership-based gradient routing. The optimizer owns three
// groups; a step on one group never writes a parameter outside it, whatever
// gradients the backward pass left behind.

#include <string>
#include <vector>

#include "xreg/fno.hpp"

namespace xreg::train {

enum class RouteGroup { train, rho_internal, rho_head };
std::string to_string(RouteGroup g);
RouteGroup route_of(fno::Group g);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct GroupRates {
  double train = 1e-3;        // theta and head psi
  double psi_internal = 1e-2;  // internal predictive-noise scales (psi)
  double rho_internal = 1e-2;
  double rho_head = 1e-3;
};

class Optimizer {
 public:
  Optimizer(fno::Model& model, GroupRates rates, AdamSettings adam = {});

  // One Adam update of every parameter owned by `group`; parameters without
  // an accumulated gradient keep their values and moments.
  void step(RouteGroup group);

  std::size_t steps(RouteGroup group) const { return state_[index(group)].steps; }
  const GroupRates& rates() const { return rates_; }

  // Serialized moments and counters (checkpoint resume).
  std::vector<double> export_state() const;
  void import_state(const std::vector<double>& flat);

 private:
  struct Slot {
    fno::Param* param;
    double lr;
    std::vector<double> m, v;
  };
  struct GroupState {
    std::vector<Slot> slots;
    std::size_t steps = 0;
  };
  static std::size_t index(RouteGroup g) { return static_cast<std::size_t>(g); }

  GroupRates rates_;
  AdamSettings adam_;
  GroupState state_[3];
};

}  // namespace xreg::train
