#pragma once

#include <unordered_map>
#include <vector>

#include "incseg/tape.hpp"

namespace incseg {

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW over named parameter groups. Frozen params (trainable == false) and
// inactive groups are skipped entirely, so their values stay bit-identical.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  void add_group(std::vector<ad::Param*> params, double lr_scale, bool active = true) {
    groups_.push_back({std::move(params), lr_scale, active});
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto* p : g.params) p->zero_grad();
  }

  void step();

 private:
  struct Group {
    std::vector<ad::Param*> params;
    double lr_scale;
    bool active;
  };
  struct Moments {
    ad::Mat m, v;
  };
  OptimConfig cfg_;
  std::vector<Group> groups_;
  std::unordered_map<ad::Param*, Moments> state_;
  long t_ = 0;
};

}  // namespace incseg
