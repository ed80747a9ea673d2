#include "incseg/optimizer.hpp"

#include <cmath>

namespace incseg {

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& g : groups_) {
    if (!g.active) continue;
    const double lr = cfg_.lr * g.lr_scale;
    for (auto* p : g.params) {
      if (!p->trainable) continue;
      auto [it, fresh] = state_.try_emplace(p);
      if (fresh) {
        it->second.m = ad::Mat::Zero(p->value.rows(), p->value.cols());
        it->second.v = ad::Mat::Zero(p->value.rows(), p->value.cols());
      }
      Moments& mo = it->second;
      mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * p->grad;
      mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
      ad::Mat mhat = mo.m / bc1;
      ad::Mat vhat = mo.v / bc2;
      if (cfg_.weight_decay > 0.0) p->value -= lr * cfg_.weight_decay * p->value;
      p->value.array() -= lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
    }
  }
}

}  // namespace incseg
