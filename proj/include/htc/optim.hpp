#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "htc/rng.hpp"
#include "htc/tensor.hpp"

namespace htc {

// SGD with momentum and weight decay:
//   v <- momentum * v + (g + weight_decay * p)
//   p <- p - lr * v
// Gradients are zeroed after the step. Parameters without a populated
// gradient are an error (a silent skip would hide broken graph wiring).
template <typename S>
class SgdOptimizer {
 public:
  SgdOptimizer(S momentum, S weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<Parameter<S>>& params, S lr) {
    for (auto& p : params) {
      if (!p.trainable) continue;
      if (!p.value.has_grad())
        throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
      auto& v = velocity_[p.name];
      auto& val = p.value.data();
      auto& g = p.value.grad();
      if (v.size() != val.size()) v.assign(val.size(), S(0));
      for (size_t i = 0; i < val.size(); ++i) {
        const S eff = g[i] + weight_decay_ * val[i];
        v[i] = momentum_ * v[i] + eff;
        val[i] -= lr * v[i];
      }
      p.value.zero_grad();
    }
  }

  // Momentum buffers keyed by parameter name, for checkpointing.
  std::unordered_map<std::string, std::vector<S>>& state() { return velocity_; }
  const std::unordered_map<std::string, std::vector<S>>& state() const { return velocity_; }

  S momentum() const { return momentum_; }
  S weight_decay() const { return weight_decay_; }

 private:
  S momentum_;
  S weight_decay_;
  std::unordered_map<std::string, std::vector<S>> velocity_;
};

// Kaiming-uniform fan-in init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)), with an
// optional extra scale for output heads. The stream is derived from
// (seed, parameter name) so values do not depend on registration order.
template <typename S>
void kaiming_uniform_fill(Tensor<S>& t, int fan_in, uint64_t seed, const std::string& name,
                          double scale = 1.0) {
  Rng rng(derive_seed(seed, "param_init", fnv1a64(name)));
  const double bound = std::sqrt(6.0 / std::max(1, fan_in)) * scale;
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace htc
