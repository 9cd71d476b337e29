#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "viewsynth/tensor.hpp"

namespace viewsynth {

/// A learnable tensor plus its Adam state.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step = 0;
};

/// Named parameters of a model. Addresses of stored parameters are stable.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Parameter p;
    p.name = name;
    p.tensor = Tensor::from_values(std::move(shape), std::move(values), true);
    p.first_moment.assign(p.tensor.numel(), 0.0);
    p.second_moment.assign(p.tensor.numel(), 0.0);
    params_.push_back(std::move(p));
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  /// He-normal init; `gain` scales the standard deviation.
  Parameter& add_he(const std::string& name, Shape shape, std::size_t fan_in,
                    std::mt19937_64& rng, double gain = 1.0) {
    std::normal_distribution<double> dist(0.0,
                                          gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return add(name, std::move(shape), std::move(v));
  }

  Parameter& add_zeros(const std::string& name, Shape shape) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return add(name, std::move(shape), std::move(v));
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update. Parameters without a gradient this step
/// are treated as having a zero gradient.
inline void adam_step(ParameterSet& params, const AdamConfig& cfg) {
  for (auto& p : params) {
    ++p.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto values = p.tensor.mutable_values();
    const auto grad = p.tensor.grad();
    const bool has_grad = !grad.empty();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
      p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = p.first_moment[i] / bc1;
      const double v_hat = p.second_moment[i] / bc2;
      values[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

}  // namespace viewsynth
