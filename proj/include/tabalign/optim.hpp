#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tabalign/common.hpp"
#include "tabalign/tensor.hpp"

namespace tabalign {

struct AdamConfig {
  double lr = 1e-3;  // desk-scale default; the large-model setting is 1e-5
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Moments are keyed by parameter name so the state
// survives checkpoint round trips.
template <typename Real>
struct AdamState {
  AdamConfig cfg;
  long long step = 0;
  std::map<std::string, std::pair<TensorT<Real>, TensorT<Real>>> moments;

  explicit AdamState(AdamConfig c = {}) : cfg(c) {}
};

// One update over all parameters; gradients are zeroed afterward.
// A non-finite gradient aborts, naming the offending parameter.
template <typename Real>
void adam_step(std::vector<ParameterT<Real>*>& params, AdamState<Real>& state) {
  for (auto* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++state.step;
  const double b1 = state.cfg.beta1;
  const double b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto* p : params) {
    auto it = state.moments.find(p->name);
    if (it == state.moments.end()) {
      it = state.moments
               .emplace(p->name, std::make_pair(TensorT<Real>(p->value.rows, p->value.cols),
                                                TensorT<Real>(p->value.rows, p->value.cols)))
               .first;
    }
    TensorT<Real>& m = it->second.first;
    TensorT<Real>& v = it->second.second;
    if (!m.same_shape(p->value)) {
      throw ShapeError("adam_step: moment shape " + m.shape() + " vs parameter '" + p->name + "' " +
                       p->value.shape());
    }
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const double g = static_cast<double>(p->grad.data[i]);
      const double mi = b1 * static_cast<double>(m.data[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v.data[i]) + (1.0 - b2) * g * g;
      m.data[i] = static_cast<Real>(mi);
      v.data[i] = static_cast<Real>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p->value.data[i] -= static_cast<Real>(state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
    }
    p->zero_grad();
  }
}

// Central-difference check of analytic gradients. loss_fn(true) must run the
// full forward/backward and leave gradients in the parameters; loss_fn(false)
// evaluates the loss only. Both must be deterministic. Returns the max over
// probes of |analytic - numeric| / max(1e-8, |numeric|).
template <typename Real>
double finite_difference_check(const std::function<double(bool)>& loss_fn,
                               std::vector<ParameterT<Real>*>& params, int probes, double h, Rng& rng) {
  if (h < 1e-7 || h > 1e-3) throw ConfigError("finite_difference_check: h must be in [1e-7, 1e-3]");
  if (probes < 1) throw ConfigError("finite_difference_check: probes must be >= 1");
  if (params.empty()) throw ConfigError("finite_difference_check: no parameters");
  for (auto* p : params) p->zero_grad();
  loss_fn(true);
  std::vector<TensorT<Real>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);
  double max_rel = 0.0;
  for (int probe = 0; probe < probes; ++probe) {
    const std::size_t pi = rng.below(params.size());
    ParameterT<Real>* p = params[pi];
    const std::size_t ci = rng.below(p->value.data.size());
    const Real original = p->value.data[ci];
    p->value.data[ci] = original + static_cast<Real>(h);
    const double f_plus = loss_fn(false);
    p->value.data[ci] = original - static_cast<Real>(h);
    const double f_minus = loss_fn(false);
    p->value.data[ci] = original;
    const double numeric = (f_plus - f_minus) / (2.0 * h);
    const double a = static_cast<double>(analytic[pi].data[ci]);
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
    max_rel = std::max(max_rel, rel);
  }
  for (auto* p : params) p->zero_grad();
  return max_rel;
}

}  // namespace tabalign
