#pragma once

#include "uvsplat/math.hpp"

#include <map>
#include <string>
#include <vector>

namespace uvsplat {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments and step count of one parameter group.
template <typename T> struct AdamGroup {
  std::vector<T> m, v;
  int64_t step = 0;
};

/// Bias-corrected Adam over named flat parameter groups.
template <typename T> class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// One update of `n` parameters. Throws NumericalError naming the group on
  /// a non-finite gradient, before touching any state.
  void step(const std::string& group, double lr, T* params, const T* grads, size_t n) {
    for (size_t i = 0; i < n; ++i)
      if (!std::isfinite(static_cast<double>(grads[i])))
        throw NumericalError("non-finite gradient in parameter group '" + group + "'");
    auto& g = groups_[group];
    if (g.m.size() != n) {
      if (!g.m.empty()) throw DataError("optimizer state for '" + group + "' does not match parameter shape");
      g.m.assign(n, T(0));
      g.v.assign(n, T(0));
    }
    ++g.step;
    const T b1 = T(opts_.beta1), b2 = T(opts_.beta2);
    const T c1 = T(1) - T(std::pow(opts_.beta1, static_cast<double>(g.step)));
    const T c2 = T(1) - T(std::pow(opts_.beta2, static_cast<double>(g.step)));
    const T step_size = T(lr) / c1;
    const T inv_c2 = T(1) / std::sqrt(c2);
    const T eps = T(opts_.eps);
    for (size_t i = 0; i < n; ++i) {
      g.m[i] = b1 * g.m[i] + (T(1) - b1) * grads[i];
      g.v[i] = b2 * g.v[i] + (T(1) - b2) * grads[i] * grads[i];
      params[i] -= step_size * g.m[i] / (std::sqrt(g.v[i]) * inv_c2 + eps);
    }
  }

  /// Re-indexes a group after densification: entry k of the new state comes
  /// from origin[k] (stride values per item), or zeros where fresh[k].
  void remap(const std::string& group, const std::vector<int>& origin, const std::vector<char>& fresh, size_t stride) {
    auto it = groups_.find(group);
    if (it == groups_.end()) return;
    auto& g = it->second;
    std::vector<T> m(origin.size() * stride, T(0)), v(origin.size() * stride, T(0));
    for (size_t k = 0; k < origin.size(); ++k) {
      if (fresh[k]) continue;
      for (size_t s = 0; s < stride; ++s) {
        m[k * stride + s] = g.m[static_cast<size_t>(origin[k]) * stride + s];
        v[k * stride + s] = g.v[static_cast<size_t>(origin[k]) * stride + s];
      }
    }
    g.m = std::move(m);
    g.v = std::move(v);
  }

  const std::map<std::string, AdamGroup<T>>& groups() const { return groups_; }
  std::map<std::string, AdamGroup<T>>& groups() { return groups_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::map<std::string, AdamGroup<T>> groups_;
};

}  // namespace uvsplat
