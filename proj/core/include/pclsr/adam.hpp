#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pclsr/errors.hpp"

namespace pclsr {

/// ADAM with bias correction. One instance per network; parameter and
/// gradient vectors are zipped positionally, so the caller must present them
/// in a fixed order.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(T beta1, T beta2, T eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<std::vector<T>*>& params,
            const std::vector<std::vector<T>*>& grads, T lr) {
    if (params.size() != grads.size()) throw ParamError("Adam: param/grad count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i]->size(), T(0));
        v_[i].assign(params[i]->size(), T(0));
      }
    }
    ++t_;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<T>& p = *params[i];
      const std::vector<T>& g = *grads[i];
      if (p.size() != g.size() || p.size() != m_[i].size())
        throw DimensionError("Adam: parameter size changed between steps");
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = beta1_ * m[k] + (T(1) - beta1_) * g[k];
        v[k] = beta2_ * v[k] + (T(1) - beta2_) * g[k] * g[k];
        const T mhat = m[k] / bc1;
        const T vhat = v[k] / bc2;
        p[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  std::vector<std::vector<T>>& m() { return m_; }
  std::vector<std::vector<T>>& v() { return v_; }
  const std::vector<std::vector<T>>& m() const { return m_; }
  const std::vector<std::vector<T>>& v() const { return v_; }

 private:
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace pclsr
