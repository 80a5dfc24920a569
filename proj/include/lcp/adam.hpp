#pragma once

#include <cmath>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/params.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction.  Moment buffers align with ParamStore order.
template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& [name, t] : params.items) {
      m_.push_back(Tensor<T>(t.shape));
      v_.push_back(Tensor<T>(t.shape));
    }
  }

  long long step_count() const { return t_; }

  void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads) {
    require(grads.size() == params.items.size(), ErrorKind::State,
            "adam: gradient list size mismatch");
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T corr1 =
        static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T corr2 =
        static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      Tensor<T>& p = params.items[i].second;
      const Tensor<T>& g = grads[i];
      require(g.shape == p.shape, ErrorKind::State,
              "adam: gradient shape mismatch for " + params.items[i].first);
      T* mp = m_[i].ptr();
      T* vp = v_[i].ptr();
      T* pp = p.ptr();
      const T* gp = g.ptr();
      for (std::size_t j = 0; j < p.numel(); ++j) {
        mp[j] = b1 * mp[j] + (T{1} - b1) * gp[j];
        vp[j] = b2 * vp[j] + (T{1} - b2) * gp[j] * gp[j];
        const T mhat = mp[j] / corr1;
        const T vhat = vp[j] / corr2;
        pp[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace lcp
