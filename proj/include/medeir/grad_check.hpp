#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "medeir/tensor.hpp"

namespace medeir {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

// Central-difference check of analytic gradients. `f` must rebuild the graph
// from the current contents of `params` on every call. When
// `samples_per_tensor` is non-zero, that many elements per tensor are picked
// at random (seeded) instead of checking every element.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double h = 1e-5,
                                  std::size_t samples_per_tensor = 0, std::uint64_t seed = 0) {
  for (auto& p : params) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    std::vector<std::size_t> idx(p.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (samples_per_tensor > 0 && samples_per_tensor < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples_per_tensor);
    }
    auto data = p.mutable_data();
    for (std::size_t i : idx) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f().item();
      data[i] = saved - h;
      const double fm = f().item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      res.max_relative_error = std::max(res.max_relative_error, std::abs(a - numeric) / denom);
      ++res.checked;
    }
  }
  return res;
}

inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         Tensor<double> x, double h = 1e-5) {
  return grad_check([&] { return f(x); }, {x}, h).max_relative_error;
}

}  // namespace medeir
