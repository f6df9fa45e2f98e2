#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "stpp/tensor.hpp"

namespace testutil {

using stpp::Tensor;

inline Tensor random_tensor(stpp::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(stpp::shape_numel(shape));
  for (double& x : v) x = g(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng, bool requires_grad = true) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[i * d + j] = g(rng);
      s += v[i * d + j] * v[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(s);
  }
  return Tensor({n, d}, std::move(v), requires_grad);
}

struct GradResult {
  double max_rel = 0;   // max over entries of |a - n| / (|n| + 1e-8)
  double norm_rel = 0;  // ||a - n|| / (||n|| + 1e-8)
};

// Central differences of the scalar f() with respect to every entry of params.
template <class F>
GradResult grad_check(std::vector<Tensor> params, F&& f, double h = 1e-5) {
  stpp::Tape::active().clear();
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  stpp::backward(loss);
  std::vector<double> analytic, numeric;
  for (auto& p : params) {
    const auto g = p.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
    p.zero_grad();
  }
  {
    stpp::NoGradGuard guard;
    for (auto& p : params) {
      auto d = p.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double keep = d[i];
        d[i] = keep + h;
        const double up = f().item();
        d[i] = keep - h;
        const double down = f().item();
        d[i] = keep;
        numeric.push_back((up - down) / (2 * h));
      }
    }
  }
  GradResult r;
  double diff2 = 0, ref2 = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double e = std::fabs(analytic[i] - numeric[i]);
    r.max_rel = std::max(r.max_rel, e / (std::fabs(numeric[i]) + 1e-8));
    diff2 += e * e;
    ref2 += numeric[i] * numeric[i];
  }
  r.norm_rel = std::sqrt(diff2) / (std::sqrt(ref2) + 1e-8);
  return r;
}

}  // namespace testutil
