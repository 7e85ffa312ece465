#pragma once

#include <functional>

#include "xdial/autograd.hpp"

namespace xdial {

/// Max relative error between analytic gradients and central finite
/// differences: max_i |ga - gn| / max(1, |ga| + |gn|). The numeric side
/// re-evaluates `f` off-tape, so it never touches the backward path it checks.
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                  double eps = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape<T> tape;
    Tensor<T> y = f(x);
    tape.backward(y);
  }
  std::vector<double> analytic(x.grad().begin(), x.grad().end());

  double worst = 0.0;
  auto vals = x.mutable_data();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const T keep = vals[i];
    vals[i] = keep + static_cast<T>(eps);
    const double up = static_cast<double>(f(x).item());
    vals[i] = keep - static_cast<T>(eps);
    const double dn = static_cast<double>(f(x).item());
    vals[i] = keep;
    const double gn = (up - dn) / (2.0 * eps);
    const double ga = analytic[i];
    const double err = std::abs(ga - gn) / std::max(1.0, std::abs(ga) + std::abs(gn));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Same check for a closure over several leaf tensors (layer/model params).
template <typename T>
double grad_check_params(const std::function<Tensor<T>()>& f,
                         const std::vector<Tensor<T>*>& leaves, double eps = 1e-5) {
  for (auto* leaf : leaves) {
    leaf->set_requires_grad(true);
    leaf->zero_grad();
  }
  {
    Tape<T> tape;
    Tensor<T> y = f();
    tape.backward(y);
  }
  double worst = 0.0;
  for (auto* leaf : leaves) {
    std::vector<double> analytic(leaf->grad().begin(), leaf->grad().end());
    auto vals = leaf->mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T keep = vals[i];
      vals[i] = keep + static_cast<T>(eps);
      const double up = static_cast<double>(f().item());
      vals[i] = keep - static_cast<T>(eps);
      const double dn = static_cast<double>(f().item());
      vals[i] = keep;
      const double gn = (up - dn) / (2.0 * eps);
      const double ga = analytic[i];
      const double err = std::abs(ga - gn) / std::max(1.0, std::abs(ga) + std::abs(gn));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace xdial
