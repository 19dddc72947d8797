#pragma once

// Central finite-difference oracle for gradient checks. Always runs in f64.

#include <cmath>
#include <functional>

#include "mdsep/tensor.hpp"

namespace gradcheck {

// Relative error between analytic and numeric values, with an absolute floor
// so near-zero gradients compare on absolute terms.
inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

// Perturbs every element of `param` by +/-eps, evaluates `loss`, and returns
// the max relative error against `analytic`. `loss` must be a pure function of
// the current contents of `param`.
inline double check_param(mdsep::Tensor<double>& param, const mdsep::Tensor<double>& analytic,
                          const std::function<double()>& loss, double eps = 1e-4) {
    double worst = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double orig = param[i];
        param[i] = orig + eps;
        const double lp = loss();
        param[i] = orig - eps;
        const double lm = loss();
        param[i] = orig;
        const double fd = (lp - lm) / (2.0 * eps);
        worst = std::max(worst, rel_err(fd, analytic[i]));
    }
    return worst;
}

}  // namespace gradcheck
