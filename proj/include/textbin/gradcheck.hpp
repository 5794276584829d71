#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "textbin/tensor.hpp"

namespace textbin {

/// Compares the analytic gradient of a scalar function with central finite
/// differences, one coordinate at a time.
///
/// Returns max_i |a_i - n_i| / max(1, |a_i| + |n_i|). `x` must be a leaf that
/// requires a gradient; its values are restored before returning. Functions
/// routed through a straight-through quantizer have a defined but not exact
/// gradient and are not meaningful inputs here.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step = 1e-3) {
    if (!(step > 0.0)) throw DomainError("grad_check: step must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    if (y.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: function returned a non-finite value");
    y.backward();
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    x.zero_grad();

    auto eval = [&](float value, std::size_t i) {
        x.data()[i] = value;
        const double out = f(x).item_extended();
        if (!std::isfinite(out)) throw NumericError("grad_check: function returned a non-finite value");
        return out;
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const float original = x.data()[i];
        const float hi = static_cast<float>(original + step);
        const float lo = static_cast<float>(original - step);
        const double f_hi = eval(hi, i);
        const double f_lo = eval(lo, i);
        x.data()[i] = original;
        // Divide by the step actually representable in float.
        const double numeric = (f_hi - f_lo) / (double(hi) - double(lo));
        const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]) + std::fabs(numeric));
        worst = std::max(worst, err);
    }
    x.zero_grad();
    return worst;
}

}  // namespace textbin
