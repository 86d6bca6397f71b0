#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "odeformer/tensor/ops.hpp"
#include "odeformer/tensor/tensor.hpp"

namespace odeformer::tensor {

template <class T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

// Max relative disagreement between the taped gradient of f at x and central
// finite differences: |analytic - numeric| / max(1, |analytic|, |numeric|).
// f must be deterministic; use T = double for meaningful tolerances.
template <class T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x0, double eps) {
    Tensor<T> x = x0.clone();
    x.set_requires_grad(true);

    Tape<T> tape;
    Tensor<T> loss = f(tape, x);
    tape.backward(loss);
    std::vector<T> analytic = x.grad();

    auto eval = [&](const std::vector<T>& values) {
        Tensor<T> probe = Tensor<T>::from_data(x0.shape(), values);
        Tape<T> t;
        typename Tape<T>::NoGrad off(t);
        return static_cast<double>(f(t, probe).item());
    };

    double worst = 0.0;
    std::vector<T> values = x0.value();
    for (size_t i = 0; i < values.size(); ++i) {
        const T saved = values[i];
        values[i] = saved + static_cast<T>(eps);
        const double up = eval(values);
        values[i] = saved - static_cast<T>(eps);
        const double down = eval(values);
        values[i] = saved;

        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

} // namespace odeformer::tensor
