#pragma once

#include <functional>
#include <string>
#include <vector>

#include "odeformer/errors.hpp"

namespace odeformer::ode {

using State = std::vector<double>;
using FieldFn = std::function<State(const State&, double)>;

// Coefficient table of an explicit Runge-Kutta method. `beta` is a dense
// stages x stages matrix that must be strictly lower triangular.
struct RkScheme {
    std::string name;
    int stages = 0;
    std::vector<double> alpha;              // node offsets, length = stages
    std::vector<std::vector<double>> beta;  // stage weights, beta[i][j] = 0 for j >= i
    std::vector<double> gamma;              // combination weights, length = stages
    int nominal_order = 0;

    // Throws config_error on any structural violation.
    void validate() const;

    // True when sum(gamma) == 1 within 1e-12.
    bool is_consistent() const;
};

RkScheme euler_scheme();
RkScheme rk2_scheme();
RkScheme rk4_scheme();

struct OdeProblem {
    FieldFn field_fn;
    State y0;
    double t0 = 0.0;
    double t_end = 1.0;
    std::function<State(double)> analytic;  // optional exact solution

    void validate() const;
};

struct Trajectory {
    std::vector<double> times;        // monotonically increasing, times[0] = t0
    std::vector<State> states;        // one row per time
};

// One explicit RK step: y + sum_i gamma_i * F_i with
//   F_1 = h f(y, t),  F_i = h f(y + sum_{j<i} beta_ij F_j, t + alpha_i h).
// Throws overflow_error carrying the 1-based stage index on non-finite values.
State rk_step(const RkScheme& scheme, const FieldFn& f, const State& y, double t, double h);

// Uniform-step integration over [t0, t_end]; n_steps + 1 rows, row 0 = y0.
Trajectory integrate(const RkScheme& scheme, const OdeProblem& problem, int n_steps);

struct OrderSample {
    int n_steps = 0;
    double error = 0.0;           // max-norm global error at t_end
    double estimated_order = 0.0; // log2(e_n / e_2n) vs the previous sample; 0 for the first
};

struct OrderEstimate {
    double order = 0.0;  // mean of per-pair estimates
    std::vector<OrderSample> samples;
};

// Empirical convergence order from a doubling sequence of step counts.
// Requires problem.analytic; throws precision_floor_error when any global
// error drops below 1e-13.
OrderEstimate empirical_order(const RkScheme& scheme, const OdeProblem& problem,
                              const std::vector<int>& step_counts);

// CSV rows for an order study: scheme,n_steps,error,estimated_order.
std::string order_csv(const RkScheme& scheme, const OrderEstimate& est);

} // namespace odeformer::ode
