#include "odeformer/ode/rk.hpp"

#include <cmath>
#include <cstdlib>

#include "odeformer/csvio.hpp"

namespace odeformer::ode {

void RkScheme::validate() const {
    if (stages < 1) throw config_error("scheme '" + name + "': stages must be >= 1");
    if (static_cast<int>(alpha.size()) != stages ||
        static_cast<int>(gamma.size()) != stages ||
        static_cast<int>(beta.size()) != stages) {
        throw config_error("scheme '" + name + "': alpha/beta/gamma sizes must equal stages");
    }
    for (int i = 0; i < stages; ++i) {
        if (static_cast<int>(beta[i].size()) != stages) {
            throw config_error("scheme '" + name + "': beta must be a square stages x stages table");
        }
        for (int j = i; j < stages; ++j) {
            if (beta[i][j] != 0.0) {
                throw config_error("scheme '" + name + "': beta[" + std::to_string(i) + "][" +
                                   std::to_string(j) + "] nonzero breaks explicitness");
            }
        }
    }
}

bool RkScheme::is_consistent() const {
    double s = 0.0;
    for (double g : gamma) s += g;
    return std::abs(s - 1.0) <= 1e-12;
}

RkScheme euler_scheme() {
    RkScheme s;
    s.name = "euler";
    s.stages = 1;
    s.alpha = {0.0};
    s.beta = {{0.0}};
    s.gamma = {1.0};
    s.nominal_order = 1;
    return s;
}

RkScheme rk2_scheme() {
    RkScheme s;
    s.name = "rk2";
    s.stages = 2;
    s.alpha = {0.0, 1.0};
    s.beta = {{0.0, 0.0}, {1.0, 0.0}};
    s.gamma = {0.5, 0.5};
    s.nominal_order = 2;
    return s;
}

RkScheme rk4_scheme() {
    RkScheme s;
    s.name = "rk4";
    s.stages = 4;
    s.alpha = {0.0, 0.5, 0.5, 1.0};
    s.beta = {{0.0, 0.0, 0.0, 0.0},
              {0.5, 0.0, 0.0, 0.0},
              {0.0, 0.5, 0.0, 0.0},
              {0.0, 0.0, 1.0, 0.0}};
    s.gamma = {1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0};
    s.nominal_order = 4;
    return s;
}

void OdeProblem::validate() const {
    if (!(t_end > t0)) throw config_error("ode problem: t_end must exceed t0");
    if (y0.empty()) throw config_error("ode problem: empty initial state");
    if (!field_fn) throw config_error("ode problem: missing field function");
}

namespace {

bool all_finite(const State& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

} // namespace

State rk_step(const RkScheme& scheme, const FieldFn& f, const State& y, double t, double h) {
    if (!(h > 0.0)) throw config_error("rk_step: step size must be positive");
    scheme.validate();

    const size_t dim = y.size();
    std::vector<State> stage_values(scheme.stages);

    for (int i = 0; i < scheme.stages; ++i) {
        State arg = y;
        for (int j = 0; j < i; ++j) {
            const double w = scheme.beta[i][j];
            if (w == 0.0) continue;
            for (size_t d = 0; d < dim; ++d) arg[d] += w * stage_values[j][d];
        }
        State fv = f(arg, t + scheme.alpha[i] * h);
        if (fv.size() != dim) {
            throw shape_error("rk_step: field returned dimension " + std::to_string(fv.size()) +
                              ", state has " + std::to_string(dim));
        }
        for (size_t d = 0; d < dim; ++d) fv[d] *= h;
        if (!all_finite(fv)) {
            throw overflow_error("rk_step: non-finite value at stage " + std::to_string(i + 1),
                                 i + 1);
        }
        stage_values[i] = std::move(fv);
    }

    State out = y;
    for (int i = 0; i < scheme.stages; ++i) {
        const double g = scheme.gamma[i];
        for (size_t d = 0; d < dim; ++d) out[d] += g * stage_values[i][d];
    }
    if (!all_finite(out)) {
        throw overflow_error("rk_step: non-finite combined state", scheme.stages);
    }
    return out;
}

Trajectory integrate(const RkScheme& scheme, const OdeProblem& problem, int n_steps) {
    problem.validate();
    if (n_steps < 1) throw config_error("integrate: n_steps must be >= 1");

    const double h = (problem.t_end - problem.t0) / n_steps;
    Trajectory traj;
    traj.times.reserve(n_steps + 1);
    traj.states.reserve(n_steps + 1);
    traj.times.push_back(problem.t0);
    traj.states.push_back(problem.y0);

    State y = problem.y0;
    for (int k = 0; k < n_steps; ++k) {
        const double t = problem.t0 + k * h;
        try {
            y = rk_step(scheme, problem.field_fn, y, t, h);
        } catch (const overflow_error& e) {
            throw overflow_error(std::string(e.what()) + " (integration step " +
                                     std::to_string(k + 1) + ")",
                                 e.index());
        }
        traj.times.push_back(problem.t0 + (k + 1) * h);
        traj.states.push_back(y);
    }
    return traj;
}

OrderEstimate empirical_order(const RkScheme& scheme, const OdeProblem& problem,
                              const std::vector<int>& step_counts) {
    problem.validate();
    if (!problem.analytic) throw config_error("empirical_order: analytic solution required");
    if (step_counts.size() < 2) throw config_error("empirical_order: need at least two step counts");
    for (size_t i = 1; i < step_counts.size(); ++i) {
        if (step_counts[i] != 2 * step_counts[i - 1]) {
            throw config_error("empirical_order: step counts must double at each entry");
        }
    }

    const State exact = problem.analytic(problem.t_end);

    OrderEstimate est;
    est.samples.reserve(step_counts.size());
    for (int n : step_counts) {
        Trajectory traj = integrate(scheme, problem, n);
        const State& last = traj.states.back();
        double err = 0.0;
        for (size_t d = 0; d < exact.size(); ++d) {
            err = std::max(err, std::abs(last[d] - exact[d]));
        }
        if (err < 1e-13) {
            throw precision_floor_error("empirical_order: error " + format_number(err) + " at n=" +
                                        std::to_string(n) + " is below the f64 resolution floor");
        }
        OrderSample sample;
        sample.n_steps = n;
        sample.error = err;
        est.samples.push_back(sample);
    }

    double acc = 0.0;
    for (size_t i = 1; i < est.samples.size(); ++i) {
        double p = std::log2(est.samples[i - 1].error / est.samples[i].error);
        est.samples[i].estimated_order = p;
        acc += p;
    }
    est.order = acc / static_cast<double>(est.samples.size() - 1);
    return est;
}

std::string order_csv(const RkScheme& scheme, const OrderEstimate& est) {
    std::string out;
    for (const OrderSample& s : est.samples) {
        out += scheme.name;
        out += ',';
        out += format_number(s.n_steps);
        out += ',';
        out += format_number(s.error);
        out += ',';
        out += format_number(s.estimated_order);
        out += '\n';
    }
    return out;
}

} // namespace odeformer::ode
