#pragma once

#include <cctype>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "odeformer/csvio.hpp"
#include "odeformer/rng.hpp"
#include "odeformer/tensor/ops.hpp"
#include "odeformer/tensor/param_store.hpp"

namespace odeformer::train {

using tensor::ParamStore;
using tensor::Tape;
using tensor::Tensor;

struct TrainConfig {
    double peak_lr = 1e-3;
    int64_t warmup_steps = 100;
    int64_t total_steps = 1000;
    int64_t batch_sequences = 16;  // fixed sequence count per batch
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.997;
    double adam_eps = 1e-8;
    double label_smoothing = 0.0;
    std::optional<double> clip_norm;
    uint64_t seed = 1;
    int64_t log_interval = 10;

    void validate() const {
        if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 || adam_beta2 >= 1.0) {
            throw config_error("train config: betas must lie in (0,1)");
        }
        if (warmup_steps < 1) throw config_error("train config: warmup_steps must be >= 1");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
            throw config_error("train config: label smoothing must lie in [0,1)");
        }
        if (total_steps < 0) throw config_error("train config: total_steps must be >= 0");
        if (batch_sequences < 1) throw config_error("train config: batch_sequences must be >= 1");
    }
};

// Linear warmup to peak_lr, then inverse-square-root decay. Continuous at
// step == warmup_steps.
inline double lr_at(const TrainConfig& cfg, int64_t step) {
    if (step < 1) throw config_error("lr_at: step must be >= 1");
    if (step <= cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    return cfg.peak_lr *
           std::sqrt(static_cast<double>(cfg.warmup_steps) / static_cast<double>(step));
}

template <class T>
struct AdamState {
    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
    };
    std::map<std::string, Slot> slots;
    int64_t step = 0;  // completed updates
};

// One bias-corrected Adam update over every parameter that has a gradient.
// Gradients are validated first, so an overflow leaves the store untouched.
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const TrainConfig& cfg, double lr) {
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        double acc = 0.0;
        for (T g : p.node()->grad) acc += std::abs(static_cast<double>(g));
        if (!std::isfinite(acc)) {
            throw overflow_error("adam_step: non-finite gradient in parameter " + name);
        }
    }

    state.step += 1;
    const double b1 = cfg.adam_beta1;
    const double b2 = cfg.adam_beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        auto& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(p.value().size(), T(0));
            slot.v.assign(p.value().size(), T(0));
        }
        const std::vector<T>& grad = p.node()->grad;
        for (size_t i = 0; i < grad.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double m = b1 * static_cast<double>(slot.m[i]) + (1.0 - b1) * g;
            const double v = b2 * static_cast<double>(slot.v[i]) + (1.0 - b2) * g * g;
            slot.m[i] = static_cast<T>(m);
            slot.v[i] = static_cast<T>(v);
            const double mhat = m / bias1;
            const double vhat = v / bias2;
            p.value()[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

// Label-smoothed cross entropy over [tokens, vocab] logits; positions whose
// target equals pad_id are excluded from the mean.
template <class T>
Tensor<T> smoothed_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                 const std::vector<int32_t>& targets, double label_smoothing,
                                 int32_t pad_id) {
    Tensor<T> per_token = tensor::token_cross_entropy(tape, logits, targets, label_smoothing);
    std::vector<uint8_t> valid(targets.size(), 1);
    for (size_t i = 0; i < targets.size(); ++i) {
        if (pad_id >= 0 && targets[i] == pad_id) valid[i] = 0;
    }
    return tensor::masked_mean(tape, per_token, valid);
}

template <class T>
double global_grad_norm(const ParamStore<T>& params) {
    double acc = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (T g : p.node()->grad) {
            acc += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    return std::sqrt(acc);
}

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
template <class T>
double clip_gradients(ParamStore<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (T& g : p.node()->grad) g *= s;
        }
    }
    return norm;
}

// Block key of a parameter name: everything up to and including ".layer<k>",
// or empty for parameters outside the block stacks.
inline std::string block_group(const std::string& name) {
    const size_t pos = name.find(".layer");
    if (pos == std::string::npos) return "";
    size_t end = pos + 6;
    while (end < name.size() && std::isdigit(static_cast<unsigned char>(name[end]))) ++end;
    return name.substr(0, end);
}

template <class T>
std::map<std::string, double> per_block_grad_norms(const ParamStore<T>& params) {
    std::map<std::string, double> acc;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        const std::string key = block_group(name);
        if (key.empty()) continue;
        double s = acc.count(key) ? acc[key] : 0.0;
        for (T g : p.node()->grad) s += static_cast<double>(g) * static_cast<double>(g);
        acc[key] = s;
    }
    for (auto& [key, v] : acc) v = std::sqrt(v);
    return acc;
}

// Scalar learnable combination coefficients (gamma_i, mixing k, history
// weights, gate biases), keyed by parameter name.
template <class T>
std::map<std::string, double> coeff_snapshot(const ParamStore<T>& params) {
    std::map<std::string, double> out;
    for (const auto& [name, p] : params) {
        if (name.find(".coef") == std::string::npos) continue;
        if (p.numel() != 1) continue;
        out[name] = static_cast<double>(p.value()[0]);
    }
    return out;
}

struct MetricsRow {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
    std::map<std::string, double> block_grad_norms;
    std::map<std::string, double> coeffs;
    double secs = 0.0;  // wall time since training started
};

inline std::string metrics_csv_header() {
    return "step,lr,loss,grad_norm,block_grad_norms(json),coeffs(json),secs";
}

inline std::string metrics_csv_row(const MetricsRow& row) {
    nlohmann::json blocks(row.block_grad_norms);
    nlohmann::json coeffs(row.coeffs);
    std::string out;
    out += format_number(row.step);
    out += ',';
    out += format_number(row.lr);
    out += ',';
    out += format_number(row.loss);
    out += ',';
    out += format_number(row.grad_norm);
    out += ',';
    out += csv_escape(blocks.dump());
    out += ',';
    out += csv_escape(coeffs.dump());
    out += ',';
    out += format_number(row.secs);
    return out;
}

template <class T>
struct StepLoss {
    Tensor<T> loss;         // scalar, on the step's tape
    int64_t tokens = 0;     // informational
};

template <class T>
struct TrainHooks {
    // Builds one step's loss on the given tape. Required.
    std::function<StepLoss<T>(Tape<T>&, int64_t step, Rng&)> forward_loss;
    // Checked after each optimizer step; returning true ends training early.
    std::function<bool(int64_t step)> should_stop;
    std::function<void(const MetricsRow&)> on_metrics;
    std::ostream* metrics_out = nullptr;     // incremental CSV sink
    std::string checkpoint_path;             // last-good params on overflow
};

template <class T>
struct TrainResult {
    std::vector<MetricsRow> metrics;
    int64_t steps_run = 0;
    double final_loss = 0.0;
    bool stopped_early = false;
};

// Optimization loop: forward, backward, optional clip, Adam, telemetry.
// Aborts with overflow_error after writing the last-good checkpoint when a
// non-finite loss or gradient appears.
template <class T>
TrainResult<T> run_training(ParamStore<T>& params, const TrainConfig& cfg, TrainHooks<T> hooks) {
    cfg.validate();
    if (!hooks.forward_loss) throw config_error("train: forward_loss hook is required");

    TrainResult<T> result;
    AdamState<T> adam;
    Rng rng(cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();

    if (hooks.metrics_out) *hooks.metrics_out << metrics_csv_header() << '\n' << std::flush;

    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        Tape<T> tape;
        params.zero_grads();

        double loss_value = 0.0;
        try {
            StepLoss<T> out = hooks.forward_loss(tape, step, rng);
            loss_value = static_cast<double>(out.loss.item());
            if (!std::isfinite(loss_value)) {
                throw overflow_error("train: non-finite loss at step " + std::to_string(step));
            }
            tape.backward(out.loss);
            const double lr = lr_at(cfg, step);
            const double pre_clip = cfg.clip_norm ? clip_gradients(params, *cfg.clip_norm)
                                                  : global_grad_norm(params);
            adam_step(params, adam, cfg, lr);

            result.steps_run = step;
            result.final_loss = loss_value;

            if (step % cfg.log_interval == 0 || step == cfg.total_steps) {
                MetricsRow row;
                row.step = step;
                row.lr = lr;
                row.loss = loss_value;
                row.grad_norm = pre_clip;
                row.block_grad_norms = per_block_grad_norms(params);
                row.coeffs = coeff_snapshot(params);
                row.secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                               .count();
                if (hooks.metrics_out) {
                    *hooks.metrics_out << metrics_csv_row(row) << '\n' << std::flush;
                }
                if (hooks.on_metrics) hooks.on_metrics(row);
                result.metrics.push_back(std::move(row));
            }
        } catch (const overflow_error&) {
            if (!hooks.checkpoint_path.empty()) params.save(hooks.checkpoint_path);
            throw;
        }

        if (hooks.should_stop && hooks.should_stop(step)) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

} // namespace odeformer::train
