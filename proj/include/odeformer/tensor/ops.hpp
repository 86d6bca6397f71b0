#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "odeformer/rng.hpp"
#include "odeformer/tensor/tensor.hpp"

namespace odeformer::tensor {

// Integer token matrix [rows, cols], kept outside the float tensor world.
struct TokenBatch {
    std::vector<int32_t> ids;
    int64_t rows = 0;
    int64_t cols = 0;

    int32_t at(int64_t r, int64_t c) const { return ids[static_cast<size_t>(r * cols + c)]; }
};

namespace detail {

// |x| accumulation in double flushes any NaN/Inf into the sum.
template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    double acc = 0.0;
    for (T v : t.value()) acc += std::abs(static_cast<double>(v));
    if (!std::isfinite(acc)) {
        throw overflow_error(std::string(op) + ": non-finite output");
    }
}

template <class T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " do not match");
    }
}

template <class T>
inline bool track(Tape<T>& tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape.recording()) return false;
    for (const Tensor<T>* p : ins) {
        if (p->requires_grad()) return true;
    }
    return false;
}

template <class T>
inline void mark_output(Tape<T>& tape, Tensor<T>& out) {
    out.set_requires_grad(true);
    out.node()->tape_tag = tape.tag();
}

template <class T>
inline void accumulate(std::shared_ptr<TensorNode<T>>& n, int64_t i, T v) {
    n->grad[static_cast<size_t>(i)] += v;
}

template <class T>
inline void ensure_grad_buf(std::shared_ptr<TensorNode<T>>& n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
inline void mm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <class T>
inline void mm_acc_bt(const T* dc, const T* b, T* da, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* dcrow = dc + i * n;
        T* darow = da + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc = T(0);
#pragma omp simd reduction(+ : acc)
            for (int64_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <class T>
inline void mm_acc_at(const T* a, const T* dc, T* db, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* dcrow = dc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* dbrow = db + p * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------- arithmetic

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
    detail::check_finite(out, "add");

    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record([an, bn, on]() mutable {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                detail::ensure_grad_buf(an);
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad_buf(bn);
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
    detail::check_finite(out, "mul");

    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record([an, bn, on]() mutable {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                detail::ensure_grad_buf(an);
                for (size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad_buf(bn);
                for (size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scalar_mul(Tape<T>& tape, const Tensor<T>& a, double c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T cv = static_cast<T>(c);
    for (int64_t i = 0; i < a.numel(); ++i) out.value()[i] = cv * a.value()[i];
    detail::check_finite(out, "scalar_mul");

    if (detail::track(tape, {&a})) {
        detail::mark_output(tape, out);
        auto an = a.node();
        auto on = out.node();
        tape.record([an, on, cv]() mutable {
            if (on->grad.empty() || !an->requires_grad) return;
            detail::ensure_grad_buf(an);
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += cv * on->grad[i];
        });
    }
    return out;
}

// x [..., D] + b [D], the one broadcast this engine allows.
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.dim(0)) {
        throw shape_error("add_bias: x " + shape_str(x.shape()) + " incompatible with bias " +
                          shape_str(b.shape()));
    }
    const int64_t d = b.dim(0);
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < d; ++j) {
            out.value()[r * d + j] = x.value()[r * d + j] + b.value()[j];
        }
    }
    detail::check_finite(out, "add_bias");

    if (detail::track(tape, {&x, &b})) {
        detail::mark_output(tape, out);
        auto xn = x.node(), bn = b.node(), on = out.node();
        tape.record([xn, bn, on, rows, d]() mutable {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                detail::ensure_grad_buf(xn);
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad_buf(bn);
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += on->grad[r * d + j];
                }
            }
        });
    }
    return out;
}

// Multiply by a single learnable scalar s of shape [1].
template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) {
        throw shape_error("scale: scale tensor must have one element, got " + shape_str(s.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T sv = s.value()[0];
    for (int64_t i = 0; i < x.numel(); ++i) out.value()[i] = sv * x.value()[i];
    detail::check_finite(out, "scale");

    if (detail::track(tape, {&x, &s})) {
        detail::mark_output(tape, out);
        auto xn = x.node(), sn = s.node(), on = out.node();
        tape.record([xn, sn, on, sv]() mutable {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                detail::ensure_grad_buf(xn);
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += sv * on->grad[i];
            }
            if (sn->requires_grad) {
                detail::ensure_grad_buf(sn);
                T acc = T(0);
                for (size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * xn->value[i];
                sn->grad[0] += acc;
            }
        });
    }
    return out;
}

// x [..., D] scaled per row by s of shape x.shape() minus the last axis.
template <class T>
Tensor<T> scale_rows(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() < 2 ||
        Shape(x.shape().begin(), x.shape().end() - 1) != s.shape()) {
        throw shape_error("scale_rows: x " + shape_str(x.shape()) + " incompatible with scales " +
                          shape_str(s.shape()));
    }
    const int64_t d = x.shape().back();
    const int64_t rows = s.numel();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T sv = s.value()[r];
        for (int64_t j = 0; j < d; ++j) out.value()[r * d + j] = sv * x.value()[r * d + j];
    }
    detail::check_finite(out, "scale_rows");

    if (detail::track(tape, {&x, &s})) {
        detail::mark_output(tape, out);
        auto xn = x.node(), sn = s.node(), on = out.node();
        tape.record([xn, sn, on, rows, d]() mutable {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                detail::ensure_grad_buf(xn);
                for (int64_t r = 0; r < rows; ++r) {
                    const T sv = sn->value[r];
                    for (int64_t j = 0; j < d; ++j)
                        xn->grad[r * d + j] += sv * on->grad[r * d + j];
                }
            }
            if (sn->requires_grad) {
                detail::ensure_grad_buf(sn);
                for (int64_t r = 0; r < rows; ++r) {
                    T acc = T(0);
                    for (int64_t j = 0; j < d; ++j)
                        acc += on->grad[r * d + j] * xn->value[r * d + j];
                    sn->grad[r] += acc;
                }
            }
        });
    }
    return out;
}

// Clamp to [0, 1]; gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp01(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        out.value()[i] = std::min(std::max(x.value()[i], T(0)), T(1));
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->value[i];
                if (v > T(0) && v < T(1)) xn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> one_minus(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.value()[i] = T(1) - x.value()[i];

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] -= on->grad[i];
        });
    }
    return out;
}

// ------------------------------------------------------------------- matmul

// a [..., m, k] times b; b is either [k, n] (shared last operand) or
// [..., k, n] with identical leading dims.
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw shape_error("matmul: ranks must be >= 2, got " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    }
    const int64_t m = a.shape()[a.rank() - 2];
    const int64_t k = a.shape()[a.rank() - 1];
    const bool shared_b = (b.rank() == 2);
    if (!shared_b) {
        Shape alead(a.shape().begin(), a.shape().end() - 2);
        Shape blead(b.shape().begin(), b.shape().end() - 2);
        if (alead != blead) {
            throw shape_error("matmul: batch dims of " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()) + " do not match");
        }
    }
    if (b.shape()[b.rank() - 2] != k) {
        throw shape_error("matmul: inner dims of " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " do not match");
    }
    const int64_t n = b.shape().back();
    const int64_t batches = a.numel() / (m * k);

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    for (int64_t s = 0; s < batches; ++s) {
        const T* ap = a.value().data() + s * m * k;
        const T* bp = shared_b ? b.value().data() : b.value().data() + s * k * n;
        T* cp = out.value().data() + s * m * n;
        detail::mm_acc(ap, bp, cp, m, k, n);
    }
    detail::check_finite(out, "matmul");

    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record([an, bn, on, m, k, n, batches, shared_b]() mutable {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                detail::ensure_grad_buf(an);
                for (int64_t s = 0; s < batches; ++s) {
                    const T* dcp = on->grad.data() + s * m * n;
                    const T* bp = shared_b ? bn->value.data() : bn->value.data() + s * k * n;
                    T* dap = an->grad.data() + s * m * k;
                    detail::mm_acc_bt(dcp, bp, dap, m, k, n);
                }
            }
            if (bn->requires_grad) {
                detail::ensure_grad_buf(bn);
                for (int64_t s = 0; s < batches; ++s) {
                    const T* ap = an->value.data() + s * m * k;
                    const T* dcp = on->grad.data() + s * m * n;
                    T* dbp = shared_b ? bn->grad.data() : bn->grad.data() + s * k * n;
                    detail::mm_acc_at(ap, dcp, dbp, m, k, n);
                }
            }
        });
    }
    return out;
}

// --------------------------------------------------------------- reshaping

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw shape_error("reshape: " + shape_str(x.shape()) + " cannot view as " +
                          shape_str(new_shape));
    }
    Tensor<T> out = Tensor<T>::from_data(new_shape, x.value());

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> transpose_last2(Tape<T>& tape, const Tensor<T>& x) {
    if (x.rank() < 2) {
        throw shape_error("transpose_last2: rank must be >= 2, got " + shape_str(x.shape()));
    }
    const int64_t r = x.shape()[x.rank() - 2];
    const int64_t c = x.shape().back();
    const int64_t batches = x.numel() / (r * c);

    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    for (int64_t s = 0; s < batches; ++s) {
        const T* xp = x.value().data() + s * r * c;
        T* op = out.value().data() + s * r * c;
        for (int64_t i = 0; i < r; ++i) {
            for (int64_t j = 0; j < c; ++j) op[j * r + i] = xp[i * c + j];
        }
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on, r, c, batches]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (int64_t s = 0; s < batches; ++s) {
                const T* gp = on->grad.data() + s * r * c;
                T* xp = xn->grad.data() + s * r * c;
                for (int64_t i = 0; i < r; ++i) {
                    for (int64_t j = 0; j < c; ++j) xp[i * c + j] += gp[j * r + i];
                }
            }
        });
    }
    return out;
}

// [a, b, c, d] -> [a, c, b, d]; pairs with reshape to split attention heads.
template <class T>
Tensor<T> swap_axes12(Tape<T>& tape, const Tensor<T>& x) {
    if (x.rank() != 4) {
        throw shape_error("swap_axes12: rank must be 4, got " + shape_str(x.shape()));
    }
    const int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
    Tensor<T> out = Tensor<T>::zeros({a, c, b, d});
    for (int64_t i = 0; i < a; ++i) {
        for (int64_t j = 0; j < b; ++j) {
            for (int64_t p = 0; p < c; ++p) {
                const T* src = x.value().data() + ((i * b + j) * c + p) * d;
                T* dst = out.value().data() + ((i * c + p) * b + j) * d;
                std::copy(src, src + d, dst);
            }
        }
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on, a, b, c, d]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (int64_t i = 0; i < a; ++i) {
                for (int64_t j = 0; j < b; ++j) {
                    for (int64_t p = 0; p < c; ++p) {
                        const T* src = on->grad.data() + ((i * c + p) * b + j) * d;
                        T* dst = xn->grad.data() + ((i * b + j) * c + p) * d;
                        for (int64_t q = 0; q < d; ++q) dst[q] += src[q];
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_last(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() ||
        Shape(a.shape().begin(), a.shape().end() - 1) !=
            Shape(b.shape().begin(), b.shape().end() - 1)) {
        throw shape_error("concat_last: shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " differ beyond the last axis");
    }
    const int64_t da = a.shape().back();
    const int64_t db = b.shape().back();
    const int64_t rows = a.numel() / da;

    Shape out_shape = a.shape();
    out_shape.back() = da + db;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        T* dst = out.value().data() + r * (da + db);
        std::copy_n(a.value().data() + r * da, da, dst);
        std::copy_n(b.value().data() + r * db, db, dst + da);
    }

    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record([an, bn, on, rows, da, db]() mutable {
            if (on->grad.empty()) return;
            for (int64_t r = 0; r < rows; ++r) {
                const T* g = on->grad.data() + r * (da + db);
                if (an->requires_grad) {
                    detail::ensure_grad_buf(an);
                    T* ga = an->grad.data() + r * da;
                    for (int64_t j = 0; j < da; ++j) ga[j] += g[j];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad_buf(bn);
                    T* gb = bn->grad.data() + r * db;
                    for (int64_t j = 0; j < db; ++j) gb[j] += g[da + j];
                }
            }
        });
    }
    return out;
}

// ------------------------------------------------------------- activations

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.value()[i] = std::max(x.value()[i], T(0));

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) {
                if (xn->value[i] > T(0)) xn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = static_cast<double>(x.value()[i]);
        out.value()[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T y = on->value[i];
                xn->grad[i] += on->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> tanh_act(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        out.value()[i] = static_cast<T>(std::tanh(static_cast<double>(x.value()[i])));
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T y = on->value[i];
                xn->grad[i] += on->grad[i] * (T(1) - y * y);
            }
        });
    }
    return out;
}

// Row-stable softmax over the last axis (max subtraction per row).
template <class T>
Tensor<T> softmax_last(Tape<T>& tape, const Tensor<T>& x) {
    if (x.rank() < 1) throw shape_error("softmax_last: rank must be >= 1");
    const int64_t d = x.shape().back();
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = x.value().data() + r * d;
        T* op = out.value().data() + r * d;
        T mx = xp[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xp[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double e = std::exp(static_cast<double>(xp[j] - mx));
            op[j] = static_cast<T>(e);
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int64_t j = 0; j < d; ++j) op[j] = static_cast<T>(op[j] * inv);
    }
    detail::check_finite(out, "softmax");

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on, rows, d]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = on->value.data() + r * d;
                const T* g = on->grad.data() + r * d;
                T* gx = xn->grad.data() + r * d;
                T dot = T(0);
                for (int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
                for (int64_t j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// Normalizes the last axis to mean 0, variance 1, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps) {
    const int64_t d = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
        throw shape_error("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                          shape_str(bias.shape()) + " incompatible with x " +
                          shape_str(x.shape()));
    }
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    // Normalized values are saved for the backward rule.
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));

    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = x.value().data() + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += static_cast<double>(xp[j]);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = static_cast<double>(xp[j]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = static_cast<T>(inv);
        T* hp = xhat->data() + r * d;
        T* op = out.value().data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            const T h = static_cast<T>((static_cast<double>(xp[j]) - mean) * inv);
            hp[j] = h;
            op[j] = gain.value()[j] * h + bias.value()[j];
        }
    }
    detail::check_finite(out, "layer_norm");

    if (detail::track(tape, {&x, &gain, &bias})) {
        detail::mark_output(tape, out);
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        tape.record([xn, gn, bn, on, xhat, inv_std, rows, d]() mutable {
            if (on->grad.empty()) return;
            for (int64_t r = 0; r < rows; ++r) {
                const T* g = on->grad.data() + r * d;
                const T* h = xhat->data() + r * d;
                if (gn->requires_grad) {
                    detail::ensure_grad_buf(gn);
                    for (int64_t j = 0; j < d; ++j) gn->grad[j] += g[j] * h[j];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad_buf(bn);
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += g[j];
                }
                if (xn->requires_grad) {
                    detail::ensure_grad_buf(xn);
                    // dxhat = g * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    const T inv = (*inv_std)[static_cast<size_t>(r)];
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dh = static_cast<double>(g[j]) * gn->value[j];
                        sum_dh += dh;
                        sum_dh_h += dh * static_cast<double>(h[j]);
                    }
                    const double mean_dh = sum_dh / static_cast<double>(d);
                    const double mean_dh_h = sum_dh_h / static_cast<double>(d);
                    T* gx = xn->grad.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dh = static_cast<double>(g[j]) * gn->value[j];
                        gx[j] += static_cast<T>(inv * (dh - mean_dh -
                                                       static_cast<double>(h[j]) * mean_dh_h));
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- embedding

template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, const TokenBatch& ids) {
    if (table.rank() != 2) {
        throw shape_error("embedding_lookup: table must be [vocab, dim], got " +
                          shape_str(table.shape()));
    }
    const int64_t vocab = table.dim(0);
    const int64_t d = table.dim(1);
    for (int32_t id : ids.ids) {
        if (id < 0 || id >= vocab) {
            throw shape_error("embedding_lookup: token id " + std::to_string(id) +
                              " outside vocab of " + std::to_string(vocab));
        }
    }
    Tensor<T> out = Tensor<T>::zeros({ids.rows, ids.cols, d});
    for (int64_t i = 0; i < ids.rows * ids.cols; ++i) {
        const int64_t row = ids.ids[static_cast<size_t>(i)];
        std::copy_n(table.value().data() + row * d, d, out.value().data() + i * d);
    }

    if (detail::track(tape, {&table})) {
        detail::mark_output(tape, out);
        auto tn = table.node();
        auto on = out.node();
        auto idv = ids.ids;
        tape.record([tn, on, idv, d]() mutable {
            if (on->grad.empty() || !tn->requires_grad) return;
            detail::ensure_grad_buf(tn);
            for (size_t i = 0; i < idv.size(); ++i) {
                T* dst = tn->grad.data() + static_cast<int64_t>(idv[i]) * d;
                const T* src = on->grad.data() + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// -------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.value()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    detail::check_finite(out, "sum_all");

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            const T g = on->grad[0];
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> s = sum_all(tape, x);
    return scalar_mul(tape, s, 1.0 / static_cast<double>(x.numel()));
}

// Mean of x[i] over positions where mask[i] != 0. Throws when the mask is empty.
template <class T>
Tensor<T> masked_mean(Tape<T>& tape, const Tensor<T>& x, const std::vector<uint8_t>& mask) {
    if (static_cast<int64_t>(mask.size()) != x.numel()) {
        throw shape_error("masked_mean: mask length " + std::to_string(mask.size()) +
                          " does not match " + shape_str(x.shape()));
    }
    int64_t count = 0;
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (mask[static_cast<size_t>(i)]) {
            acc += static_cast<double>(x.value()[i]);
            ++count;
        }
    }
    if (count == 0) throw empty_batch_error("masked_mean: no unmasked positions");
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(count)));

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        auto m = mask;
        const T inv = static_cast<T>(1.0 / static_cast<double>(count));
        tape.record([xn, on, m, inv]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            const T g = on->grad[0] * inv;
            for (size_t i = 0; i < m.size(); ++i) {
                if (m[i]) xn->grad[i] += g;
            }
        });
    }
    return out;
}

// Per-token smoothed cross-entropy. logits [N, V], targets length N; returns [N].
// Target distribution: (1 - ls) one-hot + ls/V uniform.
template <class T>
Tensor<T> token_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                              const std::vector<int32_t>& targets, double label_smoothing) {
    if (logits.rank() != 2) {
        throw shape_error("token_cross_entropy: logits must be [tokens, vocab], got " +
                          shape_str(logits.shape()));
    }
    const int64_t n = logits.dim(0);
    const int64_t v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n) {
        throw shape_error("token_cross_entropy: " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(n) + " rows");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw config_error("token_cross_entropy: label smoothing must lie in [0,1)");
    }

    Tensor<T> out = Tensor<T>::zeros({n});
    // softmax probabilities are saved for the backward rule
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n * v));
    for (int64_t r = 0; r < n; ++r) {
        const int32_t t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= v) {
            throw shape_error("token_cross_entropy: target " + std::to_string(t) +
                              " outside vocab of " + std::to_string(v));
        }
        const T* xp = logits.value().data() + r * v;
        T mx = xp[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xp[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(xp[j] - mx));
        const double lse = static_cast<double>(mx) + std::log(denom);

        double sum_logp = 0.0;
        T* pp = probs->data() + r * v;
        for (int64_t j = 0; j < v; ++j) {
            const double logp = static_cast<double>(xp[j]) - lse;
            sum_logp += logp;
            pp[j] = static_cast<T>(std::exp(logp));
        }
        const double logp_t = static_cast<double>(xp[t]) - lse;
        const double loss = -(1.0 - label_smoothing) * logp_t -
                            label_smoothing / static_cast<double>(v) * sum_logp;
        out.value()[r] = static_cast<T>(loss);
    }
    detail::check_finite(out, "token_cross_entropy");

    if (detail::track(tape, {&logits})) {
        detail::mark_output(tape, out);
        auto ln = logits.node();
        auto on = out.node();
        auto tg = targets;
        const double ls = label_smoothing;
        tape.record([ln, on, probs, tg, ls, n, v]() mutable {
            if (on->grad.empty() || !ln->requires_grad) return;
            detail::ensure_grad_buf(ln);
            const T uniform = static_cast<T>(ls / static_cast<double>(v));
            for (int64_t r = 0; r < n; ++r) {
                const T g = on->grad[static_cast<size_t>(r)];
                if (g == T(0)) continue;
                const T* pp = probs->data() + r * v;
                T* gx = ln->grad.data() + r * v;
                for (int64_t j = 0; j < v; ++j) gx[j] += g * (pp[j] - uniform);
                gx[tg[static_cast<size_t>(r)]] -= g * static_cast<T>(1.0 - ls);
            }
        });
    }
    return out;
}

// ------------------------------------------------------------------ dropout

// Inverted dropout; identity when p == 0. Mask order is a deterministic
// function of the RNG stream.
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw config_error("dropout: rate must be below 1");

    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x.numel()));
    const T scale_up = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const bool keep = rng.uniform() >= p;
        (*mask)[static_cast<size_t>(i)] = keep ? 1 : 0;
        out.value()[i] = keep ? x.value()[i] * scale_up : T(0);
    }

    if (detail::track(tape, {&x})) {
        detail::mark_output(tape, out);
        auto xn = x.node();
        auto on = out.node();
        tape.record([xn, on, mask, scale_up]() mutable {
            if (on->grad.empty() || !xn->requires_grad) return;
            detail::ensure_grad_buf(xn);
            for (size_t i = 0; i < on->grad.size(); ++i) {
                if ((*mask)[i]) xn->grad[i] += scale_up * on->grad[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------- plain utilities

template <class T>
std::vector<int32_t> argmax_last(const Tensor<T>& x) {
    const int64_t d = x.shape().back();
    const int64_t rows = x.numel() / d;
    std::vector<int32_t> out(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = x.value().data() + r * d;
        int32_t best = 0;
        for (int64_t j = 1; j < d; ++j) {
            // Ties break toward the lowest index.
            if (xp[j] > xp[best]) best = static_cast<int32_t>(j);
        }
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

template <class T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
    for (T& v : t.value()) v = static_cast<T>(rng.normal(mean, stddev));
}

template <class T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (T& v : t.value()) v = static_cast<T>(rng.uniform(lo, hi));
}

} // namespace odeformer::tensor
