#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>

#include "common.hpp"

namespace uimm {

// Reverse-mode autodiff over dense row-major tensors. The design is a flat
// tape: each recorded op pushes one backward closure, and backward() replays
// the closures in reverse creation order. Gradients of tape-produced tensors
// are zeroed at the start of every backward pass, while leaf gradients
// accumulate additively until the caller resets them; replaying backward on
// the same graph therefore yields bit-identical contributions.

template <class T>
struct TensorImplT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first needed
    bool requires_grad = false;
};

template <class T>
class TensorT {
  public:
    using Impl = TensorImplT<T>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data.assign(static_cast<size_t>(numel_of(impl->shape)), T(0));
        impl->requires_grad = requires_grad;
        return TensorT(impl);
    }

    static TensorT full(std::vector<int> shape, T value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
            throw ShapeError("from_data: " + std::to_string(data.size()) + " values incompatible with shape " +
                             shape_str(shape));
        }
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        return TensorT(impl);
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& vec() { return impl_->data; }
    const std::vector<T>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Leaf gradient view; sized on demand so untouched leaves stay cheap.
    std::vector<T>& grad() {
        if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), T(0)); }

    T item() const {
        if (numel() != 1) throw UsageError("item: tensor with shape " + shape_str(impl_->shape) + " is not scalar");
        return impl_->data[0];
    }

    TensorT clone(bool requires_grad = false) const {
        return from_data(impl_->shape, impl_->data, requires_grad);
    }

    void fill_uniform(Rng& rng, T lo, T hi) {
        std::uniform_real_distribution<T> dist(lo, hi);
        for (auto& v : impl_->data) v = dist(rng);
    }

    void fill_normal(Rng& rng, T mean, T stddev) {
        std::normal_distribution<T> dist(mean, stddev);
        for (auto& v : impl_->data) v = dist(rng);
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

  private:
    std::shared_ptr<Impl> impl_;
};

template <class T>
class TapeT {
  public:
    using Impl = TensorImplT<T>;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(std::shared_ptr<Impl> out, std::function<void()> back) {
        nodes_.push_back(Node{std::move(out), std::move(back)});
    }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
    // `loss`. Non-leaf gradients are scratch: zeroed here, overwritten during
    // the sweep.
    void backward(const TensorT<T>& loss) {
        if (loss.numel() != 1) {
            throw UsageError("backward: loss with shape " + shape_str(loss.shape()) + " is not scalar");
        }
        for (auto& node : nodes_) {
            node.out->grad.assign(node.out->data.size(), T(0));
        }
        auto loss_impl = loss.impl();
        if (loss_impl->grad.size() != loss_impl->data.size()) {
            loss_impl->grad.assign(loss_impl->data.size(), T(0));
        }
        loss_impl->grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->back();
        }
    }

    struct NoGrad {
        explicit NoGrad(TapeT& tape) : tape_(tape), saved_(tape.recording_) { tape_.recording_ = false; }
        ~NoGrad() { tape_.recording_ = saved_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

      private:
        TapeT& tape_;
        bool saved_;
    };

  private:
    struct Node {
        std::shared_ptr<Impl> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool recording_ = true;
};

namespace detail {

template <class T>
std::vector<T>& ensure_grad(const std::shared_ptr<TensorImplT<T>>& impl) {
    if (impl->grad.size() != impl->data.size()) impl->grad.assign(impl->data.size(), T(0));
    return impl->grad;
}

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the inner loop contiguous and
// the accumulation order fixed, so results are reproducible bit-for-bit.
template <class T>
void raw_matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        T* crow = c + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T  (i.e. A times B-transposed).
template <class T>
void raw_matmul_bt_acc(const T* a, const T* b, T* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * n;
        T* crow = c + static_cast<int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T* brow = b + static_cast<int64_t>(p) * n;
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n].
template <class T>
void raw_matmul_at_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        const T* brow = b + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
bool want_grad(const TapeT<T>& tape, std::initializer_list<const TensorT<T>*> inputs) {
    if (!tape.recording()) return false;
    for (const TensorT<T>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

// --- elementwise -------------------------------------------------------

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("add", a, b);
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, n] {
            const std::vector<T>& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> sub(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("sub", a, b);
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, n] {
            const std::vector<T>& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mul", a, b);
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, n] {
            const std::vector<T>& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * ai->data[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> scale(TapeT<T>& tape, const TensorT<T>& a, T s) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, s, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * s;
        });
    }
    return out;
}

// out = alpha*a + beta*b; the workhorse for noise mixing and residuals.
template <class T>
TensorT<T> axpby(TapeT<T>& tape, T alpha, const TensorT<T>& a, T beta, const TensorT<T>& b) {
    check_same_shape("axpby", a, b);
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = alpha * pa[i] + beta * pb[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, alpha, beta, n] {
            const std::vector<T>& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += alpha * go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] += beta * go[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> clamp(TapeT<T>& tape, const TensorT<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw UsageError("clamp: lo > hi");
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = std::min(hi, std::max(lo, pa[i]));
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, lo, hi, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            const std::vector<T>& x = ai->data;
            // True local gradient: zero where the clamp is active.
            for (int64_t i = 0; i < n; ++i) {
                if (x[i] >= lo && x[i] <= hi) ga[i] += go[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> silu(TapeT<T>& tape, const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            const std::vector<T>& x = ai->data;
            for (int64_t i = 0; i < n; ++i) {
                const T s = T(1) / (T(1) + std::exp(-x[i]));
                ga[i] += go[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> sigmoid(TapeT<T>& tape, const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-pa[i]));
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            const std::vector<T>& y = oi->data;
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * y[i] * (T(1) - y[i]);
        });
    }
    return out;
}

// --- reshaping / permuting ----------------------------------------------

template <class T>
TensorT<T> reshape(TapeT<T>& tape, const TensorT<T>& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    TensorT<T> out = TensorT<T>::from_data(std::move(new_shape), a.vec());
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        const int64_t n = a.numel();
        tape.record(oi, [ai, oi, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
        });
    }
    return out;
}

template <class T>
TensorT<T> transpose2d(TapeT<T>& tape, const TensorT<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d: expected rank-2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n, m});
    const T* pa = a.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[static_cast<int64_t>(j) * m + i] = pa[static_cast<int64_t>(i) * n + j];
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, m, n] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[static_cast<int64_t>(i) * n + j] += go[static_cast<int64_t>(j) * m + i];
        });
    }
    return out;
}

// [C,H,W] -> [H*W, C]: rows are spatial positions, the token layout used by
// the attention blocks.
template <class T>
TensorT<T> chw_to_nc(TapeT<T>& tape, const TensorT<T>& a) {
    if (a.rank() != 3) throw ShapeError("chw_to_nc: expected rank-3, got " + shape_str(a.shape()));
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    const int hw = h * w;
    TensorT<T> out = TensorT<T>::zeros({hw, c});
    const T* pa = a.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) po[static_cast<int64_t>(p) * c + ch] = pa[static_cast<int64_t>(ch) * hw + p];
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, c, hw] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    ga[static_cast<int64_t>(ch) * hw + p] += go[static_cast<int64_t>(p) * c + ch];
        });
    }
    return out;
}

template <class T>
TensorT<T> nc_to_chw(TapeT<T>& tape, const TensorT<T>& a, int h, int w) {
    if (a.rank() != 2) throw ShapeError("nc_to_chw: expected rank-2, got " + shape_str(a.shape()));
    if (a.dim(0) != h * w) {
        throw ShapeError("nc_to_chw: rows " + std::to_string(a.dim(0)) + " incompatible with " + std::to_string(h) +
                         "x" + std::to_string(w));
    }
    const int c = a.dim(1);
    const int hw = h * w;
    TensorT<T> out = TensorT<T>::zeros({c, h, w});
    const T* pa = a.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) po[static_cast<int64_t>(ch) * hw + p] = pa[static_cast<int64_t>(p) * c + ch];
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, c, hw] {
            auto& ga = detail::ensure_grad(ai);
            const std::vector<T>& go = oi->grad;
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    ga[static_cast<int64_t>(p) * c + ch] += go[static_cast<int64_t>(ch) * hw + p];
        });
    }
    return out;
}

// --- matmul / linear -----------------------------------------------------

template <class T>
TensorT<T> matmul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out = TensorT<T>::zeros({m, n});
    detail::raw_matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, m, k, n] {
            const T* go = oi->grad.data();
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                detail::raw_matmul_bt_acc(go, bi->data.data(), ga.data(), m, n, k);  // dA = dC * B^T
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                detail::raw_matmul_at_acc(ai->data.data(), go, gb.data(), m, k, n);  // dB = A^T * dC
            }
        });
    }
    return out;
}

// y[N,M] = x[N,M] + b[M] broadcast over rows.
template <class T>
TensorT<T> bias_add_rows(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
        throw ShapeError("bias_add_rows: shapes disagree: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    }
    const int rows = x.dim(0), cols = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) po[static_cast<int64_t>(i) * cols + j] = px[static_cast<int64_t>(i) * cols + j] + pb[j];
    if (detail::want_grad(tape, {&x, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [xi, bi, oi, rows, cols] {
            const std::vector<T>& go = oi->grad;
            if (xi->requires_grad) {
                auto& gx = detail::ensure_grad(xi);
                for (int64_t i = 0; i < static_cast<int64_t>(rows) * cols; ++i) gx[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) gb[j] += go[static_cast<int64_t>(i) * cols + j];
            }
        });
    }
    return out;
}

// y[C,H,W] = x[C,H,W] + b[C] broadcast over spatial positions.
template <class T>
TensorT<T> bias_add_chw(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& b) {
    if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0)) {
        throw ShapeError("bias_add_chw: shapes disagree: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    }
    const int c = x.dim(0);
    const int hw = x.dim(1) * x.dim(2);
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch) {
        const T bv = pb[ch];
        const int64_t base = static_cast<int64_t>(ch) * hw;
        for (int p = 0; p < hw; ++p) po[base + p] = px[base + p] + bv;
    }
    if (detail::want_grad(tape, {&x, &b})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [xi, bi, oi, c, hw] {
            const std::vector<T>& go = oi->grad;
            if (xi->requires_grad) {
                auto& gx = detail::ensure_grad(xi);
                for (int64_t i = 0; i < static_cast<int64_t>(c) * hw; ++i) gx[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int ch = 0; ch < c; ++ch) {
                    const int64_t base = static_cast<int64_t>(ch) * hw;
                    T acc = T(0);
                    for (int p = 0; p < hw; ++p) acc += go[base + p];
                    gb[ch] += acc;
                }
            }
        });
    }
    return out;
}

// --- conv2d ---------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* cols) {
    // cols is [(c*kh*kw) x (oh*ow)] row-major.
    const int ohw = oh * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* crow = cols + static_cast<int64_t>((ch * kh + ki) * kw + kj) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) crow[oy * ow + ox] = T(0);
                        continue;
                    }
                    const T* xrow = x + (static_cast<int64_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        crow[oy * ow + ox] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* gx) {
    const int ohw = oh * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* crow = cols + static_cast<int64_t>((ch * kh + ki) * kw + kj) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    T* xrow = gx + (static_cast<int64_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) xrow[ix] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x[C,H,W] (*) w[O,C,kh,kw], cross-correlation with zero padding.
template <class T>
TensorT<T> conv2d(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& w, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw ShapeError("conv2d: expected input [C,H,W] and weight [O,C,kh,kw], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    if (w.dim(1) != x.dim(0)) {
        throw ShapeError("conv2d: channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    }
    if (stride < 1) throw UsageError("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) throw UsageError("conv2d: pad must be >= 0, got " + std::to_string(pad));
    const int c = x.dim(0), h = x.dim(1), wdt = x.dim(2);
    const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (kh > h + 2 * pad || kw > wdt + 2 * pad) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()) + " with pad " + std::to_string(pad));
    }
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wdt + 2 * pad - kw) / stride + 1;
    const int ckk = c * kh * kw;
    const int ohw = oh * ow;

    std::vector<T> cols(static_cast<size_t>(ckk) * ohw);
    detail::im2col(x.data(), c, h, wdt, kh, kw, stride, pad, oh, ow, cols.data());

    TensorT<T> out = TensorT<T>::zeros({o, oh, ow});
    detail::raw_matmul_acc(w.data(), cols.data(), out.data(), o, ckk, ohw);

    if (detail::want_grad(tape, {&x, &w})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = w.impl();
        auto oi = out.impl();
        auto saved_cols = std::make_shared<std::vector<T>>(std::move(cols));
        tape.record(oi, [xi, wi, oi, saved_cols, c, h, wdt, kh, kw, stride, pad, oh, ow, o, ckk, ohw] {
            const T* go = oi->grad.data();
            if (wi->requires_grad) {
                auto& gw = detail::ensure_grad(wi);
                // dW[o,ckk] += dOut[o,ohw] * cols[ckk,ohw]^T
                detail::raw_matmul_bt_acc(go, saved_cols->data(), gw.data(), o, ohw, ckk);
            }
            if (xi->requires_grad) {
                std::vector<T> gcols(static_cast<size_t>(ckk) * ohw, T(0));
                // dCols[ckk,ohw] = W[o,ckk]^T * dOut[o,ohw]
                detail::raw_matmul_at_acc(wi->data.data(), go, gcols.data(), o, ckk, ohw);
                auto& gx = detail::ensure_grad(xi);
                detail::col2im_acc(gcols.data(), c, h, wdt, kh, kw, stride, pad, oh, ow, gx.data());
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> upsample_nearest2(TapeT<T>& tape, const TensorT<T>& x) {
    if (x.rank() != 3) throw ShapeError("upsample_nearest2: expected rank-3, got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    TensorT<T> out = TensorT<T>::zeros({c, 2 * h, 2 * w});
    const T* px = x.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const T v = px[(static_cast<int64_t>(ch) * h + y) * w + xx];
                T* base = po + (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                base[0] = v;
                base[1] = v;
                base[2 * w] = v;
                base[2 * w + 1] = v;
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape.record(oi, [xi, oi, c, h, w] {
            auto& gx = detail::ensure_grad(xi);
            const std::vector<T>& go = oi->grad;
            for (int ch = 0; ch < c; ++ch) {
                for (int y = 0; y < h; ++y) {
                    for (int xx = 0; xx < w; ++xx) {
                        const int64_t base = (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                        gx[(static_cast<int64_t>(ch) * h + y) * w + xx] +=
                            go[base] + go[base + 1] + go[base + 2 * w] + go[base + 2 * w + 1];
                    }
                }
            }
        });
    }
    return out;
}

// --- normalization / attention pieces ------------------------------------

template <class T>
TensorT<T> group_norm(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      int groups, T eps = T(1e-5)) {
    if (x.rank() != 3) throw ShapeError("group_norm: expected rank-3 input, got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (groups < 1 || c % groups != 0) {
        throw ShapeError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                         std::to_string(groups));
    }
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
        throw ShapeError("group_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " incompatible with channels " + std::to_string(c));
    }
    const int cpg = c / groups;
    const int64_t gsize = static_cast<int64_t>(cpg) * h * w;
    const int hw = h * w;

    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> mean(groups), inv_std(groups);
    const T* px = x.data();
    T* po = out.data();
    for (int g = 0; g < groups; ++g) {
        const T* base = px + static_cast<int64_t>(g) * gsize;
        T m = T(0);
        for (int64_t i = 0; i < gsize; ++i) m += base[i];
        m /= static_cast<T>(gsize);
        T var = T(0);
        for (int64_t i = 0; i < gsize; ++i) {
            const T d = base[i] - m;
            var += d * d;
        }
        var /= static_cast<T>(gsize);
        mean[g] = m;
        inv_std[g] = T(1) / std::sqrt(var + eps);
    }
    const T* pg = gamma.data();
    const T* pb = beta.data();
    for (int ch = 0; ch < c; ++ch) {
        const int g = ch / cpg;
        const T m = mean[g], is = inv_std[g], gm = pg[ch], bt = pb[ch];
        const int64_t base = static_cast<int64_t>(ch) * hw;
        for (int p = 0; p < hw; ++p) po[base + p] = gm * (px[base + p] - m) * is + bt;
    }

    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto oi = out.impl();
        auto saved_mean = std::make_shared<std::vector<T>>(std::move(mean));
        auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_std));
        tape.record(oi, [xi, gi, bi, oi, saved_mean, saved_inv, groups, cpg, hw, gsize, c] {
            const std::vector<T>& go = oi->grad;
            const std::vector<T>& x = xi->data;
            const std::vector<T>& gamma = gi->data;
            if (gi->requires_grad || bi->requires_grad) {
                for (int ch = 0; ch < c; ++ch) {
                    const int g = ch / cpg;
                    const T m = (*saved_mean)[g], is = (*saved_inv)[g];
                    const int64_t base = static_cast<int64_t>(ch) * hw;
                    T dg = T(0), db = T(0);
                    for (int p = 0; p < hw; ++p) {
                        dg += go[base + p] * (x[base + p] - m) * is;
                        db += go[base + p];
                    }
                    if (gi->requires_grad) detail::ensure_grad(gi)[ch] += dg;
                    if (bi->requires_grad) detail::ensure_grad(bi)[ch] += db;
                }
            }
            if (xi->requires_grad) {
                auto& gx = detail::ensure_grad(xi);
                for (int g = 0; g < groups; ++g) {
                    const T m = (*saved_mean)[g], is = (*saved_inv)[g];
                    const int64_t gbase = static_cast<int64_t>(g) * gsize;
                    // dxhat = go * gamma_c; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int ch = g * cpg + cc;
                        const int64_t base = static_cast<int64_t>(ch) * hw;
                        for (int p = 0; p < hw; ++p) {
                            const T dxh = go[base + p] * gamma[ch];
                            const T xh = (x[base + p] - m) * is;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                    }
                    const T mean_dxhat = sum_dxhat / static_cast<T>(gsize);
                    const T mean_dxhat_xhat = sum_dxhat_xhat / static_cast<T>(gsize);
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int ch = g * cpg + cc;
                        const int64_t base = static_cast<int64_t>(ch) * hw;
                        for (int p = 0; p < hw; ++p) {
                            const T dxh = go[base + p] * gamma[ch];
                            const T xh = (x[base + p] - m) * is;
                            gx[base + p] += is * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                    (void)gbase;
                }
            }
        });
    }
    return out;
}

// Row-wise softmax with row-max subtraction for overflow safety.
template <class T>
TensorT<T> softmax_rows(TapeT<T>& tape, const TensorT<T>& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows: expected rank-2, got " + shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int i = 0; i < rows; ++i) {
        const T* xr = px + static_cast<int64_t>(i) * cols;
        T* yr = po + static_cast<int64_t>(i) * cols;
        T mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < cols; ++j) yr[j] *= inv;
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape.record(oi, [xi, oi, rows, cols] {
            auto& gx = detail::ensure_grad(xi);
            const std::vector<T>& go = oi->grad;
            const std::vector<T>& y = oi->data;
            for (int i = 0; i < rows; ++i) {
                const int64_t base = static_cast<int64_t>(i) * cols;
                T dot = T(0);
                for (int j = 0; j < cols; ++j) dot += go[base + j] * y[base + j];
                for (int j = 0; j < cols; ++j) gx[base + j] += y[base + j] * (go[base + j] - dot);
            }
        });
    }
    return out;
}

// --- reductions -----------------------------------------------------------

template <class T>
TensorT<T> sum_all(TapeT<T>& tape, const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros({1});
    const int64_t n = a.numel();
    const T* pa = a.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    out.data()[0] = acc;
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, oi, n] {
            auto& ga = detail::ensure_grad(ai);
            const T g = oi->grad[0];
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

// Mean over elements of (a - b)^2; the building block of every loss here.
template <class T>
TensorT<T> mse(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mse", a, b);
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T d = pa[i] - pb[i];
        acc += d * d;
    }
    TensorT<T> out = TensorT<T>::scalar(acc / static_cast<T>(n));
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        tape.record(oi, [ai, bi, oi, n] {
            const T g = oi->grad[0] * T(2) / static_cast<T>(n);
            if (ai->requires_grad) {
                auto& ga = detail::ensure_grad(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += g * (ai->data[i] - bi->data[i]);
            }
            if (bi->requires_grad) {
                auto& gb = detail::ensure_grad(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] -= g * (ai->data[i] - bi->data[i]);
            }
        });
    }
    return out;
}

// --- optimizer --------------------------------------------------------------

template <class T>
struct AdamT {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

    void step(std::vector<TensorT<T>>& params) {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t_));
        for (auto& p : params) {
            auto impl = p.impl().get();
            auto& slot = slots_[impl];
            const size_t n = impl->data.size();
            if (slot.m.size() != n) {
                slot.m.assign(n, T(0));
                slot.v.assign(n, T(0));
            }
            std::vector<T>& g = p.grad();
            for (size_t i = 0; i < n; ++i) {
                slot.m[i] = beta1 * slot.m[i] + (T(1) - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (T(1) - beta2) * g[i] * g[i];
                const T mhat = slot.m[i] / bc1;
                const T vhat = slot.v[i] / bc2;
                impl->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

  private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::unordered_map<TensorImplT<T>*, Slot> slots_;
    int64_t t_ = 0;
};

template <class T>
void zero_grads(std::vector<TensorT<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace uimm
