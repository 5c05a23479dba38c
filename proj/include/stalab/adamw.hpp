#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace stalab {

/// Adam with decoupled weight decay over a flat parameter buffer:
///   p ← p − lr·wd·p;  m ← β1·m + (1−β1)·g;  v ← β2·v + (1−β2)·g²;
///   p ← p − lr·m̂ / (√v̂ + ε)  with bias-corrected m̂, v̂.
template <typename T>
class AdamW {
public:
    struct Options {
        double lr = 0.005;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    AdamW(std::size_t n, Options options) : m_options(options), m_m(n, T(0)), m_v(n, T(0)) {}

    const Options& options() const noexcept { return m_options; }
    void set_lr(double lr) noexcept { m_options.lr = lr; }
    std::size_t step_count() const noexcept { return m_step; }

    void reset() {
        std::fill(m_m.begin(), m_m.end(), T(0));
        std::fill(m_v.begin(), m_v.end(), T(0));
        m_step = 0;
    }

    /// Advances the step counter; call once per optimizer step before `update`.
    void begin_step() { ++m_step; }

    /// Updates params[offset, offset + n) in place using the moment slots at
    /// the same offset.
    void update(std::span<T> params, std::span<const T> grads, std::size_t offset = 0) {
        const double t = static_cast<double>(m_step);
        const double bc1 = 1.0 - std::pow(m_options.beta1, t);
        const double bc2 = 1.0 - std::pow(m_options.beta2, t);
        const T lr = static_cast<T>(m_options.lr);
        const T decay = static_cast<T>(1.0 - m_options.lr * m_options.weight_decay);
        const T b1 = static_cast<T>(m_options.beta1);
        const T b2 = static_cast<T>(m_options.beta2);
        const T eps = static_cast<T>(m_options.eps);
        const T inv_bc1 = static_cast<T>(1.0 / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const T g = grads[i];
            T& m = m_m[offset + i];
            T& v = m_v[offset + i];
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g * g;
            const T mhat = m * inv_bc1;
            const T vhat = v * inv_bc2;
            params[i] = params[i] * decay - lr * mhat / (std::sqrt(vhat) + eps);
        }
    }

    void step(std::span<T> params, std::span<const T> grads) {
        begin_step();
        update(params, grads, 0);
    }

private:
    Options m_options;
    std::vector<T> m_m;
    std::vector<T> m_v;
    std::size_t m_step = 0;
};

} // namespace stalab
