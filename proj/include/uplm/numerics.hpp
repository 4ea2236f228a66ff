#pragma once

// Dense tensors, named parameter layouts, the Adam optimizer and a central
// finite-difference gradient checker.
//
// Sign convention: every objective in this library is minimized. Objectives
// the model maximizes (log-likelihoods, log-posteriors) are passed in negated.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "uplm/errors.hpp"

namespace uplm {

/// Storage viewed through Eigen maps. A fixed 64-byte base alignment keeps
/// Eigen's vectorized reductions on the same summation order from run to run;
/// with malloc alignment the peeling, and so the last bits, depend on the address.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_{std::move(shape)}, data_(extent_product(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_{std::move(shape)}, data_(data.begin(), data.end()) {
        if (data_.size() != extent_product(shape_)) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static Tensor from_vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor{{n}, std::move(values)};
    }

    [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }
    [[nodiscard]] std::span<double> span() noexcept { return data_; }
    [[nodiscard]] std::span<const double> span() const noexcept { return data_; }
    [[nodiscard]] const AlignedVector& values() const noexcept { return data_; }
    [[nodiscard]] AlignedVector& values() noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    bool operator==(const Tensor&) const = default;

private:
    static std::size_t extent_product(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto e : shape) {
            if (e == 0) throw std::invalid_argument("Tensor: extents must be positive");
            n *= e;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    AlignedVector data_;
};

struct BlockInfo {
    std::string name;
    std::size_t rows{0};
    std::size_t cols{0};
    std::size_t offset{0};

    [[nodiscard]] std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const BlockInfo&) const = default;
};

/// Named row-major blocks packed back to back into one flat vector.
class ParameterLayout {
public:
    std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
        if (find(name)) throw std::invalid_argument("ParameterLayout: duplicate block " + name);
        blocks_.push_back({std::move(name), rows, cols, total_});
        total_ += rows * cols;
        return blocks_.back().offset;
    }

    [[nodiscard]] const BlockInfo* find(std::string_view name) const noexcept {
        for (const auto& b : blocks_) {
            if (b.name == name) return &b;
        }
        return nullptr;
    }

    [[nodiscard]] const BlockInfo& at(std::string_view name) const {
        if (const auto* b = find(name)) return *b;
        throw std::out_of_range("ParameterLayout: no block named " + std::string{name});
    }

    /// Block containing flat index `i`.
    [[nodiscard]] const BlockInfo& block_of(std::size_t i) const {
        for (const auto& b : blocks_) {
            if (i >= b.offset && i < b.offset + b.size()) return b;
        }
        throw std::out_of_range("ParameterLayout: index beyond layout");
    }

    [[nodiscard]] const std::vector<BlockInfo>& blocks() const noexcept { return blocks_; }
    [[nodiscard]] std::size_t total_size() const noexcept { return total_; }

    bool operator==(const ParameterLayout&) const = default;

private:
    std::vector<BlockInfo> blocks_;
    std::size_t total_{0};
};

/// A scalar function of a flat parameter vector that can report its gradient.
template <class F>
concept DifferentiableObjective =
    requires(F& f, std::span<const double> w, std::span<double> g) {
        { f.value(w) } -> std::convertible_to<double>;
        { f.value_and_gradient(w, g) } -> std::convertible_to<double>;
    };

namespace detail {

inline std::string describe_index(std::size_t i, const ParameterLayout* layout) {
    std::ostringstream os;
    os << "parameter " << i;
    if (layout && i < layout->total_size()) {
        const auto& b = layout->block_of(i);
        os << " (block '" << b.name << "', entry " << (i - b.offset) << ")";
    }
    return os.str();
}

}  // namespace detail

/// Gradient of `objective` at `at`. Throws NumericError naming the parameter
/// block of the first non-finite entry.
template <DifferentiableObjective F>
Tensor grad(F& objective, const Tensor& at, const ParameterLayout* layout = nullptr) {
    Tensor g{at.shape(), 0.0};
    const double value = objective.value_and_gradient(at.span(), g.span());
    if (!std::isfinite(value)) throw NumericError("grad: objective value is not finite");
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
            throw NumericError("grad: non-finite gradient at " + detail::describe_index(i, layout));
        }
    }
    return g;
}

struct AdamState {
    std::size_t step{0};
    Tensor m;
    Tensor v;
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};

    static AdamState for_parameters(std::size_t n) {
        AdamState s;
        s.m = Tensor{{n}, 0.0};
        s.v = Tensor{{n}, 0.0};
        return s;
    }
};

/// In-place bias-corrected Adam descent step: params -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_update(AdamState& state, std::span<double> params, std::span<const double> grad,
                        double lr) {
    if (params.size() != grad.size() || state.m.size() != params.size() ||
        state.v.size() != params.size()) {
        throw std::invalid_argument("adam_update: shape mismatch");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("adam_update: learning rate must be positive");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    double* m = state.m.data();
    double* v = state.v.data();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

inline std::pair<AdamState, Tensor> adam_step(AdamState state, Tensor params, const Tensor& grad,
                                              double lr) {
    if (params.shape() != grad.shape()) throw std::invalid_argument("adam_step: shape mismatch");
    adam_update(state, params.span(), grad.span(), lr);
    return {std::move(state), std::move(params)};
}

/// Scales `g` in place so that its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::span<double> g, double max_norm) {
    double sq = 0.0;
    for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (double& x : g) x *= s;
    }
    return norm;
}

struct FiniteDifferenceReport {
    std::vector<std::size_t> indices;
    std::vector<double> analytic;
    std::vector<double> numeric;
    std::vector<double> relative_error;
    double max_relative_error{0.0};
    std::size_t worst_index{0};
    bool passed{true};
};

struct FiniteDifferenceOptions {
    double h{1e-5};
    double tol{1e-4};
    /// Denominator floor: |a - n| / max(|a|, |n|, floor).
    double floor{1e-6};
    /// Empty = check every coordinate.
    std::vector<std::size_t> indices;
};

/// Compares the analytic gradient against central differences coordinate by coordinate.
template <DifferentiableObjective F>
FiniteDifferenceReport finite_difference_check(F& objective, std::span<const double> at,
                                               const FiniteDifferenceOptions& opt) {
    if (!(opt.h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be positive");
    FiniteDifferenceReport report;
    std::vector<double> w(at.begin(), at.end());
    std::vector<double> g(w.size(), 0.0);
    objective.value_and_gradient(w, g);

    if (opt.indices.empty()) {
        report.indices.resize(w.size());
        std::iota(report.indices.begin(), report.indices.end(), std::size_t{0});
    } else {
        report.indices = opt.indices;
    }
    for (std::size_t i : report.indices) {
        const double saved = w[i];
        w[i] = saved + opt.h;
        const double plus = objective.value(w);
        w[i] = saved - opt.h;
        const double minus = objective.value(w);
        w[i] = saved;
        const double numeric = (plus - minus) / (2.0 * opt.h);
        const double analytic = g[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
        double rel = std::abs(analytic - numeric) / denom;
        if (!std::isfinite(rel)) rel = std::numeric_limits<double>::infinity();
        report.analytic.push_back(analytic);
        report.numeric.push_back(numeric);
        report.relative_error.push_back(rel);
        if (rel >= report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_relative_error < opt.tol;
    return report;
}

/// Adapts a pair of callables into a DifferentiableObjective.
class LambdaObjective {
public:
    using ValueFn = std::function<double(std::span<const double>)>;
    using GradFn = std::function<void(std::span<const double>, std::span<double>)>;

    LambdaObjective(ValueFn value, GradFn gradient)
        : value_{std::move(value)}, gradient_{std::move(gradient)} {}

    double value(std::span<const double> w) { return value_(w); }
    double value_and_gradient(std::span<const double> w, std::span<double> g) {
        std::fill(g.begin(), g.end(), 0.0);
        gradient_(w, g);
        return value_(w);
    }

private:
    ValueFn value_;
    GradFn gradient_;
};

}  // namespace uplm
