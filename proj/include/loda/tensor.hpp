#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "loda/errors.hpp"

namespace loda {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);
Shape row_major_strides(const Shape& s);

/// Deterministic random stream. The core generator is std::mt19937_64, whose
/// output sequence is fully specified by the C++ standard, so identical seeds
/// give identical draws on every platform. The uniform and normal mappings
/// are implemented here (53-bit mantissa scaling and Box-Muller) because the
/// std::*_distribution adapters are not portable across standard libraries.
class Rng {
 public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0,1) from the top 53 bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal(double mean, double stddev);

    /// Derives an independent child seed (splitmix64 mix of seed and stream id).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily on first accumulation
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const std::vector<double>&)> backprop;  // pulls out-grad into parents

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

/// Cheap-to-copy handle over a shared tensor node. Data is always contiguous
/// row-major; a rank-0 shape denotes a scalar (numel 1).
class Tensor {
 public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor ones(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_values(const Shape& shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);
    static Tensor normal(const Shape& shape, double mean, double stddev, Rng& rng,
                         bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl != nullptr; }
    const Shape& shape() const { return impl->shape; }
    int ndim() const { return static_cast<int>(impl->shape.size()); }
    std::int64_t numel() const { return impl->numel(); }
    std::int64_t extent(int axis) const { return impl->shape[static_cast<std::size_t>(axis)]; }

    std::vector<double>& values() { return impl->data; }
    const std::vector<double>& values() const { return impl->data; }

    bool requires_grad() const { return impl->requires_grad; }
    void set_requires_grad(bool flag);
    bool has_grad() const { return impl && !impl->grad.empty(); }
    const std::vector<double>& grad_values() const;
    void zero_grad();

    double item() const;
    double at(std::initializer_list<std::int64_t> index) const;

    /// Copy of the data with no tape history and no gradient flag.
    Tensor detach() const;

    std::shared_ptr<TensorImpl> impl;
};

/// While alive, ops do not record tape nodes and outputs never require grad.
class NoGradGuard {
 public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
    bool prev_;
};

bool grad_enabled();

// Element-wise (numpy-style right-aligned broadcasting on add/sub/mul)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D, or batched with equal leading dims
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);  // x·W + b over last axis

// Convolution / pooling, input layout (batch, channels, height, width)
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding);
Tensor avgpool2d(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Normalization / attention building blocks
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor softmax(const Tensor& x, int axis);

// Shape manipulation
Tensor reshape(const Tensor& x, const Shape& new_shape);
Tensor flatten(const Tensor& x, int from_axis);  // collapses [from_axis..end) into one axis
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor transpose(const Tensor& x, const std::vector<int>& axes);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end);

// Reductions
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// Reverse-mode sweep from a scalar loss. Accumulates dLoss/dT into every
/// reachable tensor with requires_grad, then drops the tape edges so graph
/// memory is released even if handles to intermediate values survive.
void backward(const Tensor& loss);

/// Central-difference gradient oracle: (f(x+h·e) - f(x-h·e)) / 2h per element.
/// f must be pure; x is evaluated through detached copies so no tape is built.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace loda
