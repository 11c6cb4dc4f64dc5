#include "loda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace loda {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void check_shape_extents(const Shape& shape, const char* who) {
    for (auto e : shape) {
        if (e < 1) {
            throw ShapeError(std::string(who) + ": non-positive extent in shape " + shape_str(shape));
        }
    }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

void accumulate(TensorImpl& t, const std::vector<double>& g) {
    if (!t.requires_grad) {
        return;
    }
    if (t.grad.size() != t.data.size()) {
        t.grad.assign(t.data.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        t.grad[i] += g[i];
    }
}

// Records a tape node when grad mode is on and any parent requires grad.
void attach(const Tensor& out, std::vector<std::shared_ptr<TensorImpl>> parents,
            std::function<void(const std::vector<double>&)> backprop) {
    if (!g_grad_enabled) {
        return;
    }
    bool any = false;
    for (const auto& p : parents) {
        any = any || p->requires_grad;
    }
    if (!any) {
        return;
    }
    out.impl->requires_grad = true;
    out.impl->parents = std::move(parents);
    out.impl->backprop = std::move(backprop);
}

int normalize_axis(int axis, int ndim, const char* who) {
    int a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) {
        std::ostringstream os;
        os << who << ": axis " << axis << " out of range for rank " << ndim;
        throw ShapeError(os.str());
    }
    return a;
}

// Broadcast plan: output shape plus per-operand strides padded to the output
// rank, with zero stride wherever an operand extent is 1.
struct BcastPlan {
    Shape out_shape;
    std::vector<std::int64_t> stride_a;
    std::vector<std::int64_t> stride_b;
    std::int64_t out_numel = 1;
};

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* who) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BcastPlan plan;
    plan.out_shape.assign(static_cast<std::size_t>(r), 1);
    for (int i = 0; i < r; ++i) {
        const std::int64_t ea = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const std::int64_t eb = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(std::string(who) + ": shapes not broadcastable: " + shape_str(a) +
                             " vs " + shape_str(b));
        }
        plan.out_shape[static_cast<std::size_t>(i)] = std::max(ea, eb);
    }
    plan.out_numel = shape_numel(plan.out_shape);

    auto padded_strides = [r](const Shape& s) {
        const int rs = static_cast<int>(s.size());
        Shape full(static_cast<std::size_t>(r), 1);
        for (int i = 0; i < rs; ++i) {
            full[static_cast<std::size_t>(r - rs + i)] = s[static_cast<std::size_t>(i)];
        }
        auto st = row_major_strides(full);
        for (int i = 0; i < r; ++i) {
            if (full[static_cast<std::size_t>(i)] == 1) {
                st[static_cast<std::size_t>(i)] = 0;
            }
        }
        return st;
    };
    plan.stride_a = padded_strides(a);
    plan.stride_b = padded_strides(b);
    return plan;
}

// Walks every output element of a broadcast result, handing the operand
// offsets to fn. Odometer-style index increment, row-major order.
template <typename Fn>
void bcast_walk(const BcastPlan& plan, Fn&& fn) {
    const int r = static_cast<int>(plan.out_shape.size());
    if (r == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t ia = 0;
    std::int64_t ib = 0;
    for (std::int64_t flat = 0; flat < plan.out_numel; ++flat) {
        fn(flat, ia, ib);
        for (int d = r - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            ++idx[du];
            ia += plan.stride_a[du];
            ib += plan.stride_b[du];
            if (idx[du] < plan.out_shape[du]) {
                break;
            }
            ia -= plan.stride_a[du] * plan.out_shape[du];
            ib -= plan.stride_b[du] * plan.out_shape[du];
            idx[du] = 0;
        }
    }
}

// Decomposes a shape around one axis into (outer, extent, inner) so that
// flat = (o * extent + k) * inner + i.
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t extent = 1;
    std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) {
        s.outer *= shape[static_cast<std::size_t>(i)];
    }
    s.extent = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

std::vector<double> permute_copy(const std::vector<double>& src, const Shape& src_shape,
                                 const std::vector<int>& axes) {
    const int r = static_cast<int>(src_shape.size());
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<std::size_t>(i)] = src_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    }
    const auto src_strides = row_major_strides(src_shape);
    std::vector<std::int64_t> gather(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        gather[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    }
    const std::int64_t n = shape_numel(out_shape);
    std::vector<double> out(static_cast<std::size_t>(n));
    if (r == 0) {
        out[0] = src[0];
        return out;
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t is = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out[static_cast<std::size_t>(flat)] = src[static_cast<std::size_t>(is)];
        for (int d = r - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            ++idx[du];
            is += gather[du];
            if (idx[du] < out_shape[du]) {
                break;
            }
            is -= gather[du] * out_shape[du];
            idx[du] = 0;
        }
    }
    return out;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "," : "");
    }
    os << ")";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), static_cast<std::int64_t>(1),
                           std::multiplies<>());
}

Shape row_major_strides(const Shape& s) {
    Shape st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] =
            st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
    }
    return st;
}

double Rng::normal(double mean, double stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller; u1 kept away from 0 so log stays finite
    double u1 = uniform01();
    if (u1 < 0x1.0p-53) {
        u1 = 0x1.0p-53;
    }
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    spare_ = radius * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(2.0 * kPi * u2);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
    return full(shape, 1.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    check_shape_extents(shape, "create");
    auto impl = make_impl(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, bool requires_grad) {
    check_shape_extents(shape, "create");
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        std::ostringstream os;
        os << "create: " << values.size() << " values do not fill shape " << shape_str(shape);
        throw ShapeError(os.str());
    }
    auto impl = make_impl(shape, std::move(values));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad) {
    check_shape_extents(shape, "create");
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : d) {
        v = rng.uniform(lo, hi);
    }
    return from_values(shape, std::move(d), requires_grad);
}

Tensor Tensor::normal(const Shape& shape, double mean, double stddev, Rng& rng,
                      bool requires_grad) {
    check_shape_extents(shape, "create");
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : d) {
        v = rng.normal(mean, stddev);
    }
    return from_values(shape, std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    auto impl = make_impl({}, {value});
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

void Tensor::set_requires_grad(bool flag) {
    impl->requires_grad = flag;
    if (!flag) {
        impl->grad.clear();
    }
}

const std::vector<double>& Tensor::grad_values() const {
    if (impl->grad.empty()) {
        throw ContractError("grad_values: tensor holds no gradient");
    }
    return impl->grad;
}

void Tensor::zero_grad() { impl->grad.clear(); }

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    }
    return impl->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    if (index.size() != impl->shape.size()) {
        throw ShapeError("at: index rank mismatch for shape " + shape_str(shape()));
    }
    const auto strides = row_major_strides(impl->shape);
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (auto i : index) {
        if (i < 0 || i >= impl->shape[d]) {
            throw ShapeError("at: index out of bounds for shape " + shape_str(shape()));
        }
        flat += i * strides[d];
        ++d;
    }
    return impl->data[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detach() const {
    auto copy = make_impl(impl->shape, impl->data);
    return Tensor(std::move(copy));
}

// ---------------------------------------------------------------------------
// element-wise ops
// ---------------------------------------------------------------------------

namespace {

// Shared driver for add/sub: d(out)/d(a) = 1, d(out)/d(b) = sign.
Tensor add_like(const Tensor& a, const Tensor& b, double sign, const char* who) {
    if (a.shape() == b.shape()) {
        std::vector<double> d(a.values().size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] = a.values()[i] + sign * b.values()[i];
        }
        Tensor out = Tensor::from_values(a.shape(), std::move(d));
        auto ia = a.impl;
        auto ib = b.impl;
        attach(out, {ia, ib}, [ia, ib, sign](const std::vector<double>& g) {
            accumulate(*ia, g);
            if (ib->requires_grad) {
                if (ib->grad.size() != ib->data.size()) {
                    ib->grad.assign(ib->data.size(), 0.0);
                }
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ib->grad[i] += sign * g[i];
                }
            }
        });
        return out;
    }

    auto plan = make_bcast(a.shape(), b.shape(), who);
    std::vector<double> d(static_cast<std::size_t>(plan.out_numel));
    const auto& av = a.values();
    const auto& bv = b.values();
    bcast_walk(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        d[static_cast<std::size_t>(o)] =
            av[static_cast<std::size_t>(ia)] + sign * bv[static_cast<std::size_t>(ib)];
    });
    Tensor out = Tensor::from_values(plan.out_shape, std::move(d));
    auto ia = a.impl;
    auto ib = b.impl;
    attach(out, {ia, ib}, [ia, ib, plan, sign](const std::vector<double>& g) {
        const bool need_a = ia->requires_grad;
        const bool need_b = ib->requires_grad;
        if (need_a && ia->grad.size() != ia->data.size()) {
            ia->grad.assign(ia->data.size(), 0.0);
        }
        if (need_b && ib->grad.size() != ib->data.size()) {
            ib->grad.assign(ib->data.size(), 0.0);
        }
        // scatter-add; zero strides fold the broadcast reduction in
        bcast_walk(plan, [&](std::int64_t o, std::int64_t oa, std::int64_t ob) {
            const double gv = g[static_cast<std::size_t>(o)];
            if (need_a) {
                ia->grad[static_cast<std::size_t>(oa)] += gv;
            }
            if (need_b) {
                ib->grad[static_cast<std::size_t>(ob)] += sign * gv;
            }
        });
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        std::vector<double> d(a.values().size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] = a.values()[i] * b.values()[i];
        }
        Tensor out = Tensor::from_values(a.shape(), std::move(d));
        auto ia = a.impl;
        auto ib = b.impl;
        attach(out, {ia, ib}, [ia, ib](const std::vector<double>& g) {
            if (ia->requires_grad) {
                if (ia->grad.size() != ia->data.size()) {
                    ia->grad.assign(ia->data.size(), 0.0);
                }
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ia->grad[i] += g[i] * ib->data[i];
                }
            }
            if (ib->requires_grad) {
                if (ib->grad.size() != ib->data.size()) {
                    ib->grad.assign(ib->data.size(), 0.0);
                }
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ib->grad[i] += g[i] * ia->data[i];
                }
            }
        });
        return out;
    }

    auto plan = make_bcast(a.shape(), b.shape(), "mul");
    std::vector<double> d(static_cast<std::size_t>(plan.out_numel));
    const auto& av = a.values();
    const auto& bv = b.values();
    bcast_walk(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        d[static_cast<std::size_t>(o)] =
            av[static_cast<std::size_t>(ia)] * bv[static_cast<std::size_t>(ib)];
    });
    Tensor out = Tensor::from_values(plan.out_shape, std::move(d));
    auto ia = a.impl;
    auto ib = b.impl;
    attach(out, {ia, ib}, [ia, ib, plan](const std::vector<double>& g) {
        const bool need_a = ia->requires_grad;
        const bool need_b = ib->requires_grad;
        if (need_a && ia->grad.size() != ia->data.size()) {
            ia->grad.assign(ia->data.size(), 0.0);
        }
        if (need_b && ib->grad.size() != ib->data.size()) {
            ib->grad.assign(ib->data.size(), 0.0);
        }
        bcast_walk(plan, [&](std::int64_t o, std::int64_t oa, std::int64_t ob) {
            const double gv = g[static_cast<std::size_t>(o)];
            if (need_a) {
                ia->grad[static_cast<std::size_t>(oa)] += gv * ib->data[static_cast<std::size_t>(ob)];
            }
            if (need_b) {
                ib->grad[static_cast<std::size_t>(ob)] += gv * ia->data[static_cast<std::size_t>(oa)];
            }
        });
    });
    return out;
}

Tensor scalar_mul(const Tensor& a, double c) {
    std::vector<double> d = a.values();
    for (auto& v : d) {
        v *= c;
    }
    Tensor out = Tensor::from_values(a.shape(), std::move(d));
    auto ia = a.impl;
    attach(out, {ia}, [ia, c](const std::vector<double>& g) {
        if (!ia->requires_grad) {
            return;
        }
        if (ia->grad.size() != ia->data.size()) {
            ia->grad.assign(ia->data.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            ia->grad[i] += c * g[i];
        }
    });
    return out;
}

Tensor scalar_add(const Tensor& a, double c) {
    std::vector<double> d = a.values();
    for (auto& v : d) {
        v += c;
    }
    Tensor out = Tensor::from_values(a.shape(), std::move(d));
    auto ia = a.impl;
    attach(out, {ia}, [ia](const std::vector<double>& g) { accumulate(*ia, g); });
    return out;
}

Tensor pow_scalar(const Tensor& a, double exponent) {
    std::vector<double> d = a.values();
    for (auto& v : d) {
        v = std::pow(v, exponent);
    }
    Tensor out = Tensor::from_values(a.shape(), std::move(d));
    auto ia = a.impl;
    attach(out, {ia}, [ia, exponent](const std::vector<double>& g) {
        if (!ia->requires_grad) {
            return;
        }
        if (ia->grad.size() != ia->data.size()) {
            ia->grad.assign(ia->data.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            ia->grad[i] += exponent * std::pow(ia->data[i], exponent - 1.0) * g[i];
        }
    });
    return out;
}

Tensor relu(const Tensor& x) {
    std::vector<double> d = x.values();
    for (auto& v : d) {
        v = v > 0.0 ? v : 0.0;
    }
    Tensor out = Tensor::from_values(x.shape(), std::move(d));
    auto ix = x.impl;
    attach(out, {ix}, [ix](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (ix->data[i] > 0.0) {
                ix->grad[i] += g[i];
            }
        }
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    // exact form: 0.5·x·(1 + erf(x/√2))
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> d = x.values();
    for (auto& v : d) {
        v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    Tensor out = Tensor::from_values(x.shape(), std::move(d));
    auto ix = x.impl;
    attach(out, {ix}, [ix](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = ix->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            ix->grad[i] += (cdf + v * pdf) * g[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size()) {
        throw ShapeError("matmul: rank mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const int r = static_cast<int>(sa.size());
    std::int64_t batch = 1;
    for (int i = 0; i < r - 2; ++i) {
        if (sa[static_cast<std::size_t>(i)] != sb[static_cast<std::size_t>(i)]) {
            throw ShapeError("matmul: batch dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
        }
        batch *= sa[static_cast<std::size_t>(i)];
    }
    const std::int64_t m = sa[static_cast<std::size_t>(r - 2)];
    const std::int64_t k = sa[static_cast<std::size_t>(r - 1)];
    const std::int64_t k2 = sb[static_cast<std::size_t>(r - 2)];
    const std::int64_t n = sb[static_cast<std::size_t>(r - 1)];
    if (k != k2) {
        throw ShapeError("matmul: inner dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
    }

    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);

    std::vector<double> d(static_cast<std::size_t>(batch * m * n), 0.0);
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    for (std::int64_t t = 0; t < batch; ++t) {
        const double* at = ap + t * m * k;
        const double* bt = bp + t * k * n;
        double* ot = d.data() + t * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = at[i * k + p];
                const double* brow = bt + p * n;
                double* orow = ot + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor out = Tensor::from_values(out_shape, std::move(d));
    auto ia = a.impl;
    auto ib = b.impl;
    attach(out, {ia, ib}, [ia, ib, batch, m, k, n](const std::vector<double>& g) {
        // dA = G·Bᵀ, dB = Aᵀ·G per batch entry
        if (ia->requires_grad) {
            if (ia->grad.size() != ia->data.size()) {
                ia->grad.assign(ia->data.size(), 0.0);
            }
            for (std::int64_t t = 0; t < batch; ++t) {
                const double* gt = g.data() + t * m * n;
                const double* bt = ib->data.data() + t * k * n;
                double* da = ia->grad.data() + t * m * k;
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double gv = gt[i * n + j];
                        const double* brow = bt + j;  // column j, stride n
                        double* darow = da + i * k;
                        for (std::int64_t p = 0; p < k; ++p) {
                            darow[p] += gv * brow[p * n];
                        }
                    }
                }
            }
        }
        if (ib->requires_grad) {
            if (ib->grad.size() != ib->data.size()) {
                ib->grad.assign(ib->data.size(), 0.0);
            }
            for (std::int64_t t = 0; t < batch; ++t) {
                const double* gt = g.data() + t * m * n;
                const double* at = ia->data.data() + t * m * k;
                double* db = ib->grad.data() + t * k * n;
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* arow = at + i * k;
                    const double* grow = gt + i * n;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* dbrow = db + p * n;
                        for (std::int64_t j = 0; j < n; ++j) {
                            dbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const auto& sx = x.shape();
    const auto& sw = weight.shape();
    if (sw.size() != 2 || sx.empty()) {
        throw ShapeError("affine: need x (...,in) and weight (in,out), got " + shape_str(sx) +
                         " and " + shape_str(sw));
    }
    const std::int64_t in = sw[0];
    const std::int64_t out_dim = sw[1];
    if (sx.back() != in) {
        throw ShapeError("affine: last axis of " + shape_str(sx) + " does not match weight " +
                         shape_str(sw));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.extent(0) != out_dim)) {
        throw ShapeError("affine: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(sw));
    }
    const std::int64_t rows = x.numel() / in;

    Shape out_shape = sx;
    out_shape.back() = out_dim;
    std::vector<double> d(static_cast<std::size_t>(rows * out_dim), 0.0);
    const double* xp = x.values().data();
    const double* wp = weight.values().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        double* orow = d.data() + i * out_dim;
        if (bias.defined()) {
            const double* bp = bias.values().data();
            std::copy(bp, bp + out_dim, orow);
        }
        const double* xrow = xp + i * in;
        for (std::int64_t p = 0; p < in; ++p) {
            const double xv = xrow[p];
            const double* wrow = wp + p * out_dim;
            for (std::int64_t j = 0; j < out_dim; ++j) {
                orow[j] += xv * wrow[j];
            }
        }
    }
    Tensor out = Tensor::from_values(out_shape, std::move(d));
    std::vector<std::shared_ptr<TensorImpl>> parents = {x.impl, weight.impl};
    if (bias.defined()) {
        parents.push_back(bias.impl);
    }
    auto ix = x.impl;
    auto iw = weight.impl;
    auto ib = bias.defined() ? bias.impl : nullptr;
    attach(out, std::move(parents), [ix, iw, ib, rows, in, out_dim](const std::vector<double>& g) {
        if (ix->requires_grad) {
            if (ix->grad.size() != ix->data.size()) {
                ix->grad.assign(ix->data.size(), 0.0);
            }
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* grow = g.data() + i * out_dim;
                double* dxrow = ix->grad.data() + i * in;
                for (std::int64_t p = 0; p < in; ++p) {
                    const double* wrow = iw->data.data() + p * out_dim;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < out_dim; ++j) {
                        acc += grow[j] * wrow[j];
                    }
                    dxrow[p] += acc;
                }
            }
        }
        if (iw->requires_grad) {
            if (iw->grad.size() != iw->data.size()) {
                iw->grad.assign(iw->data.size(), 0.0);
            }
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* xrow = ix->data.data() + i * in;
                const double* grow = g.data() + i * out_dim;
                for (std::int64_t p = 0; p < in; ++p) {
                    const double xv = xrow[p];
                    double* dwrow = iw->grad.data() + p * out_dim;
                    for (std::int64_t j = 0; j < out_dim; ++j) {
                        dwrow[j] += xv * grow[j];
                    }
                }
            }
        }
        if (ib && ib->requires_grad) {
            if (ib->grad.size() != ib->data.size()) {
                ib->grad.assign(ib->data.size(), 0.0);
            }
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* grow = g.data() + i * out_dim;
                for (std::int64_t j = 0; j < out_dim; ++j) {
                    ib->grad[static_cast<std::size_t>(j)] += grow[j];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding) {
    const auto& sx = x.shape();
    const auto& sw = weight.shape();
    if (sx.size() != 4 || sw.size() != 4) {
        throw ShapeError("conv2d: need x (b,c,h,w) and weight (o,c,kh,kw), got " + shape_str(sx) +
                         " and " + shape_str(sw));
    }
    if (sx[1] != sw[1]) {
        throw ShapeError("conv2d: channel mismatch: " + shape_str(sx) + " vs " + shape_str(sw));
    }
    if (stride < 1 || padding < 0) {
        throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
    }
    const std::int64_t batch = sx[0], cin = sx[1], h = sx[2], w = sx[3];
    const std::int64_t cout = sw[0], kh = sw[2], kw = sw[3];
    if (bias.defined() && (bias.ndim() != 1 || bias.extent(0) != cout)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(sw));
    }
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
    if (oh < 1 || ow < 1) {
        throw ShapeError("conv2d: kernel " + shape_str(sw) + " does not fit input " + shape_str(sx));
    }

    std::vector<double> d(static_cast<std::size_t>(batch * cout * oh * ow), 0.0);
    const double* xp = x.values().data();
    const double* wp = weight.values().data();
    const double* bp = bias.defined() ? bias.values().data() : nullptr;
    for (std::int64_t nb = 0; nb < batch; ++nb) {
        for (std::int64_t co = 0; co < cout; ++co) {
            const double bv = bp ? bp[co] : 0.0;
            double* oplane = d.data() + (nb * cout + co) * oh * ow;
            for (std::int64_t yo = 0; yo < oh; ++yo) {
                for (std::int64_t xo = 0; xo < ow; ++xo) {
                    double acc = bv;
                    const std::int64_t y0 = yo * stride - padding;
                    const std::int64_t x0 = xo * stride - padding;
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const double* xplane = xp + (nb * cin + ci) * h * w;
                        const double* wplane = wp + (co * cin + ci) * kh * kw;
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t yi = y0 + ky;
                            if (yi < 0 || yi >= h) {
                                continue;
                            }
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t xi = x0 + kx;
                                if (xi < 0 || xi >= w) {
                                    continue;
                                }
                                acc += xplane[yi * w + xi] * wplane[ky * kw + kx];
                            }
                        }
                    }
                    oplane[yo * ow + xo] = acc;
                }
            }
        }
    }
    Tensor out = Tensor::from_values({batch, cout, oh, ow}, std::move(d));
    std::vector<std::shared_ptr<TensorImpl>> parents = {x.impl, weight.impl};
    if (bias.defined()) {
        parents.push_back(bias.impl);
    }
    auto ix = x.impl;
    auto iw = weight.impl;
    auto ib = bias.defined() ? bias.impl : nullptr;
    attach(out, std::move(parents),
           [ix, iw, ib, batch, cin, h, w, cout, kh, kw, oh, ow, stride,
            padding](const std::vector<double>& g) {
               if (ix->requires_grad && ix->grad.size() != ix->data.size()) {
                   ix->grad.assign(ix->data.size(), 0.0);
               }
               if (iw->requires_grad && iw->grad.size() != iw->data.size()) {
                   iw->grad.assign(iw->data.size(), 0.0);
               }
               if (ib && ib->requires_grad && ib->grad.size() != ib->data.size()) {
                   ib->grad.assign(ib->data.size(), 0.0);
               }
               for (std::int64_t nb = 0; nb < batch; ++nb) {
                   for (std::int64_t co = 0; co < cout; ++co) {
                       const double* gplane = g.data() + (nb * cout + co) * oh * ow;
                       for (std::int64_t yo = 0; yo < oh; ++yo) {
                           for (std::int64_t xo = 0; xo < ow; ++xo) {
                               const double gv = gplane[yo * ow + xo];
                               if (gv == 0.0) {
                                   continue;
                               }
                               if (ib && ib->requires_grad) {
                                   ib->grad[static_cast<std::size_t>(co)] += gv;
                               }
                               const std::int64_t y0 = yo * stride - padding;
                               const std::int64_t x0 = xo * stride - padding;
                               for (std::int64_t ci = 0; ci < cin; ++ci) {
                                   const double* xplane = ix->data.data() + (nb * cin + ci) * h * w;
                                   const double* wplane = iw->data.data() + (co * cin + ci) * kh * kw;
                                   double* dxplane =
                                       ix->requires_grad ? ix->grad.data() + (nb * cin + ci) * h * w
                                                         : nullptr;
                                   double* dwplane =
                                       iw->requires_grad ? iw->grad.data() + (co * cin + ci) * kh * kw
                                                         : nullptr;
                                   for (std::int64_t ky = 0; ky < kh; ++ky) {
                                       const std::int64_t yi = y0 + ky;
                                       if (yi < 0 || yi >= h) {
                                           continue;
                                       }
                                       for (std::int64_t kx = 0; kx < kw; ++kx) {
                                           const std::int64_t xi = x0 + kx;
                                           if (xi < 0 || xi >= w) {
                                               continue;
                                           }
                                           if (dxplane) {
                                               dxplane[yi * w + xi] += gv * wplane[ky * kw + kx];
                                           }
                                           if (dwplane) {
                                               dwplane[ky * kw + kx] += gv * xplane[yi * w + xi];
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   }
               }
           });
    return out;
}

Tensor avgpool2d(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    const auto& sx = x.shape();
    if (sx.size() != 4) {
        throw ShapeError("avgpool2d: need x (b,c,h,w), got " + shape_str(sx));
    }
    if (out_h < 1 || out_w < 1) {
        throw ConfigError("avgpool2d: output size must be positive");
    }
    const std::int64_t batch = sx[0], ch = sx[1], h = sx[2], w = sx[3];
    // adaptive windows: start = floor(i·H/oh), end = ceil((i+1)·H/oh)
    auto win = [](std::int64_t i, std::int64_t in, std::int64_t out) {
        const std::int64_t lo = (i * in) / out;
        const std::int64_t hi = ((i + 1) * in + out - 1) / out;
        return std::pair<std::int64_t, std::int64_t>(lo, hi);
    };
    std::vector<double> d(static_cast<std::size_t>(batch * ch * out_h * out_w));
    const double* xp = x.values().data();
    for (std::int64_t nb = 0; nb < batch; ++nb) {
        for (std::int64_t c = 0; c < ch; ++c) {
            const double* xplane = xp + (nb * ch + c) * h * w;
            double* oplane = d.data() + (nb * ch + c) * out_h * out_w;
            for (std::int64_t yo = 0; yo < out_h; ++yo) {
                const auto [y0, y1] = win(yo, h, out_h);
                for (std::int64_t xo = 0; xo < out_w; ++xo) {
                    const auto [x0, x1] = win(xo, w, out_w);
                    double acc = 0.0;
                    for (std::int64_t yi = y0; yi < y1; ++yi) {
                        for (std::int64_t xi = x0; xi < x1; ++xi) {
                            acc += xplane[yi * w + xi];
                        }
                    }
                    oplane[yo * out_w + xo] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
                }
            }
        }
    }
    Tensor out = Tensor::from_values({batch, ch, out_h, out_w}, std::move(d));
    auto ix = x.impl;
    attach(out, {ix}, [ix, batch, ch, h, w, out_h, out_w, win](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (std::int64_t nb = 0; nb < batch; ++nb) {
            for (std::int64_t c = 0; c < ch; ++c) {
                const double* gplane = g.data() + (nb * ch + c) * out_h * out_w;
                double* dxplane = ix->grad.data() + (nb * ch + c) * h * w;
                for (std::int64_t yo = 0; yo < out_h; ++yo) {
                    const auto [y0, y1] = win(yo, h, out_h);
                    for (std::int64_t xo = 0; xo < out_w; ++xo) {
                        const auto [x0, x1] = win(xo, w, out_w);
                        const double gv = gplane[yo * out_w + xo] /
                                          static_cast<double>((y1 - y0) * (x1 - x0));
                        for (std::int64_t yi = y0; yi < y1; ++yi) {
                            for (std::int64_t xi = x0; xi < x1; ++xi) {
                                dxplane[yi * w + xi] += gv;
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / attention
// ---------------------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto& sx = x.shape();
    if (sx.empty()) {
        throw ShapeError("layernorm: scalar input");
    }
    const std::int64_t feat = sx.back();
    if (gamma.ndim() != 1 || gamma.extent(0) != feat || beta.ndim() != 1 || beta.extent(0) != feat) {
        throw ShapeError("layernorm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match feature axis of " + shape_str(sx));
    }
    const std::int64_t rows = x.numel() / feat;
    std::vector<double> d(x.values().size());
    std::vector<double> xhat(x.values().size());
    std::vector<double> invstd(static_cast<std::size_t>(rows));
    const double* xp = x.values().data();
    const double* gp = gamma.values().data();
    const double* bp = beta.values().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const double* xr = xp + i * feat;
        double mu = 0.0;
        for (std::int64_t j = 0; j < feat; ++j) {
            mu += xr[j];
        }
        mu /= static_cast<double>(feat);
        double var = 0.0;
        for (std::int64_t j = 0; j < feat; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(feat);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(i)] = is;
        double* dr = d.data() + i * feat;
        double* hr = xhat.data() + i * feat;
        for (std::int64_t j = 0; j < feat; ++j) {
            const double xn = (xr[j] - mu) * is;
            hr[j] = xn;
            dr[j] = xn * gp[j] + bp[j];
        }
    }
    Tensor out = Tensor::from_values(sx, std::move(d));
    auto ix = x.impl;
    auto ig = gamma.impl;
    auto ib = beta.impl;
    attach(out, {ix, ig, ib},
           [ix, ig, ib, rows, feat, xhat = std::move(xhat),
            invstd = std::move(invstd)](const std::vector<double>& g) {
               if (ib->requires_grad) {
                   if (ib->grad.size() != ib->data.size()) {
                       ib->grad.assign(ib->data.size(), 0.0);
                   }
                   for (std::int64_t i = 0; i < rows; ++i) {
                       const double* gr = g.data() + i * feat;
                       for (std::int64_t j = 0; j < feat; ++j) {
                           ib->grad[static_cast<std::size_t>(j)] += gr[j];
                       }
                   }
               }
               if (ig->requires_grad) {
                   if (ig->grad.size() != ig->data.size()) {
                       ig->grad.assign(ig->data.size(), 0.0);
                   }
                   for (std::int64_t i = 0; i < rows; ++i) {
                       const double* gr = g.data() + i * feat;
                       const double* hr = xhat.data() + i * feat;
                       for (std::int64_t j = 0; j < feat; ++j) {
                           ig->grad[static_cast<std::size_t>(j)] += gr[j] * hr[j];
                       }
                   }
               }
               if (ix->requires_grad) {
                   if (ix->grad.size() != ix->data.size()) {
                       ix->grad.assign(ix->data.size(), 0.0);
                   }
                   // dx = invstd·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
                   for (std::int64_t i = 0; i < rows; ++i) {
                       const double* gr = g.data() + i * feat;
                       const double* hr = xhat.data() + i * feat;
                       const double is = invstd[static_cast<std::size_t>(i)];
                       double mean_dh = 0.0;
                       double mean_dh_h = 0.0;
                       for (std::int64_t j = 0; j < feat; ++j) {
                           const double dh = gr[j] * ig->data[static_cast<std::size_t>(j)];
                           mean_dh += dh;
                           mean_dh_h += dh * hr[j];
                       }
                       mean_dh /= static_cast<double>(feat);
                       mean_dh_h /= static_cast<double>(feat);
                       double* dxr = ix->grad.data() + i * feat;
                       for (std::int64_t j = 0; j < feat; ++j) {
                           const double dh = gr[j] * ig->data[static_cast<std::size_t>(j)];
                           dxr[j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                       }
                   }
               }
           });
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const int a = normalize_axis(axis, x.ndim(), "softmax");
    const auto split = split_axis(x.shape(), a);
    std::vector<double> d(x.values().size());
    const double* xp = x.values().data();
    for (std::int64_t o = 0; o < split.outer; ++o) {
        for (std::int64_t i = 0; i < split.inner; ++i) {
            const std::int64_t base = o * split.extent * split.inner + i;
            double mx = xp[base];
            for (std::int64_t k = 1; k < split.extent; ++k) {
                mx = std::max(mx, xp[base + k * split.inner]);
            }
            double denom = 0.0;
            for (std::int64_t k = 0; k < split.extent; ++k) {
                const double e = std::exp(xp[base + k * split.inner] - mx);
                d[static_cast<std::size_t>(base + k * split.inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (std::int64_t k = 0; k < split.extent; ++k) {
                d[static_cast<std::size_t>(base + k * split.inner)] *= inv;
            }
        }
    }
    Tensor out = Tensor::from_values(x.shape(), std::move(d));
    auto ix = x.impl;
    // probabilities cached by value: capturing out.impl would make the node
    // own itself and leak any graph that is dropped without a backward pass
    attach(out, {ix}, [ix, probs = out.values(), split](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        // dx = p·(g − Σ g·p) along the softmax axis
        const double* pp = probs.data();
        for (std::int64_t o = 0; o < split.outer; ++o) {
            for (std::int64_t i = 0; i < split.inner; ++i) {
                const std::int64_t base = o * split.extent * split.inner + i;
                double dot = 0.0;
                for (std::int64_t k = 0; k < split.extent; ++k) {
                    const std::int64_t at = base + k * split.inner;
                    dot += g[static_cast<std::size_t>(at)] * pp[at];
                }
                for (std::int64_t k = 0; k < split.extent; ++k) {
                    const std::int64_t at = base + k * split.inner;
                    ix->grad[static_cast<std::size_t>(at)] +=
                        pp[at] * (g[static_cast<std::size_t>(at)] - dot);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& new_shape) {
    check_shape_extents(new_shape, "reshape");
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    }
    Tensor out = Tensor::from_values(new_shape, x.values());
    auto ix = x.impl;
    attach(out, {ix}, [ix](const std::vector<double>& g) { accumulate(*ix, g); });
    return out;
}

Tensor flatten(const Tensor& x, int from_axis) {
    const int a = normalize_axis(from_axis, x.ndim(), "flatten");
    Shape s(x.shape().begin(), x.shape().begin() + a);
    std::int64_t tail = 1;
    for (std::size_t i = static_cast<std::size_t>(a); i < x.shape().size(); ++i) {
        tail *= x.shape()[i];
    }
    s.push_back(tail);
    return reshape(x, s);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ContractError("concat: no inputs");
    }
    const int a = normalize_axis(axis, parts[0].ndim(), "concat");
    Shape out_shape = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != parts[0].ndim()) {
            throw ShapeError("concat: rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        for (int i = 0; i < p.ndim(); ++i) {
            if (i != a && p.shape()[static_cast<std::size_t>(i)] !=
                              out_shape[static_cast<std::size_t>(i)]) {
                throw ShapeError("concat: shapes differ off-axis: " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
            }
        }
        total += p.extent(a);
    }
    out_shape[static_cast<std::size_t>(a)] = total;

    const auto out_split = split_axis(out_shape, a);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const auto ps = split_axis(p.shape(), a);
        const double* src = p.values().data();
        for (std::int64_t o = 0; o < ps.outer; ++o) {
            const double* srow = src + o * ps.extent * ps.inner;
            double* drow = d.data() + (o * out_split.extent + offset) * out_split.inner;
            std::copy(srow, srow + ps.extent * ps.inner, drow);
        }
        offset += p.extent(a);
    }
    Tensor out = Tensor::from_values(out_shape, std::move(d));
    std::vector<std::shared_ptr<TensorImpl>> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) {
        parents.push_back(p.impl);
    }
    std::vector<Shape> part_shapes;
    for (const auto& p : parts) {
        part_shapes.push_back(p.shape());
    }
    attach(out, parents,
           [parents, part_shapes, out_split, a](const std::vector<double>& g) {
               std::int64_t offset = 0;
               for (std::size_t t = 0; t < parents.size(); ++t) {
                   auto& pi = *parents[t];
                   const auto ps = split_axis(part_shapes[t], a);
                   if (pi.requires_grad) {
                       if (pi.grad.size() != pi.data.size()) {
                           pi.grad.assign(pi.data.size(), 0.0);
                       }
                       for (std::int64_t o = 0; o < ps.outer; ++o) {
                           const double* grow =
                               g.data() + (o * out_split.extent + offset) * out_split.inner;
                           double* drow = pi.grad.data() + o * ps.extent * ps.inner;
                           for (std::int64_t i = 0; i < ps.extent * ps.inner; ++i) {
                               drow[i] += grow[i];
                           }
                       }
                   }
                   offset += part_shapes[t][static_cast<std::size_t>(a)];
               }
           });
    return out;
}

Tensor transpose(const Tensor& x, const std::vector<int>& axes) {
    const int r = x.ndim();
    if (static_cast<int>(axes.size()) != r) {
        throw ShapeError("transpose: permutation size does not match rank of " +
                         shape_str(x.shape()));
    }
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int a : axes) {
        if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
            throw ShapeError("transpose: invalid permutation for shape " + shape_str(x.shape()));
        }
        seen[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<std::size_t>(i)] =
            x.shape()[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    }
    Tensor out = Tensor::from_values(out_shape, permute_copy(x.values(), x.shape(), axes));
    std::vector<int> inverse(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
    }
    auto ix = x.impl;
    attach(out, {ix}, [ix, out_shape, inverse](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        auto back = permute_copy(g, out_shape, inverse);
        accumulate(*ix, back);
    });
    return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end) {
    const int a = normalize_axis(axis, x.ndim(), "slice");
    const std::int64_t extent = x.extent(a);
    if (start < 0 || end > extent || start >= end) {
        std::ostringstream os;
        os << "slice: range [" << start << "," << end << ") invalid for axis " << axis
           << " of shape " << shape_str(x.shape());
        throw ShapeError(os.str());
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(a)] = end - start;
    const auto xs = split_axis(x.shape(), a);
    const std::int64_t span = end - start;
    std::vector<double> d(static_cast<std::size_t>(shape_numel(out_shape)));
    const double* src = x.values().data();
    for (std::int64_t o = 0; o < xs.outer; ++o) {
        const double* srow = src + (o * xs.extent + start) * xs.inner;
        double* drow = d.data() + o * span * xs.inner;
        std::copy(srow, srow + span * xs.inner, drow);
    }
    Tensor out = Tensor::from_values(out_shape, std::move(d));
    auto ix = x.impl;
    attach(out, {ix}, [ix, xs, start, span](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (std::int64_t o = 0; o < xs.outer; ++o) {
            const double* grow = g.data() + o * span * xs.inner;
            double* drow = ix->grad.data() + (o * xs.extent + start) * xs.inner;
            for (std::int64_t i = 0; i < span * xs.inner; ++i) {
                drow[i] += grow[i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_axis(const Tensor& x, int axis, bool take_mean, const char* who) {
    const int a = normalize_axis(axis, x.ndim(), who);
    const auto split = split_axis(x.shape(), a);
    Shape out_shape;
    for (int i = 0; i < x.ndim(); ++i) {
        if (i != a) {
            out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
        }
    }
    const double scale = take_mean ? 1.0 / static_cast<double>(split.extent) : 1.0;
    std::vector<double> d(static_cast<std::size_t>(split.outer * split.inner), 0.0);
    const double* xp = x.values().data();
    for (std::int64_t o = 0; o < split.outer; ++o) {
        for (std::int64_t k = 0; k < split.extent; ++k) {
            const double* xrow = xp + (o * split.extent + k) * split.inner;
            double* drow = d.data() + o * split.inner;
            for (std::int64_t i = 0; i < split.inner; ++i) {
                drow[i] += xrow[i];
            }
        }
    }
    if (take_mean) {
        for (auto& v : d) {
            v *= scale;
        }
    }
    Tensor out = Tensor::from_values(out_shape, std::move(d));
    auto ix = x.impl;
    attach(out, {ix}, [ix, split, scale](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (std::int64_t o = 0; o < split.outer; ++o) {
            const double* grow = g.data() + o * split.inner;
            for (std::int64_t k = 0; k < split.extent; ++k) {
                double* drow = ix->grad.data() + (o * split.extent + k) * split.inner;
                for (std::int64_t i = 0; i < split.inner; ++i) {
                    drow[i] += grow[i] * scale;
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return reduce_axis(x, axis, false, "sum"); }
Tensor mean(const Tensor& x, int axis) { return reduce_axis(x, axis, true, "mean"); }

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) {
        acc += v;
    }
    Tensor out = Tensor::scalar(acc);
    auto ix = x.impl;
    attach(out, {ix}, [ix](const std::vector<double>& g) {
        if (!ix->requires_grad) {
            return;
        }
        if (ix->grad.size() != ix->data.size()) {
            ix->grad.assign(ix->data.size(), 0.0);
        }
        for (auto& v : ix->grad) {
            v += g[0];
        }
    });
    return out;
}

Tensor mean_all(const Tensor& x) {
    return scalar_mul(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// backward / finite differences
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar");
    }
    if (!loss.impl->requires_grad) {
        throw ContractError("backward: loss is not connected to any differentiable input");
    }

    // iterative post-order topo sort over tape edges
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(loss.impl.get(), 0);
    visited.insert(loss.impl.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next].get();
            ++next;
            if (visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.impl->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backprop) {
            if (node->grad.size() != node->data.size()) {
                node->grad.assign(node->data.size(), 0.0);
            }
            node->backprop(node->grad);
        }
    }
    // drop the tape so per-pass graph memory is reclaimed
    for (TensorImpl* node : order) {
        node->parents.clear();
        node->backprop = nullptr;
    }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    NoGradGuard no_grad;
    Tensor probe = x.detach();
    std::vector<double> g(probe.values().size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double keep = probe.values()[i];
        probe.values()[i] = keep + h;
        const double up = f(probe);
        probe.values()[i] = keep - h;
        const double down = f(probe);
        probe.values()[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return Tensor::from_values(x.shape(), std::move(g));
}

}  // namespace loda
