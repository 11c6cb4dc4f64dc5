#include "loda/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "loda/adaptation.hpp"
#include "loda/metrics.hpp"

namespace loda {

namespace {

// Keeps random draws away from the relu/abs kinks so central differences
// stay on one branch.
Tensor away_from_zero(Tensor t, double margin) {
    for (auto& v : t.values()) {
        v += v >= 0.0 ? margin : -margin;
    }
    return t;
}

Tensor rand_input(const Shape& shape, Rng& rng) {
    return away_from_zero(Tensor::uniform(shape, -1.0, 1.0, rng, true), 0.05);
}

// Reduces an arbitrary op output to a scalar with a fixed random weighting so
// every output element contributes a distinct gradient path.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::uniform(out.shape(), 0.5, 1.5, rng, false);
    return sum_all(mul(out, w));
}

struct OpCase {
    std::string name;
    std::function<std::vector<Tensor>(Rng&)> make_inputs;
    std::function<Tensor(const std::vector<Tensor>&)> forward;
};

std::vector<OpCase> op_cases() {
    std::vector<OpCase> cases;
    auto push = [&cases](std::string name, std::function<std::vector<Tensor>(Rng&)> mk,
                         std::function<Tensor(const std::vector<Tensor>&)> fwd) {
        cases.push_back({std::move(name), std::move(mk), std::move(fwd)});
    };

    push("add", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4}, r), rand_input({3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), 11); });
    push("add_broadcast_channel",
         [](Rng& r) { return std::vector<Tensor>{rand_input({2, 5, 6}, r), rand_input({6}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), 12); });
    push("sub", [](Rng& r) { return std::vector<Tensor>{rand_input({4, 3}, r), rand_input({4, 3}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(sub(in[0], in[1]), 13); });
    push("mul", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4}, r), rand_input({3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1]), 14); });
    push("mul_broadcast_channel",
         [](Rng& r) { return std::vector<Tensor>{rand_input({2, 4, 5}, r), rand_input({5}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1]), 15); });
    push("scalar_mul", [](Rng& r) { return std::vector<Tensor>{rand_input({7}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(scalar_mul(in[0], -1.7), 16); });
    push("scalar_add", [](Rng& r) { return std::vector<Tensor>{rand_input({7}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(scalar_add(in[0], 0.3), 17); });
    push("pow_scalar",
         [](Rng& r) {
             Tensor t = Tensor::uniform({6}, 0.5, 2.0, r, true);
             return std::vector<Tensor>{t};
         },
         [](const std::vector<Tensor>& in) { return weighted_sum(pow_scalar(in[0], -0.5), 18); });
    push("relu", [](Rng& r) { return std::vector<Tensor>{rand_input({4, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(relu(in[0]), 19); });
    push("gelu", [](Rng& r) { return std::vector<Tensor>{rand_input({4, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(gelu(in[0]), 20); });
    push("matmul_2d",
         [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4}, r), rand_input({4, 5}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1]), 21); });
    push("matmul_batched",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({2, 3, 3, 4}, r), rand_input({2, 3, 4, 5}, r)};
         },
         [](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1]), 22); });
    push("affine",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({2, 3, 4}, r), rand_input({4, 5}, r),
                                        rand_input({5}, r)};
         },
         [](const std::vector<Tensor>& in) { return weighted_sum(affine(in[0], in[1], in[2]), 23); });
    push("conv2d_stride1_pad1",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({2, 3, 5, 5}, r), rand_input({4, 3, 3, 3}, r),
                                        rand_input({4}, r)};
         },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(conv2d(in[0], in[1], in[2], 1, 1), 24);
         });
    push("conv2d_stride2_pad1",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({1, 2, 8, 8}, r), rand_input({3, 2, 3, 3}, r),
                                        rand_input({3}, r)};
         },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1), 25);
         });
    push("conv2d_1x1",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({2, 3, 4, 4}, r), rand_input({5, 3, 1, 1}, r),
                                        rand_input({5}, r)};
         },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(conv2d(in[0], in[1], in[2], 1, 0), 26);
         });
    push("avgpool2d_down", [](Rng& r) { return std::vector<Tensor>{rand_input({2, 3, 8, 8}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(avgpool2d(in[0], 4, 4), 27); });
    push("avgpool2d_up", [](Rng& r) { return std::vector<Tensor>{rand_input({1, 2, 2, 2}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(avgpool2d(in[0], 4, 4), 28); });
    push("layernorm",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({3, 6}, r), rand_input({6}, r),
                                        rand_input({6}, r)};
         },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(layernorm(in[0], in[1], in[2], 1e-6), 29);
         });
    push("softmax_last", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 5}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(softmax(in[0], -1), 30); });
    push("softmax_axis0", [](Rng& r) { return std::vector<Tensor>{rand_input({4, 3}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(softmax(in[0], 0), 31); });
    push("reshape", [](Rng& r) { return std::vector<Tensor>{rand_input({2, 3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(reshape(in[0], {4, 6}), 32); });
    push("flatten", [](Rng& r) { return std::vector<Tensor>{rand_input({2, 3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(flatten(in[0], 1), 33); });
    push("concat_axis1",
         [](Rng& r) { return std::vector<Tensor>{rand_input({2, 3}, r), rand_input({2, 4}, r)}; },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(concat({in[0], in[1]}, 1), 34);
         });
    push("transpose", [](Rng& r) { return std::vector<Tensor>{rand_input({2, 3, 4}, r)}; },
         [](const std::vector<Tensor>& in) {
             return weighted_sum(transpose(in[0], {2, 0, 1}), 35);
         });
    push("slice", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 6}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(slice(in[0], 1, 1, 4), 36); });
    push("sum_axis", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4, 2}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(sum(in[0], 1), 37); });
    push("mean_axis", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4, 2}, r)}; },
         [](const std::vector<Tensor>& in) { return weighted_sum(mean(in[0], 1), 38); });
    push("sum_all", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return sum_all(in[0]); });
    push("mean_all", [](Rng& r) { return std::vector<Tensor>{rand_input({3, 4}, r)}; },
         [](const std::vector<Tensor>& in) { return mean_all(in[0]); });
    push("plcc_loss",
         [](Rng& r) {
             return std::vector<Tensor>{rand_input({8}, r), rand_input({8}, r)};
         },
         [](const std::vector<Tensor>& in) { return plcc_loss(in[0], in[1]); });

    return cases;
}

}  // namespace

double grad_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
                    double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor(const std::vector<Tensor>&)>& forward,
                                std::vector<Tensor> inputs, double h, double tolerance) {
    Tensor loss = forward(inputs);
    backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) {
            continue;
        }
        const std::vector<double> analytic =
            inputs[i].has_grad() ? inputs[i].grad_values()
                                 : std::vector<double>(inputs[i].values().size(), 0.0);
        auto scalar_eval = [&](const Tensor& probe) {
            std::vector<Tensor> local = inputs;
            local[i] = probe;
            NoGradGuard no_grad;
            return forward(local).item();
        };
        Tensor fd = finite_diff_grad(scalar_eval, inputs[i], h);
        worst = std::max(worst, grad_rel_err(analytic, fd.values()));
    }
    return {name, worst, worst < tolerance};
}

std::vector<GradCheckResult> run_op_gradient_suite(int seeds_per_op, std::uint64_t base_seed) {
    std::vector<GradCheckResult> results;
    const auto cases = op_cases();
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCheckResult agg{cases[c].name, 0.0, true};
        for (int s = 0; s < seeds_per_op; ++s) {
            Rng rng(Rng::derive(base_seed, c * 1000 + static_cast<std::uint64_t>(s)));
            auto inputs = cases[c].make_inputs(rng);
            auto r = check_gradients(cases[c].name, cases[c].forward, std::move(inputs));
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.pass = agg.pass && r.pass;
        }
        results.push_back(agg);
    }
    return results;
}

std::vector<GradCheckResult> run_model_gradient_suite(int seeds, std::uint64_t base_seed) {
    std::vector<GradCheckResult> results;
    const double h = 1e-5;
    const double tolerance = 1e-4;

    GradCheckResult agg{"loda_forward+plcc_loss", 0.0, true};
    for (int s = 0; s < seeds; ++s) {
        const std::uint64_t seed = Rng::derive(base_seed, static_cast<std::uint64_t>(s));
        LodaConfig cfg = LodaConfig::desk();
        LodaModel model = LodaModel::init(cfg, Mode::kLoda, seed);
        Rng rng(Rng::derive(seed, 7));
        // nonzero gates so gradient flows through the whole injector stack
        for (auto& [name, t] : model.injector.tensors) {
            if (name.find("gate") != std::string::npos) {
                for (auto& v : t.values()) {
                    v = rng.normal(0.0, 0.2);
                }
            }
        }
        const std::int64_t batch = 2;
        Tensor images = Tensor::uniform(
            {batch, 3, cfg.vit.image_size, cfg.vit.image_size}, 0.0, 1.0, rng, false);
        Tensor labels = Tensor::from_values({batch}, {rng.uniform(0.0, 1.0), rng.uniform(1.5, 2.5)});

        auto loss_of = [&]() {
            Tensor scores = loda_forward(model, images);
            return plcc_loss(reshape(scores, {batch}), labels);
        };
        Tensor loss = loss_of();
        backward(loss);

        // central differences at sampled coordinates of every trainable tensor
        auto params = trainable_parameters(model);
        Rng pick(Rng::derive(seed, 99));
        for (auto& [name, t] : params) {
            const std::vector<double> analytic =
                t.has_grad() ? t.grad_values() : std::vector<double>(t.values().size(), 0.0);
            const int samples = std::min<std::int64_t>(3, t.numel());
            for (int k = 0; k < samples; ++k) {
                const auto at = static_cast<std::size_t>(pick.next_u64() %
                                                         static_cast<std::uint64_t>(t.numel()));
                const double keep = t.values()[at];
                double up = 0.0;
                double down = 0.0;
                {
                    NoGradGuard no_grad;
                    t.values()[at] = keep + h;
                    up = loss_of().item();
                    t.values()[at] = keep - h;
                    down = loss_of().item();
                    t.values()[at] = keep;
                }
                const double fd = (up - down) / (2.0 * h);
                const double err = std::abs(analytic[at] - fd) /
                                   std::max({std::abs(analytic[at]), std::abs(fd), 1e-4});
                agg.max_rel_err = std::max(agg.max_rel_err, err);
            }
        }
    }
    agg.pass = agg.max_rel_err < tolerance;
    results.push_back(agg);
    return results;
}

}  // namespace loda
