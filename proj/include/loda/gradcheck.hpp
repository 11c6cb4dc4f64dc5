#pragma once

#include <functional>
#include <string>
#include <vector>

#include "loda/tensor.hpp"

namespace loda {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|, floor).
double grad_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
                    double floor = 1e-4);

/// Checks backward() against finite_diff_grad for one differentiable map.
/// `forward` must rebuild the loss from the given inputs every call.
GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor(const std::vector<Tensor>&)>& forward,
                                std::vector<Tensor> inputs, double h = 1e-5,
                                double tolerance = 1e-4);

/// Per-op gradient suite: every differentiable op of the tensor engine,
/// `seeds_per_op` random instances each.
std::vector<GradCheckResult> run_op_gradient_suite(int seeds_per_op, std::uint64_t base_seed = 41);

/// End-to-end check: model forward + correlation loss on the desk profile,
/// finite differences probed at sampled coordinates of every trainable tensor.
std::vector<GradCheckResult> run_model_gradient_suite(int seeds, std::uint64_t base_seed = 4100);

}  // namespace loda
