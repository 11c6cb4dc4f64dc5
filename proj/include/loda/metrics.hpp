#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "loda/tensor.hpp"

namespace loda {

struct MetricPair {
    double srcc = 0.0;
    double plcc = 0.0;
};

/// Correlation-induced training loss, (1 - pearson(predicted, label)) / 2.
/// Differentiable w.r.t. `predicted`; value lies in [0,1]. Both vectors must
/// be 1-D, equal length >= 2, and non-constant (DegenerateBatchError else).
Tensor plcc_loss(const Tensor& predicted, const Tensor& label);

/// Fractional (average-tie) ranks, 1-based.
std::vector<double> fractional_ranks(const std::vector<double>& v);

/// Spearman rank correlation with average-tie ranks. Returns 0 when either
/// rank vector is constant (the all-tied degenerate case).
double srcc(const std::vector<double>& a, const std::vector<double>& b);

/// Pearson linear correlation. DegenerateBatchError on constant input.
double plcc(const std::vector<double>& a, const std::vector<double>& b);

/// Monotone 4-parameter logistic fitted from predictions to labels:
///   q(x) = b1 + (b2 - b1) / (1 + exp(-(x - b3) / b4))
struct LogisticFit {
    std::array<double, 4> beta{0.0, 0.0, 0.0, 0.0};
    bool used_identity = false;  // fit failed or could not beat the raw mapping
    int iterations = 0;
};

struct CorrectionResult {
    std::vector<double> corrected;
    LogisticFit fit;
};

/// Least-squares fit of the monotone increasing logistic (b4 > 0, b2 > b1
/// enforced by step control), applied to `predicted`. Falls back to the
/// identity mapping with a flag when the fit diverges, the input is
/// degenerate, or the corrected values correlate worse than the raw ones.
CorrectionResult logistic_correct(const std::vector<double>& predicted,
                                  const std::vector<double>& label);

// ---------------------------------------------------------------------------
// feature-map spectrum analysis
// ---------------------------------------------------------------------------

struct SpectrumProfile {
    std::vector<double> frequency;            // k/m · pi · sqrt(2), k = 0..m/2
    std::vector<double> log_amplitude;        // ln of channel-averaged amplitude, floored
    std::vector<double> delta_log_amplitude;  // relative to the DC bin; exactly 0 at index 0
    std::vector<double> amplitude_grid;       // full m x m channel-averaged amplitude, row-major
    std::int64_t grid_size = 0;
};

/// Channel-averaged 2-D DFT amplitude of a (channels, m, m) map.
std::vector<double> spectrum_amplitude(const Tensor& feature_map);

/// Builds the half-diagonal profile (centered spectrum, DC to corner) from an
/// m x m amplitude grid. Amplitudes are floored at 1e-12 before the log.
SpectrumProfile profile_from_amplitude(std::vector<double> amplitude, std::int64_t m);

/// spectrum_amplitude + profile_from_amplitude for a single (c, m, m) map.
/// Non-square spatial extents raise ContractError.
SpectrumProfile fourier_profile(const Tensor& feature_map);

/// Reorders one image's ViT tokens (l, d) into a (d, g, g) spatial map with
/// the CLS token dropped; l - 1 must be a perfect square.
Tensor tokens_to_grid(const Tensor& tokens);

/// Produces per-layer token matrices (batch, l, d) for one image batch.
using TokenTraceFn = std::function<std::vector<Tensor>(const Tensor& images)>;

struct ProfileComparison {
    std::vector<SpectrumProfile> layers_a;
    std::vector<SpectrumProfile> layers_b;
    std::vector<double> high_band_mean_diff;  // per layer, mean of (b - a) delta over the top half band
};

/// Runs both models over the image set, averages spectrum amplitudes per
/// layer across images, and reports profile pairs plus the high-frequency
/// band difference. Layer counts must match.
ProfileComparison compare_profiles(const TokenTraceFn& model_a, const TokenTraceFn& model_b,
                                   const std::vector<Tensor>& images);

/// Plot data as delimiter-separated text: frequency, delta_log_amplitude, model, layer.
void write_profile_data(const ProfileComparison& cmp, const std::string& name_a,
                        const std::string& name_b, const std::string& path);

}  // namespace loda
