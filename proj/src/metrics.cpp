#include "loda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <limits>
#include <sstream>

namespace loda {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAmplitudeFloor = 1e-12;

double vec_mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

bool is_constant(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

Tensor plcc_loss(const Tensor& predicted, const Tensor& label) {
    if (predicted.ndim() != 1 || label.ndim() != 1 || predicted.numel() != label.numel()) {
        throw ContractError("plcc_loss: need equal-length vectors, got " +
                            shape_str(predicted.shape()) + " and " + shape_str(label.shape()));
    }
    if (predicted.numel() < 2) {
        throw ContractError("plcc_loss: need at least 2 samples");
    }
    if (is_constant(predicted.values())) {
        throw DegenerateBatchError("plcc_loss: predicted scores are constant");
    }
    if (is_constant(label.values())) {
        throw DegenerateBatchError("plcc_loss: labels are constant");
    }
    // (1 - cov / sqrt(var_p · var_l)) / 2, all on the tape
    Tensor dp = sub(predicted, mean_all(predicted));
    Tensor dl = sub(label, mean_all(label));
    Tensor cov = sum_all(mul(dp, dl));
    Tensor var_p = sum_all(mul(dp, dp));
    Tensor var_l = sum_all(mul(dl, dl));
    Tensor r = mul(cov, pow_scalar(mul(var_p, var_l), -0.5));
    return scalar_add(scalar_mul(r, -0.5), 0.5);
}

std::vector<double> fractional_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        // ties share the average of the ranks they span (1-based)
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

double srcc(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ContractError("srcc: length mismatch");
    }
    if (a.size() < 2) {
        throw ContractError("srcc: need at least 2 samples");
    }
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    if (is_constant(ra) || is_constant(rb)) {
        return 0.0;  // all-tied vector carries no ordering information
    }
    return plcc(ra, rb);
}

double plcc(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ContractError("plcc: length mismatch");
    }
    if (a.size() < 2) {
        throw ContractError("plcc: need at least 2 samples");
    }
    if (is_constant(a) || is_constant(b)) {
        throw DegenerateBatchError("plcc: constant input vector");
    }
    // mirrors the op sequence of plcc_loss so (1 - plcc)/2 matches it bit for bit
    const double inv_n = 1.0 / static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) * inv_n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) * inv_n;
    std::vector<double> pd(a.size());
    std::vector<double> pl(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        pd[i] = a[i] - ma;
        pl[i] = b[i] - mb;
    }
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += pd[i] * pl[i];
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        va += pd[i] * pd[i];
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        vb += pl[i] * pl[i];
    }
    return cov * std::pow(va * vb, -0.5);
}

namespace {

double logistic_eval(const std::array<double, 4>& beta, double x) {
    return beta[0] + (beta[1] - beta[0]) / (1.0 + std::exp(-(x - beta[2]) / beta[3]));
}

double logistic_sse(const std::array<double, 4>& beta, const std::vector<double>& x,
                    const std::vector<double>& y) {
    double sse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = logistic_eval(beta, x[i]) - y[i];
        sse += r * r;
    }
    return sse;
}

// Solves the 4x4 normal equations in place; returns false when singular.
bool solve4(std::array<std::array<double, 4>, 4>& m, std::array<double, 4>& rhs) {
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int row = col + 1; row < 4; ++row) {
            if (std::abs(m[row][col]) > std::abs(m[pivot][col])) {
                pivot = row;
            }
        }
        if (std::abs(m[pivot][col]) < 1e-300) {
            return false;
        }
        std::swap(m[col], m[pivot]);
        std::swap(rhs[col], rhs[pivot]);
        const double inv = 1.0 / m[col][col];
        for (int row = 0; row < 4; ++row) {
            if (row == col) {
                continue;
            }
            const double f = m[row][col] * inv;
            for (int k = col; k < 4; ++k) {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    for (int i = 0; i < 4; ++i) {
        rhs[i] /= m[i][i];
    }
    return true;
}

}  // namespace

CorrectionResult logistic_correct(const std::vector<double>& predicted,
                                  const std::vector<double>& label) {
    if (predicted.size() != label.size()) {
        throw ContractError("logistic_correct: length mismatch");
    }
    CorrectionResult result;
    result.corrected = predicted;
    result.fit.used_identity = true;

    if (predicted.size() < 3 || is_constant(predicted) || is_constant(label)) {
        return result;
    }

    // init per VQEG practice: range of the labels, location/scale of the scores
    std::vector<double> sorted = predicted;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted.size() % 2 == 1
                              ? sorted[sorted.size() / 2]
                              : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    const double mp = vec_mean(predicted);
    double var = 0.0;
    for (double p : predicted) {
        var += (p - mp) * (p - mp);
    }
    const double stddev = std::sqrt(var / static_cast<double>(predicted.size()));

    std::array<double, 4> beta{*std::min_element(label.begin(), label.end()),
                               *std::max_element(label.begin(), label.end()), median, stddev};
    if (!(beta[3] > 0.0) || !(beta[1] > beta[0])) {
        return result;
    }

    // damped Gauss-Newton on the monotone increasing branch (b4 > 0, b2 > b1)
    double sse = logistic_sse(beta, predicted, label);
    double lambda = 1e-3;
    int iter = 0;
    for (; iter < 200; ++iter) {
        std::array<std::array<double, 4>, 4> jtj{};
        std::array<double, 4> jtr{};
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            const double t = (predicted[i] - beta[2]) / beta[3];
            const double s = 1.0 / (1.0 + std::exp(-t));
            const double ds = s * (1.0 - s);
            const double span = beta[1] - beta[0];
            const std::array<double, 4> jac{1.0 - s, s, -span * ds / beta[3],
                                            -span * ds * t / beta[3]};
            const double r = logistic_eval(beta, predicted[i]) - label[i];
            for (int a = 0; a < 4; ++a) {
                jtr[a] += jac[a] * r;
                for (int b = 0; b < 4; ++b) {
                    jtj[a][b] += jac[a] * jac[b];
                }
            }
        }

        bool stepped = false;
        for (int attempt = 0; attempt < 12; ++attempt) {
            auto m = jtj;
            for (int a = 0; a < 4; ++a) {
                m[a][a] += lambda * std::max(jtj[a][a], 1e-12);
            }
            std::array<double, 4> delta{-jtr[0], -jtr[1], -jtr[2], -jtr[3]};
            if (!solve4(m, delta)) {
                lambda *= 10.0;
                continue;
            }
            std::array<double, 4> cand{beta[0] + delta[0], beta[1] + delta[1], beta[2] + delta[2],
                                       beta[3] + delta[3]};
            if (!(cand[3] > 0.0) || !(cand[1] > cand[0])) {
                lambda *= 10.0;
                continue;
            }
            const double cand_sse = logistic_sse(cand, predicted, label);
            if (std::isfinite(cand_sse) && cand_sse <= sse) {
                const double gain = sse - cand_sse;
                beta = cand;
                sse = cand_sse;
                lambda = std::max(lambda * 0.3, 1e-12);
                stepped = true;
                if (gain <= 1e-14 * (sse + 1e-14)) {
                    iter = 201;  // converged
                }
                break;
            }
            lambda *= 10.0;
        }
        if (!stepped) {
            break;
        }
    }

    std::vector<double> corrected(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        corrected[i] = logistic_eval(beta, predicted[i]);
    }
    if (!std::all_of(corrected.begin(), corrected.end(),
                     [](double v) { return std::isfinite(v); })) {
        return result;
    }
    // The fitted map is strictly increasing, but the sigmoid saturates in
    // floating point and can collapse distinct scores onto one value. Restore
    // strictness ulp by ulp, in score order, so ranks survive the correction.
    {
        std::vector<std::size_t> order(predicted.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return predicted[a] < predicted[b];
        });
        for (std::size_t i = 1; i < order.size(); ++i) {
            const std::size_t prev = order[i - 1];
            const std::size_t cur = order[i];
            if (predicted[cur] == predicted[prev]) {
                corrected[cur] = corrected[prev];
            } else if (corrected[cur] <= corrected[prev]) {
                corrected[cur] = std::nextafter(corrected[prev],
                                                std::numeric_limits<double>::infinity());
            }
        }
    }
    // a correction that correlates worse than the raw scores is a failed fit
    if (!is_constant(corrected)) {
        const double fitted_plcc = plcc(corrected, label);
        const double raw_plcc = plcc(predicted, label);
        if (fitted_plcc >= raw_plcc) {
            result.corrected = std::move(corrected);
            result.fit.beta = beta;
            result.fit.used_identity = false;
            result.fit.iterations = std::min(iter, 200);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// spectrum analysis
// ---------------------------------------------------------------------------

std::vector<double> spectrum_amplitude(const Tensor& feature_map) {
    if (feature_map.ndim() != 3) {
        throw ContractError("spectrum_amplitude: need (channels, h, w), got " +
                            shape_str(feature_map.shape()));
    }
    const std::int64_t ch = feature_map.extent(0);
    const std::int64_t m = feature_map.extent(1);
    if (feature_map.extent(2) != m) {
        throw ContractError("spectrum_amplitude: non-square spatial map " +
                            shape_str(feature_map.shape()));
    }

    // precomputed DFT twiddles, exp(-2*pi*i*k*j/m)
    std::vector<double> cos_t(static_cast<std::size_t>(m * m));
    std::vector<double> sin_t(static_cast<std::size_t>(m * m));
    for (std::int64_t k = 0; k < m; ++k) {
        for (std::int64_t j = 0; j < m; ++j) {
            const double ang = -2.0 * kPi * static_cast<double>((k * j) % m) / static_cast<double>(m);
            cos_t[static_cast<std::size_t>(k * m + j)] = std::cos(ang);
            sin_t[static_cast<std::size_t>(k * m + j)] = std::sin(ang);
        }
    }

    std::vector<double> amplitude(static_cast<std::size_t>(m * m), 0.0);
    std::vector<double> row_re(static_cast<std::size_t>(m * m));
    std::vector<double> row_im(static_cast<std::size_t>(m * m));
    const double* base = feature_map.values().data();
    for (std::int64_t c = 0; c < ch; ++c) {
        const double* plane = base + c * m * m;
        // rows first, then columns (separable 2-D DFT)
        for (std::int64_t y = 0; y < m; ++y) {
            for (std::int64_t v = 0; v < m; ++v) {
                double re = 0.0;
                double im = 0.0;
                const double* tc = cos_t.data() + v * m;
                const double* ts = sin_t.data() + v * m;
                for (std::int64_t x = 0; x < m; ++x) {
                    const double f = plane[y * m + x];
                    re += f * tc[x];
                    im += f * ts[x];
                }
                row_re[static_cast<std::size_t>(y * m + v)] = re;
                row_im[static_cast<std::size_t>(y * m + v)] = im;
            }
        }
        for (std::int64_t u = 0; u < m; ++u) {
            const double* tc = cos_t.data() + u * m;
            const double* ts = sin_t.data() + u * m;
            for (std::int64_t v = 0; v < m; ++v) {
                double re = 0.0;
                double im = 0.0;
                for (std::int64_t y = 0; y < m; ++y) {
                    const double rr = row_re[static_cast<std::size_t>(y * m + v)];
                    const double ri = row_im[static_cast<std::size_t>(y * m + v)];
                    re += rr * tc[y] - ri * ts[y];
                    im += rr * ts[y] + ri * tc[y];
                }
                amplitude[static_cast<std::size_t>(u * m + v)] += std::sqrt(re * re + im * im);
            }
        }
    }
    for (auto& a : amplitude) {
        a /= static_cast<double>(ch);
    }
    return amplitude;
}

SpectrumProfile profile_from_amplitude(std::vector<double> amplitude, std::int64_t m) {
    if (static_cast<std::int64_t>(amplitude.size()) != m * m) {
        throw ContractError("profile_from_amplitude: grid size mismatch");
    }
    SpectrumProfile p;
    p.grid_size = m;
    const std::int64_t half = m / 2;
    // half-diagonal of the centered spectrum = bins (k,k), k = 0..m/2
    for (std::int64_t k = 0; k <= half; ++k) {
        const double a = std::max(amplitude[static_cast<std::size_t>(k * m + k)], kAmplitudeFloor);
        p.frequency.push_back(kPi * std::sqrt(2.0) * static_cast<double>(k) /
                              static_cast<double>(m));
        p.log_amplitude.push_back(std::log(a));
    }
    p.delta_log_amplitude.resize(p.log_amplitude.size());
    for (std::size_t k = 0; k < p.log_amplitude.size(); ++k) {
        p.delta_log_amplitude[k] = p.log_amplitude[k] - p.log_amplitude[0];
    }
    p.delta_log_amplitude[0] = 0.0;
    p.amplitude_grid = std::move(amplitude);
    return p;
}

SpectrumProfile fourier_profile(const Tensor& feature_map) {
    return profile_from_amplitude(spectrum_amplitude(feature_map), feature_map.extent(1));
}

Tensor tokens_to_grid(const Tensor& tokens) {
    if (tokens.ndim() != 2) {
        throw ContractError("tokens_to_grid: need (tokens, dim), got " +
                            shape_str(tokens.shape()));
    }
    const std::int64_t l = tokens.extent(0);
    const std::int64_t d = tokens.extent(1);
    const auto g = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(l - 1))));
    if (g * g != l - 1) {
        throw ContractError("tokens_to_grid: non-square token grid, " + std::to_string(l - 1) +
                            " patch tokens");
    }
    NoGradGuard no_grad;
    Tensor patches = slice(tokens, 0, 1, l);                 // drop CLS
    Tensor grid = reshape(patches, {g, g, d});
    return transpose(grid, {2, 0, 1});                        // (d, g, g)
}

ProfileComparison compare_profiles(const TokenTraceFn& model_a, const TokenTraceFn& model_b,
                                   const std::vector<Tensor>& images) {
    if (images.empty()) {
        throw ContractError("compare_profiles: empty image set");
    }
    NoGradGuard no_grad;
    std::vector<std::vector<double>> acc_a;
    std::vector<std::vector<double>> acc_b;
    std::int64_t grid = 0;
    std::size_t count = 0;

    for (const auto& image : images) {
        Tensor batch = image.ndim() == 3
                           ? reshape(image, {1, image.extent(0), image.extent(1), image.extent(2)})
                           : image;
        const auto trace_a = model_a(batch);
        const auto trace_b = model_b(batch);
        if (trace_a.size() != trace_b.size()) {
            throw ContractError("compare_profiles: layer count mismatch: " +
                                std::to_string(trace_a.size()) + " vs " +
                                std::to_string(trace_b.size()));
        }
        if (acc_a.empty()) {
            acc_a.resize(trace_a.size());
            acc_b.resize(trace_b.size());
        }
        for (std::size_t layer = 0; layer < trace_a.size(); ++layer) {
            for (std::int64_t n = 0; n < trace_a[layer].extent(0); ++n) {
                Tensor ta = tokens_to_grid(reshape(
                    slice(trace_a[layer], 0, n, n + 1),
                    {trace_a[layer].extent(1), trace_a[layer].extent(2)}));
                Tensor tb = tokens_to_grid(reshape(
                    slice(trace_b[layer], 0, n, n + 1),
                    {trace_b[layer].extent(1), trace_b[layer].extent(2)}));
                auto amp_a = spectrum_amplitude(ta);
                auto amp_b = spectrum_amplitude(tb);
                grid = ta.extent(1);
                if (acc_a[layer].empty()) {
                    acc_a[layer].assign(amp_a.size(), 0.0);
                    acc_b[layer].assign(amp_b.size(), 0.0);
                }
                for (std::size_t i = 0; i < amp_a.size(); ++i) {
                    acc_a[layer][i] += amp_a[i];
                    acc_b[layer][i] += amp_b[i];
                }
                if (layer == 0) {
                    ++count;
                }
            }
        }
    }

    ProfileComparison cmp;
    for (std::size_t layer = 0; layer < acc_a.size(); ++layer) {
        for (auto& v : acc_a[layer]) {
            v /= static_cast<double>(count);
        }
        for (auto& v : acc_b[layer]) {
            v /= static_cast<double>(count);
        }
        cmp.layers_a.push_back(profile_from_amplitude(std::move(acc_a[layer]), grid));
        cmp.layers_b.push_back(profile_from_amplitude(std::move(acc_b[layer]), grid));
        const auto& pa = cmp.layers_a.back();
        const auto& pb = cmp.layers_b.back();
        // high band = upper half of the diagonal axis
        double diff = 0.0;
        std::size_t n = 0;
        for (std::size_t k = pa.frequency.size() / 2; k < pa.frequency.size(); ++k) {
            diff += pb.delta_log_amplitude[k] - pa.delta_log_amplitude[k];
            ++n;
        }
        cmp.high_band_mean_diff.push_back(n > 0 ? diff / static_cast<double>(n) : 0.0);
    }
    return cmp;
}

void write_profile_data(const ProfileComparison& cmp, const std::string& name_a,
                        const std::string& name_b, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("write_profile_data: cannot open " + path);
    }
    out << "frequency,delta_log_amplitude,model,layer\n";
    out.precision(17);
    auto dump = [&out](const std::vector<SpectrumProfile>& layers, const std::string& name) {
        for (std::size_t layer = 0; layer < layers.size(); ++layer) {
            for (std::size_t k = 0; k < layers[layer].frequency.size(); ++k) {
                out << layers[layer].frequency[k] << ',' << layers[layer].delta_log_amplitude[k]
                    << ',' << name << ',' << layer << '\n';
            }
        }
    };
    dump(cmp.layers_a, name_a);
    dump(cmp.layers_b, name_b);
}

}  // namespace loda
