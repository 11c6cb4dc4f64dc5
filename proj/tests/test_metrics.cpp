#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loda/gradcheck.hpp"
#include "loda/metrics.hpp"

using namespace loda;

namespace {

// From-definition oracles, independent of the library implementation path.

double naive_pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a[i];
        sb += b[i];
    }
    const double ma = sa / n;
    const double mb = sb / n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return cov / std::sqrt(va) / std::sqrt(vb);
}

// Distinct-value Spearman via the rank-difference formula,
// 1 - 6 sum(d^2) / (T (T^2 - 1)).
double naive_spearman_distinct(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            r[order[i]] = static_cast<double>(i + 1);
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double t = static_cast<double>(a.size());
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    }
    return 1.0 - 6.0 * d2 / (t * (t * t - 1.0));
}

std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.uniform(-5.0, 5.0);
    }
    return v;
}

double logistic4(const std::array<double, 4>& beta, double x) {
    return beta[0] + (beta[1] - beta[0]) / (1.0 + std::exp(-(x - beta[2]) / beta[3]));
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("plcc_loss is zero at perfect correlation and one at anti-correlation") {
    Tensor y = Tensor::from_values({4}, {1.0, 3.0, 2.0, 5.0});
    CHECK(plcc_loss(y, y).item() == doctest::Approx(0.0).epsilon(1e-12));
    Tensor neg = Tensor::from_values({4}, {-1.0, -3.0, -2.0, -5.0});
    CHECK(plcc_loss(neg, y).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("plcc_loss hand case agrees with the pearson oracle") {
    const std::vector<double> pred = {1.0, 2.0, 4.0};
    const std::vector<double> label = {1.0, 2.0, 3.0};
    const double expected = (1.0 - naive_pearson(pred, label)) / 2.0;  // = 0.00900974...
    Tensor loss = plcc_loss(Tensor::from_values({3}, pred), Tensor::from_values({3}, label));
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(loss.item() == doctest::Approx(0.0090097).epsilon(1e-4));
}

TEST_CASE("plcc_loss rejects constant batches") {
    Tensor c = Tensor::full({3}, 2.0);
    Tensor y = Tensor::from_values({3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS(plcc_loss(c, y), DegenerateBatchError);
    CHECK_THROWS_AS(plcc_loss(y, c), DegenerateBatchError);
}

TEST_CASE("plcc_loss gradient matches finite differences on an 8-element batch") {
    Rng rng(21);
    Tensor pred = Tensor::uniform({8}, -1.0, 1.0, rng, true);
    Tensor label = Tensor::uniform({8}, 0.0, 10.0, rng);
    Tensor loss = plcc_loss(pred, label);
    CHECK(loss.item() >= 0.0);
    CHECK(loss.item() <= 1.0);
    backward(loss);
    Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
            NoGradGuard no_grad;
            return plcc_loss(probe, label).item();
        },
        pred, 1e-5);
    CHECK(grad_rel_err(pred.grad_values(), fd.values()) < 1e-4);
}

TEST_CASE("plcc_loss equals (1 - plcc)/2 bit for bit") {
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = static_cast<std::size_t>(2 + rng.next_u64() % 40);
        auto a = random_vector(rng, n);
        auto b = random_vector(rng, n);
        const double loss =
            plcc_loss(Tensor::from_values({static_cast<std::int64_t>(n)}, a),
                      Tensor::from_values({static_cast<std::int64_t>(n)}, b))
                .item();
        CHECK(loss == (1.0 - plcc(a, b)) / 2.0);
    }
}

TEST_CASE("srcc basics") {
    CHECK(srcc({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(srcc({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
    // d^2 = 4,1,1 -> 1 - 36/24 = -0.5
    CHECK(srcc({3, 1, 2}, {1, 2, 3}) == doctest::Approx(-0.5));
    CHECK_THROWS_AS(srcc({1, 2}, {1, 2, 3}), ContractError);
}

TEST_CASE("srcc handles the all-tied degenerate vector") {
    CHECK(srcc({5, 5, 5}, {1, 2, 3}) == 0.0);
}

TEST_CASE("plcc basics") {
    const std::vector<double> s = {1.0, 2.0, 3.0};
    std::vector<double> affine(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        affine[i] = 2.0 * s[i] + 5.0;
    }
    CHECK(plcc(affine, s) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> negated(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        negated[i] = -s[i];
    }
    CHECK(plcc(negated, s) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(plcc({1.0, 2.0, 4.0}, s) == doctest::Approx(0.98198).epsilon(1e-4));
    CHECK(plcc({1.0, 2.0, 4.0}, s) == doctest::Approx(naive_pearson({1.0, 2.0, 4.0}, s)).epsilon(1e-12));
    CHECK_THROWS_AS(plcc({2.0, 2.0, 2.0}, s), DegenerateBatchError);
}

TEST_CASE("srcc and plcc match naive oracles on 100 random vectors") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const auto n = static_cast<std::size_t>(2 + rng.next_u64() % 199);  // lengths 2..200
        const auto a = random_vector(rng, n);
        const auto b = random_vector(rng, n);
        CHECK(std::abs(plcc(a, b) - naive_pearson(a, b)) < 1e-9);
        // uniform draws are tie-free, so the distinct-rank difference formula applies
        CHECK(std::abs(srcc(a, b) - naive_spearman_distinct(a, b)) < 1e-9);
    }
}

TEST_CASE("srcc is invariant under strictly increasing transforms") {
    Rng rng(24);
    const auto a = random_vector(rng, 40);
    const auto b = random_vector(rng, 40);
    std::vector<double> warped(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        warped[i] = std::exp(0.3 * a[i]) + a[i];  // strictly increasing
    }
    CHECK(srcc(warped, b) == doctest::Approx(srcc(a, b)).epsilon(1e-12));
}

TEST_CASE("plcc affine invariance and sign flip") {
    Rng rng(25);
    const auto a = random_vector(rng, 30);
    const auto b = random_vector(rng, 30);
    std::vector<double> scaled(a.size());
    std::vector<double> negated(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        scaled[i] = 3.5 * a[i] - 2.0;
        negated[i] = -a[i];
    }
    CHECK(plcc(scaled, b) == doctest::Approx(plcc(a, b)).epsilon(1e-12));
    CHECK(plcc(negated, b) == doctest::Approx(-plcc(a, b)).epsilon(1e-12));
}

TEST_CASE("logistic correction recovers an exact logistic relation") {
    const std::array<double, 4> beta{0.0, 1.0, 0.5, 0.1};
    Rng rng(26);
    std::vector<double> pred(64);
    std::vector<double> label(64);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        pred[i] = rng.uniform(0.0, 1.0);
        label[i] = logistic4(beta, pred[i]);
    }
    auto result = logistic_correct(pred, label);
    CHECK_FALSE(result.fit.used_identity);
    CHECK(plcc(result.corrected, label) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("logistic correction never loses to the raw mapping on linear data") {
    Rng rng(27);
    std::vector<double> pred(50);
    std::vector<double> label(50);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        pred[i] = rng.uniform(-1.0, 1.0);
        label[i] = 4.0 * pred[i] + 1.0;
    }
    auto result = logistic_correct(pred, label);
    CHECK(plcc(result.corrected, label) >= plcc(pred, label) - 1e-9);
}

TEST_CASE("logistic correction falls back to identity on constant predictions") {
    std::vector<double> pred(10, 3.0);
    std::vector<double> label(10);
    std::iota(label.begin(), label.end(), 0.0);
    auto result = logistic_correct(pred, label);
    CHECK(result.fit.used_identity);
    CHECK(result.corrected == pred);
}

TEST_CASE("logistic correction never changes srcc") {
    Rng rng(28);
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = static_cast<std::size_t>(8 + rng.next_u64() % 56);
        const auto pred = random_vector(rng, n);
        const auto label = random_vector(rng, n);
        auto result = logistic_correct(pred, label);
        CHECK(srcc(result.corrected, label) == doctest::Approx(srcc(pred, label)).epsilon(1e-12));
    }
}

TEST_CASE("fourier profile of a constant map sits at the floor off DC") {
    Tensor map = Tensor::full({2, 8, 8}, 4.0);
    auto profile = fourier_profile(map);
    REQUIRE(profile.frequency.size() == 5);  // k = 0..4
    CHECK(profile.frequency.front() == 0.0);
    CHECK(profile.frequency.back() == doctest::Approx(0.5 * 3.14159265358979323846 * std::sqrt(2.0)));
    CHECK(profile.delta_log_amplitude[0] == 0.0);
    for (std::size_t k = 1; k < profile.delta_log_amplitude.size(); ++k) {
        CHECK(profile.log_amplitude[k] == doctest::Approx(std::log(1e-12)));
        CHECK(profile.delta_log_amplitude[k] < -20.0);
    }
}

TEST_CASE("fourier profile of an impulse is flat") {
    std::vector<double> d(64, 0.0);
    d[0] = 1.0;
    Tensor map = Tensor::from_values({1, 8, 8}, std::move(d));
    auto profile = fourier_profile(map);
    for (double delta : profile.delta_log_amplitude) {
        CHECK(std::abs(delta) < 1e-9);
    }
}

TEST_CASE("fourier amplitude peaks at the cosine frequency") {
    const std::int64_t m = 16;
    const std::int64_t k = 3;
    SUBCASE("cosine along one axis peaks at (0,k) in the 2-D amplitude") {
        std::vector<double> d(static_cast<std::size_t>(m * m));
        for (std::int64_t y = 0; y < m; ++y) {
            for (std::int64_t x = 0; x < m; ++x) {
                d[static_cast<std::size_t>(y * m + x)] =
                    std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(k * x) /
                             static_cast<double>(m));
            }
        }
        auto profile = fourier_profile(Tensor::from_values({1, m, m}, std::move(d)));
        const auto& amp = profile.amplitude_grid;
        std::size_t best = 1;  // skip DC
        for (std::size_t i = 1; i < amp.size(); ++i) {
            if (amp[i] > amp[best] && i != 0) {
                best = i;
            }
        }
        const auto by = static_cast<std::int64_t>(best) / m;
        const auto bx = static_cast<std::int64_t>(best) % m;
        const bool at_k = (by == 0 && (bx == k || bx == m - k));
        CHECK(at_k);
    }
    SUBCASE("cosine along the diagonal peaks at profile bin k") {
        std::vector<double> d(static_cast<std::size_t>(m * m));
        for (std::int64_t y = 0; y < m; ++y) {
            for (std::int64_t x = 0; x < m; ++x) {
                d[static_cast<std::size_t>(y * m + x)] =
                    std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(k * (x + y)) /
                             static_cast<double>(m));
            }
        }
        auto profile = fourier_profile(Tensor::from_values({1, m, m}, std::move(d)));
        std::size_t best = 1;
        for (std::size_t i = 1; i < profile.log_amplitude.size(); ++i) {
            if (profile.log_amplitude[i] > profile.log_amplitude[best]) {
                best = i;
            }
        }
        CHECK(best == static_cast<std::size_t>(k));
    }
}

TEST_CASE("fourier profile rejects non-square maps") {
    Tensor map = Tensor::zeros({1, 4, 6});
    CHECK_THROWS_AS(fourier_profile(map), ContractError);
}

TEST_CASE("tokens_to_grid drops CLS and reshapes to the patch grid") {
    // 1 CLS + 4 patch tokens, dim 2
    Tensor tokens = Tensor::from_values(
        {5, 2}, {99, 99, 1, 10, 2, 20, 3, 30, 4, 40});
    Tensor grid = tokens_to_grid(tokens);
    REQUIRE(grid.shape() == Shape{2, 2, 2});
    CHECK(grid.at({0, 0, 0}) == 1.0);
    CHECK(grid.at({0, 1, 1}) == 4.0);
    CHECK(grid.at({1, 0, 1}) == 20.0);

    Tensor bad = Tensor::zeros({4, 2});  // 3 patch tokens: not a square grid
    CHECK_THROWS_AS(tokens_to_grid(bad), ContractError);
}

}  // TEST_SUITE
