// Slow end-to-end checks of the split/evaluation protocol. These train real
// models; the quick per-module tests live in the other test files.

#include <doctest.h>

#include <numeric>

#include "loda/data.hpp"
#include "loda/training.hpp"

using namespace loda;

namespace {

Dataset blur_family_set(std::uint64_t seed, std::int64_t per_cell) {
    const std::vector<double> severities = {0.0, 0.3, 0.6, 1.0, 1.5, 2.2, 3.2, 4.5};
    const std::vector<std::string> families = {"gaussian_field", "checker", "gradient_mix"};
    Dataset data;
    std::int64_t index = 0;
    for (double sev : severities) {
        for (std::int64_t rep = 0; rep < per_cell; ++rep) {
            Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(index)));
            Tensor base = make_base_image(families[static_cast<std::size_t>(index) % 3], 64, rng);
            data.images.push_back(apply_distortion(base, "blur", sev, rng));
            data.mos.push_back(mos_of_severity(sev));
            data.paths.push_back(std::to_string(index));
            ++index;
        }
    }
    return data;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("identical split seeds give identical metric pairs") {
    Dataset data = blur_family_set(7, 2);  // 16 images
    LodaConfig cfg = LodaConfig::desk();
    TrainConfig tcfg;
    tcfg.mode = Mode::kLinearProbe;
    tcfg.seed = 3;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.patches_per_test_image = 1;
    tcfg.crop_size = 64;

    SplitPlan plan;
    plan.num_splits = 10;
    plan.split_seeds.assign(10, 42);  // every split identical
    EvalReport report = run_splits(data, cfg, tcfg, plan);
    REQUIRE(report.splits.size() == 10);
    for (const auto& split : report.splits) {
        CHECK(split.test.srcc == report.splits[0].test.srcc);
        CHECK(split.test.plcc == report.splits[0].test.plcc);
        CHECK(split.train.srcc == report.splits[0].train.srcc);
    }
    CHECK(report.median_test.srcc == report.splits[0].test.srcc);
    CHECK(report.median_test.plcc == report.splits[0].test.plcc);
}

TEST_CASE("cross-dataset transfer within one distortion family beats chance") {
    Dataset a = blur_family_set(1001, 16);  // 128 training images
    Dataset b = blur_family_set(9009, 4);   // 32 fresh images, same family

    LodaConfig cfg = LodaConfig::desk();
    TrainConfig tcfg;
    tcfg.mode = Mode::kLoda;
    tcfg.seed = 77;
    tcfg.epochs = 60;
    tcfg.batch_size = 8;
    tcfg.lr0 = 1.5e-3;
    tcfg.lr_min = 5e-4;
    tcfg.patches_per_test_image = 1;
    tcfg.crop_size = 64;

    EvalReport report = run_cross_dataset(a, b, cfg, tcfg, 3);
    REQUIRE(report.splits.size() == 3);
    INFO("cross srcc per repeat: ", report.splits[0].test.srcc, " ", report.splits[1].test.srcc,
         " ", report.splits[2].test.srcc);
    CHECK(report.median_test.srcc > 0.5);
}

}  // TEST_SUITE
