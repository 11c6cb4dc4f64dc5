#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "loda/data.hpp"
#include "loda/training.hpp"

using namespace loda;

namespace {

// small synthetic set held in memory, one distortion family
Dataset tiny_dataset(std::uint64_t seed, std::int64_t count, double severity_step = 0.5) {
    Dataset data;
    for (std::int64_t i = 0; i < count; ++i) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
        Tensor base = make_base_image(i % 2 == 0 ? "gaussian_field" : "gradient_mix", 64, rng);
        const double severity = severity_step * static_cast<double>(i % 5);
        data.images.push_back(apply_distortion(base, "blur", severity, rng));
        data.mos.push_back(mos_of_severity(severity));
        data.paths.push_back("mem://" + std::to_string(i));
    }
    return data;
}

TrainConfig quick_config(Mode mode, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.patches_per_test_image = 2;
    cfg.crop_size = 64;
    return cfg;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 3e-4, 0.0) == doctest::Approx(3e-4));
    CHECK(cosine_lr(100, 100, 3e-4, 0.0) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 3e-4, 1e-5) == doctest::Approx((3e-4 + 1e-5) / 2.0));
    CHECK_THROWS_AS(cosine_lr(5, 4, 1e-3, 0.0), ContractError);
}

TEST_CASE("adamw leaves parameters alone under zero grad and zero decay") {
    Tensor p = Tensor::from_values({3}, {1.0, -2.0, 0.5}, true);
    p.impl->grad.assign(3, 0.0);
    AdamW opt;
    opt.step({{"p", p}}, 0.1, 0.0);
    CHECK(p.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adamw decoupled decay scales parameters with zero grad") {
    Tensor p = Tensor::from_values({2}, {1.0, -4.0}, true);
    p.impl->grad.assign(2, 0.0);
    AdamW opt;
    opt.step({{"p", p}}, 0.1, 0.01);
    CHECK(p.values()[0] == doctest::Approx(1.0 * (1.0 - 0.001)).epsilon(1e-15));
    CHECK(p.values()[1] == doctest::Approx(-4.0 * (1.0 - 0.001)).epsilon(1e-15));
}

TEST_CASE("adamw first step matches the bias-corrected hand evaluation") {
    Tensor p = Tensor::from_values({1}, {1.0}, true);
    p.impl->grad.assign(1, 1.0);
    AdamW opt;
    opt.step({{"p", p}}, 0.1, 0.01);
    // m_hat = v_hat = 1 at t = 1: p = 1 - 0.1·(1/(1+1e-8)) - 0.1·0.01·1
    const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001;
    CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw demands gradients for every parameter") {
    Tensor p = Tensor::from_values({1}, {1.0}, true);
    AdamW opt;
    CHECK_THROWS_AS(opt.step({{"p", p}}, 0.1, 0.0), ContractError);
}

TEST_CASE("sample_patches basics") {
    Rng imgrng(1);
    Tensor image = Tensor::uniform({3, 64, 64}, 0.0, 1.0, imgrng);

    Rng rng(2);
    auto patches = sample_patches(image, 3, 32, rng, true);
    REQUIRE(patches.size() == 3);
    for (const auto& p : patches) {
        CHECK(p.shape() == Shape{3, 32, 32});
    }

    // full-image crops in test mode are identical copies
    Rng rng2(3);
    auto full = sample_patches(image, 2, 64, rng2, false);
    CHECK(full[0].values() == image.values());
    CHECK(full[1].values() == image.values());

    // deterministic offsets under a fixed seed
    Rng a(4);
    Rng b(4);
    auto pa = sample_patches(image, 5, 16, a, true);
    auto pb = sample_patches(image, 5, 16, b, true);
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].values() == pb[i].values());
    }

    Rng rng3(5);
    CHECK_THROWS_AS(sample_patches(image, 1, 65, rng3, false), ContractError);
}

TEST_CASE("make_split is disjoint and covers the dataset") {
    auto [train, test] = make_split(25, 0.8, 99);
    CHECK(train.size() == 20);
    CHECK(test.size() == 5);
    std::set<std::int64_t> all(train.begin(), train.end());
    for (auto i : test) {
        CHECK(all.insert(i).second);  // no overlap
    }
    CHECK(all.size() == 25);
}

TEST_CASE("median is the arithmetic median") {
    CHECK(median({0.1, 0.9, 0.5}) == 0.5);
    CHECK(median({0.1, 0.2, 0.3, 0.4}) == doctest::Approx(0.25));
    CHECK(median({1.0}) == 1.0);
}

TEST_CASE("training leaves every frozen tensor bit-identical") {
    Dataset data = tiny_dataset(60, 12);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 61);
    const auto before = frozen_hash(model);

    std::vector<std::int64_t> train_idx(data.size());
    std::iota(train_idx.begin(), train_idx.end(), std::int64_t{0});
    TrainConfig tcfg = quick_config(Mode::kLoda, 62);
    train(model, data, train_idx, {}, tcfg);
    CHECK(frozen_hash(model) == before);
}

TEST_CASE("training in linear probe mode moves only the head") {
    Dataset data = tiny_dataset(63, 10);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLinearProbe, 64);
    const auto vit_before = param_hash(model.vit);
    const auto extractor_before = param_hash(model.extractor);
    const auto injector_before = param_hash(model.injector);
    const auto head_before = param_hash(model.head);

    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    train(model, data, idx, {}, quick_config(Mode::kLinearProbe, 65));

    CHECK(param_hash(model.vit) == vit_before);
    CHECK(param_hash(model.extractor) == extractor_before);
    CHECK(param_hash(model.injector) == injector_before);
    CHECK(param_hash(model.head) != head_before);
}

TEST_CASE("training rejects a dataset whose labels are constant") {
    Dataset data = tiny_dataset(66, 8, 0.0);  // every severity 0 -> constant MOS
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 67);
    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    CHECK_THROWS_AS(train(model, data, idx, {}, quick_config(Mode::kLoda, 68)),
                    DegenerateBatchError);
}

TEST_CASE("epoch log carries schedule and loss columns") {
    Dataset data = tiny_dataset(69, 10);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 70);
    std::vector<std::int64_t> train_idx = {0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<std::int64_t> test_idx = {8, 9};
    TrainConfig tcfg = quick_config(Mode::kLoda, 71);
    tcfg.epochs = 3;
    auto result = train(model, data, train_idx, test_idx, tcfg);
    REQUIRE(result.log.size() == 3);
    CHECK(result.log[0].lr <= tcfg.lr0);
    CHECK(result.log[1].lr < result.log[0].lr);  // cosine decay
    for (const auto& row : result.log) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.loss >= 0.0);
        CHECK(row.loss <= 1.0);
    }
    CHECK_FALSE(result.log[0].has_test);
    CHECK(result.log[2].has_test);  // last epoch evaluates
}

TEST_CASE("evaluate scores a label-echoing model perfectly") {
    Dataset data = tiny_dataset(72, 8);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 73);
    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    TrainConfig tcfg = quick_config(Mode::kLoda, 74);

    // turn the model into an exact oracle of its own labels
    auto first = evaluate(model, data, idx, tcfg, 1);
    Dataset echoed = data;
    echoed.mos = first.predictions;
    auto outcome = evaluate(model, echoed, idx, tcfg, 1);
    CHECK(outcome.metrics.srcc == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(outcome.metrics.plcc == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("evaluate handles a constant-output model through the fallbacks") {
    Dataset data = tiny_dataset(75, 6);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 76);
    for (auto& v : model.head.at("weight").values()) {
        v = 0.0;
    }
    model.head.at("bias").values()[0] = 42.0;
    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    auto outcome = evaluate(model, data, idx, quick_config(Mode::kLoda, 77), 1);
    CHECK(outcome.metrics.srcc == 0.0);
    CHECK(outcome.metrics.plcc == 0.0);
    CHECK(outcome.plcc_fallback);
}

TEST_CASE("patch count does not matter for deterministic full-image crops") {
    Dataset data = tiny_dataset(78, 6);
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 79);
    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    TrainConfig one = quick_config(Mode::kLoda, 80);
    one.patches_per_test_image = 1;
    TrainConfig fifteen = quick_config(Mode::kLoda, 80);
    fifteen.patches_per_test_image = 15;
    auto a = evaluate(model, data, idx, one, 7);
    auto b = evaluate(model, data, idx, fifteen, 7);
    CHECK(a.metrics.srcc == doctest::Approx(b.metrics.srcc).epsilon(1e-12));
    CHECK(a.metrics.plcc == doctest::Approx(b.metrics.plcc).epsilon(1e-12));
}

TEST_CASE("run_splits is deterministic for a fixed config and seed") {
    Dataset data = tiny_dataset(81, 10);
    LodaConfig cfg = LodaConfig::desk();
    TrainConfig tcfg = quick_config(Mode::kLinearProbe, 82);
    tcfg.epochs = 1;
    tcfg.patches_per_test_image = 1;
    SplitPlan plan;
    plan.base_seed = 5;
    plan.num_splits = 3;

    EvalReport a = run_splits(data, cfg, tcfg, plan);
    EvalReport b = run_splits(data, cfg, tcfg, plan);
    REQUIRE(a.splits.size() == 3);
    for (std::size_t i = 0; i < a.splits.size(); ++i) {
        CHECK(a.splits[i].test.srcc == b.splits[i].test.srcc);
        CHECK(a.splits[i].test.plcc == b.splits[i].test.plcc);
        CHECK(a.splits[i].train.srcc == b.splits[i].train.srcc);
    }
    CHECK(a.median_test.srcc == b.median_test.srcc);
    CHECK(a.trainable_count == b.trainable_count);
    CHECK(a.total_count == b.total_count);
}

TEST_CASE("epoch log file is byte-deterministic") {
    Dataset data = tiny_dataset(83, 8);
    LodaConfig cfg = LodaConfig::desk();
    auto run_once = [&](const std::string& path) {
        LodaModel model = LodaModel::init(cfg, Mode::kLoda, 84);
        std::vector<std::int64_t> idx(data.size());
        std::iota(idx.begin(), idx.end(), std::int64_t{0});
        auto result = train(model, data, idx, {}, quick_config(Mode::kLoda, 85));
        write_epoch_log(result, path);
    };
    const std::string pa = "/tmp/loda_log_a.csv";
    const std::string pb = "/tmp/loda_log_b.csv";
    run_once(pa);
    run_once(pb);
    std::ifstream fa(pa);
    std::ifstream fb(pb);
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
    CHECK(ca.rfind("epoch,step,lr,loss,train_srcc,test_srcc,test_plcc\n", 0) == 0);
}

}  // TEST_SUITE
