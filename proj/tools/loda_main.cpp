#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "loda/data.hpp"
#include "loda/gradcheck.hpp"
#include "loda/metrics.hpp"
#include "loda/training.hpp"

namespace {

using namespace loda;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct CommonOptions {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;  // config keys set by flags
};

// Flags shadow config-file keys; whatever the flag sets wins.
void add_common(CLI::App* cmd, CommonOptions& common) {
    cmd->add_option("--config", common.config_path, "key = value config file");
    auto forward = [&common](const std::string& key) {
        return [&common, key](const std::string& value) {
            common.overrides.emplace_back(key, value);
        };
    };
    cmd->add_option_function<std::string>("--seed", forward("train.seed"), "training seed");
    cmd->add_option_function<std::string>("--epochs", forward("train.epochs"), "epoch count");
    cmd->add_option_function<std::string>("--mode", forward("train.mode"),
                                          "loda | linear_probe | full_finetune | extractor_only");
    cmd->add_option_function<std::string>("--batch-size", forward("train.batch_size"),
                                          "patches per optimization step");
    cmd->add_option_function<std::string>("--lr0", forward("train.lr0"), "initial learning rate");
    cmd->add_option_function<std::string>("--lr-min", forward("train.lr_min"),
                                          "cosine floor learning rate");
    cmd->add_option_function<std::string>("--weight-decay", forward("train.weight_decay"),
                                          "decoupled weight decay");
    cmd->add_option_function<std::string>("--patches-train", forward("train.patches_train"),
                                          "training patches per image");
    cmd->add_option_function<std::string>("--patches-test", forward("train.patches_test"),
                                          "test patches per image");
    cmd->add_option_function<std::string>("--crop-size", forward("train.crop_size"), "crop size");
    cmd->add_option_function<std::string>("--latent-dim", forward("adapt.latent_dim"),
                                          "cross-attention latent width r");
    cmd->add_option_function<std::string>("--heads", forward("adapt.heads"),
                                          "cross-attention heads h");
    cmd->add_option_function<std::string>("--interactions", forward("adapt.interactions"),
                                          "injection point count N");
}

Config resolve_config(const CommonOptions& common) {
    Config cfg;
    if (!common.config_path.empty()) {
        cfg = Config::from_file(common.config_path);
    }
    for (const auto& [key, value] : common.overrides) {
        cfg.set(key, value);
    }
    return cfg;
}

int cmd_gen_data(const CommonOptions& common, const std::string& out_dir, std::uint64_t seed) {
    Config cfg = resolve_config(common);
    SyntheticSpec spec = synthetic_spec_from(cfg);
    Manifest manifest = generate_dataset(spec, seed, out_dir);
    std::printf("wrote %zu images and manifest.csv to %s\n", manifest.rows.size(),
                out_dir.c_str());
    return 0;
}

int cmd_train(const CommonOptions& common, const std::string& data_path,
              const std::string& weights_out, const std::string& log_out, double train_fraction,
              std::uint64_t split_seed) {
    Config cfg = resolve_config(common);
    LodaConfig model_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    Dataset data = load_dataset(data_path);

    std::vector<std::int64_t> train_idx;
    std::vector<std::int64_t> test_idx;
    if (train_fraction >= 1.0) {
        train_idx.resize(data.size());
        std::iota(train_idx.begin(), train_idx.end(), std::int64_t{0});
    } else {
        std::tie(train_idx, test_idx) = make_split(data.size(), train_fraction, split_seed);
    }

    LodaModel model = LodaModel::init(model_cfg, tcfg.mode, tcfg.seed);
    TrainResult result = train(model, data, train_idx, test_idx, tcfg);

    if (!log_out.empty()) {
        write_epoch_log(result, log_out);
    }
    if (!weights_out.empty()) {
        save_model(model, weights_out);
    }
    const auto& last = result.log.back();
    std::printf("trained %lld epochs (%lld steps): loss %s train_srcc %s", (long long)tcfg.epochs,
                (long long)last.step, fmt(last.loss).c_str(), fmt(last.train_srcc).c_str());
    if (last.has_test) {
        std::printf(" test_srcc %s test_plcc %s", fmt(last.test_srcc).c_str(),
                    fmt(last.test_plcc).c_str());
    }
    std::printf("\n");
    return 0;
}

int cmd_eval(const CommonOptions& common, const std::string& data_path,
             const std::string& weights_path) {
    Config cfg = resolve_config(common);
    LodaConfig model_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    Dataset data = load_dataset(data_path);

    LodaModel model = LodaModel::init(model_cfg, tcfg.mode, tcfg.seed);
    if (!weights_path.empty()) {
        load_model(model, weights_path);
    }
    std::vector<std::int64_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    auto outcome = evaluate(model, data, idx, tcfg, Rng::derive(tcfg.seed, 0xE7A1));
    std::printf("srcc %s plcc %s images %zu%s\n", fmt(outcome.metrics.srcc).c_str(),
                fmt(outcome.metrics.plcc).c_str(), data.size(),
                outcome.plcc_fallback ? " [plcc-fallback]" : "");
    return 0;
}

int cmd_cross_eval(const CommonOptions& common, const std::string& train_path,
                   const std::string& test_path, std::int64_t repeats) {
    Config cfg = resolve_config(common);
    LodaConfig model_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    Dataset train_set = load_dataset(train_path);
    Dataset test_set = load_dataset(test_path);

    EvalReport report = run_cross_dataset(train_set, test_set, model_cfg, tcfg, repeats);
    for (std::size_t i = 0; i < report.splits.size(); ++i) {
        std::printf("repeat %zu: train_srcc %s cross_srcc %s cross_plcc %s\n", i,
                    fmt(report.splits[i].train.srcc).c_str(),
                    fmt(report.splits[i].test.srcc).c_str(),
                    fmt(report.splits[i].test.plcc).c_str());
    }
    std::printf("median cross_srcc %s cross_plcc %s\n", fmt(report.median_test.srcc).c_str(),
                fmt(report.median_test.plcc).c_str());
    return 0;
}

int cmd_ablate(const CommonOptions& common, const std::string& data_path,
               const std::string& sweep, std::int64_t splits, std::uint64_t plan_seed) {
    Config cfg = resolve_config(common);
    LodaConfig base_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    Dataset data = load_dataset(data_path);

    // grids mirror the reported sweeps: latent width, head count, and every
    // interaction count that divides the layer count
    std::vector<std::int64_t> values;
    if (sweep == "latent") {
        values = {16, 32, 48, 64, 80};
    } else if (sweep == "heads") {
        values = {2, 4, 8};
    } else if (sweep == "interactions") {
        for (std::int64_t n = 1; n <= base_cfg.vit.num_layers; ++n) {
            if (base_cfg.vit.num_layers % n == 0) {
                values.push_back(n);
            }
        }
    } else {
        throw ConfigError("ablate: unknown sweep '" + sweep +
                          "' (expected latent, heads, interactions)");
    }

    SplitPlan plan;
    plan.base_seed = plan_seed;
    plan.num_splits = splits;
    std::printf("%s,trainable,total,median_train_srcc,median_test_srcc,median_test_plcc\n",
                sweep.c_str());
    for (auto value : values) {
        LodaConfig model_cfg = base_cfg;
        if (sweep == "latent") {
            model_cfg.adapt.latent_dim = value;
        } else if (sweep == "heads") {
            model_cfg.adapt.heads = value;
        } else {
            model_cfg.adapt.interactions = value;
        }
        EvalReport report = run_splits(data, model_cfg, tcfg, plan);
        std::printf("%lld,%lld,%lld,%s,%s,%s\n", (long long)value,
                    (long long)report.trainable_count, (long long)report.total_count,
                    fmt(report.median_train.srcc).c_str(), fmt(report.median_test.srcc).c_str(),
                    fmt(report.median_test.plcc).c_str());
    }
    return 0;
}

int cmd_gradcheck(std::int64_t op_seeds, std::int64_t model_seeds) {
    bool all_pass = true;
    for (const auto& r : run_op_gradient_suite(static_cast<int>(op_seeds))) {
        std::printf("[%s] %-24s max_rel_err %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    fmt(r.max_rel_err).c_str());
        all_pass = all_pass && r.pass;
    }
    for (const auto& r : run_model_gradient_suite(static_cast<int>(model_seeds))) {
        std::printf("[%s] %-24s max_rel_err %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    fmt(r.max_rel_err).c_str());
        all_pass = all_pass && r.pass;
    }
    std::printf("%s\n", all_pass ? "gradient suite: all checks passed"
                                 : "gradient suite: FAILURES detected");
    return all_pass ? 0 : 1;
}

int cmd_fourier(const CommonOptions& common, const std::string& data_path,
                const std::string& weights_path, const std::string& out_path,
                std::int64_t image_count) {
    Config cfg = resolve_config(common);
    LodaConfig model_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    Dataset data = load_dataset(data_path);

    LodaModel adapted = LodaModel::init(model_cfg, Mode::kLoda, tcfg.seed);
    if (!weights_path.empty()) {
        load_model(adapted, weights_path);
    }
    LodaModel baseline = adapted;  // same frozen backbone, injector bypassed
    baseline.mode = Mode::kLinearProbe;

    std::vector<Tensor> images;
    const std::int64_t n = std::min<std::int64_t>(image_count, static_cast<std::int64_t>(data.size()));
    for (std::int64_t i = 0; i < n; ++i) {
        images.push_back(data.images[static_cast<std::size_t>(i)]);
    }

    auto trace_of = [](const LodaModel& model) {
        return [&model](const Tensor& batch) {
            std::vector<Tensor> trace;
            loda_forward(model, batch, &trace);
            return trace;
        };
    };
    ProfileComparison cmp = compare_profiles(trace_of(baseline), trace_of(adapted), images);
    write_profile_data(cmp, "vit", "loda", out_path);
    for (std::size_t layer = 0; layer < cmp.high_band_mean_diff.size(); ++layer) {
        std::printf("layer %zu high-band delta(loda - vit) %s\n", layer,
                    fmt(cmp.high_band_mean_diff[layer]).c_str());
    }
    std::printf("profile data written to %s (%lld images)\n", out_path.c_str(), (long long)n);
    return 0;
}

int cmd_params(const CommonOptions& common) {
    Config cfg = resolve_config(common);
    LodaConfig model_cfg = model_config_from(cfg);
    TrainConfig tcfg = train_config_from(cfg);
    LodaModel model = LodaModel::init(model_cfg, tcfg.mode, tcfg.seed);

    const auto trainable = trainable_parameter_count(model);
    const auto total = total_parameter_count(model);
    std::printf("mode %s\n", mode_to_string(model.mode).c_str());
    std::printf("vit %lld cnn %lld extractor %lld injector %lld head %lld\n",
                (long long)model.vit.parameter_count(), (long long)model.cnn.parameter_count(),
                (long long)model.extractor.parameter_count(),
                (long long)model.injector.parameter_count(),
                (long long)model.head.parameter_count());
    std::printf("trainable %lld total %lld fraction %s\n", (long long)trainable, (long long)total,
                fmt(static_cast<double>(trainable) / static_cast<double>(total)).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"local-distortion-aware transformer adaptation toolkit"};
    app.require_subcommand(1);

    CommonOptions common;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic distortion dataset");
    std::string gen_out;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--gen-seed", gen_seed, "dataset seed");
    add_common(gen, common);

    auto* train_cmd = app.add_subcommand("train", "train on a manifest dataset");
    std::string train_data;
    std::string train_weights;
    std::string train_log;
    double train_fraction = 0.8;
    std::uint64_t split_seed = 7;
    train_cmd->add_option("--data", train_data, "manifest path")->required();
    train_cmd->add_option("--out", train_weights, "weight checkpoint to write");
    train_cmd->add_option("--log", train_log, "epoch log to write");
    train_cmd->add_option("--train-fraction", train_fraction, "train share, 1.0 = no held-out");
    train_cmd->add_option("--split-seed", split_seed, "seed for the train/test shuffle");
    add_common(train_cmd, common);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest dataset");
    std::string eval_data;
    std::string eval_weights;
    eval_cmd->add_option("--data", eval_data, "manifest path")->required();
    eval_cmd->add_option("--weights", eval_weights, "checkpoint to load");
    add_common(eval_cmd, common);

    auto* cross = app.add_subcommand("cross-eval", "train on one dataset, test on another");
    std::string cross_train;
    std::string cross_test;
    std::int64_t cross_repeats = 3;
    cross->add_option("--train-data", cross_train, "training manifest")->required();
    cross->add_option("--test-data", cross_test, "evaluation manifest")->required();
    cross->add_option("--repeats", cross_repeats, "independent repeats");
    add_common(cross, common);

    auto* ablate = app.add_subcommand("ablate", "sweep latent width, heads, or interactions");
    std::string ablate_data;
    std::string ablate_sweep;
    std::int64_t ablate_splits = 3;
    std::uint64_t ablate_seed = 7;
    ablate->add_option("--data", ablate_data, "manifest path")->required();
    ablate->add_option("--sweep", ablate_sweep, "latent | heads | interactions")->required();
    ablate->add_option("--splits", ablate_splits, "splits per grid point");
    ablate->add_option("--plan-seed", ablate_seed, "split plan seed");
    add_common(ablate, common);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::int64_t grad_op_seeds = 20;
    std::int64_t grad_model_seeds = 20;
    grad->add_option("--op-seeds", grad_op_seeds, "random instances per op");
    grad->add_option("--model-seeds", grad_model_seeds, "end-to-end model instances");

    auto* fourier = app.add_subcommand("fourier", "token spectrum comparison, baseline vs adapted");
    std::string fourier_data;
    std::string fourier_weights;
    std::string fourier_out = "fourier_profiles.csv";
    std::int64_t fourier_images = 128;
    fourier->add_option("--data", fourier_data, "manifest path")->required();
    fourier->add_option("--weights", fourier_weights, "checkpoint to load");
    fourier->add_option("--out", fourier_out, "profile csv to write");
    fourier->add_option("--images", fourier_images, "images to average over");
    add_common(fourier, common);

    auto* params = app.add_subcommand("params", "report trainable / total parameter counts");
    add_common(params, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage problems exit 2, --help exits 0
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(common, gen_out, gen_seed);
        }
        if (train_cmd->parsed()) {
            return cmd_train(common, train_data, train_weights, train_log, train_fraction,
                             split_seed);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(common, eval_data, eval_weights);
        }
        if (cross->parsed()) {
            return cmd_cross_eval(common, cross_train, cross_test, cross_repeats);
        }
        if (ablate->parsed()) {
            return cmd_ablate(common, ablate_data, ablate_sweep, ablate_splits, ablate_seed);
        }
        if (grad->parsed()) {
            return cmd_gradcheck(grad_op_seeds, grad_model_seeds);
        }
        if (fourier->parsed()) {
            return cmd_fourier(common, fourier_data, fourier_weights, fourier_out, fourier_images);
        }
        if (params->parsed()) {
            return cmd_params(common);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
