#include "loda/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace loda {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// Assembles (P,3,crop,crop) batch input plus per-patch labels.
struct PatchBatch {
    Tensor input;
    Tensor labels;
    std::vector<double> label_values;
};

PatchBatch build_patch_batch(const Dataset& data, const std::vector<std::int64_t>& image_ids,
                             std::int64_t patches_per_image, std::int64_t crop, Rng& rng,
                             bool train) {
    std::vector<double> flat;
    std::vector<double> labels;
    std::int64_t count = 0;
    for (auto id : image_ids) {
        auto patches = sample_patches(data.images[static_cast<std::size_t>(id)], patches_per_image,
                                      crop, rng, train);
        for (auto& p : patches) {
            flat.insert(flat.end(), p.values().begin(), p.values().end());
            labels.push_back(data.mos[static_cast<std::size_t>(id)]);
            ++count;
        }
    }
    PatchBatch batch;
    batch.input = Tensor::from_values({count, 3, crop, crop}, std::move(flat));
    batch.label_values = labels;
    batch.labels = Tensor::from_values({count}, std::move(labels));
    return batch;
}

bool has_two_distinct(const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] != v[0]) {
            return true;
        }
    }
    return false;
}

}  // namespace

void TrainConfig::validate() const {
    if (lr0 <= 0.0) {
        throw ConfigError("train config: lr0 must be positive");
    }
    if (epochs < 1) {
        throw ConfigError("train config: epochs must be >= 1");
    }
    if (batch_size < 2) {
        throw ConfigError("train config: batch_size must be >= 2");
    }
    if (patches_per_train_image < 1 || patches_per_test_image < 1) {
        throw ConfigError("train config: patch counts must be >= 1");
    }
    if (crop_size < 1) {
        throw ConfigError("train config: crop_size must be >= 1");
    }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double lr_min) {
    if (step < 0 || step > total_steps || total_steps < 1) {
        throw ContractError("cosine_lr: step outside [0, total_steps]");
    }
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(kPi * t));
}

void AdamW::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
                 double weight_decay) {
    ++step_count_;
    const double beta1 = 0.9;
    const double beta2 = 0.999;
    const double eps = 1e-8;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));

    for (const auto& [name, t] : params) {
        if (!t.has_grad()) {
            throw ContractError("adamw: missing gradient for '" + name + "'");
        }
        auto& slot = slots_[name];
        auto& data = t.impl->data;
        const auto& grad = t.impl->grad;
        if (slot.m.size() != data.size()) {
            slot.m.assign(data.size(), 0.0);
            slot.v.assign(data.size(), 0.0);
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
            const double m_hat = slot.m[i] / bc1;
            const double v_hat = slot.v[i] / bc2;
            // decoupled decay: the wd term sees the parameter, not the moment
            data[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * data[i]);
        }
        t.impl->grad.clear();
    }
}

std::vector<Tensor> sample_patches(const Tensor& image, std::int64_t k, std::int64_t crop_size,
                                   Rng& rng, bool train) {
    if (image.ndim() != 3 || image.extent(0) != 3) {
        throw ShapeError("sample_patches: expected (3,H,W), got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.extent(1);
    const std::int64_t w = image.extent(2);
    if (h < crop_size || w < crop_size) {
        throw ContractError("sample_patches: image " + shape_str(image.shape()) +
                            " smaller than crop " + std::to_string(crop_size));
    }
    std::vector<Tensor> patches;
    patches.reserve(static_cast<std::size_t>(k));
    const double* src = image.values().data();
    for (std::int64_t p = 0; p < k; ++p) {
        const auto y0 = static_cast<std::int64_t>(rng.next_u64() %
                                                  static_cast<std::uint64_t>(h - crop_size + 1));
        const auto x0 = static_cast<std::int64_t>(rng.next_u64() %
                                                  static_cast<std::uint64_t>(w - crop_size + 1));
        const bool flip_h = train && rng.uniform01() < 0.5;
        const bool flip_v = train && rng.uniform01() < 0.5;
        std::vector<double> d(static_cast<std::size_t>(3 * crop_size * crop_size));
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t y = 0; y < crop_size; ++y) {
                const std::int64_t sy = y0 + (flip_v ? crop_size - 1 - y : y);
                const double* srow = src + (c * h + sy) * w + x0;
                double* drow = d.data() + (c * crop_size + y) * crop_size;
                if (flip_h) {
                    for (std::int64_t x = 0; x < crop_size; ++x) {
                        drow[x] = srow[crop_size - 1 - x];
                    }
                } else {
                    std::copy(srow, srow + crop_size, drow);
                }
            }
        }
        patches.push_back(Tensor::from_values({3, crop_size, crop_size}, std::move(d)));
    }
    return patches;
}

TrainResult train(LodaModel& model, const Dataset& data, const std::vector<std::int64_t>& train_idx,
                  const std::vector<std::int64_t>& test_idx, const TrainConfig& cfg) {
    cfg.validate();
    if (train_idx.empty()) {
        throw ContractError("train: empty training split");
    }
    if (model.mode != cfg.mode) {
        throw ContractError("train: model mode does not match config mode");
    }

    auto params = trainable_parameters(model);
    AdamW optimizer;
    Rng rng(Rng::derive(cfg.seed, 0xA110));

    const std::int64_t images_per_batch =
        std::max<std::int64_t>(1, cfg.batch_size / cfg.patches_per_train_image);
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(train_idx.size()) + images_per_batch - 1) / images_per_batch;
    const std::int64_t total_steps = cfg.epochs * steps_per_epoch;

    TrainResult result;
    std::int64_t global_step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order = train_idx;
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.next_u64() % i);
            std::swap(order[i - 1], order[j]);
        }

        double loss_sum = 0.0;
        std::int64_t loss_count = 0;
        std::vector<double> epoch_scores;
        std::vector<double> epoch_labels;
        double last_lr = 0.0;

        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = static_cast<std::size_t>(s * images_per_batch);
            const std::size_t hi =
                std::min(order.size(), static_cast<std::size_t>((s + 1) * images_per_batch));
            std::vector<std::int64_t> group(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                            order.begin() + static_cast<std::ptrdiff_t>(hi));

            PatchBatch batch = build_patch_batch(data, group, cfg.patches_per_train_image,
                                                 cfg.crop_size, rng, true);
            if (!has_two_distinct(batch.label_values)) {
                // one redraw over the whole training split, then give up
                std::vector<std::int64_t> retry;
                for (std::int64_t i = 0; i < images_per_batch; ++i) {
                    retry.push_back(train_idx[static_cast<std::size_t>(
                        rng.next_u64() % train_idx.size())]);
                }
                batch = build_patch_batch(data, retry, cfg.patches_per_train_image, cfg.crop_size,
                                          rng, true);
                if (!has_two_distinct(batch.label_values)) {
                    throw DegenerateBatchError("train: batch labels are constant after redraw");
                }
            }

            const double lr = cosine_lr(global_step, total_steps, cfg.lr0, cfg.lr_min);
            last_lr = lr;
            Tensor scores = loda_forward(model, batch.input);
            Tensor loss = plcc_loss(reshape(scores, {scores.extent(0)}), batch.labels);
            const double loss_value = loss.item();
            backward(loss);
            optimizer.step(params, lr, cfg.weight_decay);

            loss_sum += loss_value;
            ++loss_count;
            for (std::int64_t i = 0; i < scores.extent(0); ++i) {
                epoch_scores.push_back(scores.values()[static_cast<std::size_t>(i)]);
                epoch_labels.push_back(batch.label_values[static_cast<std::size_t>(i)]);
            }
            ++global_step;
        }

        EpochLogRow row;
        row.epoch = epoch;
        row.step = global_step;
        row.lr = last_lr;
        row.loss = loss_sum / static_cast<double>(loss_count);
        row.train_srcc = srcc(epoch_scores, epoch_labels);
        const bool last_epoch = epoch + 1 == cfg.epochs;
        const bool do_eval =
            !test_idx.empty() &&
            (last_epoch || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        if (do_eval) {
            auto outcome = evaluate(model, data, test_idx, cfg, Rng::derive(cfg.seed, 0xE7A1));
            row.test_srcc = outcome.metrics.srcc;
            row.test_plcc = outcome.metrics.plcc;
            row.has_test = true;
        }
        result.log.push_back(row);
    }
    return result;
}

EvalOutcome evaluate(const LodaModel& model, const Dataset& data,
                     const std::vector<std::int64_t>& idx, const TrainConfig& cfg,
                     std::uint64_t patch_seed) {
    if (idx.empty()) {
        throw ContractError("evaluate: empty split");
    }
    NoGradGuard no_grad;
    EvalOutcome outcome;
    for (auto id : idx) {
        Rng rng(Rng::derive(patch_seed, static_cast<std::uint64_t>(id)));
        auto patches = sample_patches(data.images[static_cast<std::size_t>(id)],
                                      cfg.patches_per_test_image, cfg.crop_size, rng, false);
        std::vector<double> flat;
        for (auto& p : patches) {
            flat.insert(flat.end(), p.values().begin(), p.values().end());
        }
        Tensor input = Tensor::from_values(
            {static_cast<std::int64_t>(patches.size()), 3, cfg.crop_size, cfg.crop_size},
            std::move(flat));
        Tensor scores = loda_forward(model, input);
        // mean anchored at the first patch so identical patches reduce exactly
        const double anchor = scores.values()[0];
        double drift = 0.0;
        for (double v : scores.values()) {
            drift += v - anchor;
        }
        outcome.predictions.push_back(anchor + drift / static_cast<double>(scores.numel()));
        outcome.labels.push_back(data.mos[static_cast<std::size_t>(id)]);
    }

    outcome.metrics.srcc = srcc(outcome.predictions, outcome.labels);
    auto correction = logistic_correct(outcome.predictions, outcome.labels);
    outcome.plcc_fallback = correction.fit.used_identity;
    try {
        outcome.metrics.plcc = plcc(correction.corrected, outcome.labels);
    } catch (const DegenerateBatchError&) {
        outcome.metrics.plcc = 0.0;  // constant predictions: report the uninformative value
        outcome.plcc_fallback = true;
    }
    return outcome;
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> make_split(
    std::size_t dataset_size, double train_fraction, std::uint64_t seed) {
    if (dataset_size < 2 || train_fraction <= 0.0 || train_fraction >= 1.0) {
        throw ContractError("make_split: need >= 2 images and 0 < fraction < 1");
    }
    std::vector<std::int64_t> order(dataset_size);
    std::iota(order.begin(), order.end(), std::int64_t{0});
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.next_u64() % i);
        std::swap(order[i - 1], order[j]);
    }
    auto cut = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(dataset_size)));
    cut = std::clamp<std::size_t>(cut, 1, dataset_size - 1);
    std::vector<std::int64_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<std::int64_t> test(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
    return {train, test};
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw ContractError("median: empty input");
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::uint64_t SplitPlan::seed_for(std::int64_t split) const {
    if (split_seeds.empty()) {
        return Rng::derive(base_seed, static_cast<std::uint64_t>(split));
    }
    return split_seeds[static_cast<std::size_t>(split) % split_seeds.size()];
}

EvalReport run_splits(const Dataset& data, const LodaConfig& model_cfg, const TrainConfig& cfg,
                      const SplitPlan& plan) {
    EvalReport report;
    std::vector<double> test_srcc;
    std::vector<double> test_plcc;
    std::vector<double> train_srcc_v;
    std::vector<double> train_plcc_v;
    for (std::int64_t s = 0; s < plan.num_splits; ++s) {
        const std::uint64_t split_seed = plan.seed_for(s);
        auto [train_idx, test_idx] = make_split(data.size(), plan.train_fraction, split_seed);

        // everything downstream keys off the split seed, so identical seeds
        // give identical splits, models, and metrics
        LodaModel model =
            LodaModel::init(model_cfg, cfg.mode, Rng::derive(cfg.seed, Rng::derive(split_seed, 1)));
        TrainConfig split_cfg = cfg;
        split_cfg.seed = Rng::derive(cfg.seed, Rng::derive(split_seed, 2));
        train(model, data, train_idx, test_idx, split_cfg);

        auto test_out = evaluate(model, data, test_idx, split_cfg, Rng::derive(split_cfg.seed, 1));
        auto train_out = evaluate(model, data, train_idx, split_cfg, Rng::derive(split_cfg.seed, 2));

        SplitResult r;
        r.test = test_out.metrics;
        r.train = train_out.metrics;
        r.plcc_fallback = test_out.plcc_fallback;
        report.splits.push_back(r);
        test_srcc.push_back(r.test.srcc);
        test_plcc.push_back(r.test.plcc);
        train_srcc_v.push_back(r.train.srcc);
        train_plcc_v.push_back(r.train.plcc);

        if (s == 0) {
            report.trainable_count = trainable_parameter_count(model);
            report.total_count = total_parameter_count(model);
        }
    }
    report.median_test = {median(test_srcc), median(test_plcc)};
    report.median_train = {median(train_srcc_v), median(train_plcc_v)};
    return report;
}

EvalReport run_cross_dataset(const Dataset& train_set, const Dataset& test_set,
                             const LodaConfig& model_cfg, const TrainConfig& cfg,
                             std::int64_t repeats) {
    EvalReport report;
    std::vector<double> test_srcc;
    std::vector<double> test_plcc;
    std::vector<double> train_srcc_v;
    std::vector<double> train_plcc_v;
    std::vector<std::int64_t> all_train(static_cast<std::size_t>(train_set.size()));
    std::iota(all_train.begin(), all_train.end(), std::int64_t{0});
    std::vector<std::int64_t> all_test(static_cast<std::size_t>(test_set.size()));
    std::iota(all_test.begin(), all_test.end(), std::int64_t{0});

    for (std::int64_t rep = 0; rep < repeats; ++rep) {
        LodaModel model = LodaModel::init(model_cfg, cfg.mode, Rng::derive(cfg.seed, 0xC105 + rep));
        TrainConfig rep_cfg = cfg;
        rep_cfg.seed = Rng::derive(cfg.seed, 0xC2 + rep);
        train(model, train_set, all_train, {}, rep_cfg);

        auto test_out = evaluate(model, test_set, all_test, rep_cfg, Rng::derive(rep_cfg.seed, 3));
        auto train_out =
            evaluate(model, train_set, all_train, rep_cfg, Rng::derive(rep_cfg.seed, 4));
        SplitResult r;
        r.test = test_out.metrics;
        r.train = train_out.metrics;
        r.plcc_fallback = test_out.plcc_fallback;
        report.splits.push_back(r);
        test_srcc.push_back(r.test.srcc);
        test_plcc.push_back(r.test.plcc);
        train_srcc_v.push_back(r.train.srcc);
        train_plcc_v.push_back(r.train.plcc);
        if (rep == 0) {
            report.trainable_count = trainable_parameter_count(model);
            report.total_count = total_parameter_count(model);
        }
    }
    report.median_test = {median(test_srcc), median(test_plcc)};
    report.median_train = {median(train_srcc_v), median(train_plcc_v)};
    return report;
}

void write_epoch_log(const TrainResult& result, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("write_epoch_log: cannot open " + path);
    }
    out << "epoch,step,lr,loss,train_srcc,test_srcc,test_plcc\n";
    for (const auto& row : result.log) {
        out << row.epoch << ',' << row.step << ',' << format_double(row.lr) << ','
            << format_double(row.loss) << ',' << format_double(row.train_srcc) << ',';
        if (row.has_test) {
            out << format_double(row.test_srcc) << ',' << format_double(row.test_plcc);
        } else {
            out << "nan,nan";
        }
        out << '\n';
    }
}

}  // namespace loda
