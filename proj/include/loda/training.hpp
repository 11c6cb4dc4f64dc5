#pragma once

#include <map>
#include <string>
#include <vector>

#include "loda/adaptation.hpp"
#include "loda/metrics.hpp"

namespace loda {

struct TrainConfig {
    double lr0 = 3e-4;
    double lr_min = 0.0;
    double weight_decay = 0.01;
    std::int64_t batch_size = 16;  // patches per optimization step
    std::int64_t epochs = 10;
    std::int64_t patches_per_train_image = 1;
    std::int64_t patches_per_test_image = 15;
    std::int64_t crop_size = 64;
    Mode mode = Mode::kLoda;
    std::uint64_t seed = 1;
    std::int64_t eval_every = 0;  // 0: evaluate the test split after the last epoch only

    void validate() const;
};

/// In-memory image collection; images are (3,H,W) tensors in [0,1].
struct Dataset {
    std::vector<Tensor> images;
    std::vector<double> mos;
    std::vector<std::string> paths;

    std::size_t size() const { return images.size(); }
};

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double lr_min);

/// AdamW with decoupled weight decay, beta = (0.9, 0.999), eps = 1e-8.
/// step() consumes and clears the gradients of the given parameters.
class AdamW {
 public:
    void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
              double weight_decay);
    std::int64_t step_count() const { return step_count_; }

 private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Slot> slots_;
    std::int64_t step_count_ = 0;
};

/// k random crops; train mode additionally flips each crop horizontally and
/// vertically with probability 1/2. Patches inherit the source image label.
std::vector<Tensor> sample_patches(const Tensor& image, std::int64_t k, std::int64_t crop_size,
                                   Rng& rng, bool train);

struct EpochLogRow {
    std::int64_t epoch = 0;
    std::int64_t step = 0;  // global step count at the end of the epoch
    double lr = 0.0;
    double loss = 0.0;        // mean batch loss of the epoch
    double train_srcc = 0.0;  // rank correlation of the epoch's batch predictions
    double test_srcc = 0.0;
    double test_plcc = 0.0;
    bool has_test = false;
};

struct TrainResult {
    std::vector<EpochLogRow> log;
};

struct EvalOutcome {
    MetricPair metrics;
    bool plcc_fallback = false;  // degenerate predictions forced the identity path
    std::vector<double> predictions;
    std::vector<double> labels;
};

/// Optimizes the mode's trainable set with the correlation loss. Degenerate
/// batches (all labels equal) are redrawn once, then rejected.
TrainResult train(LodaModel& model, const Dataset& data, const std::vector<std::int64_t>& train_idx,
                  const std::vector<std::int64_t>& test_idx, const TrainConfig& cfg);

/// Per image: mean score over the test patches. SRCC on raw predictions,
/// PLCC after the logistic correction.
EvalOutcome evaluate(const LodaModel& model, const Dataset& data,
                     const std::vector<std::int64_t>& idx, const TrainConfig& cfg,
                     std::uint64_t patch_seed);

struct SplitPlan {
    std::uint64_t base_seed = 7;
    std::int64_t num_splits = 10;
    double train_fraction = 0.8;
    // explicit per-split seeds; when empty, split s uses derive(base_seed, s)
    std::vector<std::uint64_t> split_seeds;

    std::uint64_t seed_for(std::int64_t split) const;
};

/// Disjoint train/test index lists covering the whole dataset.
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> make_split(
    std::size_t dataset_size, double train_fraction, std::uint64_t seed);

struct SplitResult {
    MetricPair test;
    MetricPair train;
    bool plcc_fallback = false;
};

struct EvalReport {
    std::vector<SplitResult> splits;
    MetricPair median_test;
    MetricPair median_train;
    std::int64_t trainable_count = 0;
    std::int64_t total_count = 0;
};

double median(std::vector<double> values);

/// Train/evaluate once per split; medians of the per-split metrics.
EvalReport run_splits(const Dataset& data, const LodaConfig& model_cfg, const TrainConfig& cfg,
                      const SplitPlan& plan);

/// Cross-dataset protocol: train on all of `train_set`, evaluate on all of
/// `test_set` with no adaptation, repeated with derived seeds.
EvalReport run_cross_dataset(const Dataset& train_set, const Dataset& test_set,
                             const LodaConfig& model_cfg, const TrainConfig& cfg,
                             std::int64_t repeats);

/// Epoch log as delimiter-separated text (deterministic formatting).
void write_epoch_log(const TrainResult& result, const std::string& path);

}  // namespace loda
