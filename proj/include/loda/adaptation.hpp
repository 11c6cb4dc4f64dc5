#pragma once

#include <string>
#include <utility>
#include <vector>

#include "loda/backbones.hpp"

namespace loda {

enum class Mode {
    kLoda,           // extractor + injector + head trainable
    kLinearProbe,    // head only
    kFullFinetune,   // every ViT tensor + head, no extractor/injector in the path
    kExtractorOnly,  // extractor + head, distortion tokens added directly
};

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);

struct AdaptConfig {
    std::int64_t extractor_channels = 16;  // shared output width c of every stage extractor
    std::int64_t pooled_size = 4;          // average-pool target (m = n)
    std::int64_t latent_dim = 32;          // r, width of the cross-attention space
    std::int64_t heads = 4;                // h, cross-attention heads
    std::int64_t interactions = 4;         // N, number of injection points; must divide L

    std::int64_t msd_token_count() const { return 4 * pooled_size * pooled_size; }
    void validate(const VitConfig& vit) const;
};

struct LodaConfig {
    VitConfig vit;
    CnnConfig cnn;
    AdaptConfig adapt;

    static LodaConfig desk();
    static LodaConfig full_scale();
    void validate() const;
};

/// Frozen backbones plus the trainable adaptation stores. Construction wires
/// the mode's freezing policy; forward passes pick their path from `mode`.
struct LodaModel {
    LodaConfig cfg;
    Mode mode = Mode::kLoda;
    ParamStore vit;        // frozen except in full-finetune mode
    ParamStore cnn;        // always frozen
    ParamStore extractor;  // trainable
    ParamStore injector;   // trainable
    ParamStore head;       // trainable

    static LodaModel init(const LodaConfig& cfg, Mode mode, std::uint64_t seed);
};

ParamStore init_extractor_params(const LodaConfig& cfg, std::uint64_t seed);
ParamStore init_injector_params(const LodaConfig& cfg, std::uint64_t seed);
ParamStore init_head_params(const LodaConfig& cfg, std::uint64_t seed);

/// Per-stage extractor maps: conv1x1 -> conv3x3 -> average pool, (b,c,m,m) each.
std::vector<Tensor> extractor_stage_maps(const std::vector<Tensor>& features,
                                         const LodaConfig& cfg, const ParamStore& extractor);

/// Multi-scale distortion tokens (b, 4·m·m, c): stage maps flattened and
/// concatenated along the token axis in stage order.
Tensor extract_local_distortion(const std::vector<Tensor>& features, const LodaConfig& cfg,
                                const ParamStore& extractor);

/// Shared key/value down-projection of the distortion tokens, (b, T_msd, r).
Tensor msd_down_project(const Tensor& msd_tokens, const ParamStore& injector);

/// One gated cross-attention injection:
///   queried = MHCA(f_q(tokens), kv, kv) + f_q(tokens)
///   out     = tokens + gate ⊙ up(queried)
/// `msd_kv` is the pre-computed down-projection (see msd_down_project).
Tensor inject_with_kv(const Tensor& vit_tokens, const Tensor& msd_kv, const ParamStore& injector,
                      const AdaptConfig& cfg, int interaction);

/// Convenience overload: applies the shared down-projection, then injects.
Tensor inject(const Tensor& vit_tokens, const Tensor& msd_tokens, const ParamStore& injector,
              const AdaptConfig& cfg, int interaction);

/// Whole-model forward: (b,3,H,W) images to (b,1) quality scores. When
/// `trace` is given it receives the tokens after every encoder layer.
Tensor loda_forward(const LodaModel& model, const Tensor& images,
                    std::vector<Tensor>* trace = nullptr);

/// The mode's trainable tensors, namespaced ("extractor.", "injector.",
/// "head.", "vit."), in deterministic order.
std::vector<std::pair<std::string, Tensor>> trainable_parameters(const LodaModel& model);

std::int64_t trainable_parameter_count(const LodaModel& model);
std::int64_t total_parameter_count(const LodaModel& model);

/// Combined hash of the tensors the mode must never update.
std::uint64_t frozen_hash(const LodaModel& model);

}  // namespace loda
