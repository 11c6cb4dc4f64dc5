#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "loda/tensor.hpp"

namespace loda {

struct VitConfig {
    std::int64_t image_size = 64;
    std::int64_t patch_size = 16;
    std::int64_t embed_dim = 64;
    std::int64_t num_layers = 4;
    std::int64_t num_heads = 4;
    std::int64_t mlp_ratio = 4;

    std::int64_t patch_grid() const { return image_size / patch_size; }
    std::int64_t token_count() const { return 1 + patch_grid() * patch_grid(); }
    void validate() const;
};

struct CnnConfig {
    std::vector<std::int64_t> stage_channels = {16, 32, 64, 128};
    std::vector<std::int64_t> stage_strides = {4, 2, 2, 2};
    std::vector<std::int64_t> kernel_sizes = {3, 3, 3, 3};

    std::int64_t total_stride() const;
    void validate() const;
};

/// Named tensor set. std::map keeps iteration deterministic, which the
/// weight hashing, file format, and optimizer ordering all rely on.
struct ParamStore {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    void set_requires_grad(bool flag);
    std::int64_t parameter_count() const;
};

/// FNV-1a over names and raw data bytes, in key order.
std::uint64_t param_hash(const ParamStore& store);

// Deterministic frozen initializers. Every tensor comes out with
// requires_grad = false; real checkpoints can be swapped in through the
// weight-file loader instead.
ParamStore init_vit_params(const VitConfig& cfg, std::uint64_t seed);
ParamStore init_cnn_params(const CnnConfig& cfg, std::uint64_t seed);

/// (b,3,H,W) image to (b, 1+g^2, d) tokens: patch projection, CLS prepended,
/// learned position embeddings added.
Tensor patch_embed(const Tensor& image, const VitConfig& cfg, const ParamStore& params);

/// Pre-norm encoder layer: LN -> MHSA -> residual, LN -> MLP -> residual.
Tensor vit_encoder_layer(const Tensor& tokens, int layer, const VitConfig& cfg,
                         const ParamStore& params);

Tensor vit_final_norm(const Tensor& tokens, const ParamStore& params);

/// Plain ViT pass. When `trace` is given it receives the token matrix after
/// every encoder layer.
Tensor vit_forward(const Tensor& image, const VitConfig& cfg, const ParamStore& params,
                   std::vector<Tensor>* trace = nullptr);

/// Four post-activation stage maps, each stage halving the previous one.
std::vector<Tensor> cnn_forward(const Tensor& image, const CnnConfig& cfg,
                                const ParamStore& params);

// Multi-head scaled-dot-product attention over pre-projected q and kv token
// matrices; shared by the encoder layer and the injector. When
// `attention_out` is given it receives the post-softmax weights
// (b, heads, q_len, kv_len).
Tensor multi_head_attention(const Tensor& q_tokens, const Tensor& kv_tokens,
                            const ParamStore& params, const std::string& prefix,
                            std::int64_t num_heads, Tensor* attention_out = nullptr);

}  // namespace loda
