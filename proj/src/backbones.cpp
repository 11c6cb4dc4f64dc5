#include "loda/backbones.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace loda {

namespace {

constexpr double kLayerNormEps = 1e-6;

void init_affine(ParamStore& store, const std::string& prefix, std::int64_t in, std::int64_t out,
                 Rng& rng) {
    // Glorot scale; the frozen backbone stands in for a pretrained network, so
    // its random features must mix signal at full strength
    const double std = std::sqrt(2.0 / static_cast<double>(in + out));
    store.tensors[prefix + ".weight"] = Tensor::normal({in, out}, 0.0, std, rng);
    store.tensors[prefix + ".bias"] = Tensor::zeros({out});
}

void init_layernorm(ParamStore& store, const std::string& prefix, std::int64_t dim) {
    store.tensors[prefix + ".gamma"] = Tensor::ones({dim});
    store.tensors[prefix + ".beta"] = Tensor::zeros({dim});
}

}  // namespace

void VitConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || embed_dim < 1 || num_layers < 1 || num_heads < 1 ||
        mlp_ratio < 1) {
        throw ConfigError("vit config: all extents must be positive");
    }
    if (image_size % patch_size != 0) {
        std::ostringstream os;
        os << "vit config: image_size " << image_size << " not divisible by patch_size "
           << patch_size;
        throw ConfigError(os.str());
    }
    if (embed_dim % num_heads != 0) {
        std::ostringstream os;
        os << "vit config: embed_dim " << embed_dim << " not divisible by num_heads " << num_heads;
        throw ConfigError(os.str());
    }
}

std::int64_t CnnConfig::total_stride() const {
    std::int64_t s = 1;
    for (auto v : stage_strides) {
        s *= v;
    }
    return s;
}

void CnnConfig::validate() const {
    if (stage_channels.size() != 4 || stage_strides.size() != 4 || kernel_sizes.size() != 4) {
        throw ConfigError("cnn config: exactly 4 stages required");
    }
    for (std::size_t j = 0; j < 4; ++j) {
        if (stage_channels[j] < 1 || stage_strides[j] < 1 || kernel_sizes[j] < 1 ||
            kernel_sizes[j] % 2 == 0) {
            throw ConfigError("cnn config: channels/strides positive, kernels odd");
        }
    }
    // stages after the first must halve the map (the stride-halving schedule)
    for (std::size_t j = 1; j < 4; ++j) {
        if (stage_strides[j] != 2) {
            throw ConfigError("cnn config: stages 2..4 must have stride 2");
        }
    }
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw ContractError("param store: no tensor named '" + name + "'");
    }
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw ContractError("param store: no tensor named '" + name + "'");
    }
    return it->second;
}

void ParamStore::set_requires_grad(bool flag) {
    for (auto& [name, t] : tensors) {
        t.set_requires_grad(flag);
    }
}

std::int64_t ParamStore::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors) {
        n += t.numel();
    }
    return n;
}

std::uint64_t param_hash(const ParamStore& store) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : store.tensors) {
        mix(reinterpret_cast<const unsigned char*>(name.data()), name.size());
        mix(reinterpret_cast<const unsigned char*>(t.values().data()),
            t.values().size() * sizeof(double));
    }
    return h;
}

ParamStore init_vit_params(const VitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, 0x517));
    ParamStore store;
    const std::int64_t d = cfg.embed_dim;
    const std::int64_t patch_in = 3 * cfg.patch_size * cfg.patch_size;
    store.tensors["patch_embed.weight"] =
        Tensor::normal({d, 3, cfg.patch_size, cfg.patch_size}, 0.0,
                       std::sqrt(2.0 / static_cast<double>(patch_in + d)), rng);
    store.tensors["patch_embed.bias"] = Tensor::zeros({d});
    store.tensors["cls_token"] = Tensor::normal({1, 1, d}, 0.0, 0.02, rng);
    store.tensors["pos_embed"] = Tensor::normal({1, cfg.token_count(), d}, 0.0, 0.02, rng);
    for (std::int64_t layer = 0; layer < cfg.num_layers; ++layer) {
        const std::string p = "layer" + std::to_string(layer);
        init_layernorm(store, p + ".ln1", d);
        init_affine(store, p + ".attn.q", d, d, rng);
        init_affine(store, p + ".attn.k", d, d, rng);
        init_affine(store, p + ".attn.v", d, d, rng);
        init_affine(store, p + ".attn.out", d, d, rng);
        init_layernorm(store, p + ".ln2", d);
        init_affine(store, p + ".mlp.fc1", d, d * cfg.mlp_ratio, rng);
        init_affine(store, p + ".mlp.fc2", d * cfg.mlp_ratio, d, rng);
    }
    init_layernorm(store, "final_ln", d);
    store.set_requires_grad(false);
    return store;
}

ParamStore init_cnn_params(const CnnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, 0xC44));
    ParamStore store;
    std::int64_t in = 3;
    for (std::size_t j = 0; j < 4; ++j) {
        const std::int64_t out = cfg.stage_channels[j];
        const std::int64_t k = cfg.kernel_sizes[j];
        const double he_std = std::sqrt(2.0 / static_cast<double>(in * k * k));
        const std::string p = "stage" + std::to_string(j);
        store.tensors[p + ".conv.weight"] = Tensor::normal({out, in, k, k}, 0.0, he_std, rng);
        store.tensors[p + ".conv.bias"] = Tensor::zeros({out});
        in = out;
    }
    store.set_requires_grad(false);
    return store;
}

Tensor patch_embed(const Tensor& image, const VitConfig& cfg, const ParamStore& params) {
    cfg.validate();
    const auto& s = image.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size) {
        std::ostringstream os;
        os << "patch_embed: expected (b,3," << cfg.image_size << "," << cfg.image_size
           << "), got " << shape_str(s);
        throw ShapeError(os.str());
    }
    const std::int64_t b = s[0];
    const std::int64_t d = cfg.embed_dim;
    const std::int64_t g = cfg.patch_grid();

    Tensor proj = conv2d(image, params.at("patch_embed.weight"), params.at("patch_embed.bias"),
                         cfg.patch_size, 0);                       // (b,d,g,g)
    Tensor tokens = transpose(reshape(proj, {b, d, g * g}), {0, 2, 1});  // (b,g^2,d)
    Tensor cls = add(Tensor::zeros({b, 1, d}), params.at("cls_token"));  // broadcast over batch
    Tensor all = concat({cls, tokens}, 1);
    return add(all, params.at("pos_embed"));
}

Tensor multi_head_attention(const Tensor& q_tokens, const Tensor& kv_tokens,
                            const ParamStore& params, const std::string& prefix,
                            std::int64_t num_heads, Tensor* attention_out) {
    const std::int64_t b = q_tokens.extent(0);
    const std::int64_t lq = q_tokens.extent(1);
    const std::int64_t lkv = kv_tokens.extent(1);
    const std::int64_t d = q_tokens.extent(2);
    if (d % num_heads != 0) {
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(num_heads) + " heads");
    }
    const std::int64_t dh = d / num_heads;

    auto heads = [&](const Tensor& t, std::int64_t len) {
        return transpose(reshape(t, {b, len, num_heads, dh}), {0, 2, 1, 3});  // (b,h,len,dh)
    };
    Tensor q = heads(affine(q_tokens, params.at(prefix + ".q.weight"), params.at(prefix + ".q.bias")), lq);
    Tensor k = heads(affine(kv_tokens, params.at(prefix + ".k.weight"), params.at(prefix + ".k.bias")), lkv);
    Tensor v = heads(affine(kv_tokens, params.at(prefix + ".v.weight"), params.at(prefix + ".v.bias")), lkv);

    Tensor scores = scalar_mul(matmul(q, transpose(k, {0, 1, 3, 2})),
                               1.0 / std::sqrt(static_cast<double>(dh)));   // (b,h,lq,lkv)
    Tensor weights = softmax(scores, -1);
    if (attention_out) {
        *attention_out = weights;
    }
    Tensor ctx = matmul(weights, v);                                        // (b,h,lq,dh)
    Tensor merged = reshape(transpose(ctx, {0, 2, 1, 3}), {b, lq, d});
    return affine(merged, params.at(prefix + ".out.weight"), params.at(prefix + ".out.bias"));
}

Tensor vit_encoder_layer(const Tensor& tokens, int layer, const VitConfig& cfg,
                         const ParamStore& params) {
    const std::string p = "layer" + std::to_string(layer);
    Tensor normed = layernorm(tokens, params.at(p + ".ln1.gamma"), params.at(p + ".ln1.beta"),
                              kLayerNormEps);
    Tensor attended = multi_head_attention(normed, normed, params, p + ".attn", cfg.num_heads);
    Tensor x = add(tokens, attended);

    Tensor normed2 = layernorm(x, params.at(p + ".ln2.gamma"), params.at(p + ".ln2.beta"),
                               kLayerNormEps);
    Tensor hidden = gelu(affine(normed2, params.at(p + ".mlp.fc1.weight"),
                                params.at(p + ".mlp.fc1.bias")));
    Tensor mlp_out = affine(hidden, params.at(p + ".mlp.fc2.weight"), params.at(p + ".mlp.fc2.bias"));
    return add(x, mlp_out);
}

Tensor vit_final_norm(const Tensor& tokens, const ParamStore& params) {
    return layernorm(tokens, params.at("final_ln.gamma"), params.at("final_ln.beta"),
                     kLayerNormEps);
}

Tensor vit_forward(const Tensor& image, const VitConfig& cfg, const ParamStore& params,
                   std::vector<Tensor>* trace) {
    Tensor tokens = patch_embed(image, cfg, params);
    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        tokens = vit_encoder_layer(tokens, layer, cfg, params);
        if (trace) {
            trace->push_back(tokens);
        }
    }
    return vit_final_norm(tokens, params);
}

std::vector<Tensor> cnn_forward(const Tensor& image, const CnnConfig& cfg,
                                const ParamStore& params) {
    cfg.validate();
    const auto& s = image.shape();
    if (s.size() != 4 || s[1] != 3) {
        throw ShapeError("cnn_forward: expected (b,3,h,w), got " + shape_str(s));
    }
    const std::int64_t stride_total = cfg.total_stride();
    if (s[2] % stride_total != 0 || s[3] % stride_total != 0) {
        std::ostringstream os;
        os << "cnn_forward: input " << shape_str(s) << " not divisible by total stride "
           << stride_total;
        throw ConfigError(os.str());
    }
    std::vector<Tensor> maps;
    Tensor x = image;
    for (std::size_t j = 0; j < 4; ++j) {
        const std::string p = "stage" + std::to_string(j);
        x = conv2d(x, params.at(p + ".conv.weight"), params.at(p + ".conv.bias"),
                   cfg.stage_strides[j], cfg.kernel_sizes[j] / 2);
        x = relu(x);
        maps.push_back(x);
    }
    return maps;
}

}  // namespace loda
