#include "loda/adaptation.hpp"

#include <cmath>
#include <sstream>

namespace loda {

Mode mode_from_string(const std::string& s) {
    if (s == "loda") {
        return Mode::kLoda;
    }
    if (s == "linear_probe") {
        return Mode::kLinearProbe;
    }
    if (s == "full_finetune") {
        return Mode::kFullFinetune;
    }
    if (s == "extractor_only") {
        return Mode::kExtractorOnly;
    }
    throw ConfigError("unknown mode '" + s +
                      "' (expected loda, linear_probe, full_finetune, extractor_only)");
}

std::string mode_to_string(Mode m) {
    switch (m) {
        case Mode::kLoda:
            return "loda";
        case Mode::kLinearProbe:
            return "linear_probe";
        case Mode::kFullFinetune:
            return "full_finetune";
        case Mode::kExtractorOnly:
            return "extractor_only";
    }
    return "?";
}

void AdaptConfig::validate(const VitConfig& vit) const {
    if (extractor_channels < 1 || pooled_size < 1 || latent_dim < 1 || heads < 1 ||
        interactions < 1) {
        throw ConfigError("adapt config: all extents must be positive");
    }
    if (latent_dim % heads != 0) {
        std::ostringstream os;
        os << "adapt config: latent_dim " << latent_dim << " not divisible by heads " << heads;
        throw ConfigError(os.str());
    }
    if (vit.num_layers % interactions != 0) {
        std::ostringstream os;
        os << "adapt config: interactions " << interactions << " does not divide num_layers "
           << vit.num_layers;
        throw ConfigError(os.str());
    }
}

LodaConfig LodaConfig::desk() {
    return LodaConfig{};
}

LodaConfig LodaConfig::full_scale() {
    LodaConfig cfg;
    cfg.vit = VitConfig{224, 16, 768, 12, 12, 4};
    cfg.cnn = CnnConfig{{256, 512, 1024, 2048}, {4, 2, 2, 2}, {3, 3, 3, 3}};
    cfg.adapt = AdaptConfig{256, 7, 64, 4, 12};
    return cfg;
}

void LodaConfig::validate() const {
    vit.validate();
    cnn.validate();
    adapt.validate(vit);
    // the CNN must leave stage maps at least as large as the pooled target is
    // meaningful; upsampling via adaptive pooling is allowed, so only the
    // image/stride compatibility matters here
    if (vit.image_size % cnn.total_stride() != 0) {
        throw ConfigError("config: vit.image_size not divisible by the cnn stride schedule");
    }
}

LodaModel LodaModel::init(const LodaConfig& cfg, Mode mode, std::uint64_t seed) {
    cfg.validate();
    LodaModel model;
    model.cfg = cfg;
    model.mode = mode;
    model.vit = init_vit_params(cfg.vit, Rng::derive(seed, 1));
    model.cnn = init_cnn_params(cfg.cnn, Rng::derive(seed, 2));
    model.extractor = init_extractor_params(cfg, Rng::derive(seed, 3));
    model.injector = init_injector_params(cfg, Rng::derive(seed, 4));
    model.head = init_head_params(cfg, Rng::derive(seed, 5));

    model.extractor.set_requires_grad(true);
    model.injector.set_requires_grad(true);
    model.head.set_requires_grad(true);
    model.vit.set_requires_grad(mode == Mode::kFullFinetune);
    model.cnn.set_requires_grad(false);
    return model;
}

ParamStore init_extractor_params(const LodaConfig& cfg, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xE87));
    ParamStore store;
    const std::int64_t c = cfg.adapt.extractor_channels;
    for (std::size_t j = 0; j < 4; ++j) {
        const std::int64_t cj = cfg.cnn.stage_channels[j];
        const std::string p = "stage" + std::to_string(j);
        store.tensors[p + ".conv1.weight"] =
            Tensor::normal({c, cj, 1, 1}, 0.0, std::sqrt(2.0 / static_cast<double>(cj)), rng);
        store.tensors[p + ".conv1.bias"] = Tensor::zeros({c});
        store.tensors[p + ".conv3.weight"] =
            Tensor::normal({c, c, 3, 3}, 0.0, std::sqrt(2.0 / static_cast<double>(c * 9)), rng);
        store.tensors[p + ".conv3.bias"] = Tensor::zeros({c});
    }
    return store;
}

ParamStore init_injector_params(const LodaConfig& cfg, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x1E3));
    ParamStore store;
    const std::int64_t d = cfg.vit.embed_dim;
    const std::int64_t c = cfg.adapt.extractor_channels;
    const std::int64_t r = cfg.adapt.latent_dim;

    auto affine_params = [&](const std::string& prefix, std::int64_t in, std::int64_t out) {
        const double std = std::sqrt(2.0 / static_cast<double>(in + out));
        store.tensors[prefix + ".weight"] = Tensor::normal({in, out}, 0.0, std, rng);
        store.tensors[prefix + ".bias"] = Tensor::zeros({out});
    };

    // Eq. 4 projection is shared across interactions (it carries no layer index)
    affine_params("kv_down", c, r);
    for (std::int64_t i = 0; i < cfg.adapt.interactions; ++i) {
        const std::string p = "inter" + std::to_string(i);
        affine_params(p + ".query_down", d, r);
        affine_params(p + ".attn.q", r, r);
        affine_params(p + ".attn.k", r, r);
        affine_params(p + ".attn.v", r, r);
        affine_params(p + ".attn.out", r, r);
        affine_params(p + ".up", r, d);
        // gates start at exactly zero so injection is the identity at init
        store.tensors[p + ".gate"] = Tensor::zeros({d});
    }
    return store;
}

ParamStore init_head_params(const LodaConfig& cfg, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x4EA));
    ParamStore store;
    store.tensors["weight"] = Tensor::normal({cfg.vit.embed_dim, 1}, 0.0, 0.02, rng);
    store.tensors["bias"] = Tensor::zeros({1});
    return store;
}

std::vector<Tensor> extractor_stage_maps(const std::vector<Tensor>& features,
                                         const LodaConfig& cfg, const ParamStore& extractor) {
    if (features.size() != 4) {
        throw ContractError("extractor: expected 4 stage maps, got " +
                            std::to_string(features.size()));
    }
    const std::int64_t m = cfg.adapt.pooled_size;
    std::vector<Tensor> maps;
    for (std::size_t j = 0; j < 4; ++j) {
        const std::string p = "stage" + std::to_string(j);
        Tensor y = conv2d(features[j], extractor.at(p + ".conv1.weight"),
                          extractor.at(p + ".conv1.bias"), 1, 0);
        y = conv2d(y, extractor.at(p + ".conv3.weight"), extractor.at(p + ".conv3.bias"), 1, 1);
        maps.push_back(avgpool2d(y, m, m));
    }
    return maps;
}

Tensor extract_local_distortion(const std::vector<Tensor>& features, const LodaConfig& cfg,
                                const ParamStore& extractor) {
    const auto maps = extractor_stage_maps(features, cfg, extractor);
    const std::int64_t m = cfg.adapt.pooled_size;
    const std::int64_t c = cfg.adapt.extractor_channels;
    std::vector<Tensor> token_blocks;
    for (const auto& map : maps) {
        const std::int64_t b = map.extent(0);
        token_blocks.push_back(transpose(reshape(map, {b, c, m * m}), {0, 2, 1}));  // (b,m·m,c)
    }
    return concat(token_blocks, 1);
}

Tensor msd_down_project(const Tensor& msd_tokens, const ParamStore& injector) {
    return affine(msd_tokens, injector.at("kv_down.weight"), injector.at("kv_down.bias"));
}

Tensor inject_with_kv(const Tensor& vit_tokens, const Tensor& msd_kv, const ParamStore& injector,
                      const AdaptConfig& cfg, int interaction) {
    const std::string p = "inter" + std::to_string(interaction);
    Tensor queries = affine(vit_tokens, injector.at(p + ".query_down.weight"),
                            injector.at(p + ".query_down.bias"));    // (b,l,r)
    Tensor attended = multi_head_attention(queries, msd_kv, injector, p + ".attn", cfg.heads);
    Tensor queried = add(attended, queries);                          // MHCA(q,k,v) + q
    Tensor lifted = affine(queried, injector.at(p + ".up.weight"), injector.at(p + ".up.bias"));
    return add(vit_tokens, mul(injector.at(p + ".gate"), lifted));    // tokens + s ⊙ up(...)
}

Tensor inject(const Tensor& vit_tokens, const Tensor& msd_tokens, const ParamStore& injector,
              const AdaptConfig& cfg, int interaction) {
    return inject_with_kv(vit_tokens, msd_down_project(msd_tokens, injector), injector, cfg,
                          interaction);
}

namespace {

// Distortion tokens aligned to the ViT patch grid for the direct-addition
// ablation: pool every stage map to the patch grid, sum the stages, and tile
// channels up to the embedding width.
Tensor direct_addition_tokens(const std::vector<Tensor>& stage_maps, const LodaConfig& cfg) {
    const std::int64_t g = cfg.vit.patch_grid();
    const std::int64_t c = cfg.adapt.extractor_channels;
    const std::int64_t d = cfg.vit.embed_dim;
    if (d % c != 0) {
        throw ConfigError("extractor_only: embed_dim must be a multiple of extractor_channels");
    }
    Tensor summed;
    for (const auto& map : stage_maps) {
        Tensor pooled = avgpool2d(map, g, g);
        summed = summed.defined() ? add(summed, pooled) : pooled;
    }
    const std::int64_t copies = d / c;
    std::vector<Tensor> tiled(static_cast<std::size_t>(copies), summed);
    Tensor wide = concat(tiled, 1);  // (b,d,g,g)
    const std::int64_t b = wide.extent(0);
    return transpose(reshape(wide, {b, d, g * g}), {0, 2, 1});  // (b,g^2,d)
}

Tensor add_to_patch_tokens(const Tensor& tokens, const Tensor& patch_addend) {
    const std::int64_t l = tokens.extent(1);
    Tensor cls = slice(tokens, 1, 0, 1);
    Tensor patches = add(slice(tokens, 1, 1, l), patch_addend);
    return concat({cls, patches}, 1);
}

}  // namespace

Tensor loda_forward(const LodaModel& model, const Tensor& images, std::vector<Tensor>* trace) {
    const auto& cfg = model.cfg;
    const std::int64_t layers = cfg.vit.num_layers;
    const std::int64_t block = layers / cfg.adapt.interactions;

    const bool uses_cnn = model.mode == Mode::kLoda || model.mode == Mode::kExtractorOnly;
    Tensor msd_kv;
    Tensor addition;
    if (uses_cnn) {
        const auto features = cnn_forward(images, cfg.cnn, model.cnn);
        if (model.mode == Mode::kLoda) {
            Tensor msd = extract_local_distortion(features, cfg, model.extractor);
            msd_kv = msd_down_project(msd, model.injector);  // shared across interactions
        } else {
            addition = direct_addition_tokens(extractor_stage_maps(features, cfg, model.extractor),
                                              cfg);
        }
    }

    Tensor tokens = patch_embed(images, cfg.vit, model.vit);
    for (std::int64_t layer = 0; layer < layers; ++layer) {
        if (uses_cnn && layer % block == 0) {
            const int interaction = static_cast<int>(layer / block);
            tokens = model.mode == Mode::kLoda
                         ? inject_with_kv(tokens, msd_kv, model.injector, cfg.adapt, interaction)
                         : add_to_patch_tokens(tokens, addition);
        }
        tokens = vit_encoder_layer(tokens, static_cast<int>(layer), cfg.vit, model.vit);
        if (trace) {
            trace->push_back(tokens);
        }
    }
    tokens = vit_final_norm(tokens, model.vit);

    Tensor cls = reshape(slice(tokens, 1, 0, 1), {tokens.extent(0), cfg.vit.embed_dim});
    return affine(cls, model.head.at("weight"), model.head.at("bias"));  // (b,1)
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(const LodaModel& model) {
    std::vector<std::pair<std::string, Tensor>> params;
    auto emit = [&params](const ParamStore& store, const std::string& ns) {
        for (const auto& [name, t] : store.tensors) {
            params.emplace_back(ns + "." + name, t);
        }
    };
    switch (model.mode) {
        case Mode::kLoda:
            emit(model.extractor, "extractor");
            emit(model.injector, "injector");
            emit(model.head, "head");
            break;
        case Mode::kLinearProbe:
            emit(model.head, "head");
            break;
        case Mode::kFullFinetune:
            emit(model.vit, "vit");
            emit(model.head, "head");
            break;
        case Mode::kExtractorOnly:
            emit(model.extractor, "extractor");
            emit(model.head, "head");
            break;
    }
    return params;
}

std::int64_t trainable_parameter_count(const LodaModel& model) {
    std::int64_t n = 0;
    for (const auto& [name, t] : trainable_parameters(model)) {
        n += t.numel();
    }
    return n;
}

std::int64_t total_parameter_count(const LodaModel& model) {
    return model.vit.parameter_count() + model.cnn.parameter_count() +
           model.extractor.parameter_count() + model.injector.parameter_count() +
           model.head.parameter_count();
}

std::uint64_t frozen_hash(const LodaModel& model) {
    // everything outside the mode's trainable set
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    };
    mix(param_hash(model.cnn));
    if (model.mode != Mode::kFullFinetune) {
        mix(param_hash(model.vit));
    }
    if (model.mode == Mode::kLinearProbe || model.mode == Mode::kFullFinetune) {
        mix(param_hash(model.extractor));
        mix(param_hash(model.injector));
    }
    if (model.mode == Mode::kExtractorOnly) {
        mix(param_hash(model.injector));
    }
    return h;
}

}  // namespace loda
