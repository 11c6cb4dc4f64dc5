#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "loda/data.hpp"
#include "loda/metrics.hpp"

using namespace loda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("loda_test_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& rel = "") const { return (path / rel).string(); }
};

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

double high_band_mean(const SpectrumProfile& p) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t k = p.frequency.size() / 2; k < p.frequency.size(); ++k) {
        acc += p.delta_log_amplitude[k];
        ++n;
    }
    return acc / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("mos label function") {
    CHECK(mos_of_severity(0.0) == 100.0);
    CHECK(mos_of_severity(1.0) == 50.0);
    // strictly decreasing
    double prev = mos_of_severity(0.0);
    for (double s : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
        CHECK(mos_of_severity(s) < prev);
        prev = mos_of_severity(s);
    }
}

TEST_CASE("ppm round trip is exact on quantized values") {
    TempDir dir("ppm");
    Rng rng(1);
    Tensor raw = Tensor::uniform({3, 16, 16}, 0.0, 1.0, rng);
    // snap to the 8-bit grid so the round trip is lossless
    for (auto& v : raw.values()) {
        v = std::round(v * 255.0) / 255.0;
    }
    write_ppm(raw, dir.str("a.ppm"));
    Tensor back = read_ppm(dir.str("a.ppm"));
    CHECK(back.shape() == raw.shape());
    CHECK(back.values() == raw.values());
}

TEST_CASE("dataset generation is byte-deterministic") {
    TempDir da("gen_a");
    TempDir db("gen_b");
    SyntheticSpec spec;
    spec.distortions = {"blur", "additive_noise"};
    spec.severities = {0.0, 1.0};
    spec.images_per_cell = 2;
    Manifest ma = generate_dataset(spec, 77, da.str());
    Manifest mb = generate_dataset(spec, 77, db.str());
    CHECK(ma == mb);
    CHECK(ma.rows.size() == static_cast<std::size_t>(spec.image_count()));
    for (const auto& row : ma.rows) {
        CHECK(slurp(da.str(row.path)) == slurp(db.str(row.path)));
    }
    CHECK(slurp(da.str("manifest.csv")) == slurp(db.str("manifest.csv")));

    Manifest mc = generate_dataset(spec, 78, da.str());
    CHECK(ma.rows.size() == mc.rows.size());
}

TEST_CASE("severity zero rows carry the maximal score") {
    TempDir dir("gen_s0");
    SyntheticSpec spec;
    spec.distortions = {"blur"};
    spec.severities = {0.0, 2.0};
    spec.images_per_cell = 1;
    Manifest m = generate_dataset(spec, 5, dir.str());
    CHECK(m.rows[0].mos == 100.0);
    CHECK(m.rows[1].mos < 100.0);
}

TEST_CASE("stronger blur drains the high-frequency band") {
    Rng rng(9);
    Tensor base = make_base_image("gaussian_field", 64, rng);
    double prev = 1e9;
    for (double severity : {0.0, 1.0, 2.0, 4.0}) {
        Rng drng(10);
        Tensor distorted = apply_distortion(base, "blur", severity, drng);
        const double band = high_band_mean(fourier_profile(distorted));
        CHECK(band < prev);
        prev = band;
    }
}

TEST_CASE("manifest round trip") {
    TempDir dir("manifest");
    Manifest m;
    m.rows = {{"a.ppm", 91.25, ""}, {"b.ppm", 12.5, ""}};
    write_manifest(m, dir.str("m.csv"));
    Manifest back = read_manifest(dir.str("m.csv"));
    CHECK(back == m);
}

TEST_CASE("manifest parse errors name the line") {
    TempDir dir("manifest_err");
    {
        std::ofstream out(dir.str("dup.csv"));
        out << "path,mos\na.ppm,1\na.ppm,2\n";
    }
    try {
        read_manifest(dir.str("dup.csv"));
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 3") != std::string::npos);
        CHECK(msg.find("a.ppm") != std::string::npos);
    }
    {
        std::ofstream out(dir.str("nohdr.csv"));
        out << "path\na.ppm\n";
    }
    CHECK_THROWS_AS(read_manifest(dir.str("nohdr.csv")), ParseError);
    {
        std::ofstream out(dir.str("badmos.csv"));
        out << "path,mos\na.ppm,abc\n";
    }
    try {
        read_manifest(dir.str("badmos.csv"));
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("weight file round trips bit for bit") {
    TempDir dir("weights");
    Rng rng(3);
    std::vector<std::pair<std::string, Tensor>> named = {
        {"alpha", Tensor::normal({3, 4}, 0.0, 1.0, rng)},
        {"beta", Tensor::uniform({7}, -2.0, 2.0, rng)},
        {"gamma", Tensor::scalar(0.125)},
    };
    save_weights(named, dir.str("w.bin"));
    auto back = load_weights(dir.str("w.bin"));
    REQUIRE(back.size() == named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        CHECK(back[i].first == named[i].first);
        CHECK(back[i].second.shape() == named[i].second.shape());
        CHECK(back[i].second.values() == named[i].second.values());
    }
}

TEST_CASE("truncated payload is an integrity error") {
    TempDir dir("weights_trunc");
    Rng rng(4);
    save_weights({{"w", Tensor::normal({8, 8}, 0.0, 1.0, rng)}}, dir.str("w.bin"));
    auto bytes = slurp(dir.str("w.bin"));
    bytes.resize(bytes.size() - 8);
    {
        std::ofstream out(dir.str("cut.bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_weights(dir.str("cut.bin")), FileError);
}

TEST_CASE("version mismatch is a versioned load error") {
    TempDir dir("weights_ver");
    save_weights({{"w", Tensor::ones({2})}}, dir.str("w.bin"));
    auto bytes = slurp(dir.str("w.bin"));
    bytes[5] = 9;  // version u32 sits right after the 5-byte magic
    {
        std::ofstream out(dir.str("v9.bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
        load_weights(dir.str("v9.bin"));
        FAIL("expected FileError");
    } catch (const FileError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
}

TEST_CASE("bad magic is rejected") {
    TempDir dir("weights_magic");
    {
        std::ofstream out(dir.str("junk.bin"), std::ios::binary);
        out << "NOTAWEIGHTFILE";
    }
    CHECK_THROWS_AS(load_weights(dir.str("junk.bin")), FileError);
}

TEST_CASE("loading into a store reports missing and mismatched tensors by name") {
    TempDir dir("weights_store");
    ParamStore store;
    Rng rng(5);
    store.tensors["a"] = Tensor::normal({2, 2}, 0.0, 1.0, rng);
    store.tensors["b"] = Tensor::normal({3}, 0.0, 1.0, rng);

    save_weights({{"ns.a", store.at("a")}}, dir.str("partial.bin"));
    auto partial = load_weights(dir.str("partial.bin"));
    try {
        load_into_store(store, partial, "ns.");
        FAIL("expected FileError");
    } catch (const FileError& e) {
        CHECK(std::string(e.what()).find("ns.b") != std::string::npos);
    }

    save_weights({{"ns.a", Tensor::zeros({2, 3})}, {"ns.b", Tensor::zeros({3})}},
                 dir.str("badshape.bin"));
    auto badshape = load_weights(dir.str("badshape.bin"));
    try {
        load_into_store(store, badshape, "ns.");
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("ns.a") != std::string::npos);
        CHECK(msg.find("(2,3)") != std::string::npos);
    }
}

TEST_CASE("model checkpoint round trips and keeps namespaces distinct") {
    TempDir dir("model_ckpt");
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 50);
    const auto vit_hash = param_hash(model.vit);
    const auto extractor_hash = param_hash(model.extractor);
    save_model(model, dir.str("ckpt.bin"));

    LodaModel other = LodaModel::init(cfg, Mode::kLoda, 51);
    CHECK(param_hash(other.vit) != vit_hash);
    load_model(other, dir.str("ckpt.bin"));
    CHECK(param_hash(other.vit) == vit_hash);
    CHECK(param_hash(other.extractor) == extractor_hash);
    // freeze flags survive the load
    CHECK_FALSE(other.vit.tensors.begin()->second.requires_grad());
    CHECK(other.extractor.tensors.begin()->second.requires_grad());
}

TEST_CASE("loading a checkpoint into a mismatched config names the tensor") {
    TempDir dir("model_mismatch");
    LodaConfig cfg = LodaConfig::desk();
    LodaModel model = LodaModel::init(cfg, Mode::kLoda, 52);
    save_model(model, dir.str("ckpt.bin"));

    LodaConfig wide = LodaConfig::desk();
    wide.adapt.latent_dim = 64;
    LodaModel other = LodaModel::init(wide, Mode::kLoda, 52);
    CHECK_THROWS_AS(load_model(other, dir.str("ckpt.bin")), ShapeError);
}

TEST_CASE("dataset loads through the manifest") {
    TempDir dir("load_ds");
    SyntheticSpec spec;
    spec.distortions = {"additive_noise"};
    spec.severities = {0.0, 3.0};
    spec.images_per_cell = 1;
    generate_dataset(spec, 11, dir.str());
    Dataset data = load_dataset(dir.str("manifest.csv"));
    REQUIRE(data.size() == 2);
    CHECK(data.images[0].shape() == Shape{3, 64, 64});
    CHECK(data.mos[0] == 100.0);
    CHECK(data.mos[1] == 25.0);
}

TEST_CASE("config file parsing with overrides") {
    TempDir dir("config");
    {
        std::ofstream out(dir.str("run.cfg"));
        out << "# desk run\n"
            << "train.epochs = 3\n"
            << "train.mode = extractor_only\n"
            << "adapt.latent_dim = 16\n"
            << "data.severities = 0, 1, 2\n";
    }
    Config cfg = Config::from_file(dir.str("run.cfg"));
    CHECK(cfg.get_int("train.epochs", 0) == 3);
    cfg.set("train.epochs", "5");  // flag override wins
    TrainConfig train = train_config_from(cfg);
    CHECK(train.epochs == 5);
    CHECK(train.mode == Mode::kExtractorOnly);
    LodaConfig model = model_config_from(cfg);
    CHECK(model.adapt.latent_dim == 16);
    SyntheticSpec spec = synthetic_spec_from(cfg);
    CHECK(spec.severities == std::vector<double>{0.0, 1.0, 2.0});
}

TEST_CASE("unknown config keys are rejected") {
    TempDir dir("config_bad");
    {
        std::ofstream out(dir.str("bad.cfg"));
        out << "train.epoch = 3\n";  // typo
    }
    CHECK_THROWS_AS(Config::from_file(dir.str("bad.cfg")), ConfigError);
    {
        std::ofstream out(dir.str("noeq.cfg"));
        out << "train.epochs 3\n";
    }
    CHECK_THROWS_AS(Config::from_file(dir.str("noeq.cfg")), ParseError);
}

}  // TEST_SUITE
