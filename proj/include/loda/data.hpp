#pragma once

#include <map>
#include <string>
#include <vector>

#include "loda/adaptation.hpp"
#include "loda/training.hpp"

namespace loda {

// ---------------------------------------------------------------------------
// synthetic distortion dataset
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::vector<std::string> base_families = {"gaussian_field", "checker", "gradient_mix"};
    std::vector<std::string> distortions = {"blur", "additive_noise", "block_average"};
    std::vector<double> severities = {0.0, 0.5, 1.0, 2.0, 4.0};
    std::int64_t images_per_cell = 2;  // per (distortion, severity) pair
    std::int64_t image_size = 64;

    void validate() const;
    std::int64_t image_count() const;
};

/// Label function: strictly decreasing in severity, 100 at severity 0.
double mos_of_severity(double severity);

/// (3,H,W) pristine image in [0,1] for one of the base families.
Tensor make_base_image(const std::string& family, std::int64_t size, Rng& rng);

/// Applies one named distortion at the given severity; severity 0 is identity.
Tensor apply_distortion(const Tensor& image, const std::string& distortion, double severity,
                        Rng& rng);

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

struct ManifestRow {
    std::string path;
    double mos = 0.0;
    std::string split;  // optional tag
};

struct Manifest {
    std::vector<ManifestRow> rows;
    bool has_split = false;

    bool operator==(const Manifest& other) const;
};

/// Writes deterministic image files plus the manifest (manifest.csv) into
/// out_dir. Returns the manifest with paths relative to out_dir.
Manifest generate_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                          const std::string& out_dir);

Manifest read_manifest(const std::string& path);
void write_manifest(const Manifest& manifest, const std::string& path);

/// Loads every manifest row into memory; image paths resolve relative to the
/// manifest's directory.
Dataset load_dataset(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// image raster format: binary PPM (P6), 8-bit RGB, row-major, uncompressed
// ---------------------------------------------------------------------------

void write_ppm(const Tensor& image01, const std::string& path);
Tensor read_ppm(const std::string& path);

// ---------------------------------------------------------------------------
// weight file: magic "LODAW", version u32, tensor directory, f64 payload (LE)
// ---------------------------------------------------------------------------

void save_weights(const std::vector<std::pair<std::string, Tensor>>& named,
                  const std::string& path);
std::vector<std::pair<std::string, Tensor>> load_weights(const std::string& path);

/// Copies every "<prefix><name>" entry of `loaded` into the store; a store
/// tensor without a matching file entry, or a shape mismatch, is an error
/// naming the tensor.
void load_into_store(ParamStore& store,
                     const std::vector<std::pair<std::string, Tensor>>& loaded,
                     const std::string& prefix);

/// Full checkpoint: frozen backbones under "frozen.", adaptation under "train.".
void save_model(const LodaModel& model, const std::string& path);
void load_model(LodaModel& model, const std::string& path);

// ---------------------------------------------------------------------------
// key = value config file
// ---------------------------------------------------------------------------

struct Config {
    std::map<std::string, std::string> entries;

    static Config from_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
    std::vector<std::int64_t> get_ints(const std::string& key,
                                       std::vector<std::int64_t> fallback) const;
    std::vector<std::string> get_strings(const std::string& key,
                                         std::vector<std::string> fallback) const;
};

LodaConfig model_config_from(const Config& cfg);
TrainConfig train_config_from(const Config& cfg);
SyntheticSpec synthetic_spec_from(const Config& cfg);

}  // namespace loda
