#include "loda/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace loda {

namespace {

namespace fs = std::filesystem;

constexpr double kPi = 3.14159265358979323846;
constexpr char kWeightMagic[5] = {'L', 'O', 'D', 'A', 'W'};
constexpr std::uint32_t kWeightVersion = 1;

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) {
        return "";
    }
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

// separable gaussian blur, clamp-to-edge
std::vector<double> gaussian_blur_plane(const std::vector<double>& src, std::int64_t h,
                                        std::int64_t w, double sigma) {
    if (sigma <= 0.0) {
        return src;
    }
    const auto radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        norm += v;
    }
    for (auto& v : kernel) {
        v /= norm;
    }
    std::vector<double> tmp(src.size());
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::int64_t i = -radius; i <= radius; ++i) {
                const std::int64_t xi = std::clamp<std::int64_t>(x + i, 0, w - 1);
                acc += src[static_cast<std::size_t>(y * w + xi)] *
                       kernel[static_cast<std::size_t>(i + radius)];
            }
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    }
    std::vector<double> out(src.size());
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::int64_t i = -radius; i <= radius; ++i) {
                const std::int64_t yi = std::clamp<std::int64_t>(y + i, 0, h - 1);
                acc += tmp[static_cast<std::size_t>(yi * w + x)] *
                       kernel[static_cast<std::size_t>(i + radius)];
            }
            out[static_cast<std::size_t>(y * w + x)] = acc;
        }
    }
    return out;
}

void normalize01(std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double span = *hi - *lo;
    if (span <= 0.0) {
        std::fill(v.begin(), v.end(), 0.5);
        return;
    }
    for (auto& x : v) {
        x = (x - *lo) / span;
    }
}

Tensor triplicate(std::vector<double> plane, std::int64_t size) {
    std::vector<double> d;
    d.reserve(plane.size() * 3);
    for (int c = 0; c < 3; ++c) {
        d.insert(d.end(), plane.begin(), plane.end());
    }
    return Tensor::from_values({3, size, size}, std::move(d));
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_i64(std::ofstream& out, std::int64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) {
        throw FileError("weight file: truncated while reading " + what);
    }
    return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
    if (base_families.empty() || distortions.empty() || severities.empty()) {
        throw ConfigError("synthetic spec: families, distortions, severities must be non-empty");
    }
    if (images_per_cell < 1 || image_size < 8) {
        throw ConfigError("synthetic spec: images_per_cell >= 1 and image_size >= 8 required");
    }
    for (double s : severities) {
        if (s < 0.0 || !std::isfinite(s)) {
            throw ConfigError("synthetic spec: severities must be finite and >= 0");
        }
    }
}

std::int64_t SyntheticSpec::image_count() const {
    return static_cast<std::int64_t>(distortions.size() * severities.size()) * images_per_cell;
}

double mos_of_severity(double severity) {
    return 100.0 / (1.0 + severity);
}

Tensor make_base_image(const std::string& family, std::int64_t size, Rng& rng) {
    const auto n = static_cast<std::size_t>(size * size);
    if (family == "gaussian_field") {
        std::vector<double> plane(n);
        for (auto& v : plane) {
            v = rng.uniform01();
        }
        plane = gaussian_blur_plane(plane, size, size, 3.0);
        normalize01(plane);
        return triplicate(std::move(plane), size);
    }
    if (family == "checker") {
        const auto cell = static_cast<std::int64_t>(4 + rng.next_u64() % 13);  // 4..16
        const auto phase_y = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(cell));
        const auto phase_x = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(cell));
        const double lo = rng.uniform(0.0, 0.35);
        const double hi = rng.uniform(0.65, 1.0);
        std::vector<double> plane(n);
        for (std::int64_t y = 0; y < size; ++y) {
            for (std::int64_t x = 0; x < size; ++x) {
                const bool on = (((y + phase_y) / cell) + ((x + phase_x) / cell)) % 2 == 0;
                plane[static_cast<std::size_t>(y * size + x)] = on ? hi : lo;
            }
        }
        return triplicate(std::move(plane), size);
    }
    if (family == "gradient_mix") {
        const double ax = rng.uniform(-1.0, 1.0);
        const double ay = rng.uniform(-1.0, 1.0);
        const double freq = rng.uniform(1.0, 5.0);
        const double theta = rng.uniform(0.0, 2.0 * kPi);
        const double phase = rng.uniform(0.0, 2.0 * kPi);
        std::vector<double> plane(n);
        for (std::int64_t y = 0; y < size; ++y) {
            for (std::int64_t x = 0; x < size; ++x) {
                const double u = static_cast<double>(x) / static_cast<double>(size);
                const double v = static_cast<double>(y) / static_cast<double>(size);
                const double wave =
                    std::sin(2.0 * kPi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
                plane[static_cast<std::size_t>(y * size + x)] = ax * u + ay * v + 0.5 * wave;
            }
        }
        normalize01(plane);
        return triplicate(std::move(plane), size);
    }
    throw ConfigError("unknown base image family '" + family + "'");
}

Tensor apply_distortion(const Tensor& image, const std::string& distortion, double severity,
                        Rng& rng) {
    const std::int64_t h = image.extent(1);
    const std::int64_t w = image.extent(2);
    const auto plane_size = static_cast<std::size_t>(h * w);
    std::vector<double> out = image.values();

    if (severity == 0.0) {
        return Tensor::from_values(image.shape(), std::move(out));
    }
    if (distortion == "blur") {
        for (int c = 0; c < 3; ++c) {
            std::vector<double> plane(out.begin() + c * plane_size,
                                      out.begin() + (c + 1) * plane_size);
            plane = gaussian_blur_plane(plane, h, w, severity);
            std::copy(plane.begin(), plane.end(), out.begin() + c * plane_size);
        }
        return Tensor::from_values(image.shape(), std::move(out));
    }
    if (distortion == "additive_noise") {
        const double stddev = 0.06 * severity;
        // identical noise per channel keeps the image grayscale-consistent
        std::vector<double> noise(plane_size);
        for (auto& v : noise) {
            v = rng.normal(0.0, stddev);
        }
        for (int c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane_size; ++i) {
                out[c * plane_size + i] =
                    std::clamp(out[c * plane_size + i] + noise[i], 0.0, 1.0);
            }
        }
        return Tensor::from_values(image.shape(), std::move(out));
    }
    if (distortion == "block_average") {
        const auto block = 1 + 2 * static_cast<std::int64_t>(std::llround(severity));
        for (int c = 0; c < 3; ++c) {
            double* plane = out.data() + c * plane_size;
            for (std::int64_t y0 = 0; y0 < h; y0 += block) {
                for (std::int64_t x0 = 0; x0 < w; x0 += block) {
                    const std::int64_t y1 = std::min(h, y0 + block);
                    const std::int64_t x1 = std::min(w, x0 + block);
                    double acc = 0.0;
                    for (std::int64_t y = y0; y < y1; ++y) {
                        for (std::int64_t x = x0; x < x1; ++x) {
                            acc += plane[y * w + x];
                        }
                    }
                    acc /= static_cast<double>((y1 - y0) * (x1 - x0));
                    for (std::int64_t y = y0; y < y1; ++y) {
                        for (std::int64_t x = x0; x < x1; ++x) {
                            plane[y * w + x] = acc;
                        }
                    }
                }
            }
        }
        return Tensor::from_values(image.shape(), std::move(out));
    }
    throw ConfigError("unknown distortion '" + distortion + "'");
}

Manifest generate_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                          const std::string& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw FileError("generate_dataset: cannot create directory " + out_dir);
    }

    Manifest manifest;
    std::int64_t index = 0;
    for (const auto& distortion : spec.distortions) {
        for (double severity : spec.severities) {
            for (std::int64_t rep = 0; rep < spec.images_per_cell; ++rep) {
                // per-image derived seed so generation order never matters
                Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(index)));
                const auto& family =
                    spec.base_families[static_cast<std::size_t>(index) % spec.base_families.size()];
                Tensor base = make_base_image(family, spec.image_size, rng);
                Tensor distorted = apply_distortion(base, distortion, severity, rng);

                std::ostringstream name;
                name << "img_";
                name.width(4);
                name.fill('0');
                name << index << "_" << distortion << ".ppm";
                const std::string rel = name.str();
                write_ppm(distorted, (fs::path(out_dir) / rel).string());
                manifest.rows.push_back({rel, mos_of_severity(severity), ""});
                ++index;
            }
        }
    }
    write_manifest(manifest, (fs::path(out_dir) / "manifest.csv").string());
    return manifest;
}

// ---------------------------------------------------------------------------
// manifest io
// ---------------------------------------------------------------------------

bool Manifest::operator==(const Manifest& other) const {
    if (rows.size() != other.rows.size() || has_split != other.has_split) {
        return false;
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].path != other.rows[i].path || rows[i].mos != other.rows[i].mos ||
            rows[i].split != other.rows[i].split) {
            return false;
        }
    }
    return true;
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FileError("read_manifest: cannot open " + path);
    }
    Manifest manifest;
    std::string line;
    std::int64_t line_no = 0;
    std::set<std::string> seen;
    bool header_done = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        auto fields = split_csv(t);
        for (auto& f : fields) {
            f = trim(f);
        }
        if (!header_done) {
            if (fields.size() == 2 && fields[0] == "path" && fields[1] == "mos") {
                manifest.has_split = false;
            } else if (fields.size() == 3 && fields[0] == "path" && fields[1] == "mos" &&
                       fields[2] == "split") {
                manifest.has_split = true;
            } else {
                throw ParseError("manifest line 1: expected header 'path,mos[,split]'");
            }
            header_done = true;
            continue;
        }
        const std::size_t expected = manifest.has_split ? 3 : 2;
        if (fields.size() != expected) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": expected " +
                             std::to_string(expected) + " fields, got " +
                             std::to_string(fields.size()));
        }
        if (fields[0].empty()) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": empty path");
        }
        if (!seen.insert(fields[0]).second) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": duplicate path '" +
                             fields[0] + "'");
        }
        double mos = 0.0;
        try {
            std::size_t used = 0;
            mos = std::stod(fields[1], &used);
            if (used != fields[1].size()) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": bad mos value '" +
                             fields[1] + "'");
        }
        if (!std::isfinite(mos)) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": non-finite mos");
        }
        manifest.rows.push_back({fields[0], mos, manifest.has_split ? fields[2] : ""});
    }
    if (!header_done) {
        throw ParseError("manifest: missing header row");
    }
    return manifest;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("write_manifest: cannot open " + path);
    }
    out << (manifest.has_split ? "path,mos,split\n" : "path,mos\n");
    out.precision(17);
    for (const auto& row : manifest.rows) {
        out << row.path << ',' << row.mos;
        if (manifest.has_split) {
            out << ',' << row.split;
        }
        out << '\n';
    }
}

Dataset load_dataset(const std::string& manifest_path) {
    const Manifest manifest = read_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    Dataset data;
    for (const auto& row : manifest.rows) {
        const fs::path p = fs::path(row.path).is_absolute() ? fs::path(row.path) : base / row.path;
        data.images.push_back(read_ppm(p.string()));
        data.mos.push_back(row.mos);
        data.paths.push_back(p.string());
    }
    return data;
}

// ---------------------------------------------------------------------------
// ppm io
// ---------------------------------------------------------------------------

void write_ppm(const Tensor& image01, const std::string& path) {
    if (image01.ndim() != 3 || image01.extent(0) != 3) {
        throw ShapeError("write_ppm: expected (3,H,W), got " + shape_str(image01.shape()));
    }
    const std::int64_t h = image01.extent(1);
    const std::int64_t w = image01.extent(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("write_ppm: cannot open " + path);
    }
    out << "P6\n" << w << " " << h << "\n255\n";
    const double* src = image01.values().data();
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = src[(c * h + y) * w + x];
                const double q = std::clamp(std::round(v * 255.0), 0.0, 255.0);
                row[static_cast<std::size_t>(x * 3 + c)] = static_cast<unsigned char>(q);
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) {
        throw FileError("write_ppm: write failed for " + path);
    }
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("read_ppm: cannot open " + path);
    }
    std::string magic;
    in >> magic;
    if (magic != "P6") {
        throw ParseError("read_ppm: " + path + " is not a binary PPM");
    }
    std::int64_t w = 0;
    std::int64_t h = 0;
    std::int64_t maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w < 1 || h < 1 || maxval != 255) {
        throw ParseError("read_ppm: bad header in " + path);
    }
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * 3));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) {
        throw FileError("read_ppm: truncated pixel data in " + path);
    }
    std::vector<double> d(raw.size());
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                d[static_cast<std::size_t>((c * h + y) * w + x)] =
                    static_cast<double>(raw[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0;
            }
        }
    }
    return Tensor::from_values({3, h, w}, std::move(d));
}

// ---------------------------------------------------------------------------
// weight file io
// ---------------------------------------------------------------------------

void save_weights(const std::vector<std::pair<std::string, Tensor>>& named,
                  const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("save_weights: cannot open " + path);
    }
    out.write(kWeightMagic, sizeof(kWeightMagic));
    write_u32(out, kWeightVersion);
    write_u64(out, static_cast<std::uint64_t>(named.size()));
    std::uint64_t offset = 0;  // element offset into the f64 payload
    for (const auto& [name, t] : named) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(t.ndim()));
        for (auto e : t.shape()) {
            write_i64(out, e);
        }
        write_u64(out, offset);
        offset += static_cast<std::uint64_t>(t.numel());
    }
    write_u64(out, offset);  // payload element count
    for (const auto& [name, t] : named) {
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!out) {
        throw FileError("save_weights: write failed for " + path);
    }
}

std::vector<std::pair<std::string, Tensor>> load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("load_weights: cannot open " + path);
    }
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kWeightMagic, sizeof(magic)) != 0) {
        throw FileError("load_weights: " + path + " is not a weight file (bad magic)");
    }
    const auto version = read_pod<std::uint32_t>(in, "version");
    if (version != kWeightVersion) {
        throw FileError("load_weights: unsupported weight file version " +
                        std::to_string(version) + " (expected " + std::to_string(kWeightVersion) +
                        ")");
    }
    const auto count = read_pod<std::uint64_t>(in, "tensor count");
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    std::uint64_t expected_offset = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) {
            throw FileError("weight file: truncated while reading tensor name");
        }
        const auto ndim = read_pod<std::uint32_t>(in, "rank");
        Shape shape(ndim);
        for (auto& e : shape) {
            e = read_pod<std::int64_t>(in, "extent");
            if (e < 1) {
                throw FileError("weight file: non-positive extent in tensor '" + name + "'");
            }
        }
        const auto offset = read_pod<std::uint64_t>(in, "offset");
        if (offset != expected_offset) {
            throw FileError("weight file: overlapping or gapped payload at tensor '" + name + "'");
        }
        expected_offset += static_cast<std::uint64_t>(shape_numel(shape));
        entries.push_back({std::move(name), std::move(shape), offset});
    }
    const auto payload_count = read_pod<std::uint64_t>(in, "payload count");
    if (payload_count != expected_offset) {
        throw FileError("weight file: directory does not match payload size");
    }
    std::vector<std::pair<std::string, Tensor>> named;
    for (auto& entry : entries) {
        const auto n = static_cast<std::size_t>(shape_numel(entry.shape));
        std::vector<double> data(n);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) {
            throw FileError("weight file: truncated payload at tensor '" + entry.name + "'");
        }
        named.emplace_back(entry.name, Tensor::from_values(entry.shape, std::move(data)));
    }
    return named;
}

void load_into_store(ParamStore& store,
                     const std::vector<std::pair<std::string, Tensor>>& loaded,
                     const std::string& prefix) {
    std::map<std::string, const Tensor*> index;
    for (const auto& [name, t] : loaded) {
        index[name] = &t;
    }
    for (auto& [name, t] : store.tensors) {
        const std::string full = prefix + name;
        auto it = index.find(full);
        if (it == index.end()) {
            throw FileError("load: file is missing tensor '" + full + "'");
        }
        if (it->second->shape() != t.shape()) {
            throw ShapeError("load: tensor '" + full + "' has shape " +
                             shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
        }
        t.impl->data = it->second->values();
    }
}

void save_model(const LodaModel& model, const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> named;
    auto emit = [&named](const ParamStore& store, const std::string& ns) {
        for (const auto& [name, t] : store.tensors) {
            named.emplace_back(ns + name, t);
        }
    };
    emit(model.vit, "frozen.vit.");
    emit(model.cnn, "frozen.cnn.");
    emit(model.extractor, "train.extractor.");
    emit(model.injector, "train.injector.");
    emit(model.head, "train.head.");
    save_weights(named, path);
}

void load_model(LodaModel& model, const std::string& path) {
    const auto named = load_weights(path);
    load_into_store(model.vit, named, "frozen.vit.");
    load_into_store(model.cnn, named, "frozen.cnn.");
    load_into_store(model.extractor, named, "train.extractor.");
    load_into_store(model.injector, named, "train.injector.");
    load_into_store(model.head, named, "train.head.");
}

// ---------------------------------------------------------------------------
// config file
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "vit.image_size", "vit.patch_size", "vit.embed_dim", "vit.num_layers", "vit.num_heads",
        "vit.mlp_ratio", "cnn.channels", "cnn.strides", "cnn.kernels", "adapt.channels",
        "adapt.pooled", "adapt.latent_dim", "adapt.heads", "adapt.interactions", "train.lr0",
        "train.lr_min", "train.weight_decay", "train.batch_size", "train.epochs",
        "train.patches_train", "train.patches_test", "train.crop_size", "train.mode",
        "train.seed", "train.eval_every", "data.bases", "data.distortions", "data.severities",
        "data.images_per_cell", "data.image_size"};
    return keys;
}

}  // namespace

Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FileError("config: cannot open " + path);
    }
    Config cfg;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ParseError("config line " + std::to_string(line_no) + ": empty key");
        }
        if (known_config_keys().count(key) == 0) {
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key +
                              "'");
        }
        cfg.entries[key] = value;
    }
    return cfg;
}

void Config::set(const std::string& key, const std::string& value) { entries[key] = value; }

bool Config::has(const std::string& key) const { return entries.count(key) > 0; }

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    auto it = entries.find(key);
    return it == entries.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) {
        return fallback;
    }
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value for '" + key + "': " + it->second);
    }
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) {
        return fallback;
    }
    try {
        return std::stoll(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer value for '" + key + "': " + it->second);
    }
}

std::vector<double> Config::get_doubles(const std::string& key,
                                        std::vector<double> fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) {
        return fallback;
    }
    std::vector<double> out;
    for (const auto& f : split_csv(it->second)) {
        try {
            out.push_back(std::stod(trim(f)));
        } catch (const std::exception&) {
            throw ConfigError("config: bad list value for '" + key + "': " + it->second);
        }
    }
    return out;
}

std::vector<std::int64_t> Config::get_ints(const std::string& key,
                                           std::vector<std::int64_t> fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) {
        return fallback;
    }
    std::vector<std::int64_t> out;
    for (const auto& f : split_csv(it->second)) {
        try {
            out.push_back(std::stoll(trim(f)));
        } catch (const std::exception&) {
            throw ConfigError("config: bad list value for '" + key + "': " + it->second);
        }
    }
    return out;
}

std::vector<std::string> Config::get_strings(const std::string& key,
                                             std::vector<std::string> fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) {
        return fallback;
    }
    std::vector<std::string> out;
    for (const auto& f : split_csv(it->second)) {
        out.push_back(trim(f));
    }
    return out;
}

LodaConfig model_config_from(const Config& cfg) {
    LodaConfig model = LodaConfig::desk();
    model.vit.image_size = cfg.get_int("vit.image_size", model.vit.image_size);
    model.vit.patch_size = cfg.get_int("vit.patch_size", model.vit.patch_size);
    model.vit.embed_dim = cfg.get_int("vit.embed_dim", model.vit.embed_dim);
    model.vit.num_layers = cfg.get_int("vit.num_layers", model.vit.num_layers);
    model.vit.num_heads = cfg.get_int("vit.num_heads", model.vit.num_heads);
    model.vit.mlp_ratio = cfg.get_int("vit.mlp_ratio", model.vit.mlp_ratio);
    model.cnn.stage_channels = cfg.get_ints("cnn.channels", model.cnn.stage_channels);
    model.cnn.stage_strides = cfg.get_ints("cnn.strides", model.cnn.stage_strides);
    model.cnn.kernel_sizes = cfg.get_ints("cnn.kernels", model.cnn.kernel_sizes);
    model.adapt.extractor_channels = cfg.get_int("adapt.channels", model.adapt.extractor_channels);
    model.adapt.pooled_size = cfg.get_int("adapt.pooled", model.adapt.pooled_size);
    model.adapt.latent_dim = cfg.get_int("adapt.latent_dim", model.adapt.latent_dim);
    model.adapt.heads = cfg.get_int("adapt.heads", model.adapt.heads);
    model.adapt.interactions = cfg.get_int("adapt.interactions", model.adapt.interactions);
    model.validate();
    return model;
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig train;
    train.lr0 = cfg.get_double("train.lr0", train.lr0);
    train.lr_min = cfg.get_double("train.lr_min", train.lr_min);
    train.weight_decay = cfg.get_double("train.weight_decay", train.weight_decay);
    train.batch_size = cfg.get_int("train.batch_size", train.batch_size);
    train.epochs = cfg.get_int("train.epochs", train.epochs);
    train.patches_per_train_image = cfg.get_int("train.patches_train", train.patches_per_train_image);
    train.patches_per_test_image = cfg.get_int("train.patches_test", train.patches_per_test_image);
    train.crop_size = cfg.get_int("train.crop_size", train.crop_size);
    train.mode = mode_from_string(cfg.get_string("train.mode", mode_to_string(train.mode)));
    train.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 1));
    train.eval_every = cfg.get_int("train.eval_every", train.eval_every);
    train.validate();
    return train;
}

SyntheticSpec synthetic_spec_from(const Config& cfg) {
    SyntheticSpec spec;
    spec.base_families = cfg.get_strings("data.bases", spec.base_families);
    spec.distortions = cfg.get_strings("data.distortions", spec.distortions);
    spec.severities = cfg.get_doubles("data.severities", spec.severities);
    spec.images_per_cell = cfg.get_int("data.images_per_cell", spec.images_per_cell);
    spec.image_size = cfg.get_int("data.image_size", spec.image_size);
    spec.validate();
    return spec;
}

}  // namespace loda
