#include "bandprobe/dataio.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bandprobe/rng.hpp"

namespace fs = std::filesystem;

namespace bandprobe {

// --- RasterSample -----------------------------------------------------------

int RasterSample::channel_of(BandId id) const {
    for (size_t i = 0; i < band_order.size(); ++i) {
        if (band_order[i] == id) return static_cast<int>(i);
    }
    throw std::invalid_argument("sample '" + this->id + "' has no channel for band " +
                                std::string(band_name(id)));
}

void RasterSample::validate(const char* who) const {
    if (!bands.valid() || bands.rank() != 3 || bands.dim(0) != kNumBands) {
        throw std::invalid_argument(std::string(who) + ": sample '" + id + "' must hold [" +
                                    std::to_string(kNumBands) + ",H,W] bands");
    }
    if (mask.height != bands.dim(1) || mask.width != bands.dim(2)) {
        throw std::invalid_argument(std::string(who) + ": sample '" + id +
                                    "' mask shape does not match band planes");
    }
    mask.validate_binary(who);
    if (band_order.size() != kNumBands) {
        throw std::invalid_argument(std::string(who) + ": sample '" + id + "' band_order has " +
                                    std::to_string(band_order.size()) + " entries, expected 12");
    }
    std::set<BandId> seen(band_order.begin(), band_order.end());
    if (seen.size() != kNumBands) {
        throw std::invalid_argument(std::string(who) + ": sample '" + id +
                                    "' band_order must list all 12 canonical bands exactly once");
    }
}

// --- .bpr reader/writer --------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'B', 'P', 'R', '1'};

struct ByteReader {
    std::vector<char> buf;
    size_t pos = 0;
    std::string path;

    void need(size_t n, const std::string& what) {
        if (pos + n > buf.size()) {
            throw std::runtime_error("read_sample: " + path + ": truncated at offset " +
                                     std::to_string(pos) + " while reading " + what);
        }
    }

    std::uint8_t u8(const std::string& what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[pos++]);
    }

    std::uint16_t u16(const std::string& what) {
        need(2, what);
        std::uint16_t v;
        std::memcpy(&v, buf.data() + pos, 2);
        pos += 2;
        return v;
    }

    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
};

}  // namespace

void write_sample(const RasterSample& sample, const std::string& path) {
    sample.validate("write_sample");
    std::vector<char> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);

    const std::uint16_t band_count = kNumBands;
    const std::uint32_t h = static_cast<std::uint32_t>(sample.height());
    const std::uint32_t w = static_cast<std::uint32_t>(sample.width());
    buf.insert(buf.end(), reinterpret_cast<const char*>(&band_count),
               reinterpret_cast<const char*>(&band_count) + 2);
    buf.insert(buf.end(), reinterpret_cast<const char*>(&h), reinterpret_cast<const char*>(&h) + 4);
    buf.insert(buf.end(), reinterpret_cast<const char*>(&w), reinterpret_cast<const char*>(&w) + 4);

    for (BandId id : sample.band_order) {
        const std::string_view name = band_name(id);
        buf.push_back(static_cast<char>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
    }

    buf.insert(buf.end(), sample.mask.values.begin(), sample.mask.values.end());

    const char* planes = reinterpret_cast<const char*>(sample.bands.data().data());
    buf.insert(buf.end(), planes,
               planes + static_cast<size_t>(sample.bands.numel()) * sizeof(float));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_sample: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write_sample: write to " + path + " failed");
}

RasterSample read_sample(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_sample: cannot open " + path);
    ByteReader r;
    r.buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    r.path = path;

    r.need(4, "magic");
    if (std::memcmp(r.buf.data(), kMagic, 4) != 0) {
        throw std::runtime_error("read_sample: " + path + ": bad magic at offset 0");
    }
    r.pos = 4;

    const std::uint16_t band_count = r.u16("band count");
    if (band_count != kNumBands) {
        throw std::runtime_error("read_sample: " + path + ": band count " +
                                 std::to_string(band_count) + " at offset 4, expected 12");
    }
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20)) {
        throw std::runtime_error("read_sample: " + path + ": implausible raster size " +
                                 std::to_string(h) + "x" + std::to_string(w));
    }

    RasterSample sample;
    sample.band_order.reserve(kNumBands);
    for (int i = 0; i < kNumBands; ++i) {
        const size_t name_off = r.pos;
        const std::uint8_t len = r.u8("band name length");
        r.need(len, "band name");
        std::string name(r.buf.data() + r.pos, len);
        r.pos += len;
        try {
            sample.band_order.push_back(band_from_name(name));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error("read_sample: " + path + ": offset " +
                                     std::to_string(name_off) + ": " + e.what());
        }
    }
    std::set<BandId> seen(sample.band_order.begin(), sample.band_order.end());
    if (seen.size() != kNumBands) {
        throw std::runtime_error("read_sample: " + path +
                                 ": band_order does not cover all 12 canonical bands");
    }

    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    r.need(static_cast<size_t>(pixels), "mask");
    sample.mask.height = static_cast<int>(h);
    sample.mask.width = static_cast<int>(w);
    sample.mask.values.assign(r.buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                              r.buf.begin() + static_cast<std::ptrdiff_t>(r.pos + pixels));
    for (std::uint8_t v : sample.mask.values) {
        if (v > 1) {
            throw std::runtime_error("read_sample: " + path + ": non-binary mask value " +
                                     std::to_string(v));
        }
    }
    r.pos += static_cast<size_t>(pixels);

    const std::int64_t plane_values = static_cast<std::int64_t>(kNumBands) * pixels;
    r.need(static_cast<size_t>(plane_values) * sizeof(float), "band planes");
    std::vector<float> values(static_cast<size_t>(plane_values));
    std::memcpy(values.data(), r.buf.data() + r.pos,
                static_cast<size_t>(plane_values) * sizeof(float));
    r.pos += static_cast<size_t>(plane_values) * sizeof(float);
    if (r.pos != r.buf.size()) {
        throw std::runtime_error("read_sample: " + path + ": " +
                                 std::to_string(r.buf.size() - r.pos) +
                                 " trailing bytes at offset " + std::to_string(r.pos));
    }

    sample.bands = Tensor<float>::from_vector({kNumBands, static_cast<int>(h), static_cast<int>(w)},
                                              std::move(values));
    sample.id = fs::path(path).stem().string();
    sample.validate("read_sample");
    return sample;
}

// --- manifest -----------------------------------------------------------------

std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw std::invalid_argument("unknown split tag '" + std::string(name) +
                                "'; valid tags: train, val, test");
}

std::vector<ManifestEntry> Manifest::split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == s) out.push_back(e);
    }
    return out;
}

Manifest load_manifest(const std::string& path, const std::string& exclusion_file) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_manifest: " + path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("samples") || !doc["samples"].is_array()) {
        throw std::runtime_error("load_manifest: " + path + ": expected a 'samples' array");
    }

    Manifest m;
    if (doc.contains("exclusions")) {
        for (const auto& ex : doc["exclusions"]) m.exclusions.push_back(ex.get<std::string>());
    }
    if (!exclusion_file.empty()) {
        std::ifstream exf(exclusion_file);
        if (!exf) throw std::runtime_error("load_manifest: cannot open exclusion file " +
                                           exclusion_file);
        std::string line;
        while (std::getline(exf, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (!line.empty()) m.exclusions.push_back(line);
        }
    }
    const std::set<std::string> excluded(m.exclusions.begin(), m.exclusions.end());

    const fs::path base = fs::path(path).parent_path();
    std::set<std::string> ids;
    std::set<std::string> matched;
    for (const auto& s : doc["samples"]) {
        if (!s.contains("id") || !s.contains("path") || !s.contains("split")) {
            throw std::runtime_error("load_manifest: " + path +
                                     ": sample entries need id, path and split");
        }
        ManifestEntry e;
        e.id = s["id"].get<std::string>();
        if (!ids.insert(e.id).second) {
            throw std::runtime_error("load_manifest: " + path + ": duplicate id '" + e.id + "'");
        }
        try {
            e.split = split_from_name(s["split"].get<std::string>());
        } catch (const std::invalid_argument& err) {
            throw std::runtime_error("load_manifest: " + path + ": id '" + e.id + "': " +
                                     err.what());
        }
        fs::path p(s["path"].get<std::string>());
        if (p.is_relative()) p = base / p;
        e.path = p.string();
        if (excluded.count(e.id)) {
            matched.insert(e.id);
            continue;
        }
        if (!fs::exists(p)) {
            throw std::runtime_error("load_manifest: " + path + ": id '" + e.id +
                                     "' points to missing file " + e.path);
        }
        m.entries.push_back(std::move(e));
    }
    m.matched_exclusions = static_cast<int>(matched.size());
    for (const auto& ex : excluded) {
        if (!matched.count(ex)) {
            std::cerr << "load_manifest: warning: exclusion '" << ex
                      << "' matches no manifest entry\n";
        }
    }
    return m;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
    nlohmann::ordered_json doc;
    doc["samples"] = nlohmann::ordered_json::array();
    for (const auto& e : manifest.entries) {
        doc["samples"].push_back({{"id", e.id},
                                  {"path", e.path},
                                  {"split", std::string(split_name(e.split))}});
    }
    doc["exclusions"] = manifest.exclusions;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path + " for writing");
    out << doc.dump(2) << "\n";
}

std::vector<RasterSample> load_split(const Manifest& manifest, Split split) {
    std::vector<RasterSample> samples;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        RasterSample s = read_sample(e.path);
        s.id = e.id;
        samples.push_back(std::move(s));
    }
    return samples;
}

// --- synthetic oracle dataset ----------------------------------------------------

void SynthSpec::validate() const {
    if (num_samples < 1) throw std::invalid_argument("SynthSpec: num_samples must be >= 1");
    if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
        throw std::invalid_argument("SynthSpec: height and width must be positive multiples of 16");
    }
    if (threshold < 0.0f || threshold > 10000.0f) {
        throw std::invalid_argument("SynthSpec: threshold must lie in the generated range [0,10000]");
    }
    if (noise_scale < 0.0f) throw std::invalid_argument("SynthSpec: noise_scale must be >= 0");
}

namespace {

// Smooth field in [0,1]: bilinear interpolation of a coarse uniform grid,
// min-max normalized so the full range is hit in every sample.
std::vector<float> smooth_field(Rng& rng, int h, int w) {
    constexpr int cell = 8;
    const int gh = h / cell + 1, gw = w / cell + 1;
    std::vector<double> grid(static_cast<size_t>(gh) * gw);
    for (auto& g : grid) g = rng.uniform();

    std::vector<float> field(static_cast<size_t>(h) * w);
    double lo = 1e9, hi = -1e9;
    for (int y = 0; y < h; ++y) {
        const double gy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(gy);
        const double fy = gy - y0;
        for (int x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(gx);
            const double fx = gx - x0;
            const double v00 = grid[static_cast<size_t>(y0) * gw + x0];
            const double v01 = grid[static_cast<size_t>(y0) * gw + std::min(x0 + 1, gw - 1)];
            const double v10 = grid[static_cast<size_t>(std::min(y0 + 1, gh - 1)) * gw + x0];
            const double v11 =
                grid[static_cast<size_t>(std::min(y0 + 1, gh - 1)) * gw + std::min(x0 + 1, gw - 1)];
            const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
            field[static_cast<size_t>(y) * w + x] = static_cast<float>(v);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi - lo < 1e-9) return {};  // flat field, caller regenerates
    const double scale = 1.0 / (hi - lo);
    for (auto& v : field) v = static_cast<float>((v - lo) * scale);
    return field;
}

}  // namespace

std::vector<RasterSample> generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    std::vector<BandId> canonical;
    for (int i = 0; i < kNumBands; ++i) canonical.push_back(static_cast<BandId>(i));
    const int gen_channel = static_cast<int>(spec.generative_band);
    const std::int64_t pixels = static_cast<std::int64_t>(spec.height) * spec.width;

    std::vector<RasterSample> samples;
    samples.reserve(static_cast<size_t>(spec.num_samples));
    for (int i = 0; i < spec.num_samples; ++i) {
        RasterSample s;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "_%04d", i);
        s.id = spec.id_prefix + idbuf;
        s.band_order = canonical;

        for (int attempt = 0;; ++attempt) {
            if (attempt > 100) {
                throw std::runtime_error("generate_synthetic: could not produce a two-class mask "
                                         "for sample " + s.id);
            }
            Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i), attempt));
            std::vector<float> field = smooth_field(rng, spec.height, spec.width);
            if (field.empty()) continue;

            std::vector<float> values(static_cast<size_t>(kNumBands) * pixels);
            s.mask = Mask(spec.height, spec.width);
            for (int c = 0; c < kNumBands; ++c) {
                float* plane = values.data() + static_cast<std::int64_t>(c) * pixels;
                if (c == gen_channel) {
                    for (std::int64_t p = 0; p < pixels; ++p) {
                        double v = field[static_cast<size_t>(p)] +
                                   spec.noise_scale * rng.normal();
                        v = std::clamp(v, 0.0, 1.0);
                        plane[p] = static_cast<float>(v * 10000.0);
                        s.mask.values[static_cast<size_t>(p)] =
                            plane[p] > spec.threshold ? 1 : 0;
                    }
                } else {
                    for (std::int64_t p = 0; p < pixels; ++p) {
                        plane[p] = static_cast<float>(rng.uniform() * 10000.0);
                    }
                }
            }

            std::int64_t water = 0;
            for (std::uint8_t v : s.mask.values) water += v;
            if (water == 0 || water == pixels) continue;  // single class, resample

            s.bands = Tensor<float>::from_vector({kNumBands, spec.height, spec.width},
                                                 std::move(values));
            break;
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace bandprobe
