#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bandprobe/bands.hpp"
#include "bandprobe/mask.hpp"
#include "bandprobe/tensor.hpp"

namespace bandprobe {

// One observation: 12 raw-reflectance bands plus the binary land/water mask.
struct RasterSample {
    std::string id;
    Tensor<float> bands;             // [12,H,W], unscaled reflectance
    Mask mask;                       // H x W, {0,1}
    std::vector<BandId> band_order;  // channel index -> band, all 12 exactly once

    int height() const { return bands.dim(1); }
    int width() const { return bands.dim(2); }

    // Channel index of a band under this sample's ordering.
    int channel_of(BandId id) const;

    void validate(const char* who) const;
};

// --- .bpr container ----------------------------------------------------------
// magic "BPR1", band count (u16), H, W (u32), band-name table, mask bytes,
// band planes as little-endian float32, band-major.

void write_sample(const RasterSample& sample, const std::string& path);
RasterSample read_sample(const std::string& path);

// --- manifest ------------------------------------------------------------------

enum class Split { train, val, test };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct ManifestEntry {
    std::string id;
    std::string path;  // resolved to an absolute-ish path on load
    Split split;
};

struct Manifest {
    std::vector<ManifestEntry> entries;     // exclusions already removed
    std::vector<std::string> exclusions;    // ids requested for exclusion
    int matched_exclusions = 0;

    std::vector<ManifestEntry> split(Split s) const;
};

// Reads a manifest JSON ({"samples": [...], "exclusions": [...]}) and applies
// exclusions; `exclusion_file` adds one id per line. Unknown exclusion ids
// warn on stderr, everything else malformed throws.
Manifest load_manifest(const std::string& path, const std::string& exclusion_file = "");

// Writes entries with the paths exactly as given (synth emits relative ones).
void write_manifest(const Manifest& manifest, const std::string& path);

std::vector<RasterSample> load_split(const Manifest& manifest, Split split);

// --- synthetic oracle dataset ------------------------------------------------------

// One band carries a smooth field whose threshold defines the mask; the other
// eleven are noise with no relationship to the mask.
struct SynthSpec {
    int num_samples = 16;
    int height = 64;
    int width = 64;
    BandId generative_band = BandId::NIR;
    float threshold = 5000.0f;   // raw reflectance units, inside [0, 10000]
    float noise_scale = 0.02f;   // gaussian sigma on the generative field, fraction of range
    std::uint64_t seed = 0;
    std::string id_prefix = "synth";

    void validate() const;
};

std::vector<RasterSample> generate_synthetic(const SynthSpec& spec);

}  // namespace bandprobe
