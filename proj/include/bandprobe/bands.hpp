#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace bandprobe {

// The 12 Sentinel-2 bands in channel order.
enum class BandId : int {
    CoastalAerosol = 0,
    Blue,
    Green,
    Red,
    RE1,
    RE2,
    RE3,
    RE4,
    NIR,
    WaterVapour,
    SWIR1,
    SWIR2,
};

inline constexpr int kNumBands = 12;

std::string_view band_name(BandId id);

// Throws std::invalid_argument listing the valid names.
BandId band_from_name(std::string_view name);

// Labelled nonempty set of bands to permute together.
struct BandSet {
    std::string label;
    std::vector<BandId> members;  // unique, ascending channel order
};

BandSet single_band_set(BandId id);
BandSet band_set_from_names(std::string label, const std::vector<std::string>& names);

// Water-index constituents plus the VisibleLight and NotImportant groupings.
const std::vector<BandSet>& builtin_band_groups();

// One set per band, channel order.
std::vector<BandSet> default_single_band_sweep();

// The seven built-in groups.
std::vector<BandSet> default_group_sweep();

// Every band at once.
BandSet all_bands_set();

}  // namespace bandprobe
