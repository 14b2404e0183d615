#include "bandprobe/bands.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

namespace bandprobe {

namespace {

constexpr std::array<std::string_view, kNumBands> kBandNames = {
    "CoastalAerosol", "Blue", "Green", "Red",         "RE1",   "RE2",
    "RE3",            "RE4",  "NIR",   "WaterVapour", "SWIR1", "SWIR2",
};

BandSet make_set(std::string label, std::initializer_list<BandId> ids) {
    BandSet s{std::move(label), std::vector<BandId>(ids)};
    std::sort(s.members.begin(), s.members.end());
    return s;
}

}  // namespace

std::string_view band_name(BandId id) { return kBandNames[static_cast<size_t>(id)]; }

BandId band_from_name(std::string_view name) {
    for (int i = 0; i < kNumBands; ++i) {
        if (kBandNames[static_cast<size_t>(i)] == name) return static_cast<BandId>(i);
    }
    std::string valid;
    for (auto n : kBandNames) {
        if (!valid.empty()) valid += ", ";
        valid += n;
    }
    throw std::invalid_argument("unknown band name '" + std::string(name) + "'; valid names: " +
                                valid);
}

BandSet single_band_set(BandId id) { return {std::string(band_name(id)), {id}}; }

BandSet band_set_from_names(std::string label, const std::vector<std::string>& names) {
    if (names.empty()) throw std::invalid_argument("band set '" + label + "' has no members");
    BandSet s{std::move(label), {}};
    for (const auto& n : names) s.members.push_back(band_from_name(n));
    std::sort(s.members.begin(), s.members.end());
    s.members.erase(std::unique(s.members.begin(), s.members.end()), s.members.end());
    return s;
}

const std::vector<BandSet>& builtin_band_groups() {
    using enum BandId;
    static const std::vector<BandSet> groups = {
        make_set("NDWI", {NIR, Green}),
        make_set("AWEIsh", {Blue, Green, NIR, SWIR1, SWIR2}),
        make_set("WI2015", {Green, Red, NIR, SWIR1, SWIR2}),
        make_set("WI2", {Blue, SWIR2}),
        make_set("SWI", {RE1, SWIR2}),
        make_set("VisibleLight", {Blue, Green, Red}),
        make_set("NotImportant", {CoastalAerosol, Green, Red, RE1, RE2, RE3, RE4, SWIR2}),
    };
    return groups;
}

std::vector<BandSet> default_single_band_sweep() {
    std::vector<BandSet> sets;
    sets.reserve(kNumBands);
    for (int i = 0; i < kNumBands; ++i) sets.push_back(single_band_set(static_cast<BandId>(i)));
    return sets;
}

std::vector<BandSet> default_group_sweep() { return builtin_band_groups(); }

BandSet all_bands_set() {
    BandSet s{"AllBands", {}};
    for (int i = 0; i < kNumBands; ++i) s.members.push_back(static_cast<BandId>(i));
    return s;
}

}  // namespace bandprobe
