#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bandprobe/bands.hpp"
#include "bandprobe/dataio.hpp"
#include "bandprobe/unet.hpp"

namespace bandprobe {

// Whether a band group shares one spatial rearrangement or each member band
// draws its own. Independent also destroys inter-band correlation and is the
// default.
enum class ShuffleMode { independent, joint };

// Which per-image metric the drop is measured on. Plain accuracy is the
// headline score; the rest exist for analysis.
enum class ImportanceMetric { accuracy, balanced_accuracy, precision, recall, f1 };

std::string_view importance_metric_name(ImportanceMetric metric);
ImportanceMetric importance_metric_from_name(std::string_view name);

// Returns a copy of the sample with each member band's pixels rearranged by a
// seeded uniform permutation of spatial positions. Non-member bands and the
// mask are bitwise untouched.
RasterSample permute_bands(const RasterSample& sample, const BandSet& bands, std::uint64_t seed,
                           ShuffleMode mode = ShuffleMode::independent);

struct ImportanceScore {
    BandSet band_set;
    double baseline_accuracy = 0;
    std::vector<double> repeat_accuracies;
    double mean_permuted_accuracy = 0;
    double drop_pp = 0;  // (baseline - mean over repeats) * 100
};

struct ImportanceReport {
    double baseline_accuracy = 0;
    int repeats = 0;
    ImportanceMetric metric = ImportanceMetric::accuracy;
    std::vector<ImportanceScore> entries;
};

// The four-step procedure: permute the member bands in every test image,
// predict, average accuracy, compare with the unpermuted baseline; repeated
// `repeats` times with fresh permutations and averaged.
ImportanceScore importance(UNet<float>& model, const std::vector<RasterSample>& test_set,
                           const BandSet& bands, int repeats = 5, std::uint64_t seed = 0,
                           ShuffleMode mode = ShuffleMode::independent,
                           ImportanceMetric metric = ImportanceMetric::accuracy);

// Scores several band sets against one shared baseline; output order matches
// input order.
ImportanceReport importance_sweep(UNet<float>& model, const std::vector<RasterSample>& test_set,
                                  const std::vector<BandSet>& band_sets, int repeats = 5,
                                  std::uint64_t seed = 0,
                                  ShuffleMode mode = ShuffleMode::independent,
                                  ImportanceMetric metric = ImportanceMetric::accuracy);

std::string importance_to_json(const ImportanceReport& report);
std::string importance_to_csv(const ImportanceReport& report);
ImportanceReport importance_report_from_json(const std::string& json_text);

}  // namespace bandprobe
