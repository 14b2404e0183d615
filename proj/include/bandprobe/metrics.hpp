#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bandprobe/dataio.hpp"
#include "bandprobe/mask.hpp"
#include "bandprobe/unet.hpp"

namespace bandprobe {

// Pixel confusion counts; water (1) is the positive class.
struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t tn = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;

    std::int64_t total() const { return tp + tn + fp + fn; }
};

ConfusionCounts confusion(const Mask& pred, const Mask& truth);

// The five confusion-matrix metrics. `degenerate` marks any value produced
// by a zero-denominator convention (defined as 0).
struct MetricValues {
    double accuracy = 0;
    double balanced_accuracy = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    bool degenerate = false;
};

MetricValues compute_metrics(const ConfusionCounts& c);

struct PerImageMetrics {
    std::string id;
    MetricValues values;
};

// Per-image values plus their unweighted means.
struct MetricReport {
    std::vector<PerImageMetrics> per_image;
    MetricValues aggregate;
};

MetricReport evaluate_set(UNet<float>& model, const std::vector<RasterSample>& test_set);

MetricReport aggregate_metrics(std::vector<PerImageMetrics> per_image);

std::string metrics_to_json(const MetricReport& report);
std::string metrics_to_csv(const MetricReport& report);

// Mean per-image plain accuracy; the quantity permutation importance tracks.
double mean_accuracy(UNet<float>& model, const std::vector<RasterSample>& samples);

}  // namespace bandprobe
