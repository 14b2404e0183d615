#include "bandprobe/permutation.hpp"

#include <exception>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "bandprobe/metrics.hpp"
#include "bandprobe/parallel.hpp"
#include "bandprobe/rng.hpp"
#include "bandprobe/trainer.hpp"

namespace bandprobe {

std::string_view importance_metric_name(ImportanceMetric metric) {
    switch (metric) {
        case ImportanceMetric::accuracy: return "accuracy";
        case ImportanceMetric::balanced_accuracy: return "balanced_accuracy";
        case ImportanceMetric::precision: return "precision";
        case ImportanceMetric::recall: return "recall";
        case ImportanceMetric::f1: return "f1";
    }
    return "?";
}

ImportanceMetric importance_metric_from_name(std::string_view name) {
    for (ImportanceMetric m : {ImportanceMetric::accuracy, ImportanceMetric::balanced_accuracy,
                               ImportanceMetric::precision, ImportanceMetric::recall,
                               ImportanceMetric::f1}) {
        if (importance_metric_name(m) == name) return m;
    }
    throw std::invalid_argument("unknown importance metric '" + std::string(name) +
                                "'; valid: accuracy, balanced_accuracy, precision, recall, f1");
}

namespace {

double metric_of(const MetricValues& v, ImportanceMetric m) {
    switch (m) {
        case ImportanceMetric::accuracy: return v.accuracy;
        case ImportanceMetric::balanced_accuracy: return v.balanced_accuracy;
        case ImportanceMetric::precision: return v.precision;
        case ImportanceMetric::recall: return v.recall;
        case ImportanceMetric::f1: return v.f1;
    }
    return 0;
}

// Seed stream tag for the shared rearrangement in joint mode; outside the
// valid band index range so it cannot collide with a per-band stream.
constexpr std::uint64_t kJointStream = kNumBands;

void shuffle_plane(float* plane, std::int64_t pixels, std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(std::span<float>(plane, static_cast<size_t>(pixels)));
}

// Applies the same position rearrangement to several planes at once.
void shuffle_planes_jointly(std::vector<float*>& planes, std::int64_t pixels, std::uint64_t seed) {
    std::vector<std::int64_t> positions(static_cast<size_t>(pixels));
    std::iota(positions.begin(), positions.end(), std::int64_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::int64_t>(positions));
    std::vector<float> scratch(static_cast<size_t>(pixels));
    for (float* plane : planes) {
        for (std::int64_t i = 0; i < pixels; ++i)
            scratch[static_cast<size_t>(i)] = plane[positions[static_cast<size_t>(i)]];
        std::copy(scratch.begin(), scratch.end(), plane);
    }
}

}  // namespace

RasterSample permute_bands(const RasterSample& sample, const BandSet& bands, std::uint64_t seed,
                           ShuffleMode mode) {
    if (bands.members.empty()) {
        throw std::invalid_argument("permute_bands: band set '" + bands.label + "' is empty");
    }
    sample.validate("permute_bands");

    RasterSample out;
    out.id = sample.id;
    out.mask = sample.mask;
    out.band_order = sample.band_order;
    out.bands = sample.bands.clone();

    const std::int64_t pixels = static_cast<std::int64_t>(sample.height()) * sample.width();
    float* base = out.bands.data().data();

    if (mode == ShuffleMode::joint) {
        std::vector<float*> planes;
        for (BandId id : bands.members)
            planes.push_back(base + static_cast<std::int64_t>(out.channel_of(id)) * pixels);
        shuffle_planes_jointly(planes, pixels, derive_seed(seed, kJointStream));
    } else {
        // One fresh permutation per member band.
        for (BandId id : bands.members) {
            float* plane = base + static_cast<std::int64_t>(out.channel_of(id)) * pixels;
            shuffle_plane(plane, pixels, derive_seed(seed, static_cast<std::uint64_t>(id)));
        }
    }
    return out;
}

namespace {

// Mean of the chosen per-image metric over the set, optionally permuting the
// given bands first; permutation seeds are derived per (run seed, repeat,
// image id), bands split further inside permute_bands. Images run in
// parallel, the reduction order is fixed.
double mean_metric_over_set(UNet<float>& model, const std::vector<RasterSample>& test_set,
                            ImportanceMetric metric, const BandSet* bands,
                            std::uint64_t run_seed, int repeat, ShuffleMode mode) {
    std::vector<double> values(test_set.size());
    std::vector<std::exception_ptr> errors(test_set.size());
    parallel_for(static_cast<std::int64_t>(test_set.size()), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            try {
                const RasterSample& s = test_set[static_cast<size_t>(i)];
                Mask pred;
                if (bands) {
                    const std::uint64_t seed = derive_seed(
                        run_seed, static_cast<std::uint64_t>(repeat), hash_string(s.id));
                    RasterSample permuted = permute_bands(s, *bands, seed, mode);
                    pred = model.predict_mask(scale_input(permuted.bands));
                } else {
                    pred = model.predict_mask(scale_input(s.bands));
                }
                values[static_cast<size_t>(i)] =
                    metric_of(compute_metrics(confusion(pred, s.mask)), metric);
            } catch (...) {
                errors[static_cast<size_t>(i)] = std::current_exception();
            }
        }
    });
    for (auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }
    double total = 0;
    for (double v : values) total += v;
    return total / static_cast<double>(test_set.size());
}

ImportanceScore score_with_baseline(UNet<float>& model, const std::vector<RasterSample>& test_set,
                                    const BandSet& bands, int repeats, std::uint64_t seed,
                                    ShuffleMode mode, ImportanceMetric metric, double baseline) {
    ImportanceScore score;
    score.band_set = bands;
    score.baseline_accuracy = baseline;
    score.repeat_accuracies.reserve(static_cast<size_t>(repeats));
    for (int r = 0; r < repeats; ++r) {
        score.repeat_accuracies.push_back(
            mean_metric_over_set(model, test_set, metric, &bands, seed, r, mode));
    }
    double mean = 0;
    for (double a : score.repeat_accuracies) mean += a;
    mean /= static_cast<double>(repeats);
    score.mean_permuted_accuracy = mean;
    score.drop_pp = (baseline - mean) * 100.0;
    return score;
}

void check_importance_args(UNet<float>& model, const std::vector<RasterSample>& test_set,
                           int repeats) {
    if (model.mode() != Mode::eval) {
        throw std::invalid_argument("importance: model must be in eval mode");
    }
    if (test_set.empty()) throw std::invalid_argument("importance: empty test set");
    if (repeats < 1) throw std::invalid_argument("importance: repeats must be >= 1");
}

}  // namespace

ImportanceScore importance(UNet<float>& model, const std::vector<RasterSample>& test_set,
                           const BandSet& bands, int repeats, std::uint64_t seed,
                           ShuffleMode mode, ImportanceMetric metric) {
    check_importance_args(model, test_set, repeats);
    const double baseline = mean_metric_over_set(model, test_set, metric, nullptr, 0, 0, mode);
    return score_with_baseline(model, test_set, bands, repeats, seed, mode, metric, baseline);
}

ImportanceReport importance_sweep(UNet<float>& model, const std::vector<RasterSample>& test_set,
                                  const std::vector<BandSet>& band_sets, int repeats,
                                  std::uint64_t seed, ShuffleMode mode, ImportanceMetric metric) {
    check_importance_args(model, test_set, repeats);
    ImportanceReport report;
    report.repeats = repeats;
    report.metric = metric;
    // baseline computed exactly once and shared by every entry
    report.baseline_accuracy = mean_metric_over_set(model, test_set, metric, nullptr, 0, 0, mode);
    for (const auto& bands : band_sets) {
        report.entries.push_back(score_with_baseline(model, test_set, bands, repeats, seed, mode,
                                                     metric, report.baseline_accuracy));
    }
    return report;
}

std::string importance_to_json(const ImportanceReport& report) {
    nlohmann::ordered_json doc;
    doc["baseline_accuracy"] = report.baseline_accuracy;
    doc["repeats"] = report.repeats;
    doc["metric"] = std::string(importance_metric_name(report.metric));
    doc["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : report.entries) {
        nlohmann::ordered_json entry;
        entry["label"] = e.band_set.label;
        entry["members"] = nlohmann::ordered_json::array();
        for (BandId id : e.band_set.members) entry["members"].push_back(std::string(band_name(id)));
        entry["repeat_accuracies"] = e.repeat_accuracies;
        entry["mean_permuted_accuracy"] = e.mean_permuted_accuracy;
        entry["drop_pp"] = e.drop_pp;
        doc["entries"].push_back(entry);
    }
    return doc.dump(2) + "\n";
}

ImportanceReport importance_report_from_json(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("importance_report_from_json: ") + e.what());
    }
    ImportanceReport report;
    report.baseline_accuracy = doc.at("baseline_accuracy").get<double>();
    report.repeats = doc.at("repeats").get<int>();
    if (doc.contains("metric")) {
        report.metric = importance_metric_from_name(doc["metric"].get<std::string>());
    }
    for (const auto& entry : doc.at("entries")) {
        ImportanceScore s;
        s.band_set.label = entry.at("label").get<std::string>();
        for (const auto& m : entry.at("members"))
            s.band_set.members.push_back(band_from_name(m.get<std::string>()));
        s.baseline_accuracy = report.baseline_accuracy;
        s.repeat_accuracies = entry.at("repeat_accuracies").get<std::vector<double>>();
        s.mean_permuted_accuracy = entry.at("mean_permuted_accuracy").get<double>();
        s.drop_pp = entry.at("drop_pp").get<double>();
        report.entries.push_back(std::move(s));
    }
    return report;
}

std::string importance_to_csv(const ImportanceReport& report) {
    std::string out = "label,members,baseline_accuracy,mean_permuted_accuracy,drop_pp,repeat_accuracies\n";
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    for (const auto& e : report.entries) {
        std::string members;
        for (BandId id : e.band_set.members) {
            if (!members.empty()) members += "|";
            members += band_name(id);
        }
        std::string reps;
        for (double a : e.repeat_accuracies) {
            if (!reps.empty()) reps += "|";
            reps += fmt(a);
        }
        out += e.band_set.label + "," + members + "," + fmt(e.baseline_accuracy) + "," +
               fmt(e.mean_permuted_accuracy) + "," + fmt(e.drop_pp) + "," + reps + "\n";
    }
    return out;
}

}  // namespace bandprobe
