#include "bandprobe/metrics.hpp"

#include <cstdio>
#include <exception>
#include <stdexcept>

#include <json.hpp>

#include "bandprobe/parallel.hpp"
#include "bandprobe/trainer.hpp"

namespace bandprobe {

ConfusionCounts confusion(const Mask& pred, const Mask& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw std::invalid_argument("confusion: mask shapes differ (" + std::to_string(pred.height) +
                                    "x" + std::to_string(pred.width) + " vs " +
                                    std::to_string(truth.height) + "x" +
                                    std::to_string(truth.width) + ")");
    }
    pred.validate_binary("confusion(pred)");
    truth.validate_binary("confusion(truth)");

    ConfusionCounts c;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] == 1, t = truth.values[i] == 1;
        if (p && t)
            c.tp++;
        else if (!p && !t)
            c.tn++;
        else if (p && !t)
            c.fp++;
        else
            c.fn++;
    }
    return c;
}

MetricValues compute_metrics(const ConfusionCounts& c) {
    if (c.total() <= 0) {
        throw std::invalid_argument("compute_metrics: empty confusion counts");
    }
    MetricValues m;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());

    // Zero denominators resolve to 0 and set the degenerate flag.
    double pos_recall = 0, neg_recall = 0;
    if (c.tp + c.fn > 0)
        pos_recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    else
        m.degenerate = true;
    if (c.tn + c.fp > 0)
        neg_recall = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    else
        m.degenerate = true;
    m.balanced_accuracy = 0.5 * (pos_recall + neg_recall);

    if (c.tp + c.fp > 0)
        m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    else
        m.degenerate = true;
    m.recall = pos_recall;

    if (m.precision + m.recall > 0)
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    else
        m.degenerate = true;
    return m;
}

MetricReport aggregate_metrics(std::vector<PerImageMetrics> per_image) {
    if (per_image.empty()) {
        throw std::invalid_argument("aggregate_metrics: no per-image values");
    }
    MetricReport report;
    report.per_image = std::move(per_image);
    const double n = static_cast<double>(report.per_image.size());
    for (const auto& e : report.per_image) {
        report.aggregate.accuracy += e.values.accuracy;
        report.aggregate.balanced_accuracy += e.values.balanced_accuracy;
        report.aggregate.precision += e.values.precision;
        report.aggregate.recall += e.values.recall;
        report.aggregate.f1 += e.values.f1;
        report.aggregate.degenerate = report.aggregate.degenerate || e.values.degenerate;
    }
    report.aggregate.accuracy /= n;
    report.aggregate.balanced_accuracy /= n;
    report.aggregate.precision /= n;
    report.aggregate.recall /= n;
    report.aggregate.f1 /= n;
    return report;
}

namespace {

// Runs fn(i) for every sample index in parallel, capturing per-sample errors
// so the first one (in sample order) resurfaces on the caller's thread.
void for_each_sample(size_t n, const std::vector<RasterSample>& samples,
                     const std::function<void(size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            try {
                fn(static_cast<size_t>(i));
            } catch (const std::exception& e) {
                errors[static_cast<size_t>(i)] = std::make_exception_ptr(std::runtime_error(
                    "sample '" + samples[static_cast<size_t>(i)].id + "': " + e.what()));
            } catch (...) {
                errors[static_cast<size_t>(i)] = std::current_exception();
            }
        }
    });
    for (auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }
}

}  // namespace

MetricReport evaluate_set(UNet<float>& model, const std::vector<RasterSample>& test_set) {
    if (test_set.empty()) throw std::invalid_argument("evaluate_set: empty test set");
    std::vector<PerImageMetrics> per_image(test_set.size());
    for_each_sample(test_set.size(), test_set, [&](size_t i) {
        const RasterSample& s = test_set[i];
        Mask pred = model.predict_mask(scale_input(s.bands));
        per_image[i] = {s.id, compute_metrics(confusion(pred, s.mask))};
    });
    return aggregate_metrics(std::move(per_image));
}

double mean_accuracy(UNet<float>& model, const std::vector<RasterSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("mean_accuracy: empty sample set");
    std::vector<double> acc(samples.size());
    for_each_sample(samples.size(), samples, [&](size_t i) {
        const RasterSample& s = samples[i];
        const ConfusionCounts c = confusion(model.predict_mask(scale_input(s.bands)), s.mask);
        acc[i] = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    });
    double total = 0;
    for (double a : acc) total += a;
    return total / static_cast<double>(samples.size());
}

namespace {

nlohmann::ordered_json metric_values_json(const MetricValues& v) {
    return {{"accuracy", v.accuracy},
            {"balanced_accuracy", v.balanced_accuracy},
            {"precision", v.precision},
            {"recall", v.recall},
            {"f1", v.f1}};
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

std::string metrics_to_json(const MetricReport& report) {
    nlohmann::ordered_json doc;
    doc["aggregate"] = metric_values_json(report.aggregate);
    doc["per_image"] = nlohmann::ordered_json::array();
    for (const auto& e : report.per_image) {
        auto entry = metric_values_json(e.values);
        entry["degenerate"] = e.values.degenerate;
        nlohmann::ordered_json row;
        row["id"] = e.id;
        row.update(entry);
        doc["per_image"].push_back(row);
    }
    return doc.dump(2) + "\n";
}

std::string metrics_to_csv(const MetricReport& report) {
    std::string out = "id,accuracy,balanced_accuracy,precision,recall,f1,degenerate\n";
    auto row = [&](const std::string& id, const MetricValues& v) {
        out += id + "," + fmt_double(v.accuracy) + "," + fmt_double(v.balanced_accuracy) + "," +
               fmt_double(v.precision) + "," + fmt_double(v.recall) + "," + fmt_double(v.f1) +
               "," + (v.degenerate ? "true" : "false") + "\n";
    };
    for (const auto& e : report.per_image) row(e.id, e.values);
    row("aggregate", report.aggregate);
    return out;
}

}  // namespace bandprobe
