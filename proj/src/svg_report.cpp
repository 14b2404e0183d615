#include "bandprobe/svg_report.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace bandprobe {

namespace {

constexpr double kMarginLeft = 70.0;
constexpr double kMarginRight = 24.0;
constexpr double kMarginTop = 48.0;
constexpr double kMarginBottom = 96.0;
constexpr double kSlotWidth = 72.0;
constexpr double kBarWidth = 46.0;
constexpr double kChartHeight = 280.0;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

void line(std::string& out, const char* fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out += buf;
    out += "\n";
}

}  // namespace

std::string render_bar_chart(const ImportanceReport& report) {
    if (report.entries.empty()) {
        throw std::invalid_argument("render_bar_chart: no scores to draw");
    }

    double top = 0.0, bottom = 0.0;
    for (const auto& e : report.entries) {
        top = std::max(top, e.drop_pp);
        bottom = std::min(bottom, e.drop_pp);
    }
    // Pad the range; keep a minimum span so zero-only charts stay drawable.
    top *= 1.15;
    bottom *= 1.15;
    if (top - bottom < 1.0) top = bottom + 1.0;
    const double scale = kChartHeight / (top - bottom);
    const double zero_y = kMarginTop + top * scale;

    const double width =
        kMarginLeft + kSlotWidth * static_cast<double>(report.entries.size()) + kMarginRight;
    const double height = kMarginTop + kChartHeight + kMarginBottom;

    std::string svg;
    svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    line(svg,
         "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
         "viewBox=\"0 0 %.0f %.0f\">",
         width, height, width, height);
    line(svg, "<rect x=\"0\" y=\"0\" width=\"%.0f\" height=\"%.0f\" fill=\"#ffffff\"/>", width,
         height);
    line(svg,
         "<text x=\"%.1f\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" "
         "fill=\"#222222\">Permutation importance (baseline %s %s)</text>",
         kMarginLeft, std::string(importance_metric_name(report.metric)).c_str(),
         num(report.baseline_accuracy).c_str());
    line(svg,
         "<text x=\"16\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#222222\" "
         "transform=\"rotate(-90 16 %.1f)\" text-anchor=\"middle\">accuracy drop (pp)</text>",
         kMarginTop + kChartHeight / 2, kMarginTop + kChartHeight / 2);

    for (size_t i = 0; i < report.entries.size(); ++i) {
        const auto& e = report.entries[i];
        const double x0 = kMarginLeft + kSlotWidth * static_cast<double>(i) +
                          (kSlotWidth - kBarWidth) / 2.0;
        const double h = std::abs(e.drop_pp) * scale;
        const double y0 = e.drop_pp >= 0 ? zero_y - h : zero_y;
        const char* fill = e.drop_pp >= 0 ? "#3572b0" : "#b05035";
        line(svg, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\"/>", x0,
             y0, kBarWidth, h, fill);

        const double value_y = e.drop_pp >= 0 ? y0 - 6.0 : y0 + h + 14.0;
        line(svg,
             "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
             "fill=\"#222222\" text-anchor=\"middle\">%s</text>",
             x0 + kBarWidth / 2.0, value_y, num(e.drop_pp).c_str());

        const double label_x = x0 + kBarWidth / 2.0;
        const double label_y = kMarginTop + kChartHeight + 20.0;
        line(svg,
             "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" "
             "fill=\"#222222\" text-anchor=\"end\" transform=\"rotate(-35 %.1f %.1f)\">%s</text>",
             label_x, label_y, label_x, label_y, e.band_set.label.c_str());
    }

    // Zero axis on top of the bars.
    line(svg, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#222222\"/>",
         kMarginLeft, zero_y, width - kMarginRight, zero_y);
    svg += "</svg>\n";
    return svg;
}

}  // namespace bandprobe
