#pragma once

#include <string>

#include "bandprobe/permutation.hpp"

namespace bandprobe {

// Deterministic bar chart of importance scores: one bar per entry, height
// proportional to drop_pp, negative drops below the axis, labels and numeric
// values rendered. Same input, same bytes.
std::string render_bar_chart(const ImportanceReport& report);

}  // namespace bandprobe
