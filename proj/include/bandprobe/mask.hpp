#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bandprobe {

// Binary segmentation mask, land = 0, water = 1, row-major.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;

    Mask() = default;
    Mask(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), values(static_cast<size_t>(h) * static_cast<size_t>(w), fill) {}

    std::int64_t pixels() const { return static_cast<std::int64_t>(height) * width; }

    std::uint8_t at(int y, int x) const {
        return values[static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)];
    }

    std::uint8_t& at(int y, int x) {
        return values[static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)];
    }

    bool operator==(const Mask&) const = default;

    void validate_binary(const char* who) const {
        if (static_cast<std::int64_t>(values.size()) != pixels()) {
            throw std::invalid_argument(std::string(who) + ": mask storage does not match " +
                                        std::to_string(height) + "x" + std::to_string(width));
        }
        for (std::uint8_t v : values) {
            if (v > 1) {
                throw std::invalid_argument(std::string(who) +
                                            ": mask contains non-binary value " + std::to_string(v));
            }
        }
    }
};

}  // namespace bandprobe
