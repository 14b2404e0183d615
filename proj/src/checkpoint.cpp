#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "bandprobe/unet.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint and raster formats are little-endian on disk");

namespace bandprobe {

namespace {

constexpr char kMagic[4] = {'B', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<char>& buf, std::uint32_t v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + 4);
}

void put_u64(std::vector<char>& buf, std::uint64_t v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + 8);
}

struct Reader {
    const std::vector<char>& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size()) {
            throw std::runtime_error("load_checkpoint: " + path + " truncated at offset " +
                                     std::to_string(pos) + " while reading " + what);
        }
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
};

}  // namespace

void save_checkpoint(UNet<float>& model, const std::string& path) {
    std::vector<char> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, kVersion);
    const auto& cfg = model.config();
    put_u32(buf, static_cast<std::uint32_t>(cfg.in_bands));
    put_u32(buf, static_cast<std::uint32_t>(cfg.num_classes));
    put_u32(buf, static_cast<std::uint32_t>(cfg.base_width));
    put_u32(buf, static_cast<std::uint32_t>(UNetConfig::depth));

    std::vector<float> values;
    model.for_each_parameter([&](const std::string&, Tensor<float>& t) {
        auto d = t.data();
        values.insert(values.end(), d.begin(), d.end());
    });
    model.for_each_bn_state([&](const std::string&, BatchNormState<float>& s) {
        values.insert(values.end(), s.running_mean.begin(), s.running_mean.end());
        values.insert(values.end(), s.running_var.begin(), s.running_var.end());
    });

    put_u64(buf, static_cast<std::uint64_t>(values.size()));
    const char* p = reinterpret_cast<const char*>(values.data());
    buf.insert(buf.end(), p, p + values.size() * sizeof(float));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write to " + path + " failed");
}

UNet<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf, 0, path};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw std::runtime_error("load_checkpoint: " + path + ": bad magic at offset 0");
    }
    r.pos = 4;
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw std::runtime_error("load_checkpoint: " + path + ": unsupported version " +
                                 std::to_string(version));
    }
    UNetConfig cfg;
    cfg.in_bands = static_cast<int>(r.u32("in_bands"));
    cfg.num_classes = static_cast<int>(r.u32("num_classes"));
    cfg.base_width = static_cast<int>(r.u32("base_width"));
    const std::uint32_t depth = r.u32("depth");
    if (depth != UNetConfig::depth) {
        throw std::runtime_error("load_checkpoint: " + path + ": depth " + std::to_string(depth) +
                                 " does not match the fixed architecture depth " +
                                 std::to_string(UNetConfig::depth));
    }
    cfg.validate();

    UNet<float> model = UNet<float>::build(cfg, 0);

    std::uint64_t expected = 0;
    model.for_each_parameter([&](const std::string&, Tensor<float>& t) {
        expected += static_cast<std::uint64_t>(t.numel());
    });
    model.for_each_bn_state([&](const std::string&, BatchNormState<float>& s) {
        expected += s.running_mean.size() + s.running_var.size();
    });

    const std::uint64_t declared = r.u64("value count");
    if (declared != expected) {
        throw std::runtime_error(
            "load_checkpoint: " + path + ": parameter stream holds " + std::to_string(declared) +
            " values but the configured model requires " + std::to_string(expected) +
            " (build-order mismatch)");
    }
    r.need(static_cast<size_t>(declared) * sizeof(float), "parameter values");

    const char* src = buf.data() + r.pos;
    model.for_each_parameter([&](const std::string&, Tensor<float>& t) {
        std::memcpy(t.data().data(), src, static_cast<size_t>(t.numel()) * sizeof(float));
        src += static_cast<size_t>(t.numel()) * sizeof(float);
    });
    model.for_each_bn_state([&](const std::string&, BatchNormState<float>& s) {
        std::memcpy(s.running_mean.data(), src, s.running_mean.size() * sizeof(float));
        src += s.running_mean.size() * sizeof(float);
        std::memcpy(s.running_var.data(), src, s.running_var.size() * sizeof(float));
        src += s.running_var.size() * sizeof(float);
        s.initialized = true;
    });
    r.pos += static_cast<size_t>(declared) * sizeof(float);
    if (r.pos != buf.size()) {
        throw std::runtime_error("load_checkpoint: " + path + ": " +
                                 std::to_string(buf.size() - r.pos) +
                                 " trailing bytes after the parameter stream");
    }

    model.set_mode(Mode::eval);
    return model;
}

}  // namespace bandprobe
