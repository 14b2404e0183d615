// bandprobe: synthesize data, train the segmentation U-Net, evaluate it and
// score spectral-band permutation importance.
//
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bandprobe/bands.hpp"
#include "bandprobe/dataio.hpp"
#include "bandprobe/metrics.hpp"
#include "bandprobe/parallel.hpp"
#include "bandprobe/permutation.hpp"
#include "bandprobe/svg_report.hpp"
#include "bandprobe/trainer.hpp"
#include "bandprobe/unet.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every command drops a config echo next to its outputs so a run can be
// replayed exactly.
void write_config_echo(const fs::path& out_dir, ordered_json config) {
    write_text(out_dir / "config.json", config.dump(2) + "\n");
}

fs::path prepare_out_dir(const std::string& out) {
    fs::path dir(out);
    fs::create_directories(dir);
    return dir;
}

struct CommonOpts {
    std::string out;
    int threads = 0;  // 0: keep the BANDPROBE_THREADS / hardware default
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--out", opts.out, "output directory")->required();
    cmd->add_option("--threads", opts.threads, "worker thread cap (default: BANDPROBE_THREADS or all cores)");
}

void apply_threads(const CommonOpts& opts) {
    if (opts.threads > 0) bandprobe::set_max_threads(opts.threads);
}

// --- synth ------------------------------------------------------------------

struct SynthOpts {
    CommonOpts common;
    int samples = 64;
    int size = 64;
    int height = 0, width = 0;  // override --size when both given
    std::string band;
    double threshold = 5000.0;
    double noise_scale = 0.02;
    std::uint64_t seed = 0;
    double train_frac = 0.75;
    double val_frac = 0.125;
};

int run_synth(const SynthOpts& o) {
    apply_threads(o.common);
    const int h = o.height > 0 ? o.height : o.size;
    const int w = o.width > 0 ? o.width : o.size;

    bandprobe::SynthSpec spec;
    spec.num_samples = o.samples;
    spec.height = h;
    spec.width = w;
    spec.generative_band = bandprobe::band_from_name(o.band);
    spec.threshold = static_cast<float>(o.threshold);
    spec.noise_scale = static_cast<float>(o.noise_scale);
    spec.seed = o.seed;
    spec.id_prefix = "sample";
    auto samples = bandprobe::generate_synthetic(spec);

    const fs::path dir = prepare_out_dir(o.common.out);
    int train_n = static_cast<int>(o.train_frac * o.samples);
    int val_n = static_cast<int>(o.val_frac * o.samples);
    if (o.samples >= 3) {
        train_n = std::max(train_n, 1);
        val_n = std::max(val_n, 1);
    }
    if (train_n + val_n > o.samples) {
        throw std::runtime_error("synth: split fractions leave no room for a test split");
    }

    bandprobe::Manifest manifest;
    for (size_t i = 0; i < samples.size(); ++i) {
        const std::string file = samples[i].id + ".bpr";
        bandprobe::write_sample(samples[i], (dir / file).string());
        bandprobe::Split split = bandprobe::Split::test;
        if (static_cast<int>(i) < train_n)
            split = bandprobe::Split::train;
        else if (static_cast<int>(i) < train_n + val_n)
            split = bandprobe::Split::val;
        manifest.entries.push_back({samples[i].id, file, split});
    }
    bandprobe::write_manifest(manifest, (dir / "manifest.json").string());

    write_config_echo(dir, {{"command", "synth"},
                            {"out", o.common.out},
                            {"samples", o.samples},
                            {"height", h},
                            {"width", w},
                            {"band", o.band},
                            {"threshold", o.threshold},
                            {"noise_scale", o.noise_scale},
                            {"seed", o.seed},
                            {"train_frac", o.train_frac},
                            {"val_frac", o.val_frac}});
    std::cout << "synth: wrote " << samples.size() << " samples and manifest.json to "
              << dir.string() << "\n";
    return 0;
}

// --- train -------------------------------------------------------------------

struct TrainOpts {
    CommonOpts common;
    std::string manifest;
    std::string exclusions;
    int epochs = 50;
    int batch = 32;
    double lr = 1e-3;
    int base_width = 16;
    int classes = 2;
    std::uint64_t seed = 0;
};

int run_train(const TrainOpts& o) {
    apply_threads(o.common);
    auto manifest = bandprobe::load_manifest(o.manifest, o.exclusions);
    auto train_set = bandprobe::load_split(manifest, bandprobe::Split::train);
    auto val_set = bandprobe::load_split(manifest, bandprobe::Split::val);
    if (train_set.empty()) throw std::runtime_error("train: the train split is empty");
    if (val_set.empty()) throw std::runtime_error("train: the val split is empty");

    bandprobe::UNetConfig net_cfg{bandprobe::kNumBands, o.classes, o.base_width};
    auto model = bandprobe::UNet<float>::build(net_cfg, o.seed);

    bandprobe::TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.learning_rate = static_cast<float>(o.lr);
    tc.seed = o.seed;
    bandprobe::TrainLog log = bandprobe::train(model, train_set, val_set, tc);

    const fs::path dir = prepare_out_dir(o.common.out);
    bandprobe::save_checkpoint(model, (dir / "model.ckpt").string());
    write_text(dir / "trainlog.csv", bandprobe::trainlog_to_csv(log));
    write_config_echo(dir, {{"command", "train"},
                            {"out", o.common.out},
                            {"manifest", o.manifest},
                            {"exclusions", o.exclusions},
                            {"epochs", o.epochs},
                            {"batch", o.batch},
                            {"lr", o.lr},
                            {"base_width", o.base_width},
                            {"classes", o.classes},
                            {"seed", o.seed}});
    std::cout << "train: selected epoch " << log.selected_epoch << " (val loss "
              << log.entries[static_cast<size_t>(log.selected_epoch)].val_loss
              << "), checkpoint written to " << (dir / "model.ckpt").string() << "\n";
    return 0;
}

// --- eval ---------------------------------------------------------------------

struct EvalOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string manifest;
    std::string exclusions;
    std::string split = "test";
};

int run_eval(const EvalOpts& o) {
    apply_threads(o.common);
    auto model = bandprobe::load_checkpoint(o.checkpoint);
    auto manifest = bandprobe::load_manifest(o.manifest, o.exclusions);
    auto samples = bandprobe::load_split(manifest, bandprobe::split_from_name(o.split));
    if (samples.empty()) throw std::runtime_error("eval: the " + o.split + " split is empty");

    auto report = bandprobe::evaluate_set(model, samples);
    const fs::path dir = prepare_out_dir(o.common.out);
    write_text(dir / "metrics.json", bandprobe::metrics_to_json(report));
    write_text(dir / "metrics.csv", bandprobe::metrics_to_csv(report));
    write_config_echo(dir, {{"command", "eval"},
                            {"out", o.common.out},
                            {"checkpoint", o.checkpoint},
                            {"manifest", o.manifest},
                            {"exclusions", o.exclusions},
                            {"split", o.split}});
    std::printf("eval: %zu images, accuracy %.4f, f1 %.4f\n", samples.size(),
                report.aggregate.accuracy, report.aggregate.f1);
    return 0;
}

// --- permute ---------------------------------------------------------------------

struct PermuteOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string manifest;
    std::string exclusions;
    std::string split = "test";
    std::string bands;   // "all" or comma-separated band names
    std::string groups;  // "default" or comma-separated builtin labels
    std::string metric = "accuracy";
    int repeats = 5;
    std::uint64_t seed = 0;
    bool joint = false;
};

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            if (!cur.empty()) parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) parts.push_back(cur);
    return parts;
}

std::vector<bandprobe::BandSet> resolve_band_sets(const PermuteOpts& o) {
    if (!o.bands.empty() && !o.groups.empty()) {
        throw CLI::ValidationError("permute", "--bands and --groups are mutually exclusive");
    }
    if (!o.groups.empty()) {
        if (o.groups == "default") return bandprobe::default_group_sweep();
        std::vector<bandprobe::BandSet> sets;
        for (const auto& label : split_csv(o.groups)) {
            bool found = false;
            for (const auto& g : bandprobe::builtin_band_groups()) {
                if (g.label == label) {
                    sets.push_back(g);
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw std::runtime_error("permute: unknown group '" + label +
                                         "'; builtin groups: NDWI, AWEIsh, WI2015, WI2, SWI, "
                                         "VisibleLight, NotImportant");
            }
        }
        return sets;
    }
    if (o.bands.empty() || o.bands == "all") return bandprobe::default_single_band_sweep();
    std::vector<bandprobe::BandSet> sets;
    for (const auto& name : split_csv(o.bands))
        sets.push_back(bandprobe::single_band_set(bandprobe::band_from_name(name)));
    return sets;
}

int run_permute(const PermuteOpts& o) {
    apply_threads(o.common);
    auto model = bandprobe::load_checkpoint(o.checkpoint);
    auto manifest = bandprobe::load_manifest(o.manifest, o.exclusions);
    auto samples = bandprobe::load_split(manifest, bandprobe::split_from_name(o.split));
    if (samples.empty()) throw std::runtime_error("permute: the " + o.split + " split is empty");

    const auto sets = resolve_band_sets(o);
    const auto mode =
        o.joint ? bandprobe::ShuffleMode::joint : bandprobe::ShuffleMode::independent;
    const auto metric = bandprobe::importance_metric_from_name(o.metric);
    auto report =
        bandprobe::importance_sweep(model, samples, sets, o.repeats, o.seed, mode, metric);

    const fs::path dir = prepare_out_dir(o.common.out);
    write_text(dir / "importance.json", bandprobe::importance_to_json(report));
    write_text(dir / "importance.csv", bandprobe::importance_to_csv(report));
    write_text(dir / "importance.svg", bandprobe::render_bar_chart(report));
    write_config_echo(dir, {{"command", "permute"},
                            {"out", o.common.out},
                            {"checkpoint", o.checkpoint},
                            {"manifest", o.manifest},
                            {"exclusions", o.exclusions},
                            {"split", o.split},
                            {"bands", o.bands},
                            {"groups", o.groups},
                            {"metric", o.metric},
                            {"repeats", o.repeats},
                            {"seed", o.seed},
                            {"joint", o.joint}});
    std::printf("permute: baseline accuracy %.4f over %zu images, %zu band sets, %d repeats\n",
                report.baseline_accuracy, samples.size(), report.entries.size(), o.repeats);
    return 0;
}

// --- report ----------------------------------------------------------------------

struct ReportOpts {
    CommonOpts common;
    std::string importance;
};

int run_report(const ReportOpts& o) {
    auto report = bandprobe::importance_report_from_json(read_text(o.importance));
    const fs::path dir = prepare_out_dir(o.common.out);
    write_text(dir / "importance.svg", bandprobe::render_bar_chart(report));
    write_config_echo(dir, {{"command", "report"},
                            {"out", o.common.out},
                            {"importance", o.importance}});
    std::cout << "report: rendered " << report.entries.size() << " bars to "
              << (dir / "importance.svg").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multispectral water segmentation and band permutation importance"};
    app.require_subcommand(1);

    SynthOpts synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic oracle dataset");
    add_common(synth_cmd, synth.common);
    synth_cmd->add_option("--samples", synth.samples, "number of samples");
    synth_cmd->add_option("--size", synth.size, "square image size (multiple of 16)");
    synth_cmd->add_option("--height", synth.height, "image height, overrides --size");
    synth_cmd->add_option("--width", synth.width, "image width, overrides --size");
    synth_cmd->add_option("--band", synth.band, "generative band name")->required();
    synth_cmd->add_option("--threshold", synth.threshold, "mask threshold in raw units");
    synth_cmd->add_option("--noise-scale", synth.noise_scale, "generative band noise sigma");
    synth_cmd->add_option("--seed", synth.seed, "random seed");
    synth_cmd->add_option("--train-frac", synth.train_frac, "train split fraction");
    synth_cmd->add_option("--val-frac", synth.val_frac, "val split fraction");

    TrainOpts train;
    auto* train_cmd = app.add_subcommand("train", "train the U-Net on a manifest");
    add_common(train_cmd, train.common);
    train_cmd->add_option("--manifest", train.manifest, "manifest JSON")->required();
    train_cmd->add_option("--exclusions", train.exclusions, "exclusion list file");
    train_cmd->add_option("--epochs", train.epochs, "training epochs");
    train_cmd->add_option("--batch", train.batch, "batch size");
    train_cmd->add_option("--lr", train.lr, "learning rate");
    train_cmd->add_option("--base-width", train.base_width, "first conv block width");
    train_cmd->add_option("--classes", train.classes, "number of classes");
    train_cmd->add_option("--seed", train.seed, "random seed");

    EvalOpts eval;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval_cmd, eval.common);
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--manifest", eval.manifest, "manifest JSON")->required();
    eval_cmd->add_option("--exclusions", eval.exclusions, "exclusion list file");
    eval_cmd->add_option("--split", eval.split, "split to evaluate (default test)");

    PermuteOpts permute;
    auto* permute_cmd =
        app.add_subcommand("permute", "permutation importance over bands or band groups");
    add_common(permute_cmd, permute.common);
    permute_cmd->add_option("--checkpoint", permute.checkpoint, "model checkpoint")->required();
    permute_cmd->add_option("--manifest", permute.manifest, "manifest JSON")->required();
    permute_cmd->add_option("--exclusions", permute.exclusions, "exclusion list file");
    permute_cmd->add_option("--split", permute.split, "split to score (default test)");
    permute_cmd->add_option("--bands", permute.bands, "'all' or comma-separated band names");
    permute_cmd->add_option("--groups", permute.groups,
                            "'default' or comma-separated builtin group labels");
    permute_cmd->add_option("--metric", permute.metric,
                            "score metric: accuracy (default), balanced_accuracy, precision, "
                            "recall or f1");
    permute_cmd->add_option("--repeats", permute.repeats, "repeats per band set");
    permute_cmd->add_option("--seed", permute.seed, "random seed");
    permute_cmd->add_flag("--joint", permute.joint, "share one rearrangement within a group");

    ReportOpts report;
    auto* report_cmd = app.add_subcommand("report", "re-render the SVG chart from importance JSON");
    add_common(report_cmd, report.common);
    report_cmd->add_option("--importance", report.importance, "importance.json path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(synth);
        if (train_cmd->parsed()) return run_train(train);
        if (eval_cmd->parsed()) return run_eval(eval);
        if (permute_cmd->parsed()) return run_permute(permute);
        if (report_cmd->parsed()) return run_report(report);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
