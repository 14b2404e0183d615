#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    if (const char* env = std::getenv("BANDPROBE_CLI")) return env;
    return "./tools/bandprobe";
}

int run_cli(const std::string& args) {
    const std::string cmd = cli_path() + " " + args + " >> cli_stdout.log 2>> cli_stderr.log";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::vector<char> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    fs::path old;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
        old = fs::current_path();
        fs::current_path(path);
    }
    ~TempDir() {
        fs::current_path(old);
        fs::remove_all(path);
    }
};

nlohmann::json load_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    nlohmann::json doc;
    in >> doc;
    return doc;
}

}  // namespace

TEST_CASE("synth is reproducible and usage errors exit 2") {
    TempDir dir("cli_synth");
    REQUIRE(run_cli("synth --out a --samples 6 --size 32 --band NIR --seed 7") == 0);
    CHECK(fs::exists("a/manifest.json"));
    int bpr_count = 0;
    for (const auto& e : fs::directory_iterator("a"))
        if (e.path().extension() == ".bpr") ++bpr_count;
    CHECK(bpr_count == 6);

    // rerun with the same args produces identical bytes
    REQUIRE(run_cli("synth --out b --samples 6 --size 32 --band NIR --seed 7") == 0);
    CHECK(slurp("a/sample_0000.bpr") == slurp("b/sample_0000.bpr"));
    CHECK(slurp("a/manifest.json") == slurp("b/manifest.json"));

    CHECK(run_cli("synth --out c --samples 6 --size 32 --seed 7") == 2);   // --band missing
    CHECK(run_cli("synth --out c --samples 6 --nonsense 1 --band NIR") == 2);
    CHECK(run_cli("bogus-command") == 2);
}

TEST_CASE("train writes the trainlog, checkpoint and a default-carrying config echo") {
    TempDir dir("cli_train");
    REQUIRE(run_cli("synth --out d --samples 4 --size 16 --band NIR --seed 3 "
                    "--train-frac 0.5 --val-frac 0.25") == 0);

    // defaults (no --epochs/--batch flags) echo 50 and 32 in the config record
    REQUIRE(run_cli("train --manifest d/manifest.json --out run0 --base-width 1 --seed 1") == 0);
    auto echo = load_json("run0/config.json");
    CHECK(echo["epochs"] == 50);
    CHECK(echo["batch"] == 32);

    REQUIRE(run_cli("train --manifest d/manifest.json --out run1 --epochs 3 --batch 2 "
                    "--base-width 1 --seed 1") == 0);
    std::ifstream log("run1/trainlog.csv");
    std::string line;
    int rows = 0;
    while (std::getline(log, line))
        if (!line.empty() && line[0] != '#' && line.find("epoch,") != 0) ++rows;
    CHECK(rows == 3);
    CHECK(fs::exists("run1/model.ckpt"));
}

TEST_CASE("train on an empty split fails naming the split") {
    TempDir dir("cli_train_err");
    REQUIRE(run_cli("synth --out d --samples 3 --size 16 --band NIR --seed 3 "
                    "--train-frac 0.34 --val-frac 0.33") == 0);
    // rewrite the manifest with every sample tagged test
    auto doc = load_json("d/manifest.json");
    for (auto& s : doc["samples"]) s["split"] = "test";
    std::ofstream("d/manifest.json") << doc.dump(2);
    CHECK(run_cli("train --manifest d/manifest.json --out run --base-width 1") == 1);
    std::ifstream err("cli_stderr.log");
    std::string all((std::istreambuf_iterator<char>(err)), std::istreambuf_iterator<char>());
    CHECK(all.find("train split is empty") != std::string::npos);
}

TEST_CASE("eval and permute emit the report files and respect exclusions") {
    TempDir dir("cli_eval");
    REQUIRE(run_cli("synth --out d --samples 8 --size 16 --band NIR --seed 11 "
                    "--train-frac 0.25 --val-frac 0.25") == 0);
    REQUIRE(run_cli("train --manifest d/manifest.json --out run --epochs 2 --batch 2 "
                    "--base-width 1 --seed 2") == 0);

    REQUIRE(run_cli("eval --checkpoint run/model.ckpt --manifest d/manifest.json --out run") == 0);
    auto metrics = load_json("run/metrics.json");
    const auto& agg = metrics["aggregate"];
    CHECK(agg.size() == 5);
    for (const char* key : {"accuracy", "balanced_accuracy", "precision", "recall", "f1"})
        CHECK(agg.contains(key));
    const size_t full_count = metrics["per_image"].size();
    CHECK(full_count == 4);  // 8 samples - 2 train - 2 val

    // same checkpoint and data -> identical report bytes
    REQUIRE(run_cli("eval --checkpoint run/model.ckpt --manifest d/manifest.json --out run2") == 0);
    CHECK(slurp("run/metrics.json") == slurp("run2/metrics.json"));

    // exclusion list removes one test image
    {
        std::ofstream ex("excl.txt");
        ex << metrics["per_image"][0]["id"].get<std::string>() << "\n";
    }
    REQUIRE(run_cli("eval --checkpoint run/model.ckpt --manifest d/manifest.json --out run3 "
                    "--exclusions excl.txt") == 0);
    CHECK(load_json("run3/metrics.json")["per_image"].size() == full_count - 1);

    // permute: 12 bands in channel order, then the 7 builtin groups
    REQUIRE(run_cli("permute --checkpoint run/model.ckpt --manifest d/manifest.json --out perm "
                    "--bands all --repeats 2 --seed 5") == 0);
    auto imp = load_json("perm/importance.json");
    CHECK(imp["repeats"] == 2);
    REQUIRE(imp["entries"].size() == 12);
    CHECK(imp["entries"][0]["label"] == "CoastalAerosol");
    CHECK(imp["entries"][8]["label"] == "NIR");
    CHECK(fs::exists("perm/importance.svg"));
    CHECK(fs::exists("perm/importance.csv"));

    REQUIRE(run_cli("permute --checkpoint run/model.ckpt --manifest d/manifest.json --out permg "
                    "--groups default --repeats 2 --seed 5") == 0);
    auto impg = load_json("permg/importance.json");
    REQUIRE(impg["entries"].size() == 7);
    CHECK(impg["entries"][0]["label"] == "NDWI");

    CHECK(run_cli("permute --checkpoint run/model.ckpt --manifest d/manifest.json --out permx "
                  "--bands all --groups default") == 2);

    // report re-renders the identical SVG from the JSON
    REQUIRE(run_cli("report --importance perm/importance.json --out rerender") == 0);
    CHECK(slurp("perm/importance.svg") == slurp("rerender/importance.svg"));
}

TEST_CASE("runtime failures exit 1") {
    TempDir dir("cli_runtime");
    CHECK(run_cli("eval --checkpoint nope.ckpt --manifest nope.json --out x") == 1);
    CHECK(run_cli("report --importance nope.json --out x") == 1);
}
