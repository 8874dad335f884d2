#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mednvc/dataio.hpp"
#include "mednvc/maskae.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mednvc;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("mednvc_cli_" + tag + "_" + std::to_string(::getpid()))) {
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

// Runs the binary under test single-threaded; returns the exit code.
int run(const std::string& args, const std::string& capture = "/dev/null") {
    const char* bin = std::getenv("MEDNVC_BIN");
    REQUIRE(bin != nullptr);
    const std::string cmd =
        "MED_NVC_THREADS=0 " + std::string(bin) + " " + args + " >" + capture + " 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string l;
    while (std::getline(ss, l)) out.push_back(l);
    return out;
}

// Common fast flags: tiny encoder, 64 px images.
const std::string kTinyEnc = " --dims 8,16,32,64 --depths 1,1,1,1 --size 64";

}  // namespace

TEST_CASE("synth writes the requested files deterministically") {
    TmpDir t("synth");
    CHECK(run("synth --n 16 --seed 4 --coupling xor --size 64 --out-dir " + (t / "a")) == 0);
    int pgms = 0;
    for (const auto& e : fs::directory_iterator(t / "a")) {
        if (e.path().extension() == ".pgm") ++pgms;
    }
    CHECK(pgms == 16);
    CHECK(lines(slurp(t / "a/manifest.csv")).size() == 17);  // header + 16 rows

    CHECK(run("synth --n 16 --seed 4 --coupling xor --size 64 --out-dir " + (t / "b")) == 0);
    CHECK(slurp(t / "a/manifest.csv") == slurp(t / "b/manifest.csv"));
    CHECK(slurp(t / "a/img_0007.pgm") == slurp(t / "b/img_0007.pgm"));

    CHECK(run("synth --n 3 --seed 4 --coupling xor --out-dir " + (t / "c")) == 2);
    CHECK(run("synth --n 16 --seed 4 --coupling sideways --out-dir " + (t / "c")) == 2);
    CHECK(run("synth --n 16 --seed 4 --out-dir /proc/none/sub") == 2);
}

TEST_CASE("pretrain logs one row per epoch and validates flags") {
    TmpDir t("pre");
    REQUIRE(run("synth --n 8 --seed 5 --coupling xor --size 64 --out-dir " + (t / "d")) == 0);
    const std::string base = "pretrain --manifest " + (t / "d/manifest.csv") + kTinyEnc +
                             " --decoder-dim 16 --batch-size 4 --seed 6";
    CHECK(run(base + " --epochs 0 --out " + (t / "x.nvc1")) == 2);
    CHECK(run(base + " --epochs 3 --mask-ratio 1.5 --out " + (t / "x.nvc1")) == 2);
    CHECK(run(base + " --epochs 3 --warmup 9 --out " + (t / "x.nvc1")) == 2);
    CHECK(run("pretrain --manifest " + (t / "d/none.csv") + " --epochs 1 --warmup 0 --out " +
              (t / "x.nvc1")) == 1);

    CHECK(run(base + " --epochs 4 --warmup 2 --out " + (t / "p.nvc1") + " --log " +
              (t / "p.csv")) == 0);
    const auto rows = lines(slurp(t / "p.csv"));
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == "epoch,mean_loss,lr");
    // lr column follows the schedule: rises through warmup, then never rises
    std::vector<double> lr;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto last_comma = rows[i].rfind(',');
        REQUIRE(last_comma != std::string::npos);
        lr.push_back(std::stod(rows[i].substr(last_comma + 1)));
    }
    CHECK(lr[0] <= lr[1]);
    for (std::size_t i = 2; i < lr.size(); ++i) CHECK(lr[i] <= lr[i - 1]);

    // double run is byte-identical, checkpoint included
    CHECK(run(base + " --epochs 4 --warmup 2 --out " + (t / "q.nvc1") + " --log " +
              (t / "q.csv")) == 0);
    CHECK(slurp(t / "p.csv") == slurp(t / "q.csv"));
    CHECK(slurp(t / "p.nvc1") == slurp(t / "q.nvc1"));
}

TEST_CASE("finetune transfers the pretrained encoder bitwise") {
    TmpDir t("ft");
    REQUIRE(run("synth --n 12 --seed 7 --coupling xor --size 64 --out-dir " + (t / "d")) == 0);
    const std::string mani = " --manifest " + (t / "d/manifest.csv");
    REQUIRE(run("pretrain" + mani + kTinyEnc + " --decoder-dim 16 --batch-size 4 --epochs 2 "
                "--warmup 1 --seed 8 --out " + (t / "pre.nvc1")) == 0);

    // zero lr: the transferred tensors must survive training untouched
    const std::string ft = "finetune" + mani + kTinyEnc +
                           " --batch-size 4 --epochs 2 --warmup 1 --peak-lr 0 --floor-lr 0"
                           " --eval-frac 0.25 --seed 9 --init-from " + (t / "pre.nvc1");
    CHECK(run(ft + " --out " + (t / "fin.nvc1")) == 0);

    const Checkpoint pre = load_checkpoint(t / "pre.nvc1");
    const Checkpoint fin = load_checkpoint(t / "fin.nvc1");
    int encoder_tensors = 0;
    for (const auto& name : pre.order) {
        if (name.rfind("encoder.", 0) != 0) continue;
        ++encoder_tensors;
        REQUIRE(fin.tensors.count(name) == 1);
        CHECK(fin.tensors.at(name).second == pre.tensors.at(name).second);
    }
    CHECK(encoder_tensors > 0);
    CHECK(fin.tensors.count("decoder.token") == 0);  // decoder is discarded
    CHECK(fin.has_stats);

    // mismatched encoder geometry is a validation error naming the field
    const std::string bad = "finetune" + mani +
                            " --dims 16,32,64,128 --depths 1,1,1,1 --size 64 --epochs 1 --warmup 0"
                            " --init-from " + (t / "pre.nvc1") + " --out " + (t / "z.nvc1");
    CHECK(run(bad, t / "bad.out") == 2);
    CHECK(slurp(t / "bad.out").find("dims mismatch") != std::string::npos);

    // without --init-from training still runs
    CHECK(run("finetune" + mani + kTinyEnc + " --batch-size 4 --epochs 1 --warmup 0"
              " --eval-frac 0 --seed 9 --out " + (t / "scratch.nvc1")) == 0);
    // "no random throw" ablation hook
    CHECK(run("finetune" + mani + kTinyEnc + " --batch-size 4 --epochs 1 --warmup 0"
              " --modality-dropout-p 0 --eval-frac 0 --seed 9 --out " +
              (t / "nothrow.nvc1")) == 0);
}

TEST_CASE("eval writes a parseable report whose totals match") {
    TmpDir t("ev");
    REQUIRE(run("synth --n 32 --seed 10 --coupling xor --size 64 --out-dir " + (t / "d")) == 0);
    const std::string mani = " --manifest " + (t / "d/manifest.csv");
    // zero-lr finetune == randomly initialized model with fitted stats
    REQUIRE(run("finetune" + mani + kTinyEnc + " --batch-size 8 --epochs 1 --warmup 0"
                " --peak-lr 0 --floor-lr 0 --eval-frac 0 --seed 11 --out " +
                (t / "fin.nvc1")) == 0);

    CHECK(run("eval" + mani + " --checkpoint " + (t / "fin.nvc1") + " --report " +
              (t / "r.json")) == 0);
    const json r = json::parse(slurp(t / "r.json"));
    CHECK(r["n"].get<int>() == 32);
    CHECK(r["tp"].get<int>() + r["tn"].get<int>() + r["fp"].get<int>() + r["fn"].get<int>() == 32);
    const double acc = r["acc"].get<double>();
    CHECK(acc >= 0.4);  // chance on a balanced set
    CHECK(acc <= 0.6);
    CHECK(r["config"]["stage"] == "finetune");
    CHECK(r["config"]["image_size"].get<int>() == 64);

    // double run byte-identical
    CHECK(run("eval" + mani + " --checkpoint " + (t / "fin.nvc1") + " --report " +
              (t / "r2.json")) == 0);
    CHECK(slurp(t / "r.json") == slurp(t / "r2.json"));

    // single-class subset: AUC null, ACC still present
    const auto all = lines(slurp(t / "d/manifest.csv"));
    std::ofstream one(t / "d/one_class.csv");
    one << all[0] << "\n";
    for (std::size_t i = 1; i < all.size(); ++i) {
        const auto a = all[i].find(',');
        const auto b = all[i].find(',', a + 1);
        if (all[i].substr(b + 1, all[i].find(',', b + 1) - b - 1) == "0") one << all[i] << "\n";
    }
    one.close();
    CHECK(run("eval --manifest " + (t / "d/one_class.csv") + " --checkpoint " + (t / "fin.nvc1") +
              " --report " + (t / "r3.json")) == 0);
    const json r3 = json::parse(slurp(t / "r3.json"));
    CHECK(r3["auc"].is_null());
    CHECK(r3["n"].get<int>() == 16);
    CHECK(r3["tp"].get<int>() + r3["fn"].get<int>() == 0);  // only negatives remain

    // a pretrain checkpoint is rejected before compute
    REQUIRE(run("pretrain" + mani + kTinyEnc + " --decoder-dim 16 --epochs 1 --warmup 0"
                " --seed 1 --out " + (t / "pre.nvc1")) == 0);
    CHECK(run("eval" + mani + " --checkpoint " + (t / "pre.nvc1") + " --report " +
              (t / "r4.json")) == 2);
}

TEST_CASE("reconstruct stitches triptychs with the display contract") {
    TmpDir t("rz");
    REQUIRE(run("synth --n 8 --seed 12 --coupling xor --size 64 --out-dir " + (t / "d")) == 0);
    const std::string mani = " --manifest " + (t / "d/manifest.csv");
    REQUIRE(run("pretrain" + mani + kTinyEnc + " --decoder-dim 16 --batch-size 4 --epochs 2"
                " --warmup 1 --seed 13 --out " + (t / "pre.nvc1")) == 0);

    CHECK(run("reconstruct" + mani + " --checkpoint " + (t / "pre.nvc1") + " --count 2"
              " --seed 14 --out-dir " + (t / "v1")) == 0);
    const RawImage trip = read_pnm(t / "v1/recon_0000.pgm");
    CHECK(trip.w == 3 * 64);
    CHECK(trip.h == 64);

    // panel cells: visible cells are copied pixels, masked cells are blanked
    const int unit = kMaskUnit, gh = 64 / unit, gw = 64 / unit;
    int copied_cells = 0, blank_cells = 0;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            bool copied = true, blank = true;
            for (int py = 0; py < unit; ++py) {
                for (int px = 0; px < unit; ++px) {
                    const int y = gy * unit + py, x = gx * unit + px;
                    const std::uint8_t orig = trip.pixels[static_cast<std::size_t>(y) * trip.w + x];
                    const std::uint8_t masked =
                        trip.pixels[static_cast<std::size_t>(y) * trip.w + 64 + x];
                    const std::uint8_t recon =
                        trip.pixels[static_cast<std::size_t>(y) * trip.w + 128 + x];
                    if (recon != orig) copied = false;
                    if (masked != 0) blank = false;
                }
            }
            if (copied) ++copied_cells;
            if (blank) ++blank_cells;
            CHECK(copied != blank);  // every cell is exactly one of the two
        }
    }
    // ratio 0.6 on a 2x2 grid masks exactly round(4*0.6) = 2 cells
    CHECK(blank_cells == 2);
    CHECK(copied_cells == 2);

    CHECK(run("reconstruct" + mani + " --checkpoint " + (t / "pre.nvc1") + " --count 2"
              " --seed 14 --out-dir " + (t / "v2")) == 0);
    CHECK(slurp(t / "v1/recon_0001.pgm") == slurp(t / "v2/recon_0001.pgm"));

    CHECK(run("reconstruct" + mani + " --checkpoint " + (t / "pre.nvc1") + " --mask-ratio 2"
              " --out-dir " + (t / "v3")) == 2);
}
