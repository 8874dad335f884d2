// End-to-end acceptance gate: ten numbered checks, one PASS/FAIL line each,
// exit 0 only if all pass. Library checks run in-process; pipeline checks
// exec the CLI named by MEDNVC_BIN inside a scratch directory with
// MED_NVC_THREADS=0. Tolerances and time budgets are pinned below.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "json.hpp"
#include "mednvc/fusion.hpp"
#include "mednvc/maskae.hpp"
#include "mednvc/metrics.hpp"

namespace fs = std::filesystem;
using namespace mednvc;
using nlohmann::json;

namespace {

constexpr double kGradRelTol = 1e-3;   // finite-difference relative error
constexpr double kGradAbsTol = 1e-6;   // absolute fallback near zero
constexpr double kSparseTol = 1e-6;    // sparse conv vs zero-fill oracle
constexpr double kRowSumTol = 1e-6;    // attention row-stochasticity
constexpr double kAucTol = 1e-9;       // AUC vs pairwise statistic
constexpr double kHalving = 0.5;       // pretrain loss drop factor
constexpr double kAccFloor = 0.85;     // fused model accuracy floor
constexpr double kAccMargin = 0.15;    // fused lead over each baseline
constexpr double kTransferSlack = 0.02;  // allowed shortfall vs scratch

constexpr double kBudgetGrad = 120.0;      // seconds
constexpr double kBudgetSparse = 60.0;
constexpr double kBudgetPretrain = 600.0;
constexpr double kBudgetDirectional = 1800.0;

struct check_fail : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw check_fail(msg);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << v;
    return ss.str();
}

// ---- scratch workspace and CLI helpers --------------------------------------

struct Ctx {
    fs::path work;
    std::string bin;
    fs::path pretrain_ck;  // shared transfer fixture, built once
    fs::path xor_dir;      // labeled coupled dataset for check 7
};

std::string tail_of(const std::string& s, std::size_t n) {
    return s.size() <= n ? s : s.substr(s.size() - n);
}

struct RunResult {
    int exit = -1;
    std::string out;
};

RunResult run_cli(const Ctx& c, const std::string& args) {
    const fs::path cap = c.work / ".capture.txt";
    const std::string cmd = "cd '" + c.work.string() + "' && MED_NVC_THREADS=0 '" + c.bin + "' " +
                            args + " > '" + cap.string() + "' 2>&1";
    const int st = std::system(cmd.c_str());
    RunResult r;
    r.exit = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    std::ifstream f(cap);
    std::stringstream ss;
    ss << f.rdbuf();
    r.out = ss.str();
    return r;
}

void run_ok(const Ctx& c, const std::string& args) {
    require(!c.bin.empty(), "MEDNVC_BIN is not set");
    auto r = run_cli(c, args);
    require(r.exit == 0, "exit " + std::to_string(r.exit) + " from: " + args + "\n" +
                             tail_of(r.out, 500));
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    require(f.good(), "cannot read " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

struct LogRow {
    int epoch = 0;
    double loss = 0, lr = 0;
};

std::vector<LogRow> read_log(const fs::path& p) {
    std::ifstream f(p);
    require(f.good(), "cannot read " + p.string());
    std::string line;
    std::getline(f, line);  // header
    std::vector<LogRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        LogRow r;
        char c1 = 0, c2 = 0;
        std::istringstream ss(line);
        ss >> r.epoch >> c1 >> r.loss >> c2 >> r.lr;
        require(bool(ss) && c1 == ',' && c2 == ',', "bad log row: " + line);
        rows.push_back(r);
    }
    return rows;
}

double report_acc(const fs::path& p) {
    auto j = json::parse(slurp(p));
    return j.at("acc").get<double>();
}

// Unlabeled-corpus pretrain checkpoint shared by checks 7 and 8.
void ensure_transfer_fixture(Ctx& c) {
    if (!c.pretrain_ck.empty() && fs::exists(c.pretrain_ck)) return;
    run_ok(c, "synth --n 256 --seed 901 --coupling xor --size 64 --out-dir pre_data");
    run_ok(c,
           "pretrain --manifest pre_data/manifest.csv --out pre.nvc1 --log pre.csv "
           "--epochs 60 --warmup 6 --size 64 --seed 902");
    c.pretrain_ck = c.work / "pre.nvc1";
}

// ---- check bodies ------------------------------------------------------------

template <typename T>
Ptr<T> randn_leaf(std::vector<int> shape, Rng& rng, double scale, bool grad = true) {
    auto t = zeros<T>(std::move(shape), grad);
    for (auto& v : t->data) v = static_cast<T>(rng.normal() * scale);
    return t;
}

// Scalar-izes a tensor-valued op through a random weighting drawn once, so
// repeated rebuilds differentiate the same function.
std::function<Ptr<double>()> probed(const std::function<Ptr<double>()>& f, Rng& rng) {
    auto probe = zeros<double>(f()->shape, false);
    for (auto& v : probe->data) v = rng.normal();
    return [f, probe] { return sum_all(mul(f(), probe)); };
}

void check_gradients(Ctx&) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    // h = 1e-5 keeps truncation below the tolerance; 64-bit arithmetic keeps
    // the cancellation error orders of magnitude smaller still
    auto run = [&](const std::string& op, const std::vector<Ptr<double>>& leaves,
                   const std::function<Ptr<double>()>& build) {
        auto r = gc::gradcheck(leaves, build, 1e-5, kGradRelTol, kGradAbsTol);
        worst = std::max(worst, r.worst);
        require(r.ok, op + ": " + r.where + " (err " + fmt(r.worst) + ")");
    };

    for (std::uint64_t seed : {11u, 22u, 33u}) {
        Rng rng(seed);
        {
            auto x = randn_leaf<double>({2, 3, 5, 5}, rng, 0.5);
            auto w = randn_leaf<double>({4, 3, 3, 3}, rng, 0.3);
            auto b = randn_leaf<double>({4}, rng, 0.1);
            run("conv2d", {x, w, b},
                probed([=] { return conv2d<double>(x, w, b, 1, 1); }, rng));
        }
        {
            auto x = randn_leaf<double>({1, 4, 6, 6}, rng, 0.5);
            auto w = randn_leaf<double>({6, 2, 3, 3}, rng, 0.3);
            auto b = randn_leaf<double>({6}, rng, 0.1);
            run("conv2d grouped", {x, w, b},
                probed([=] { return conv2d<double>(x, w, b, 2, 1, 2); }, rng));
        }
        {
            auto x = randn_leaf<double>({1, 3, 6, 6}, rng, 0.5);
            auto w = randn_leaf<double>({3, 1, 3, 3}, rng, 0.3);
            auto b = randn_leaf<double>({3}, rng, 0.1);
            run("conv2d depthwise", {x, w, b},
                probed([=] { return conv2d<double>(x, w, b, 1, 1, 3); }, rng));
        }
        {
            auto x = randn_leaf<double>({2, 3, 7}, rng, 1.0);
            auto g = randn_leaf<double>({7}, rng, 0.3);
            for (auto& v : g->data) v += 1.0;
            auto b = randn_leaf<double>({7}, rng, 0.2);
            run("layer_norm", {x, g, b},
                probed([=] { return layer_norm_lastdim<double>(x, g, b); }, rng));
        }
        {
            auto x = randn_leaf<double>({3, 9}, rng, 1.2);
            run("gelu", {x}, probed([=] { return gelu(x); }, rng));
        }
        {
            auto x = randn_leaf<double>({2, 5, 7}, rng, 1.0);
            run("softmax last", {x}, probed([=] { return softmax(x, 2); }, rng));
            run("softmax mid", {x}, probed([=] { return softmax(x, 1); }, rng));
        }
        {
            auto a = randn_leaf<double>({3, 4}, rng, 0.8);
            auto b = randn_leaf<double>({4, 5}, rng, 0.8);
            run("matmul", {a, b}, probed([=] { return matmul(a, b); }, rng));
            auto x = randn_leaf<double>({2, 3, 4}, rng, 0.8);
            auto w = randn_leaf<double>({4, 6}, rng, 0.5);
            auto bias = randn_leaf<double>({6}, rng, 0.3);
            run("linear", {x, w, bias}, probed([=] { return linear(x, w, bias); }, rng));
        }
        {
            auto x = randn_leaf<double>({2, 5, 8}, rng, 1.0);
            auto g = randn_leaf<double>({8}, rng, 0.4);
            auto b = randn_leaf<double>({8}, rng, 0.4);
            run("grn", {x, g, b}, probed([=] { return grn_nlc<double>(x, g, b); }, rng));
        }
        {
            auto p = make_block_params<double>(6, rng);
            for (auto& v : p.grn_g->data) v = rng.normal() * 0.3;
            for (auto& v : p.grn_b->data) v = rng.normal() * 0.3;
            auto x = randn_leaf<double>({1, 6, 8, 8}, rng, 0.7);
            std::vector<Ptr<double>> leaves = {x,      p.dw_w, p.dw_b, p.ln_g, p.ln_b, p.w1,
                                               p.b1,   p.grn_g, p.grn_b, p.w2,   p.b2};
            run("convnext block", leaves, probed([=] { return block_forward(x, p); }, rng));
        }
        {
            auto p = make_fusion_block_params<double>(6, rng);
            auto img = randn_leaf<double>({1, 6, 2, 2}, rng, 0.8);
            auto tok = randn_leaf<double>({1, 5, 6}, rng, 0.8);
            std::vector<Ptr<double>> leaves = {img,      tok,      p.ln_q_g, p.ln_q_b, p.ln_t_g,
                                               p.ln_t_b, p.wq,     p.wk,     p.wv,     p.wo};
            run("cross-attention block", leaves,
                probed([=] { return cross_attention_block(img, tok, p, 2); }, rng));
        }
        {
            auto p = make_embed_params<double>(5, 8, rng);
            auto x = randn_leaf<double>({2, 5}, rng, 1.0);
            std::vector<Ptr<double>> leaves = {x, p.dir, p.pos, p.w1, p.b1, p.w2, p.b2};
            run("embed_lab", leaves, probed([=] { return embed_lab(x, p); }, rng));
        }
        {
            auto logits = randn_leaf<double>({4, 3}, rng, 1.5);
            const std::vector<int> labels = {0, 2, 1, 0};
            run("ce_loss", {logits}, [&] { return ce_loss(logits, labels); });
        }
        {
            std::vector<float> chw(3 * 64 * 64);
            for (auto& v : chw) v = static_cast<float>(rng.uniform());
            const auto target = make_recon_target(chw, 64, 64);
            const std::vector<ReconTarget> targets = {target};
            const std::vector<PatchMask> masks = {generate_mask(seed, 0.5, 2, 2)};
            auto pred = randn_leaf<double>({1, 3 * 32 * 32, 2, 2}, rng, 0.6);
            run("recon_loss", {pred}, [&] { return recon_loss(pred, targets, masks); });
        }
    }
    const double el = seconds_since(t0);
    require(el < kBudgetGrad, "gradient suite took " + fmt(el) + "s, budget " + fmt(kBudgetGrad));
    std::cout << "      worst rel err " << fmt(worst) << "\n";
}

void check_sparse_oracle(Ctx&) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(4242);
    for (int i = 0; i < 100; ++i) {
        int groups = 1, cin = 0, cout = 0;
        switch (rng.next_u32() % 3) {
            case 0:
                cin = 1 + static_cast<int>(rng.next_u32() % 4);
                cout = 1 + static_cast<int>(rng.next_u32() % 4);
                break;
            case 1:
                groups = 2;
                cin = 2 * (1 + static_cast<int>(rng.next_u32() % 2));
                cout = 2 * (1 + static_cast<int>(rng.next_u32() % 2));
                break;
            default:
                cin = cout = groups = 1 + static_cast<int>(rng.next_u32() % 4);
                break;
        }
        const int n = 1 + static_cast<int>(rng.next_u32() % 2);
        const int k = 1 + 2 * static_cast<int>(rng.next_u32() % 2);
        const int stride = 1 + static_cast<int>(rng.next_u32() % 2);
        const int pad = static_cast<int>(rng.next_u32() % (static_cast<unsigned>(k / 2) + 1));
        const int h = k + static_cast<int>(rng.next_u32() % 6);
        const int w = k + static_cast<int>(rng.next_u32() % 6);
        const int oh = (h + 2 * pad - k) / stride + 1;
        const int ow = (w + 2 * pad - k) / stride + 1;

        auto x = randn_leaf<double>({n, cin, h, w}, rng, 1.0, false);
        auto wt = randn_leaf<double>({cout, cin / groups, k, k}, rng, 0.5, false);
        auto b = randn_leaf<double>({cout}, rng, 0.2, false);

        auto vin = std::make_shared<std::vector<std::uint8_t>>(
            static_cast<std::size_t>(n) * h * w);
        for (auto& v : *vin) v = rng.bernoulli(0.6) ? 1 : 0;
        auto vout = std::make_shared<std::vector<std::uint8_t>>(
            static_cast<std::size_t>(n) * oh * ow);
        for (auto& v : *vout) v = rng.bernoulli(0.6) ? 1 : 0;

        auto sparse = masked_conv2d<double>(x, vin, vout, wt, b, stride, pad, groups);

        auto xz = zeros<double>({n, cin, h, w}, false);
        xz->data = x->data;
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < cin; ++c)
                for (int p = 0; p < h * w; ++p)
                    if (!(*vin)[static_cast<std::size_t>(ni) * h * w + p])
                        xz->data[(static_cast<std::size_t>(ni) * cin + c) * h * w + p] = 0;
        auto dense = conv2d<double>(xz, wt, b, stride, pad, groups);
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < oh * ow; ++p)
                    if (!(*vout)[static_cast<std::size_t>(ni) * oh * ow + p])
                        dense->data[(static_cast<std::size_t>(ni) * cout + c) * oh * ow + p] = 0;

        for (std::size_t j = 0; j < sparse->numel(); ++j) {
            const double d = std::abs(sparse->data[j] - dense->data[j]);
            require(d <= kSparseTol, "case " + std::to_string(i) + " elem " + std::to_string(j) +
                                         " differs by " + fmt(d));
        }
    }

    // with nothing hidden, the gated encoder must match the dense one bitwise
    EncoderConfig cfg;
    cfg.stage_dims = {8, 16, 32, 64};
    cfg.stage_depths = {1, 1, 2, 1};
    Rng prng(7);
    auto params = make_encoder_params<float>(cfg, prng);
    auto x = zeros<float>({2, 3, 64, 64}, false);
    for (auto& v : x->data) v = static_cast<float>(prng.uniform());
    PatchMask all_vis;
    all_vis.gh = all_vis.gw = 2;
    all_vis.masked.assign(4, 0);
    const auto masks = build_encoder_masks({all_vis, all_vis});
    auto y_sparse = encoder_forward(x, cfg, params, 4, &masks);
    auto y_dense = encoder_forward(x, cfg, params, 4, nullptr);
    require(y_sparse->shape == y_dense->shape, "all-visible shape drift");
    require(std::memcmp(y_sparse->data.data(), y_dense->data.data(),
                        y_dense->numel() * sizeof(float)) == 0,
            "all-visible sparse encoder != dense encoder");

    const double el = seconds_since(t0);
    require(el < kBudgetSparse, "sparse oracle took " + fmt(el) + "s");
}

void check_mask_locality(Ctx&) {
    Rng rng(77);
    std::vector<ReconTarget> targets;
    std::vector<PatchMask> masks;
    for (int n = 0; n < 2; ++n) {
        std::vector<float> chw(3 * 64 * 64);
        for (auto& v : chw) v = static_cast<float>(rng.uniform());
        targets.push_back(make_recon_target(chw, 64, 64));
        masks.push_back(generate_mask(100 + static_cast<std::uint64_t>(n), 0.5, 2, 2));
    }
    const int P = 3 * 32 * 32;
    auto pred = randn_leaf<float>({2, P, 2, 2}, rng, 0.5);
    auto loss = recon_loss(pred, targets, masks);
    loss->backward();
    for (int n = 0; n < 2; ++n) {
        require(masks[static_cast<std::size_t>(n)].masked_count() == 2, "expected 2 of 4 masked");
        for (int cell = 0; cell < 4; ++cell) {
            const bool hidden = masks[static_cast<std::size_t>(n)].masked[
                static_cast<std::size_t>(cell)] != 0;
            bool any = false;
            for (int p = 0; p < P; ++p) {
                const float g = pred->grad[(static_cast<std::size_t>(n) * P + p) * 4 +
                                           static_cast<std::size_t>(cell)];
                if (!hidden) {
                    require(g == 0.0f, "visible cell " + std::to_string(cell) + " of image " +
                                           std::to_string(n) + " has gradient " + fmt(g));
                } else if (g != 0.0f) {
                    any = true;
                }
            }
            if (hidden) require(any, "hidden cell received no gradient at all");
        }
    }
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const int got = generate_mask(seed, 0.6, 7, 7).masked_count();
        require(got == 29, "ratio 0.6 on a 7x7 grid masked " + std::to_string(got) + ", want 29");
    }
}

void check_attention_contracts(Ctx&) {
    Rng rng(55);
    auto q = randn_leaf<float>({2, 5, 8}, rng, 1.0, false);
    auto k = randn_leaf<float>({2, 7, 8}, rng, 1.0, false);
    auto v = randn_leaf<float>({2, 7, 8}, rng, 1.0, false);
    for (int heads : {1, 2, 4}) {
        std::vector<float> probs;
        attention(q, k, v, heads, &probs);
        const std::size_t rows = probs.size() / 7;
        require(rows == static_cast<std::size_t>(2 * heads * 5), "probs layout drift");
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0;
            for (int j = 0; j < 7; ++j) s += probs[r * 7 + static_cast<std::size_t>(j)];
            require(std::abs(s - 1.0) <= kRowSumTol,
                    "row " + std::to_string(r) + " sums to " + fmt(s));
        }
    }
    auto k1 = randn_leaf<float>({2, 1, 8}, rng, 1.0, false);
    auto v1 = randn_leaf<float>({2, 1, 8}, rng, 1.0, false);
    for (int heads : {1, 2, 4}) {
        auto out = attention(q, k1, v1, heads);
        for (int n = 0; n < 2; ++n)
            for (int l = 0; l < 5; ++l)
                for (int c = 0; c < 8; ++c) {
                    const float got = out->data[(static_cast<std::size_t>(n) * 5 +
                                                 static_cast<std::size_t>(l)) * 8 +
                                                static_cast<std::size_t>(c)];
                    const float want = v1->data[static_cast<std::size_t>(n) * 8 +
                                                static_cast<std::size_t>(c)];
                    require(got == want, "single-token attention is not the value row");
                }
    }
    auto img = randn_leaf<float>({2, 6, 2, 2}, rng, 1.0, false);
    auto tok = randn_leaf<float>({2, 4, 6}, rng, 1.0, false);
    const auto snapshot = tok->data;
    std::vector<FusionBlockParams<float>> blocks;
    blocks.push_back(make_fusion_block_params<float>(6, rng));
    blocks.push_back(make_fusion_block_params<float>(6, rng));
    fusion_stack(img, tok, blocks, 2);
    require(tok->data == snapshot, "numeric tokens were modified by the fusion stack");
}

void check_metrics_oracle(Ctx&) {
    Rng rng(909);
    for (int inst = 0; inst < 500; ++inst) {
        const int n = 4 + static_cast<int>(rng.next_u32() % 40);
        std::vector<int> labels(static_cast<std::size_t>(n));
        labels[0] = 0;
        labels[1] = 1;  // both classes guaranteed
        for (int i = 2; i < n; ++i) labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5);
        std::vector<double> scores(static_cast<std::size_t>(n));
        for (auto& s : scores)
            s = rng.bernoulli(0.5) ? static_cast<double>(rng.next_u32() % 7) / 6.0
                                   : rng.uniform();

        double u = 0;
        long pos = 0, neg = 0;
        for (int i = 0; i < n; ++i) {
            if (!labels[static_cast<std::size_t>(i)]) continue;
            ++pos;
            for (int j = 0; j < n; ++j) {
                if (labels[static_cast<std::size_t>(j)]) continue;
                const double si = scores[static_cast<std::size_t>(i)];
                const double sj = scores[static_cast<std::size_t>(j)];
                u += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
            }
        }
        neg = n - pos;
        const double mw = u / (static_cast<double>(pos) * static_cast<double>(neg));
        const double a = auc(scores, labels);
        require(std::abs(a - mw) <= kAucTol,
                "auc " + fmt(a) + " vs pairwise " + fmt(mw) + " at instance " +
                    std::to_string(inst));

        const auto rep = evaluate_scores(scores, labels);
        long tp = 0, tn = 0, fp = 0, fn = 0;
        for (int i = 0; i < n; ++i) {
            const int pred = scores[static_cast<std::size_t>(i)] > 0.5 ? 1 : 0;
            const int y = labels[static_cast<std::size_t>(i)];
            (pred && y ? tp : pred && !y ? fp : !pred && y ? fn : tn) += 1;
        }
        require(rep.confusion.tp == tp && rep.confusion.tn == tn && rep.confusion.fp == fp &&
                    rep.confusion.fn == fn,
                "confusion recount mismatch at instance " + std::to_string(inst));
        const double acc = static_cast<double>(tp + tn) / static_cast<double>(n);
        require(std::abs(rep.acc - acc) <= 1e-15, "accuracy recount mismatch");
    }
}

void check_pretrain_progress(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    run_ok(c, "synth --n 64 --seed 601 --coupling xor --out-dir prog_data");
    run_ok(c,
           "pretrain --manifest prog_data/manifest.csv --out prog.nvc1 --log prog.csv "
           "--epochs 50 --warmup 5 --seed 602");
    const auto rows = read_log(c.work / "prog.csv");
    require(rows.size() == 50, "expected 50 log rows, got " + std::to_string(rows.size()));
    const double first = rows.front().loss, last = rows.back().loss;
    require(last <= kHalving * first,
            "final loss " + fmt(last) + " > " + fmt(kHalving) + " x first " + fmt(first));
    const double el = seconds_since(t0);
    require(el < kBudgetPretrain, "pretraining run took " + fmt(el) + "s");
    std::cout << "      loss " << fmt(first) << " -> " << fmt(last) << " over 50 epochs, "
              << fmt(el) << "s\n";
}

void check_directional(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    ensure_transfer_fixture(c);
    run_ok(c, "synth --n 640 --seed 701 --coupling xor --size 64 --out-dir xor_data");
    c.xor_dir = c.work / "xor_data";

    auto train_and_eval = [&](const std::string& arch) {
        run_ok(c, "finetune --manifest xor_data/manifest.csv --arch " + arch +
                      " --init-from pre.nvc1 --out ft_" + arch + ".nvc1 --log ft_" + arch +
                      ".csv --epochs 60 --warmup 5 --modality-dropout-p 0 "
                      "--eval-frac 0.2 --split-seed 1 --seed 21 --size 64");
        run_ok(c, "eval --manifest xor_data/manifest.csv --checkpoint ft_" + arch +
                      ".nvc1 --report rep_" + arch + ".json --eval-frac 0.2 --split-seed 1");
        return report_acc(c.work / ("rep_" + arch + ".json"));
    };
    const double fused = train_and_eval("fused");
    const double vision = train_and_eval("vision_only");
    const double numeric = train_and_eval("numeric_only");
    std::cout << "      eval acc: fused " << fmt(fused) << ", vision-only " << fmt(vision)
              << ", numeric-only " << fmt(numeric) << "\n";

    require(fused >= kAccFloor, "fused acc " + fmt(fused) + " below " + fmt(kAccFloor));
    require(fused >= vision + kAccMargin,
            "fused " + fmt(fused) + " does not lead vision-only " + fmt(vision) + " by " +
                fmt(kAccMargin));
    require(fused >= numeric + kAccMargin,
            "fused " + fmt(fused) + " does not lead numeric-only " + fmt(numeric) + " by " +
                fmt(kAccMargin));
    const double el = seconds_since(t0);
    require(el < kBudgetDirectional, "directional check took " + fmt(el) + "s");
}

void check_ablations(Ctx& c) {
    ensure_transfer_fixture(c);
    run_ok(c, "synth --n 320 --seed 801 --coupling xor --size 64 --out-dir abl_data");
    double with_sum = 0, without_sum = 0;
    for (int seed : {31, 32, 33}) {
        for (const bool with : {true, false}) {
            const std::string tag = (with ? "w" : "s") + std::to_string(seed);
            std::string args = "finetune --manifest abl_data/manifest.csv --arch fused --out a_" +
                               tag + ".nvc1 --log a_" + tag +
                               ".csv --epochs 40 --warmup 5 --modality-dropout-p 0 "
                               "--eval-frac 0.2 --split-seed 2 --size 64 --seed " +
                               std::to_string(seed);
            if (with) args += " --init-from pre.nvc1";
            run_ok(c, args);
            run_ok(c, "eval --manifest abl_data/manifest.csv --checkpoint a_" + tag +
                          ".nvc1 --report a_" + tag + ".json --eval-frac 0.2 --split-seed 2");
            const double acc = report_acc(c.work / ("a_" + tag + ".json"));
            (with ? with_sum : without_sum) += acc;
        }
    }
    const double with_mean = with_sum / 3.0, without_mean = without_sum / 3.0;
    std::cout << "      mean eval acc over 3 seeds: transfer " << fmt(with_mean) << ", scratch "
              << fmt(without_mean) << "\n";
    require(with_mean >= without_mean - kTransferSlack,
            "transfer mean " + fmt(with_mean) + " trails scratch mean " + fmt(without_mean) +
                " by more than " + fmt(kTransferSlack));
}

void check_determinism(Ctx& c) {
    const std::string tiny = " --dims 8,16,32,64 --depths 1,1,1,1 --size 64";
    run_ok(c, "synth --n 16 --seed 911 --coupling xor --size 64 --out-dir det_data");
    for (const char* run : {"a", "b"}) {
        run_ok(c, std::string("pretrain --manifest det_data/manifest.csv --out det_p_") + run +
                      ".nvc1 --log det_p_" + run +
                      ".csv --decoder-dim 32 --epochs 3 --warmup 1 --batch-size 4 --seed 912" + tiny);
        run_ok(c, std::string("finetune --manifest det_data/manifest.csv --arch fused "
                              "--init-from det_p_a.nvc1 --out det_f_") +
                      run + ".nvc1 --log det_f_" + run +
                      ".csv --epochs 3 --warmup 1 --batch-size 4 --modality-dropout-p 0.2 "
                      "--eval-frac 0.25 --split-seed 3 --seed 913" +
                      tiny);
        run_ok(c, std::string("eval --manifest det_data/manifest.csv --checkpoint det_f_") + run +
                      ".nvc1 --report det_r_" + run + ".json --eval-frac 0.25 --split-seed 3");
    }
    for (const char* f : {"det_p", "det_f"}) {
        require(same_bytes(c.work / (std::string(f) + "_a.nvc1"),
                           c.work / (std::string(f) + "_b.nvc1")),
                std::string(f) + " checkpoints differ between identical runs");
        require(same_bytes(c.work / (std::string(f) + "_a.csv"),
                           c.work / (std::string(f) + "_b.csv")),
                std::string(f) + " logs differ between identical runs");
    }
    require(same_bytes(c.work / "det_r_a.json", c.work / "det_r_b.json"),
            "eval reports differ between identical runs");
}

void check_checkpoint_roundtrip(Ctx& c) {
    ClassifierConfig cfg;
    cfg.encoder.stage_dims = {4, 8, 12, 16};
    cfg.encoder.stage_depths = {1, 1, 1, 1};
    cfg.fusion_blocks = 1;
    cfg.heads = 2;
    auto model = make_classifier_model(cfg, 5);
    for (int i = 0; i < kLabDim; ++i) {
        model.stats.mean[static_cast<std::size_t>(i)] = 0.5 * i;
        model.stats.stdev[static_cast<std::size_t>(i)] = 1.0 + 0.1 * i;
    }
    model.has_stats = true;
    const fs::path ck_path = c.work / "round.nvc1";
    save_checkpoint(ck_path.string(), model.params, json{{"stage", "finetune"}}, &model.stats);
    const auto ck = load_checkpoint(ck_path.string());
    require(ck.has_stats, "stats dropped in round trip");
    for (int i = 0; i < kLabDim; ++i) {
        require(ck.stats.mean[static_cast<std::size_t>(i)] ==
                        model.stats.mean[static_cast<std::size_t>(i)] &&
                    ck.stats.stdev[static_cast<std::size_t>(i)] ==
                        model.stats.stdev[static_cast<std::size_t>(i)],
                "normalization stats changed in round trip");
    }
    require(ck.tensors.size() == model.params.size(), "tensor table size drift");
    for (const auto& [name, p] : model.params) {
        const auto it = ck.tensors.find(name);
        require(it != ck.tensors.end(), "missing tensor " + name);
        require(it->second.first == p->shape, "shape drift on " + name);
        require(it->second.second.size() == p->data.size() &&
                    std::memcmp(it->second.second.data(), p->data.data(),
                                p->data.size() * sizeof(float)) == 0,
                "bytes drift on " + name);
    }

    // stage transfer: encoder comes over bitwise, decoder stays behind
    auto pm = make_pretrain_model(cfg.encoder, 8, 17);
    const fs::path pre_path = c.work / "round_pre.nvc1";
    save_checkpoint(pre_path.string(), pm.params, json{{"stage", "pretrain"}}, nullptr);
    const auto pre = load_checkpoint(pre_path.string());

    auto fresh = make_classifier_model(cfg, 99);
    std::vector<std::pair<std::string, std::vector<float>>> before;
    for (const auto& [name, p] : fresh.params) before.emplace_back(name, p->data);

    std::size_t enc_names = 0;
    for (const auto& [name, p] : fresh.params)
        if (name.rfind("encoder.", 0) == 0) ++enc_names;
    const std::size_t copied = load_into(fresh.params, pre, "encoder.");
    require(copied == enc_names && copied > 0,
            "copied " + std::to_string(copied) + " tensors, expected " +
                std::to_string(enc_names));

    bool saw_decoder = false;
    for (const auto& name : pre.order) {
        if (name.rfind("decoder.", 0) == 0) {
            saw_decoder = true;
            require(!fresh.params.has(name), "decoder tensor leaked into the classifier: " + name);
        }
    }
    require(saw_decoder, "pretrain checkpoint carries no decoder tensors");

    for (std::size_t i = 0; i < fresh.params.size(); ++i) {
        const auto& [name, p] = fresh.params.at(i);
        if (name.rfind("encoder.", 0) == 0) {
            const auto& src = pre.tensors.at(name).second;
            require(src.size() == p->data.size() &&
                        std::memcmp(src.data(), p->data.data(), src.size() * sizeof(float)) == 0,
                    "transferred tensor not bitwise identical: " + name);
        } else {
            require(before[i].second == p->data, "non-encoder tensor disturbed: " + name);
        }
    }
}

struct Check {
    std::string title;
    std::function<void(Ctx&)> fn;
};

}  // namespace

// With no arguments every check runs; numeric arguments select a subset.
int main(int argc, char** argv) {
    Ctx ctx;
    if (const char* bin = std::getenv("MEDNVC_BIN")) ctx.bin = bin;
    std::string tmpl = (fs::temp_directory_path() / "mednvc_accept_XXXXXX").string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    require(mkdtemp(buf.data()) != nullptr, "cannot create scratch directory");
    ctx.work = buf.data();

    const std::vector<Check> checks = {
        {"gradients agree with central differences, 64-bit, 3 seeds per op", check_gradients},
        {"gated conv matches zero-fill oracle; all-visible equals dense bitwise",
         check_sparse_oracle},
        {"reconstruction loss ignores visible cells; 7x7 grid at 0.6 masks 29",
         check_mask_locality},
        {"attention rows are stochastic; single-token is identity; tokens pass through",
         check_attention_contracts},
        {"AUC equals the pairwise statistic; accuracy equals its recount",
         check_metrics_oracle},
        {"pretraining halves the masked reconstruction loss in 50 epochs",
         check_pretrain_progress},
        {"fused model beats both single-modality baselines on coupled data",
         check_directional},
        {"ablation hooks run; transfer is not worse than scratch over 3 seeds",
         check_ablations},
        {"identical seeded runs produce byte-identical artifacts", check_determinism},
        {"checkpoints round-trip bitwise; stage transfer moves only the encoder",
         check_checkpoint_roundtrip},
    };

    std::vector<bool> selected(checks.size(), argc <= 1);
    for (int a = 1; a < argc; ++a) {
        const int idx = std::atoi(argv[a]);
        if (idx >= 1 && idx <= static_cast<int>(checks.size()))
            selected[static_cast<std::size_t>(idx - 1)] = true;
    }

    int failed = 0, ran = 0;
    for (std::size_t i = 0; i < checks.size(); ++i) {
        if (!selected[i]) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        std::string verdict = "PASS", detail;
        try {
            checks[i].fn(ctx);
        } catch (const std::exception& e) {
            verdict = "FAIL";
            detail = e.what();
            ++failed;
        }
        std::cout << "[" << (i + 1 < 10 ? " " : "") << i + 1 << "/10] " << verdict << "  "
                  << fmt(seconds_since(t0)) << "s  " << checks[i].title << "\n";
        if (!detail.empty()) std::cout << "       " << detail << "\n";
        std::cout.flush();
    }

    if (failed == 0) {
        fs::remove_all(ctx.work);
        std::cout << "acceptance: " << ran << "/" << ran << " passed\n";
        return 0;
    }
    std::cout << "acceptance: " << (ran - failed) << "/" << ran << " passed, artifacts kept in "
              << ctx.work.string() << "\n";
    return 1;
}
