// mednvc: two-stage pipeline driver. Subcommands synthesize coupled data,
// pretrain the masked autoencoder, finetune the multimodal classifier,
// evaluate checkpoints, and render reconstruction triptychs. Exit codes:
// 0 success, 1 runtime/training failure, 2 usage/validation error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mednvc/dataio.hpp"
#include "mednvc/fusion.hpp"
#include "mednvc/maskae.hpp"
#include "mednvc/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mednvc;

namespace {

// Output paths are probed before any compute so a bad flag fails fast
// without clobbering existing files.
void ensure_writable_file(const std::string& path) {
    if (path.empty()) throw std::invalid_argument("output path is empty");
    const bool existed = fs::exists(path);
    std::ofstream f(path, std::ios::app | std::ios::binary);
    if (!f) throw std::invalid_argument("cannot write to '" + path + "'");
    f.close();
    if (!existed) fs::remove(path);
}

void ensure_writable_dir(const std::string& dir) {
    if (dir.empty()) throw std::invalid_argument("output directory is empty");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::invalid_argument("cannot create directory '" + dir + "': " + ec.message());
    const fs::path probe = fs::path(dir) / ".write_probe";
    std::ofstream f(probe);
    if (!f) throw std::invalid_argument("directory '" + dir + "' is not writable");
    f.close();
    fs::remove(probe);
}

EncoderConfig encoder_from(const std::vector<int>& dims, const std::vector<int>& depths) {
    if (dims.size() != 4 || depths.size() != 4) {
        throw std::invalid_argument("--dims and --depths need exactly 4 comma-separated values");
    }
    EncoderConfig cfg;
    std::copy(dims.begin(), dims.end(), cfg.stage_dims.begin());
    std::copy(depths.begin(), depths.end(), cfg.stage_depths.begin());
    validate(cfg);
    return cfg;
}

void check_image_size(int size) {
    if (size < EncoderConfig::total_stride || size % EncoderConfig::total_stride != 0) {
        throw std::invalid_argument("--size must be a positive multiple of " +
                                    std::to_string(EncoderConfig::total_stride) + ", got " +
                                    std::to_string(size));
    }
}

std::ofstream open_log(const std::string& path) {
    std::ofstream log(path, std::ios::binary | std::ios::trunc);
    if (!log) throw std::invalid_argument("cannot write to '" + path + "'");
    log << "epoch,mean_loss,lr\n";
    return log;
}

// Flushed per row so progress survives interruption and is visible mid-run.
void log_row(std::ofstream& log, int epoch, double loss, double lr) {
    log << epoch << ',' << std::setprecision(17) << loss << ',' << lr << std::endl;
}

void require_field(const json& cfg, const char* key, const std::string& what) {
    if (!cfg.contains(key)) {
        throw checkpoint_error(what + ": config echo is missing '" + std::string(key) + "'");
    }
}

EncoderConfig encoder_from_echo(const json& cfg, const std::string& what) {
    require_field(cfg, "dims", what);
    require_field(cfg, "depths", what);
    return encoder_from(cfg["dims"].get<std::vector<int>>(),
                        cfg["depths"].get<std::vector<int>>());
}

// Named-field comparison for --init-from: the encoder geometry must match.
void check_encoder_match(const json& ck_cfg, const EncoderConfig& run) {
    const EncoderConfig from_ck = encoder_from_echo(ck_cfg, "init-from");
    auto render = [](const auto& a) {
        std::string s;
        for (int v : a) s += (s.empty() ? "" : ",") + std::to_string(v);
        return s;
    };
    if (from_ck.stage_dims != run.stage_dims) {
        throw std::invalid_argument("init-from: dims mismatch: checkpoint has " +
                                    render(from_ck.stage_dims) + ", run uses " +
                                    render(run.stage_dims));
    }
    if (from_ck.stage_depths != run.stage_depths) {
        throw std::invalid_argument("init-from: depths mismatch: checkpoint has " +
                                    render(from_ck.stage_depths) + ", run uses " +
                                    render(run.stage_depths));
    }
}

std::vector<std::uint8_t> to_gray(const std::vector<float>& plane) {
    std::vector<std::uint8_t> g(plane.size());
    for (std::size_t i = 0; i < plane.size(); ++i) {
        const long v = std::lround(static_cast<double>(plane[i]) * 255.0);
        g[i] = static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
    }
    return g;
}

// ---- subcommand flag bundles -------------------------------------------------

struct SynthFlags {
    int n = 64;
    std::uint64_t seed = 0;
    std::string coupling = "xor";
    std::string out_dir;
    int size = 224;
};

struct PretrainFlags {
    std::string manifest, out, log;
    std::vector<int> dims = {32, 64, 128, 256};
    std::vector<int> depths = {1, 1, 2, 1};
    int decoder_dim = 128;
    double mask_ratio = 0.6;
    int epochs = 50, warmup = 5, batch_size = 8;
    double peak_lr = 5e-4, floor_lr = 5e-6;
    bool no_augment = false;
    int size = 224;
    std::uint64_t seed = 0;
};

struct FinetuneFlags {
    std::string manifest, out, log, init_from;
    std::string arch = "fused";
    std::vector<int> dims = {32, 64, 128, 256};
    std::vector<int> depths = {1, 1, 2, 1};
    int fusion_blocks = 2, heads = 4;
    int epochs = 60, warmup = 5, batch_size = 8;
    double peak_lr = 2e-4, floor_lr = 2e-6;
    double modality_dropout_p = 0.2;
    double sentinel = kSentinel;
    double eval_frac = 0.2;
    std::uint64_t split_seed = 0, seed = 0;
    int size = 224;
};

struct EvalFlags {
    std::string manifest, checkpoint, report;
    double eval_frac = 0.0;
    std::uint64_t split_seed = 0;
    int size = 0;  // 0 = the size the checkpoint was trained with
};

struct ReconstructFlags {
    std::string manifest, checkpoint, out_dir;
    double mask_ratio = -1.0;  // <0 = the ratio the checkpoint was trained with
    int count = 0;             // 0 = all
    std::uint64_t seed = 0;
};

// ---- commands ------------------------------------------------------------------

int cmd_synth(const SynthFlags& f) {
    const Coupling coupling = coupling_from_string(f.coupling);
    if (f.size < 8) throw std::invalid_argument("--size too small: " + std::to_string(f.size));
    ensure_writable_dir(f.out_dir);
    const auto samples = synth_dataset(f.n, f.seed, coupling, f.size);
    write_dataset(f.out_dir, samples);
    std::cout << "synth: wrote " << samples.size() << " images + manifest.csv to " << f.out_dir
              << "\n";
    return 0;
}

int cmd_pretrain(const PretrainFlags& f) {
    PretrainConfig cfg;
    cfg.encoder = encoder_from(f.dims, f.depths);
    cfg.decoder_dim = f.decoder_dim;
    cfg.mask_ratio = f.mask_ratio;
    cfg.batch_size = f.batch_size;
    cfg.augment = !f.no_augment;
    cfg.schedule = {f.epochs, f.warmup, f.peak_lr, f.floor_lr};
    cfg.seed = f.seed;
    validate(cfg.schedule);
    check_image_size(f.size);
    if (cfg.decoder_dim < 1) throw std::invalid_argument("--decoder-dim must be positive");
    if (cfg.batch_size < 1) throw std::invalid_argument("--batch-size must be positive");
    if (!(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0)) {
        throw std::invalid_argument("--mask-ratio must be in (0,1), got " +
                                    std::to_string(cfg.mask_ratio));
    }
    ensure_writable_file(f.out);
    if (!f.log.empty()) ensure_writable_file(f.log);

    const json echo = {{"stage", "pretrain"},
                       {"dims", f.dims},
                       {"depths", f.depths},
                       {"decoder_dim", cfg.decoder_dim},
                       {"mask_ratio", cfg.mask_ratio},
                       {"epochs", f.epochs},
                       {"warmup_epochs", f.warmup},
                       {"batch_size", cfg.batch_size},
                       {"peak_lr", f.peak_lr},
                       {"floor_lr", f.floor_lr},
                       {"augment", cfg.augment},
                       {"seed", cfg.seed},
                       {"image_size", f.size}};

    const auto images = load_dataset(f.manifest, f.size);
    PretrainModel model = make_pretrain_model(cfg.encoder, cfg.decoder_dim, cfg.seed);
    Lion<float> opt(model.params, cfg.lion);
    std::ofstream log;
    if (!f.log.empty()) log = open_log(f.log);
    for (int e = 0; e < f.epochs; ++e) {
        const double loss = pretrain_epoch(model, images, cfg, opt, e);
        const double lr = lr_at(cfg.schedule, e);
        if (log.is_open()) log_row(log, e, loss, lr);
        std::cout << "epoch " << (e + 1) << "/" << f.epochs << " loss " << std::setprecision(6)
                  << loss << " lr " << lr << std::endl;
    }
    save_checkpoint(f.out, model.params, echo, nullptr);
    std::cout << "pretrain: saved " << f.out << "\n";
    return 0;
}

int cmd_finetune(const FinetuneFlags& f) {
    ClassifierConfig ccfg;
    ccfg.encoder = encoder_from(f.dims, f.depths);
    ccfg.arch = arch_from_string(f.arch);
    ccfg.fusion_blocks = f.fusion_blocks;
    ccfg.heads = f.heads;
    validate(ccfg);
    FinetuneConfig cfg;
    cfg.model = ccfg;
    cfg.batch_size = f.batch_size;
    cfg.modality_dropout_p = f.modality_dropout_p;
    cfg.sentinel = f.sentinel;
    cfg.schedule = {f.epochs, f.warmup, f.peak_lr, f.floor_lr};
    cfg.seed = f.seed;
    validate(cfg.schedule);
    check_image_size(f.size);
    if (cfg.batch_size < 1) throw std::invalid_argument("--batch-size must be positive");
    if (!(cfg.modality_dropout_p >= 0.0 && cfg.modality_dropout_p <= 1.0)) {
        throw std::invalid_argument("--modality-dropout-p must be in [0,1], got " +
                                    std::to_string(cfg.modality_dropout_p));
    }
    if (f.eval_frac < 0.0 || f.eval_frac >= 1.0) {
        throw std::invalid_argument("--eval-frac must be in [0,1), got " +
                                    std::to_string(f.eval_frac));
    }
    ensure_writable_file(f.out);
    if (!f.log.empty()) ensure_writable_file(f.log);

    std::optional<Checkpoint> init;
    if (!f.init_from.empty()) {
        init = load_checkpoint(f.init_from);
        check_encoder_match(init->config, ccfg.encoder);
    }

    const json echo = {{"stage", "finetune"},
                       {"arch", f.arch},
                       {"dims", f.dims},
                       {"depths", f.depths},
                       {"fusion_blocks", ccfg.fusion_blocks},
                       {"heads", ccfg.heads},
                       {"classes", ccfg.classes},
                       {"numeric_hidden", ccfg.numeric_hidden},
                       {"epochs", f.epochs},
                       {"warmup_epochs", f.warmup},
                       {"batch_size", cfg.batch_size},
                       {"peak_lr", f.peak_lr},
                       {"floor_lr", f.floor_lr},
                       {"modality_dropout_p", cfg.modality_dropout_p},
                       {"sentinel", cfg.sentinel},
                       {"seed", cfg.seed},
                       {"image_size", f.size},
                       {"eval_frac", f.eval_frac},
                       {"split_seed", f.split_seed},
                       {"init_from", f.init_from.empty() ? json() : json(f.init_from)}};

    const auto all = load_dataset(f.manifest, f.size);
    auto [train, eval_set] = split_dataset(all, f.eval_frac, f.split_seed);
    if (train.empty()) throw std::invalid_argument("split left no training samples");
    std::cout << "finetune: " << train.size() << " train / " << eval_set.size() << " eval samples\n";

    ClassifierModel model = make_classifier_model(ccfg, cfg.seed);
    fit_norm_stats(model, train);
    if (init) {
        const std::size_t copied = load_into(model.params, *init, "encoder.");
        std::cout << "init-from: transferred " << copied << " encoder tensors\n";
    }
    Lion<float> opt(model.params, cfg.lion);
    std::ofstream log;
    if (!f.log.empty()) log = open_log(f.log);
    for (int e = 0; e < f.epochs; ++e) {
        const double loss = finetune_epoch(model, train, cfg, opt, e);
        const double lr = lr_at(cfg.schedule, e);
        if (log.is_open()) log_row(log, e, loss, lr);
        std::cout << "epoch " << (e + 1) << "/" << f.epochs << " loss " << std::setprecision(6)
                  << loss << " lr " << lr << std::endl;
    }
    save_checkpoint(f.out, model.params, echo, &model.stats);
    std::cout << "finetune: saved " << f.out << "\n";
    if (!eval_set.empty()) {
        const EvalReport r = evaluate_model(model, eval_set);
        std::cout << "eval split: n=" << r.n << " acc=" << std::setprecision(6) << r.acc;
        if (r.auc) std::cout << " auc=" << *r.auc;
        std::cout << "\n";
    }
    return 0;
}

int cmd_eval(const EvalFlags& f) {
    if (f.eval_frac < 0.0 || f.eval_frac >= 1.0) {
        throw std::invalid_argument("--eval-frac must be in [0,1), got " +
                                    std::to_string(f.eval_frac));
    }
    ensure_writable_file(f.report);
    const Checkpoint ck = load_checkpoint(f.checkpoint);
    if (!ck.config.contains("stage") || ck.config["stage"] != "finetune") {
        throw std::invalid_argument("eval needs a finetune checkpoint, got stage '" +
                                    ck.config.value("stage", std::string("?")) + "'");
    }
    ClassifierConfig ccfg;
    ccfg.encoder = encoder_from_echo(ck.config, "eval");
    for (const char* k : {"arch", "fusion_blocks", "heads", "classes", "numeric_hidden",
                          "image_size"}) {
        require_field(ck.config, k, "eval");
    }
    ccfg.arch = arch_from_string(ck.config["arch"].get<std::string>());
    ccfg.fusion_blocks = ck.config["fusion_blocks"].get<int>();
    ccfg.heads = ck.config["heads"].get<int>();
    ccfg.classes = ck.config["classes"].get<int>();
    ccfg.numeric_hidden = ck.config["numeric_hidden"].get<int>();
    validate(ccfg);
    const int size = f.size > 0 ? f.size : ck.config["image_size"].get<int>();
    check_image_size(size);
    if (!ck.has_stats) {
        throw checkpoint_error("eval: checkpoint carries no normalization stats");
    }

    ClassifierModel model = make_classifier_model(ccfg, 0);
    load_into(model.params, ck, "", true);
    model.stats = ck.stats;
    model.has_stats = true;

    auto samples = load_dataset(f.manifest, size);
    if (f.eval_frac > 0.0) {
        samples = split_dataset(samples, f.eval_frac, f.split_seed).second;
    }
    if (samples.empty()) throw std::invalid_argument("eval set is empty");
    const EvalReport r = evaluate_model(model, samples);
    if (!r.auc) {
        std::cerr << "warning: eval set has a single class, AUC is undefined\n";
    }

    json report = {{"acc", r.acc},
                   {"auc", r.auc ? json(*r.auc) : json()},
                   {"tp", r.confusion.tp},
                   {"tn", r.confusion.tn},
                   {"fp", r.confusion.fp},
                   {"fn", r.confusion.fn},
                   {"n", r.n},
                   {"config", ck.config}};
    std::ofstream out(f.report, std::ios::binary | std::ios::trunc);
    if (!out) throw std::invalid_argument("cannot write to '" + f.report + "'");
    out << report.dump(2) << "\n";
    out.close();

    std::cout << "eval: n=" << r.n << " acc=" << std::setprecision(6) << r.acc << " auc=";
    if (r.auc) {
        std::cout << *r.auc;
    } else {
        std::cout << "n/a";
    }
    std::cout << "\n";
    return 0;
}

int cmd_reconstruct(const ReconstructFlags& f) {
    ensure_writable_dir(f.out_dir);
    const Checkpoint ck = load_checkpoint(f.checkpoint);
    if (!ck.config.contains("stage") || ck.config["stage"] != "pretrain") {
        throw std::invalid_argument("reconstruct needs a pretrain checkpoint, got stage '" +
                                    ck.config.value("stage", std::string("?")) + "'");
    }
    for (const char* k : {"decoder_dim", "mask_ratio", "image_size"}) {
        require_field(ck.config, k, "reconstruct");
    }
    const EncoderConfig enc = encoder_from_echo(ck.config, "reconstruct");
    const double ratio =
        f.mask_ratio >= 0.0 ? f.mask_ratio : ck.config["mask_ratio"].get<double>();
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("--mask-ratio must be in (0,1), got " + std::to_string(ratio));
    }
    if (f.count < 0) throw std::invalid_argument("--count must be >= 0");
    const int size = ck.config["image_size"].get<int>();

    PretrainModel model = make_pretrain_model(enc, ck.config["decoder_dim"].get<int>(), 0);
    load_into(model.params, ck, "", true);

    const auto samples = load_dataset(f.manifest, size);
    const std::size_t n =
        f.count == 0 ? samples.size()
                     : std::min<std::size_t>(static_cast<std::size_t>(f.count), samples.size());
    for (std::size_t i = 0; i < n; ++i) {
        const ReconViz viz =
            reconstruct_viz(model, samples[i], ratio, derive_seed(f.seed, 0x71C7, i));
        const auto orig = to_gray(viz.original);
        const auto masked = to_gray(viz.masked_view);
        const auto recon = to_gray(viz.recon);
        std::vector<std::uint8_t> strip(static_cast<std::size_t>(viz.h) * viz.w * 3);
        for (int y = 0; y < viz.h; ++y) {
            const std::size_t src = static_cast<std::size_t>(y) * viz.w;
            std::uint8_t* row = strip.data() + static_cast<std::size_t>(y) * viz.w * 3;
            std::copy_n(orig.data() + src, viz.w, row);
            std::copy_n(masked.data() + src, viz.w, row + viz.w);
            std::copy_n(recon.data() + src, viz.w, row + 2 * static_cast<std::size_t>(viz.w));
        }
        char name[32];
        std::snprintf(name, sizeof(name), "recon_%04zu.pgm", i);
        write_pgm((fs::path(f.out_dir) / name).string(), viz.w * 3, viz.h, strip);
    }
    std::cout << "reconstruct: wrote " << n << " triptychs to " << f.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mednvc: masked-autoencoder pretraining + multimodal classification"};
    app.require_subcommand(1);

    SynthFlags sy;
    auto* synth = app.add_subcommand("synth", "write a coupled synthetic dataset");
    synth->add_option("--n", sy.n, "sample count (even, >= 8)");
    synth->add_option("--seed", sy.seed, "generator seed");
    synth->add_option("--coupling", sy.coupling, "xor|vision_only|numeric_only");
    synth->add_option("--out-dir", sy.out_dir, "output directory")->required();
    synth->add_option("--size", sy.size, "image side length");

    PretrainFlags pt;
    auto* pre = app.add_subcommand("pretrain", "self-supervised encoder pretraining");
    pre->add_option("--manifest", pt.manifest, "dataset manifest CSV")->required();
    pre->add_option("--out", pt.out, "checkpoint output path")->required();
    pre->add_option("--log", pt.log, "CSV loss log path");
    pre->add_option("--dims", pt.dims, "4 stage widths")->delimiter(',');
    pre->add_option("--depths", pt.depths, "4 stage depths")->delimiter(',');
    pre->add_option("--decoder-dim", pt.decoder_dim, "decoder width");
    pre->add_option("--mask-ratio", pt.mask_ratio, "masked cell fraction");
    pre->add_option("--epochs", pt.epochs, "training epochs");
    pre->add_option("--warmup", pt.warmup, "warmup epochs");
    pre->add_option("--batch-size", pt.batch_size, "batch size");
    pre->add_option("--peak-lr", pt.peak_lr, "peak learning rate");
    pre->add_option("--floor-lr", pt.floor_lr, "final learning rate");
    pre->add_flag("--no-augment", pt.no_augment, "disable flip/rotation augmentation");
    pre->add_option("--size", pt.size, "image side length (multiple of 32)");
    pre->add_option("--seed", pt.seed, "training seed");

    FinetuneFlags ft;
    auto* fin = app.add_subcommand("finetune", "supervised multimodal training");
    fin->add_option("--manifest", ft.manifest, "dataset manifest CSV")->required();
    fin->add_option("--out", ft.out, "checkpoint output path")->required();
    fin->add_option("--log", ft.log, "CSV loss log path");
    fin->add_option("--init-from", ft.init_from, "pretrain checkpoint for the encoder");
    fin->add_option("--arch", ft.arch, "fused|vision_only|numeric_only");
    fin->add_option("--dims", ft.dims, "4 stage widths")->delimiter(',');
    fin->add_option("--depths", ft.depths, "4 stage depths")->delimiter(',');
    fin->add_option("--fusion-blocks", ft.fusion_blocks, "cross-attention block count");
    fin->add_option("--heads", ft.heads, "attention heads");
    fin->add_option("--epochs", ft.epochs, "training epochs");
    fin->add_option("--warmup", ft.warmup, "warmup epochs");
    fin->add_option("--batch-size", ft.batch_size, "batch size");
    fin->add_option("--peak-lr", ft.peak_lr, "peak learning rate");
    fin->add_option("--floor-lr", ft.floor_lr, "final learning rate");
    fin->add_option("--modality-dropout-p", ft.modality_dropout_p, "lab-vector drop probability");
    fin->add_option("--sentinel", ft.sentinel, "dropout fill value");
    fin->add_option("--eval-frac", ft.eval_frac, "held-out patient fraction");
    fin->add_option("--split-seed", ft.split_seed, "patient split seed");
    fin->add_option("--size", ft.size, "image side length (multiple of 32)");
    fin->add_option("--seed", ft.seed, "training seed");

    EvalFlags ev;
    auto* evl = app.add_subcommand("eval", "score a finetuned checkpoint");
    evl->add_option("--manifest", ev.manifest, "dataset manifest CSV")->required();
    evl->add_option("--checkpoint", ev.checkpoint, "finetune checkpoint")->required();
    evl->add_option("--report", ev.report, "JSON report output path")->required();
    evl->add_option("--eval-frac", ev.eval_frac, "evaluate only this held-out fraction");
    evl->add_option("--split-seed", ev.split_seed, "patient split seed");
    evl->add_option("--size", ev.size, "override the checkpoint image size");

    ReconstructFlags rc;
    auto* rec = app.add_subcommand("reconstruct", "render original|masked|recon triptychs");
    rec->add_option("--manifest", rc.manifest, "dataset manifest CSV")->required();
    rec->add_option("--checkpoint", rc.checkpoint, "pretrain checkpoint")->required();
    rec->add_option("--out-dir", rc.out_dir, "output directory")->required();
    rec->add_option("--mask-ratio", rc.mask_ratio, "override the checkpoint mask ratio");
    rec->add_option("--count", rc.count, "images to render (0 = all)");
    rec->add_option("--seed", rc.seed, "mask seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*synth) return cmd_synth(sy);
        if (*pre) return cmd_pretrain(pt);
        if (*fin) return cmd_finetune(ft);
        if (*evl) return cmd_eval(ev);
        return cmd_reconstruct(rc);
    } catch (const std::invalid_argument& e) {  // includes dim_error
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
