#include "mednvc/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mednvc {

LabVec modality_dropout(const LabVec& record, double p, double sentinel, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("modality dropout probability must be in [0,1], got " +
                                    std::to_string(p));
    }
    const bool drop = rng.bernoulli(p);  // always drawn: stream position is outcome-free
    if (!drop) return record;
    LabVec out;
    out.fill(sentinel);
    return out;
}

Arch arch_from_string(const std::string& s) {
    if (s == "fused") return Arch::fused;
    if (s == "vision_only") return Arch::vision_only;
    if (s == "numeric_only") return Arch::numeric_only;
    throw std::invalid_argument("unknown architecture '" + s +
                                "' (expected fused|vision_only|numeric_only)");
}

std::string to_string(Arch a) {
    switch (a) {
        case Arch::fused: return "fused";
        case Arch::vision_only: return "vision_only";
        default: return "numeric_only";
    }
}

void validate(const ClassifierConfig& cfg) {
    validate(cfg.encoder);
    if (cfg.fusion_blocks < 1) throw std::invalid_argument("classifier: need >= 1 fusion block");
    if (cfg.heads < 1) throw std::invalid_argument("classifier: need >= 1 attention head");
    if (cfg.encoder.stage_dims[1] % cfg.heads != 0) {
        throw std::invalid_argument("classifier: fusion width " +
                                    std::to_string(cfg.encoder.stage_dims[1]) +
                                    " not divisible by " + std::to_string(cfg.heads) + " heads");
    }
    if (cfg.classes < 2) throw std::invalid_argument("classifier: need >= 2 classes");
    if (cfg.numeric_hidden < 1) throw std::invalid_argument("classifier: numeric hidden width");
}

ClassifierModel make_classifier_model(const ClassifierConfig& cfg, std::uint64_t seed) {
    ClassifierModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, 0x11A5));
    m.p = make_classifier_params<float>(cfg, rng);
    register_classifier(m.params, cfg, m.p);
    return m;
}

void fit_norm_stats(ClassifierModel& model, const std::vector<Sample>& train) {
    model.stats = compute_norm_stats(train);
    model.has_stats = true;
}

namespace {

// Normalized lab row with training-time modality dropout already applied.
void fill_lab_row(float* dst, const Sample& s, const NormStats& st) {
    const LabVec norm = normalize_lab(s.lab, st);
    for (int j = 0; j < kLabDim; ++j) dst[j] = static_cast<float>(norm[j]);
}

void check_uniform_images(const std::vector<Sample>& samples) {
    const int H = samples[0].height, W = samples[0].width;
    for (const auto& s : samples) {
        if (s.height != H || s.width != W ||
            s.image.size() != static_cast<std::size_t>(3) * H * W) {
            throw dim_error("classifier: images must share one size");
        }
    }
}

}  // namespace

double finetune_epoch(ClassifierModel& model, const std::vector<Sample>& train,
                      const FinetuneConfig& cfg, Lion<float>& opt, int epoch) {
    if (train.empty()) throw train_error("finetune: empty training set");
    if (cfg.batch_size < 1) throw std::invalid_argument("finetune: batch size must be positive");
    if (!model.has_stats) throw train_error("finetune: normalization stats not fitted");
    const bool vision = model.cfg.arch != Arch::numeric_only;
    if (vision) check_uniform_images(train);
    const int H = train[0].height, W = train[0].width;
    const std::size_t hw3 = static_cast<std::size_t>(3) * H * W;
    const double lr = lr_at(cfg.schedule, epoch);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(cfg.seed, 0xF1E7, static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
        const int nb = static_cast<int>(
            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - done));
        std::vector<float> imgs(vision ? static_cast<std::size_t>(nb) * hw3 : 0);
        std::vector<float> labs(static_cast<std::size_t>(nb) * kLabDim);
        std::vector<int> labels(static_cast<std::size_t>(nb));
        for (int j = 0; j < nb; ++j) {
            const std::size_t i = order[done + j];
            const Sample& s = train[i];
            if (vision) {
                std::copy(s.image.begin(), s.image.end(),
                          imgs.begin() + static_cast<std::size_t>(j) * hw3);
            }
            LabVec norm = normalize_lab(s.lab, model.stats);
            Rng drng(derive_seed(cfg.seed, 0xD409, static_cast<std::uint64_t>(epoch), i));
            norm = modality_dropout(norm, cfg.modality_dropout_p, cfg.sentinel, drng);
            for (int f = 0; f < kLabDim; ++f) {
                labs[static_cast<std::size_t>(j) * kLabDim + f] = static_cast<float>(norm[f]);
            }
            labels[static_cast<std::size_t>(j)] = s.label;
        }
        Ptr<float> x;
        if (vision) x = make_tensor<float>({nb, 3, H, W}, std::move(imgs));
        auto lx = make_tensor<float>({nb, kLabDim}, std::move(labs));
        model.params.zero_grads();
        auto logits = classify(x, lx, model.cfg, model.p);
        auto loss = ce_loss(logits, labels);
        loss->backward();
        opt.step(model.params, static_cast<float>(lr));
        loss_sum += static_cast<double>(loss->data[0]) * nb;
        done += static_cast<std::size_t>(nb);
    }
    return loss_sum / static_cast<double>(order.size());
}

std::vector<double> score_samples(const ClassifierModel& model,
                                  const std::vector<Sample>& samples) {
    if (samples.empty()) return {};
    if (!model.has_stats) throw train_error("score: normalization stats not fitted");
    if (model.cfg.classes != 2) {
        throw std::invalid_argument("score: class-1 probability needs a 2-class head");
    }
    const bool vision = model.cfg.arch != Arch::numeric_only;
    if (vision) check_uniform_images(samples);
    const int H = samples[0].height, W = samples[0].width;
    const std::size_t hw3 = static_cast<std::size_t>(3) * H * W;
    constexpr std::size_t kEvalBatch = 16;

    std::vector<double> scores;
    scores.reserve(samples.size());
    std::size_t done = 0;
    while (done < samples.size()) {
        const int nb =
            static_cast<int>(std::min<std::size_t>(kEvalBatch, samples.size() - done));
        std::vector<float> imgs(vision ? static_cast<std::size_t>(nb) * hw3 : 0);
        std::vector<float> labs(static_cast<std::size_t>(nb) * kLabDim);
        for (int j = 0; j < nb; ++j) {
            const Sample& s = samples[done + j];
            if (vision) {
                std::copy(s.image.begin(), s.image.end(),
                          imgs.begin() + static_cast<std::size_t>(j) * hw3);
            }
            fill_lab_row(labs.data() + static_cast<std::size_t>(j) * kLabDim, s, model.stats);
        }
        Ptr<float> x;
        if (vision) x = make_tensor<float>({nb, 3, H, W}, std::move(imgs));
        auto lx = make_tensor<float>({nb, kLabDim}, std::move(labs));
        auto logits = classify(x, lx, model.cfg, model.p);
        for (int j = 0; j < nb; ++j) {
            const double l0 = logits->data[static_cast<std::size_t>(j) * 2];
            const double l1 = logits->data[static_cast<std::size_t>(j) * 2 + 1];
            scores.push_back(1.0 / (1.0 + std::exp(l0 - l1)));
        }
        done += static_cast<std::size_t>(nb);
    }
    return scores;
}

EvalReport evaluate_model(const ClassifierModel& model, const std::vector<Sample>& eval_set) {
    const std::vector<double> scores = score_samples(model, eval_set);
    std::vector<int> labels(eval_set.size());
    for (std::size_t i = 0; i < eval_set.size(); ++i) labels[i] = eval_set[i].label;
    return evaluate_scores(scores, labels);
}

}  // namespace mednvc
