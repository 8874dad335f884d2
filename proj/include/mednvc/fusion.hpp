#pragma once

// Full-data learning stage: lab-vector token embedding, unidirectional
// cross-attention fusion at stride 8, modality dropout, the classifier
// pipeline and its training/evaluation loops.

#include <cstdint>
#include <string>
#include <vector>

#include "mednvc/attention.hpp"
#include "mednvc/blocks.hpp"
#include "mednvc/dataio.hpp"
#include "mednvc/losses.hpp"
#include "mednvc/metrics.hpp"
#include "mednvc/optim.hpp"
#include "mednvc/schedule.hpp"

namespace mednvc {

inline constexpr double kSentinel = -10.0;

// ---- lab embedding -----------------------------------------------------

template <typename T>
struct EmbedParams {
    Ptr<T> dir, pos;  // (F, C) per-feature direction and position vectors
    Ptr<T> w1, b1;    // shared MLP C -> C
    Ptr<T> w2, b2;    // C -> C
};

template <typename T>
EmbedParams<T> make_embed_params(int features, int C, Rng& rng) {
    EmbedParams<T> p;
    p.dir = zeros<T>({features, C}, true);
    trunc_normal_fill(*p.dir, rng, 0.02);
    p.pos = zeros<T>({features, C}, true);
    trunc_normal_fill(*p.pos, rng, 0.02);
    p.w1 = zeros<T>({C, C}, true);
    trunc_normal_fill(*p.w1, rng, 0.02);
    p.b1 = zeros<T>({C}, true);
    p.w2 = zeros<T>({C, C}, true);
    trunc_normal_fill(*p.w2, rng, 0.02);
    p.b2 = zeros<T>({C}, true);
    return p;
}

template <typename T>
void register_embed(ParamSet<T>& ps, const std::string& prefix, const EmbedParams<T>& p) {
    ps.add(prefix + ".dir", p.dir);
    ps.add(prefix + ".pos", p.pos);
    ps.add(prefix + ".mlp1.w", p.w1);
    ps.add(prefix + ".mlp1.b", p.b1);
    ps.add(prefix + ".mlp2.w", p.w2);
    ps.add(prefix + ".mlp2.b", p.b2);
}

// tokens[n,i,:] = x[n,i] * dir[i,:] + pos[i,:] for scalar features x (N,F).
template <typename T>
Ptr<T> feature_tokens(const Ptr<T>& x, const Ptr<T>& dir, const Ptr<T>& pos) {
    if (x->ndim() != 2) {
        throw dim_error("feature_tokens: expected (N,F) scalars, got " + shape_str(x->shape));
    }
    if (dir->ndim() != 2 || pos->shape != dir->shape || dir->dim(0) != x->dim(1)) {
        throw dim_error("feature_tokens: direction/position tables " + shape_str(dir->shape) +
                        "/" + shape_str(pos->shape) + " do not fit input " + shape_str(x->shape));
    }
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t F = static_cast<std::size_t>(x->dim(1));
    const std::size_t C = static_cast<std::size_t>(dir->dim(1));
    std::vector<T> out(N * F * C);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < F; ++i) {
            const T s = x->data[n * F + i];
            const T* e = dir->data.data() + i * C;
            const T* q = pos->data.data() + i * C;
            T* o = out.data() + (n * F + i) * C;
            for (std::size_t c = 0; c < C; ++c) o[c] = s * e[c] + q[c];
        }
    }
    return make_op_result<T>(
        {x->dim(0), x->dim(1), dir->dim(1)}, std::move(out), {x, dir, pos}, "feature_tokens",
        [x, dir, pos, N, F, C](Tensor<T>& node) {
            node.backward_fn = [&node, x, dir, pos, N, F, C] {
                if (x->requires_grad) x->ensure_grad();
                if (dir->requires_grad) dir->ensure_grad();
                if (pos->requires_grad) pos->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t i = 0; i < F; ++i) {
                        const T* g = node.grad.data() + (n * F + i) * C;
                        const T s = x->data[n * F + i];
                        const T* e = dir->data.data() + i * C;
                        T acc = T(0);
                        for (std::size_t c = 0; c < C; ++c) {
                            acc += g[c] * e[c];
                            if (dir->requires_grad) dir->grad[i * C + c] += g[c] * s;
                            if (pos->requires_grad) pos->grad[i * C + c] += g[c];
                        }
                        if (x->requires_grad) x->grad[n * F + i] += acc;
                    }
                }
            };
        });
}

// Per-feature token then a shared linear -> gelu -> linear MLP; (N,F) -> (N,F,C).
template <typename T>
Ptr<T> embed_lab(const Ptr<T>& x, const EmbedParams<T>& p) {
    auto t = feature_tokens(x, p.dir, p.pos);
    t = linear(t, p.w1, p.b1);
    t = gelu(t);
    return linear(t, p.w2, p.b2);
}

// ---- cross-attention fusion ---------------------------------------------

template <typename T>
struct FusionBlockParams {
    Ptr<T> ln_q_g, ln_q_b;  // pre-norm on image queries
    Ptr<T> ln_t_g, ln_t_b;  // pre-norm on numeric tokens
    Ptr<T> wq, wk, wv, wo;  // (C, C) projections, bias-free
};

template <typename T>
FusionBlockParams<T> make_fusion_block_params(int C, Rng& rng) {
    FusionBlockParams<T> p;
    p.ln_q_g = full<T>({C}, T(1), true);
    p.ln_q_b = zeros<T>({C}, true);
    p.ln_t_g = full<T>({C}, T(1), true);
    p.ln_t_b = zeros<T>({C}, true);
    for (Ptr<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
        *w = zeros<T>({C, C}, true);
        trunc_normal_fill(**w, rng, 0.02);
    }
    return p;
}

template <typename T>
void register_fusion_block(ParamSet<T>& ps, const std::string& prefix,
                           const FusionBlockParams<T>& p) {
    ps.add(prefix + ".ln_q.g", p.ln_q_g);
    ps.add(prefix + ".ln_q.b", p.ln_q_b);
    ps.add(prefix + ".ln_t.g", p.ln_t_g);
    ps.add(prefix + ".ln_t.b", p.ln_t_b);
    ps.add(prefix + ".wq", p.wq);
    ps.add(prefix + ".wk", p.wk);
    ps.add(prefix + ".wv", p.wv);
    ps.add(prefix + ".wo", p.wo);
}

// Image features query the numeric tokens: pre-norm both, per-head
// softmax(Q K^T / sqrt(d_k)) V, project by Wo, add residually to the
// un-normed queries. Tokens pass through untouched (unidirectional).
template <typename T>
Ptr<T> cross_attention_block(const Ptr<T>& img, const Ptr<T>& tokens,
                             const FusionBlockParams<T>& p, int heads) {
    if (img->ndim() != 4) {
        throw dim_error("fusion: image features must be NCHW, got " + shape_str(img->shape));
    }
    if (tokens->ndim() != 3) {
        throw dim_error("fusion: tokens must be (N,L,C), got " + shape_str(tokens->shape));
    }
    const int C = img->dim(1);
    if (tokens->dim(2) != C) {
        throw dim_error("fusion: image channels " + std::to_string(C) + " != token channels " +
                        std::to_string(tokens->dim(2)));
    }
    if (tokens->dim(0) != img->dim(0)) {
        throw dim_error("fusion: batch axes differ: " + shape_str(img->shape) + " vs " +
                        shape_str(tokens->shape));
    }
    const int H = img->dim(2), W = img->dim(3);
    auto q_in = nchw_to_nlc(img);  // (N, HW, C)
    auto qn = layer_norm_lastdim<T>(q_in, p.ln_q_g, p.ln_q_b);
    auto tn = layer_norm_lastdim<T>(tokens, p.ln_t_g, p.ln_t_b);
    const Ptr<T> no_bias;
    auto q = linear(qn, p.wq, no_bias);
    auto k = linear(tn, p.wk, no_bias);
    auto v = linear(tn, p.wv, no_bias);
    auto ctx = attention(q, k, v, heads);
    auto out = add(q_in, linear(ctx, p.wo, no_bias));
    return nlc_to_nchw(out, H, W);
}

// Sequential blocks; every block sees the same numeric tokens.
template <typename T>
Ptr<T> fusion_stack(const Ptr<T>& img, const Ptr<T>& tokens,
                    const std::vector<FusionBlockParams<T>>& blocks, int heads) {
    if (blocks.empty()) throw dim_error("fusion: need at least one block");
    auto h = img;
    for (const auto& b : blocks) h = cross_attention_block(h, tokens, b, heads);
    return h;
}

// ---- modality dropout ----------------------------------------------------

// Whole-vector replacement with the sentinel, probability p. The draw always
// happens so the rng stream position does not depend on the outcome.
LabVec modality_dropout(const LabVec& record, double p, double sentinel, Rng& rng);

// ---- classifier ------------------------------------------------------------

enum class Arch { fused, vision_only, numeric_only };
Arch arch_from_string(const std::string& s);
std::string to_string(Arch a);

struct ClassifierConfig {
    EncoderConfig encoder;
    Arch arch = Arch::fused;
    int fusion_blocks = 2;
    int heads = 4;
    int classes = 2;
    int numeric_hidden = 64;  // numeric-only baseline MLP width
};

void validate(const ClassifierConfig& cfg);

// Three-layer MLP with GELU, the numeric-only baseline path.
template <typename T>
struct NumericMlpParams {
    Ptr<T> w1, b1, w2, b2, w3, b3;
};

template <typename T>
struct ClassifierParams {
    EncoderParams<T> enc;
    EmbedParams<T> embed;
    std::vector<FusionBlockParams<T>> fusion;
    HeadParams<T> head;
    NumericMlpParams<T> numeric;
};

template <typename T>
ClassifierParams<T> make_classifier_params(const ClassifierConfig& cfg, Rng& rng) {
    validate(cfg);
    ClassifierParams<T> p;
    p.enc = make_encoder_params<T>(cfg.encoder, rng);
    const int Cf = cfg.encoder.stage_dims[1];  // fusion point: post-stage-2
    p.embed = make_embed_params<T>(kLabDim, Cf, rng);
    for (int i = 0; i < cfg.fusion_blocks; ++i)
        p.fusion.push_back(make_fusion_block_params<T>(Cf, rng));
    p.head = make_head_params<T>(cfg.encoder.stage_dims[3], cfg.classes, rng);
    const int Hn = cfg.numeric_hidden;
    p.numeric.w1 = zeros<T>({kLabDim, Hn}, true);
    trunc_normal_fill(*p.numeric.w1, rng, 0.02);
    p.numeric.b1 = zeros<T>({Hn}, true);
    p.numeric.w2 = zeros<T>({Hn, Hn}, true);
    trunc_normal_fill(*p.numeric.w2, rng, 0.02);
    p.numeric.b2 = zeros<T>({Hn}, true);
    p.numeric.w3 = zeros<T>({Hn, cfg.classes}, true);
    trunc_normal_fill(*p.numeric.w3, rng, 0.02);
    p.numeric.b3 = zeros<T>({cfg.classes}, true);
    return p;
}

// Only the parameters the architecture actually trains are registered.
template <typename T>
void register_classifier(ParamSet<T>& ps, const ClassifierConfig& cfg,
                         const ClassifierParams<T>& p) {
    if (cfg.arch == Arch::numeric_only) {
        ps.add("numeric.mlp1.w", p.numeric.w1);
        ps.add("numeric.mlp1.b", p.numeric.b1);
        ps.add("numeric.mlp2.w", p.numeric.w2);
        ps.add("numeric.mlp2.b", p.numeric.b2);
        ps.add("numeric.mlp3.w", p.numeric.w3);
        ps.add("numeric.mlp3.b", p.numeric.b3);
        return;
    }
    register_encoder(ps, "encoder", p.enc);
    if (cfg.arch == Arch::fused) {
        register_embed(ps, "embed", p.embed);
        for (std::size_t i = 0; i < p.fusion.size(); ++i)
            register_fusion_block(ps, "fusion.block" + std::to_string(i), p.fusion[i]);
    }
    register_head(ps, "head", p.head);
}

// images (N,3,H,W), labs (N,14) normalized (sentinel allowed) -> logits (N,classes).
// images may be null for numeric_only (that path never reads them).
template <typename T>
Ptr<T> classify(const Ptr<T>& images, const Ptr<T>& labs, const ClassifierConfig& cfg,
                const ClassifierParams<T>& p) {
    if (labs->ndim() != 2 || labs->dim(1) != kLabDim) {
        throw dim_error("classify: labs must be (N," + std::to_string(kLabDim) + "), got " +
                        shape_str(labs->shape));
    }
    if (cfg.arch != Arch::numeric_only && !images) {
        throw dim_error("classify: image tensor required for " + to_string(cfg.arch));
    }
    switch (cfg.arch) {
        case Arch::numeric_only: {
            auto h = linear(labs, p.numeric.w1, p.numeric.b1);
            h = gelu(h);
            h = linear(h, p.numeric.w2, p.numeric.b2);
            h = gelu(h);
            return linear(h, p.numeric.w3, p.numeric.b3);
        }
        case Arch::vision_only: {
            auto f = encoder_forward(images, cfg.encoder, p.enc, 4);
            return global_pool_head(f, p.head);
        }
        default: {
            auto f2 = encoder_forward_to_stage2(images, cfg.encoder, p.enc);
            auto tokens = embed_lab(labs, p.embed);
            auto fused = fusion_stack(f2, tokens, p.fusion, cfg.heads);
            auto f4 = resume_from_stage3(fused, cfg.encoder, p.enc);
            return global_pool_head(f4, p.head);
        }
    }
}

// ---- training and evaluation ------------------------------------------------

struct FinetuneConfig {
    ClassifierConfig model;
    int batch_size = 8;
    double modality_dropout_p = 0.2;
    double sentinel = kSentinel;
    LrSchedule schedule{60, 5, 2e-4, 2e-6};
    LionConfig<float> lion;
    std::uint64_t seed = 0;
};

struct ClassifierModel {
    ClassifierConfig cfg;
    ClassifierParams<float> p;
    ParamSet<float> params;
    NormStats stats;
    bool has_stats = false;
};

ClassifierModel make_classifier_model(const ClassifierConfig& cfg, std::uint64_t seed);

// Z-score statistics come from the training split and ride in the checkpoint.
void fit_norm_stats(ClassifierModel& model, const std::vector<Sample>& train);

// One pass over the training samples: normalize labs, modality dropout,
// ce_loss backprop, one Lion step per batch. Returns epoch-mean loss.
double finetune_epoch(ClassifierModel& model, const std::vector<Sample>& train,
                      const FinetuneConfig& cfg, Lion<float>& opt, int epoch);

// Deterministic class-1 probabilities; modality dropout disabled.
std::vector<double> score_samples(const ClassifierModel& model,
                                  const std::vector<Sample>& samples);

EvalReport evaluate_model(const ClassifierModel& model, const std::vector<Sample>& eval_set);

}  // namespace mednvc
