#pragma once

// ConvNeXt-V2 building blocks and the four-stage encoder. The encoder splits
// at the stage-2 boundary so a fusion stage can be inserted at stride 8, and
// optionally runs in sparse mode where every conv gates masked positions.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mednvc/conv.hpp"
#include "mednvc/ops.hpp"
#include "mednvc/params.hpp"
#include "mednvc/rng.hpp"

namespace mednvc {

struct EncoderConfig {
    int in_channels = 3;
    std::array<int, 4> stage_dims = {32, 64, 128, 256};
    std::array<int, 4> stage_depths = {1, 1, 2, 1};
    // stem stride 4, inter-stage stride 2: total stride 32
    static constexpr int stem_stride = 4;
    static constexpr int stage_stride = 2;
    static constexpr int total_stride = 32;
};

inline void validate(const EncoderConfig& cfg) {
    if (cfg.in_channels < 1) throw dim_error("encoder config: in_channels must be positive");
    for (int i = 0; i < 4; ++i) {
        if (cfg.stage_dims[i] < 1 || cfg.stage_depths[i] < 1) {
            throw dim_error("encoder config: stage " + std::to_string(i + 1) +
                            " dims/depths must be positive");
        }
    }
}

// Per-stride visibility planes for sparse mode; 1 = visible. Layouts are
// N*(H/s)*(W/s) for s in {1, 4, 8, 16, 32}.
struct EncoderMasks {
    std::shared_ptr<const std::vector<std::uint8_t>> pix, s4, s8, s16, s32;
};

// Submanifold conv: masked input positions contribute zero to every output,
// and masked output positions are zeroed and carry no gradient. vis_out may
// alias vis_in for stride-1 convs; either side may be null (dense).
template <typename T>
Ptr<T> masked_conv2d(const Ptr<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> vis_in,
                     std::shared_ptr<const std::vector<std::uint8_t>> vis_out, const Ptr<T>& w,
                     const Ptr<T>& b, int stride, int padding, int groups = 1) {
    auto h = vis_in ? mask_spatial(x, std::move(vis_in)) : x;
    h = conv2d<T>(h, w, b, stride, padding, groups);
    if (vis_out) h = mask_spatial(h, std::move(vis_out));
    return h;
}

template <typename T>
struct BlockParams {
    Ptr<T> dw_w, dw_b;      // depthwise 7x7
    Ptr<T> ln_g, ln_b;      // post-conv layer norm
    Ptr<T> w1, b1;          // pointwise C -> 4C
    Ptr<T> grn_g, grn_b;    // GRN on the expanded features
    Ptr<T> w2, b2;          // pointwise 4C -> C
};

template <typename T>
BlockParams<T> make_block_params(int C, Rng& rng) {
    BlockParams<T> p;
    p.dw_w = zeros<T>({C, 1, 7, 7}, true);
    trunc_normal_fill(*p.dw_w, rng, 0.02);
    p.dw_b = zeros<T>({C}, true);
    p.ln_g = full<T>({C}, T(1), true);
    p.ln_b = zeros<T>({C}, true);
    p.w1 = zeros<T>({C, 4 * C}, true);
    trunc_normal_fill(*p.w1, rng, 0.02);
    p.b1 = zeros<T>({4 * C}, true);
    p.grn_g = zeros<T>({4 * C}, true);
    p.grn_b = zeros<T>({4 * C}, true);
    p.w2 = zeros<T>({4 * C, C}, true);
    trunc_normal_fill(*p.w2, rng, 0.02);
    p.b2 = zeros<T>({C}, true);
    return p;
}

template <typename T>
void register_block(ParamSet<T>& ps, const std::string& prefix, const BlockParams<T>& p) {
    ps.add(prefix + ".dw.w", p.dw_w);
    ps.add(prefix + ".dw.b", p.dw_b);
    ps.add(prefix + ".ln.g", p.ln_g);
    ps.add(prefix + ".ln.b", p.ln_b);
    ps.add(prefix + ".pw1.w", p.w1);
    ps.add(prefix + ".pw1.b", p.b1);
    ps.add(prefix + ".grn.g", p.grn_g);
    ps.add(prefix + ".grn.b", p.grn_b);
    ps.add(prefix + ".pw2.w", p.w2);
    ps.add(prefix + ".pw2.b", p.b2);
}

// Depthwise conv -> LN -> C->4C -> GELU -> GRN -> 4C->C, added residually.
// In sparse mode the conv gates masked positions on both sides; everything
// between convs is position-local except the GRN statistic, which sees the
// zero-gated map.
template <typename T>
Ptr<T> block_forward(const Ptr<T>& x, const BlockParams<T>& p,
                     std::shared_ptr<const std::vector<std::uint8_t>> vis = nullptr) {
    const int C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (p.dw_w->dim(0) != C) {
        throw dim_error("block: input channels " + std::to_string(C) + " != block dim " +
                        std::to_string(p.dw_w->dim(0)));
    }
    auto h = masked_conv2d<T>(x, vis, vis, p.dw_w, p.dw_b, 1, 3, C);
    auto t = nchw_to_nlc(h);
    t = layer_norm_lastdim<T>(t, p.ln_g, p.ln_b);
    t = linear(t, p.w1, p.b1);
    t = gelu(t);
    t = grn_nlc<T>(t, p.grn_g, p.grn_b);
    t = linear(t, p.w2, p.b2);
    return add(x, nlc_to_nchw(t, H, W));
}

template <typename T>
struct DownsampleParams {
    Ptr<T> ln_g, ln_b;  // norm on the incoming channels
    Ptr<T> w, b;        // 2x2 stride-2 conv
};

template <typename T>
struct EncoderParams {
    Ptr<T> stem_w, stem_b, stem_ln_g, stem_ln_b;
    std::array<std::vector<BlockParams<T>>, 4> stages;
    std::array<DownsampleParams<T>, 3> downs;  // before stages 2, 3, 4
};

template <typename T>
EncoderParams<T> make_encoder_params(const EncoderConfig& cfg, Rng& rng) {
    validate(cfg);
    EncoderParams<T> p;
    p.stem_w = zeros<T>({cfg.stage_dims[0], cfg.in_channels, 4, 4}, true);
    trunc_normal_fill(*p.stem_w, rng, 0.02);
    p.stem_b = zeros<T>({cfg.stage_dims[0]}, true);
    p.stem_ln_g = full<T>({cfg.stage_dims[0]}, T(1), true);
    p.stem_ln_b = zeros<T>({cfg.stage_dims[0]}, true);
    for (int s = 0; s < 4; ++s) {
        for (int i = 0; i < cfg.stage_depths[s]; ++i)
            p.stages[s].push_back(make_block_params<T>(cfg.stage_dims[s], rng));
        if (s > 0) {
            auto& d = p.downs[s - 1];
            d.ln_g = full<T>({cfg.stage_dims[s - 1]}, T(1), true);
            d.ln_b = zeros<T>({cfg.stage_dims[s - 1]}, true);
            d.w = zeros<T>({cfg.stage_dims[s], cfg.stage_dims[s - 1], 2, 2}, true);
            trunc_normal_fill(*d.w, rng, 0.02);
            d.b = zeros<T>({cfg.stage_dims[s]}, true);
        }
    }
    return p;
}

template <typename T>
void register_encoder(ParamSet<T>& ps, const std::string& prefix, const EncoderParams<T>& p) {
    ps.add(prefix + ".stem.conv.w", p.stem_w);
    ps.add(prefix + ".stem.conv.b", p.stem_b);
    ps.add(prefix + ".stem.ln.g", p.stem_ln_g);
    ps.add(prefix + ".stem.ln.b", p.stem_ln_b);
    for (int s = 0; s < 4; ++s) {
        if (s > 0) {
            const std::string d = prefix + ".down" + std::to_string(s + 1);
            ps.add(d + ".ln.g", p.downs[s - 1].ln_g);
            ps.add(d + ".ln.b", p.downs[s - 1].ln_b);
            ps.add(d + ".conv.w", p.downs[s - 1].w);
            ps.add(d + ".conv.b", p.downs[s - 1].b);
        }
        for (std::size_t i = 0; i < p.stages[s].size(); ++i) {
            register_block(ps, prefix + ".stage" + std::to_string(s + 1) + ".block" +
                                   std::to_string(i),
                           p.stages[s][static_cast<std::size_t>(i)]);
        }
    }
}

namespace detail {

template <typename T>
Ptr<T> run_stage(Ptr<T> h, const std::vector<BlockParams<T>>& blocks,
                 std::shared_ptr<const std::vector<std::uint8_t>> vis) {
    for (const auto& b : blocks) h = block_forward(h, b, vis);
    return h;
}

template <typename T>
Ptr<T> run_downsample(Ptr<T> h, const DownsampleParams<T>& d,
                      std::shared_ptr<const std::vector<std::uint8_t>> vis_in,
                      std::shared_ptr<const std::vector<std::uint8_t>> vis_out) {
    auto t = nchw_to_nlc(h);
    t = layer_norm_lastdim<T>(t, d.ln_g, d.ln_b);
    h = nlc_to_nchw(t, h->dim(2), h->dim(3));
    return masked_conv2d<T>(h, std::move(vis_in), std::move(vis_out), d.w, d.b, 2, 0);
}

}  // namespace detail

// Stem plus stages 1-2; returns the stride-8 map (N, dims[1], H/8, W/8).
template <typename T>
Ptr<T> encoder_forward_to_stage2(const Ptr<T>& x, const EncoderConfig& cfg,
                                 const EncoderParams<T>& p, const EncoderMasks* masks = nullptr) {
    if (x->ndim() != 4 || x->dim(1) != cfg.in_channels) {
        throw dim_error("encoder: expected (N," + std::to_string(cfg.in_channels) +
                        ",H,W) input, got " + shape_str(x->shape));
    }
    if (x->dim(2) % EncoderConfig::total_stride != 0 ||
        x->dim(3) % EncoderConfig::total_stride != 0) {
        throw dim_error("encoder: spatial size " + std::to_string(x->dim(2)) + "x" +
                        std::to_string(x->dim(3)) + " not divisible by total stride 32");
    }
    auto h = masked_conv2d<T>(x, masks ? masks->pix : nullptr, masks ? masks->s4 : nullptr,
                              p.stem_w, p.stem_b, 4, 0);
    auto t = nchw_to_nlc(h);
    t = layer_norm_lastdim<T>(t, p.stem_ln_g, p.stem_ln_b);
    h = nlc_to_nchw(t, h->dim(2), h->dim(3));
    h = detail::run_stage(h, p.stages[0], masks ? masks->s4 : nullptr);
    h = detail::run_downsample(h, p.downs[0], masks ? masks->s4 : nullptr,
                               masks ? masks->s8 : nullptr);
    h = detail::run_stage(h, p.stages[1], masks ? masks->s8 : nullptr);
    return h;
}

// Stages 3-4 with their downsamplers; input must be a valid stage-2 output.
template <typename T>
Ptr<T> resume_from_stage3(const Ptr<T>& feats, const EncoderConfig& cfg,
                          const EncoderParams<T>& p, const EncoderMasks* masks = nullptr) {
    if (feats->ndim() != 4 || feats->dim(1) != cfg.stage_dims[1]) {
        throw dim_error("resume_from_stage3: expected (N," + std::to_string(cfg.stage_dims[1]) +
                        ",H,W) stage-2 features, got " + shape_str(feats->shape));
    }
    auto h = detail::run_downsample(feats, p.downs[1], masks ? masks->s8 : nullptr,
                                    masks ? masks->s16 : nullptr);
    h = detail::run_stage(h, p.stages[2], masks ? masks->s16 : nullptr);
    h = detail::run_downsample(h, p.downs[2], masks ? masks->s16 : nullptr,
                               masks ? masks->s32 : nullptr);
    h = detail::run_stage(h, p.stages[3], masks ? masks->s32 : nullptr);
    return h;
}

template <typename T>
Ptr<T> encoder_forward(const Ptr<T>& x, const EncoderConfig& cfg, const EncoderParams<T>& p,
                       int upto_stage, const EncoderMasks* masks = nullptr) {
    if (upto_stage != 2 && upto_stage != 4) {
        throw dim_error("encoder: upto_stage must be 2 or 4, got " + std::to_string(upto_stage));
    }
    auto h = encoder_forward_to_stage2(x, cfg, p, masks);
    if (upto_stage == 2) return h;
    return resume_from_stage3(h, cfg, p, masks);
}

template <typename T>
struct HeadParams {
    Ptr<T> ln_g, ln_b;
    Ptr<T> w, b;
};

template <typename T>
HeadParams<T> make_head_params(int C, int classes, Rng& rng) {
    HeadParams<T> p;
    p.ln_g = full<T>({C}, T(1), true);
    p.ln_b = zeros<T>({C}, true);
    p.w = zeros<T>({C, classes}, true);
    trunc_normal_fill(*p.w, rng, 0.02);
    p.b = zeros<T>({classes}, true);
    return p;
}

template <typename T>
void register_head(ParamSet<T>& ps, const std::string& prefix, const HeadParams<T>& p) {
    ps.add(prefix + ".ln.g", p.ln_g);
    ps.add(prefix + ".ln.b", p.ln_b);
    ps.add(prefix + ".fc.w", p.w);
    ps.add(prefix + ".fc.b", p.b);
}

// Global average pool -> layer norm -> linear classifier.
template <typename T>
Ptr<T> global_pool_head(const Ptr<T>& feats, const HeadParams<T>& p) {
    auto pooled = global_avg_pool(feats);
    auto normed = layer_norm_lastdim<T>(pooled, p.ln_g, p.ln_b);
    return linear(normed, p.w, p.b);
}

}  // namespace mednvc
