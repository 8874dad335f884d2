#pragma once

// Encoder pre-training: patch masks, the mask-token decoder, patch-normalized
// reconstruction targets, and the pretraining epoch loop.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mednvc/blocks.hpp"
#include "mednvc/dataio.hpp"
#include "mednvc/losses.hpp"
#include "mednvc/optim.hpp"
#include "mednvc/rng.hpp"
#include "mednvc/schedule.hpp"

namespace mednvc {

// One mask unit covers total_stride x total_stride pixels, so each grid cell
// maps to exactly one stage-4 position.
inline constexpr int kMaskUnit = EncoderConfig::total_stride;

struct PatchMask {
    int gh = 0, gw = 0;
    std::vector<std::uint8_t> masked;  // gh*gw, 1 = masked
    int masked_count() const {
        int n = 0;
        for (auto v : masked) n += v;
        return n;
    }
    int visible_count() const { return gh * gw - masked_count(); }
};

// Uniformly random subset of exactly round(gh*gw*ratio) masked cells;
// a pure function of (seed, ratio, gh, gw).
PatchMask generate_mask(std::uint64_t seed, double ratio, int gh = 7, int gw = 7);

// Maskedness replicated to the feature grid at a stride level in {4,8,16,32};
// a mask unit is never partially visible.
std::vector<std::uint8_t> mask_propagate(const PatchMask& m, int stride_level);

// Maskedness at pixel resolution (gh*kMaskUnit x gw*kMaskUnit).
std::vector<std::uint8_t> mask_to_pixels(const PatchMask& m);

// Visibility planes (1 = visible) for a batch of per-image masks, every
// stride level the encoder touches.
EncoderMasks build_encoder_masks(const std::vector<PatchMask>& masks);

// Per-cell normalized reconstruction target for one image. values is laid
// out (P, gh, gw) with P = 3*unit*unit and p = (c*unit + py)*unit + px, the
// decoder's output layout.
struct ReconTarget {
    int gh = 0, gw = 0, unit = kMaskUnit;
    std::vector<float> values;
    std::vector<float> mean, stdev;  // per cell, stdev clamped to >= 1e-6
};

ReconTarget make_recon_target(const std::vector<float>& chw, int h, int w);

template <typename T>
struct DecoderParams {
    Ptr<T> token;                   // learned fill for masked stage-4 positions
    Ptr<T> proj_in_w, proj_in_b;    // 1x1 conv C_enc -> dim
    BlockParams<T> block;           // one dense ConvNeXt-V2 block at dim
    Ptr<T> proj_out_w, proj_out_b;  // 1x1 conv dim -> patch_numel
};

template <typename T>
DecoderParams<T> make_decoder_params(int c_enc, int dim, int patch_numel, Rng& rng) {
    if (c_enc < 1 || dim < 1 || patch_numel < 1) {
        throw dim_error("decoder: dims must be positive");
    }
    DecoderParams<T> p;
    p.token = zeros<T>({c_enc}, true);
    trunc_normal_fill(*p.token, rng, 0.02);
    p.proj_in_w = zeros<T>({dim, c_enc, 1, 1}, true);
    trunc_normal_fill(*p.proj_in_w, rng, 0.02);
    p.proj_in_b = zeros<T>({dim}, true);
    p.block = make_block_params<T>(dim, rng);
    p.proj_out_w = zeros<T>({patch_numel, dim, 1, 1}, true);
    trunc_normal_fill(*p.proj_out_w, rng, 0.02);
    p.proj_out_b = zeros<T>({patch_numel}, true);
    return p;
}

template <typename T>
void register_decoder(ParamSet<T>& ps, const std::string& prefix, const DecoderParams<T>& p) {
    ps.add(prefix + ".token", p.token);
    ps.add(prefix + ".proj_in.w", p.proj_in_w);
    ps.add(prefix + ".proj_in.b", p.proj_in_b);
    register_block(ps, prefix + ".block", p.block);
    ps.add(prefix + ".proj_out.w", p.proj_out_w);
    ps.add(prefix + ".proj_out.b", p.proj_out_b);
}

// Token-fill masked stage-4 positions, project C->dim, one dense block,
// project dim->patch pixels. Output (N, patch_numel, gh, gw).
template <typename T>
Ptr<T> decoder_forward(const Ptr<T>& encoded, const DecoderParams<T>& p,
                       std::shared_ptr<const std::vector<std::uint8_t>> vis32) {
    if (encoded->ndim() != 4 || encoded->dim(1) != p.token->dim(0)) {
        throw dim_error("decoder: expected (N," + std::to_string(p.token->dim(0)) +
                        ",gh,gw) encoded map, got " + shape_str(encoded->shape));
    }
    auto h = mask_token_fill(encoded, p.token, std::move(vis32));
    h = conv2d<T>(h, p.proj_in_w, p.proj_in_b, 1, 0);
    h = block_forward(h, p.block);
    return conv2d<T>(h, p.proj_out_w, p.proj_out_b, 1, 0);
}

// Mean squared error over masked cells only; targets/masks are per-image and
// must match the prediction batch.
template <typename T>
Ptr<T> recon_loss(const Ptr<T>& pred, const std::vector<ReconTarget>& targets,
                  const std::vector<PatchMask>& masks) {
    const int N = pred->dim(0);
    if (static_cast<int>(targets.size()) != N || static_cast<int>(masks.size()) != N) {
        throw dim_error("recon_loss: " + std::to_string(targets.size()) + " targets / " +
                        std::to_string(masks.size()) + " masks for batch of " + std::to_string(N));
    }
    std::vector<T> target;
    std::vector<std::uint8_t> cell_mask;
    target.reserve(pred->numel());
    for (int n = 0; n < N; ++n) {
        target.insert(target.end(), targets[n].values.begin(), targets[n].values.end());
        cell_mask.insert(cell_mask.end(), masks[n].masked.begin(), masks[n].masked.end());
    }
    return masked_patch_mse(pred, target, cell_mask);
}

// ---- pretraining -----------------------------------------------------------

struct PretrainConfig {
    EncoderConfig encoder;
    int decoder_dim = 512;
    double mask_ratio = 0.6;
    int batch_size = 8;
    bool augment = true;
    LrSchedule schedule{50, 5, 5e-4, 5e-6};
    LionConfig<float> lion;
    std::uint64_t seed = 0;
};

struct PretrainModel {
    EncoderConfig cfg;
    int decoder_dim = 0;
    EncoderParams<float> enc;
    DecoderParams<float> dec;
    ParamSet<float> params;  // "encoder.*" then "decoder.*"
};

PretrainModel make_pretrain_model(const EncoderConfig& cfg, int decoder_dim, std::uint64_t seed);

// One full pass: fresh per-image masks, sparse encoder, decoder, masked MSE,
// one Lion step per batch at lr_at(schedule, epoch). Returns epoch-mean loss.
double pretrain_epoch(PretrainModel& model, const std::vector<Sample>& images,
                      const PretrainConfig& cfg, Lion<float>& opt, int epoch);

// Visualization planes (channel 0): original, mask-blanked view and the
// composite where visible pixels are copied and masked cells are filled with
// the de-normalized prediction.
struct ReconViz {
    int h = 0, w = 0;
    std::vector<float> original, masked_view, recon;
};

ReconViz reconstruct_viz(const PretrainModel& model, const Sample& sample, double mask_ratio,
                         std::uint64_t seed);

}  // namespace mednvc
