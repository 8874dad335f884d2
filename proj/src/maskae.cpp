#include "mednvc/maskae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mednvc {

PatchMask generate_mask(std::uint64_t seed, double ratio, int gh, int gw) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("mask ratio must be in [0,1), got " + std::to_string(ratio));
    }
    if (gh < 1 || gw < 1) {
        throw std::invalid_argument("mask grid must be positive, got " + std::to_string(gh) + "x" +
                                    std::to_string(gw));
    }
    const int cells = gh * gw;
    const int k = static_cast<int>(std::lround(cells * ratio));
    PatchMask m;
    m.gh = gh;
    m.gw = gw;
    m.masked.assign(static_cast<std::size_t>(cells), 0);
    std::vector<int> idx(static_cast<std::size_t>(cells));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x3A5C));
    rng.shuffle(idx);
    for (int i = 0; i < k; ++i) m.masked[static_cast<std::size_t>(idx[i])] = 1;
    return m;
}

namespace {

std::vector<std::uint8_t> replicate(const PatchMask& m, int rep, bool as_visibility) {
    const int H = m.gh * rep, W = m.gw * rep;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::uint8_t masked = m.masked[static_cast<std::size_t>(y / rep) * m.gw + x / rep];
            out[static_cast<std::size_t>(y) * W + x] = as_visibility ? !masked : masked;
        }
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> mask_propagate(const PatchMask& m, int stride_level) {
    if (stride_level != 4 && stride_level != 8 && stride_level != 16 && stride_level != 32) {
        throw std::invalid_argument("stride level must be one of 4/8/16/32, got " +
                                    std::to_string(stride_level));
    }
    return replicate(m, kMaskUnit / stride_level, false);
}

std::vector<std::uint8_t> mask_to_pixels(const PatchMask& m) {
    return replicate(m, kMaskUnit, false);
}

EncoderMasks build_encoder_masks(const std::vector<PatchMask>& masks) {
    if (masks.empty()) throw dim_error("encoder masks: empty batch");
    for (const auto& m : masks) {
        if (m.gh != masks[0].gh || m.gw != masks[0].gw) {
            throw dim_error("encoder masks: grids in one batch must agree");
        }
    }
    auto level = [&](int rep) {
        auto out = std::make_shared<std::vector<std::uint8_t>>();
        out->reserve(masks.size() * static_cast<std::size_t>(masks[0].gh * rep) *
                     static_cast<std::size_t>(masks[0].gw * rep));
        for (const auto& m : masks) {
            const auto plane = replicate(m, rep, true);
            out->insert(out->end(), plane.begin(), plane.end());
        }
        return std::shared_ptr<const std::vector<std::uint8_t>>(std::move(out));
    };
    EncoderMasks em;
    em.pix = level(kMaskUnit);
    em.s4 = level(kMaskUnit / 4);
    em.s8 = level(kMaskUnit / 8);
    em.s16 = level(kMaskUnit / 16);
    em.s32 = level(1);
    return em;
}

ReconTarget make_recon_target(const std::vector<float>& chw, int h, int w) {
    if (h % kMaskUnit != 0 || w % kMaskUnit != 0) {
        throw dim_error("recon target: image size " + std::to_string(h) + "x" +
                        std::to_string(w) + " not divisible by the mask unit");
    }
    if (chw.size() != static_cast<std::size_t>(3) * h * w) {
        throw dim_error("recon target: buffer does not match 3x" + std::to_string(h) + "x" +
                        std::to_string(w));
    }
    ReconTarget t;
    t.gh = h / kMaskUnit;
    t.gw = w / kMaskUnit;
    const int unit = kMaskUnit;
    const int P = 3 * unit * unit;
    const std::size_t cells = static_cast<std::size_t>(t.gh) * t.gw;
    t.values.resize(static_cast<std::size_t>(P) * cells);
    t.mean.resize(cells);
    t.stdev.resize(cells);
    for (int gy = 0; gy < t.gh; ++gy) {
        for (int gx = 0; gx < t.gw; ++gx) {
            const std::size_t cell = static_cast<std::size_t>(gy) * t.gw + gx;
            auto pixel = [&](int c, int py, int px) {
                return static_cast<double>(
                    chw[(static_cast<std::size_t>(c) * h + gy * unit + py) * w + gx * unit + px]);
            };
            double acc = 0.0;
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < unit; ++py)
                    for (int px = 0; px < unit; ++px) acc += pixel(c, py, px);
            const double mean = acc / P;
            double var = 0.0;
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < unit; ++py)
                    for (int px = 0; px < unit; ++px) {
                        const double d = pixel(c, py, px) - mean;
                        var += d * d;
                    }
            const double stdev = std::max(std::sqrt(var / P), 1e-6);
            t.mean[cell] = static_cast<float>(mean);
            t.stdev[cell] = static_cast<float>(stdev);
            for (int c = 0; c < 3; ++c)
                for (int py = 0; py < unit; ++py)
                    for (int px = 0; px < unit; ++px) {
                        const int p = (c * unit + py) * unit + px;
                        t.values[(static_cast<std::size_t>(p) * t.gh + gy) * t.gw + gx] =
                            static_cast<float>((pixel(c, py, px) - mean) / stdev);
                    }
        }
    }
    return t;
}

// ---- pretraining -----------------------------------------------------------

PretrainModel make_pretrain_model(const EncoderConfig& cfg, int decoder_dim, std::uint64_t seed) {
    validate(cfg);
    PretrainModel m;
    m.cfg = cfg;
    m.decoder_dim = decoder_dim;
    Rng rng(derive_seed(seed, 0x11A5));
    m.enc = make_encoder_params<float>(cfg, rng);
    m.dec = make_decoder_params<float>(cfg.stage_dims[3], decoder_dim,
                                       3 * kMaskUnit * kMaskUnit, rng);
    register_encoder(m.params, "encoder", m.enc);
    register_decoder(m.params, "decoder", m.dec);
    return m;
}

double pretrain_epoch(PretrainModel& model, const std::vector<Sample>& images,
                      const PretrainConfig& cfg, Lion<float>& opt, int epoch) {
    if (images.empty()) throw train_error("pretrain: empty image set");
    if (cfg.batch_size < 1) throw std::invalid_argument("pretrain: batch size must be positive");
    if (!(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0)) {
        throw std::invalid_argument("pretrain: mask ratio must be in (0,1)");
    }
    const int H = images[0].height, W = images[0].width;
    for (const auto& s : images) {
        if (s.height != H || s.width != W || s.image.size() != static_cast<std::size_t>(3) * H * W) {
            throw dim_error("pretrain: images must share one size");
        }
    }
    if (H % kMaskUnit != 0 || W % kMaskUnit != 0) {
        throw dim_error("pretrain: image size " + std::to_string(H) + "x" + std::to_string(W) +
                        " not divisible by the mask unit");
    }
    const double lr = lr_at(cfg.schedule, epoch);
    const int gh = H / kMaskUnit, gw = W / kMaskUnit;
    const std::size_t hw3 = static_cast<std::size_t>(3) * H * W;

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(cfg.seed, 0xE70C, static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
        const int nb = static_cast<int>(
            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - done));
        std::vector<float> batch(static_cast<std::size_t>(nb) * hw3);
        std::vector<PatchMask> masks;
        std::vector<ReconTarget> targets;
        for (int j = 0; j < nb; ++j) {
            const std::size_t i = order[done + j];
            std::vector<float> img = images[i].image;
            if (cfg.augment) {
                Rng arng(derive_seed(cfg.seed, 0xA096, static_cast<std::uint64_t>(epoch), i));
                augment_image(img, 3, H, W, arng);
            }
            targets.push_back(make_recon_target(img, H, W));
            masks.push_back(generate_mask(
                derive_seed(cfg.seed, 0x300D, static_cast<std::uint64_t>(epoch), i),
                cfg.mask_ratio, gh, gw));
            std::copy(img.begin(), img.end(), batch.begin() + static_cast<std::size_t>(j) * hw3);
        }
        auto x = make_tensor<float>({nb, 3, H, W}, std::move(batch));
        const EncoderMasks em = build_encoder_masks(masks);
        model.params.zero_grads();
        auto encoded = encoder_forward(x, model.cfg, model.enc, 4, &em);
        auto pred = decoder_forward(encoded, model.dec, em.s32);
        auto loss = recon_loss(pred, targets, masks);
        loss->backward();
        opt.step(model.params, lr);
        loss_sum += static_cast<double>(loss->data[0]) * nb;
        done += static_cast<std::size_t>(nb);
    }
    return loss_sum / static_cast<double>(order.size());
}

ReconViz reconstruct_viz(const PretrainModel& model, const Sample& sample, double mask_ratio,
                         std::uint64_t seed) {
    const int H = sample.height, W = sample.width;
    if (H % kMaskUnit != 0 || W % kMaskUnit != 0) {
        throw dim_error("reconstruct: image size " + std::to_string(H) + "x" + std::to_string(W) +
                        " not divisible by the mask unit");
    }
    const int gh = H / kMaskUnit, gw = W / kMaskUnit;
    const PatchMask mask = generate_mask(seed, mask_ratio, gh, gw);
    auto x = make_tensor<float>({1, 3, H, W}, sample.image);
    const EncoderMasks em = build_encoder_masks({mask});
    auto encoded = encoder_forward(x, model.cfg, model.enc, 4, &em);
    auto pred = decoder_forward(encoded, model.dec, em.s32);
    const ReconTarget target = make_recon_target(sample.image, H, W);

    ReconViz viz;
    viz.h = H;
    viz.w = W;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    viz.original.assign(sample.image.begin(), sample.image.begin() + hw);  // channel 0
    viz.masked_view = viz.original;
    const auto pix = mask_to_pixels(mask);
    for (std::size_t i = 0; i < hw; ++i) {
        if (pix[i]) viz.masked_view[i] = 0.0f;
    }
    viz.recon = viz.original;
    const int unit = kMaskUnit;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const std::size_t cell = static_cast<std::size_t>(gy) * gw + gx;
            if (!mask.masked[cell]) continue;
            const float mean = target.mean[cell], stdev = target.stdev[cell];
            for (int py = 0; py < unit; ++py) {
                for (int px = 0; px < unit; ++px) {
                    const int p = py * unit + px;  // channel 0 slice of the patch
                    const float v =
                        pred->data[(static_cast<std::size_t>(p) * gh + gy) * gw + gx];
                    viz.recon[(static_cast<std::size_t>(gy) * unit + py) * W + gx * unit + px] =
                        std::clamp(v * stdev + mean, 0.0f, 1.0f);
                }
            }
        }
    }
    return viz;
}

}  // namespace mednvc
