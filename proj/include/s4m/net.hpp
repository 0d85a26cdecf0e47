#ifndef S4M_NET_HPP
#define S4M_NET_HPP

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "s4m/config.hpp"
#include "s4m/model.hpp"
#include "s4m/ops.hpp"
#include "s4m/s4_layer.hpp"

namespace s4m::net {

struct Encoded {
    Var features; // F_0: [B, C, L_0]
    std::size_t pad = 0;
    std::size_t samples = 0;
};

/// Frames produced for T input samples once the input is right-padded so the
/// frame count is a multiple of 2^(num_scales - 1).
inline std::size_t encoder_frames(const SepConfig& cfg, std::size_t samples)
{
    const std::size_t k = cfg.enc_kernel();
    const std::size_t s = cfg.enc_stride();
    if (samples < k) {
        throw invalid_argument("encode_waveform: " + std::to_string(samples) + " samples is shorter than the " +
                               std::to_string(k) + "-sample encoder kernel");
    }
    const std::size_t raw = (samples - k + s - 1) / s + 1;
    const std::size_t unit = std::size_t{1} << (cfg.scales() - 1);
    return (raw + unit - 1) / unit * unit;
}

inline Encoded encode_waveform(const Var& x, const ParamVars& p, const SepConfig& cfg)
{
    if (x.value().rank() != 3 || x.dim(1) != 1) {
        throw invalid_argument("encode_waveform: expected [batch, 1, T], got " + shape_str(x.shape()));
    }
    const std::size_t t = x.dim(2);
    const std::size_t frames = encoder_frames(cfg, t);
    const std::size_t pad = (frames - 1) * cfg.enc_stride() + cfg.enc_kernel() - t;
    const Var padded = pad ? ops::pad_time(x, 0, pad) : x;
    return {ops::conv1d(padded, p.at("encoder.weight"), std::nullopt, cfg.enc_stride()), pad, t};
}

/// Depthwise kernel-5 conv, stride 2, dilation 2, then global norm.
/// Halves the length exactly.
inline Var downsample_stage(const Var& f, const ParamVars& p, std::size_t scale)
{
    if (f.dim(2) % 2 != 0) {
        throw std::logic_error("downsample_stage: odd length " + std::to_string(f.dim(2)));
    }
    const std::string n = "down" + std::to_string(scale);
    const Var y = ops::conv1d(f, p.at(n + ".weight"), p.at(n + ".bias"), 2, 2, 4, f.dim(1));
    return ops::global_norm(y, p.at(n + ".norm.gain"), p.at(n + ".norm.bias"));
}

/// Average-pools every scale to the coarsest length and sums.
inline Var fuse_multiscale(const std::vector<Var>& feats)
{
    const std::size_t last = feats.size() - 1;
    const std::size_t target = feats[last].dim(2);
    Var acc = feats[last];
    for (std::size_t i = last; i-- > 0;) {
        const std::size_t window = std::size_t{1} << (last - i);
        if (feats[i].dim(2) != target * window) {
            throw invalid_argument("fuse_multiscale: scale " + std::to_string(i) + " has shape " +
                                   shape_str(feats[i].shape()) + ", coarsest " + shape_str(feats[last].shape()));
        }
        acc = ops::add(ops::avg_pool1d(feats[i], window, window), acc);
    }
    return acc;
}

inline Var pointwise(const Var& x, const ParamVars& p, const std::string& name)
{
    return ops::conv1d(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

/// norm -> S4 -> GELU -> linear, residual; then a norm/linear/GELU/linear
/// feed-forward, residual.
inline Var s4_block(const Var& f, const ParamVars& p, const std::string& prefix, s4::Mode mode)
{
    const Var u = ops::global_norm(f, p.at(prefix + ".norm1.gain"), p.at(prefix + ".norm1.bias"));
    const Var v = ops::gelu(s4::apply(s4::Layer::from(p, prefix + ".s4."), u, mode));
    const Var out = ops::add(pointwise(v, p, prefix + ".proj"), f);
    const Var z = ops::global_norm(out, p.at(prefix + ".norm2.gain"), p.at(prefix + ".norm2.bias"));
    return ops::add(out, pointwise(ops::gelu(pointwise(z, p, prefix + ".ffn1")), p, prefix + ".ffn2"));
}

/// sigmoid(f1(up(F'_i))) * F'_{i-1} + f2(up(F'_i)).
inline Var local_attention(const Var& fine, const Var& coarse, const ParamVars& p, const std::string& prefix)
{
    if (fine.dim(2) != 2 * coarse.dim(2) || fine.dim(1) != coarse.dim(1) || fine.dim(0) != coarse.dim(0)) {
        throw invalid_argument("local_attention: fine " + shape_str(fine.shape()) + " must be twice as long as coarse " +
                               shape_str(coarse.shape()));
    }
    const Var up = ops::nearest_upsample(coarse, 2);
    auto branch = [&](const std::string& f) {
        const Var y = ops::conv1d(up, p.at(prefix + f + ".weight"), p.at(prefix + f + ".bias"), 1, 1, attn_kernel / 2,
                                  up.dim(1));
        return ops::global_norm(y, p.at(prefix + f + ".norm.gain"), p.at(prefix + f + ".norm.bias"));
    };
    const Var rho = ops::sigmoid(branch(".f1"));
    const Var tau = branch(".f2");
    return ops::add(ops::mul(rho, fine), tau);
}

/// One decoder step from scale i to scale i-1. `mask` lives at scale i.
inline Var decoder_stage(const Var& fine, const Var& coarse, const Var& mask, const ParamVars& p, std::size_t scale,
                         bool tiny, s4::Mode mode)
{
    if (mask.shape() != coarse.shape()) {
        throw invalid_argument("decoder_stage: mask " + shape_str(mask.shape()) + " vs features " +
                               shape_str(coarse.shape()));
    }
    const std::string prefix = "dec" + std::to_string(scale);
    const Var masked_fine = ops::mul(fine, ops::nearest_upsample(mask, 2));
    const Var masked_coarse = ops::mul(coarse, mask);
    const Var out = local_attention(masked_fine, masked_coarse, p, prefix);
    return tiny ? out : s4_block(out, p, prefix + ".block", mode);
}

/// Down-sampling, fusion, mid S4 block and the decoder stages.
inline Var core_block(const Var& input, const ParamVars& p, const SepConfig& cfg, s4::Mode mode)
{
    std::vector<Var> feats{input};
    for (std::size_t i = 1; i < cfg.scales(); ++i) {
        feats.push_back(downsample_stage(feats.back(), p, i));
    }
    const Var fused = fuse_multiscale(feats);
    Var mask = cfg.mid_s4 ? s4_block(fused, p, "mid", mode) : fused;
    for (std::size_t i = cfg.scales() - 1; i >= 1; --i) {
        mask = decoder_stage(feats[i - 1], feats[i], mask, p, i, cfg.tiny, mode);
    }
    return mask;
}

/// Mask head and shared transposed-conv reconstruction. Returns [B, N, T].
inline Var reconstruct(const Var& g, const Encoded& enc, const ParamVars& p, const SepConfig& cfg)
{
    const std::size_t c = cfg.c();
    const Var masks = ops::relu(pointwise(g, p, "mask"));
    std::vector<Var> speakers;
    for (std::size_t n = 0; n < cfg.n(); ++n) {
        const Var feat = ops::mul(ops::channel_slice(masks, n * c, c), enc.features);
        const Var wave =
            ops::conv1d_transposed(feat, p.at("decoder.weight"), p.at("decoder.bias"), cfg.enc_stride());
        speakers.push_back(ops::crop_time(wave, 0, enc.samples));
    }
    return speakers.size() == 1 ? speakers[0] : ops::concat_channels(speakers);
}

/// x: [B, 1, T] -> estimates [B, N, T]. The core block runs B times with
/// shared weights; pass b sees F_0 plus the output of pass b-1.
inline Var unfold_forward(const Var& x, const ParamVars& p, const SepConfig& cfg, s4::Mode mode = s4::Mode::train)
{
    const Encoded enc = encode_waveform(x, p, cfg);
    Var g = core_block(enc.features, p, cfg, mode);
    for (std::size_t b = 1; b < cfg.repeats(); ++b) {
        g = core_block(ops::add(enc.features, g), p, cfg, mode);
    }
    return reconstruct(g, enc, p, cfg);
}

/// Gradient-free forward on a private tape.
inline Tensor infer(const Tensor& x, const ModelParams& params, const SepConfig& cfg, s4::Mode mode = s4::Mode::conv)
{
    Tape tape(false);
    const ParamVars p = bind_params(tape, params);
    return unfold_forward(tape.constant(x), p, cfg, mode).value();
}

} // namespace s4m::net

#endif
