#ifndef S4M_PROFILE_HPP
#define S4M_PROFILE_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>

#include "s4m/config.hpp"
#include "s4m/fft.hpp"
#include "s4m/model.hpp"
#include "s4m/net.hpp"
#include "s4m/objectives.hpp"
#include "s4m/parallel.hpp"
#include "s4m/ssm.hpp"

namespace s4m::profile {

/// Counting convention written at the top of every report.
inline constexpr const char* mac_convention =
    "1 multiply-accumulate = 1 MAC; conv1d = Cout*(Cin/groups)*k*Lout; "
    "S4 = 3 real FFTs of size N=next_pow2(2L) at 5*N*log2(N) each, N pointwise products, "
    "4*S*N for kernel generation and L for the skip term, per channel; "
    "norms, activations, pooling and elementwise products = 1 MAC per element; "
    "RTF = wall seconds per second of audio (s/s), single thread";

inline double conv_macs(std::size_t cin, std::size_t cout, std::size_t k, std::size_t lout, std::size_t groups = 1)
{
    return static_cast<double>(cout) * static_cast<double>(cin / groups) * static_cast<double>(k) *
           static_cast<double>(lout);
}

inline double linear_macs(std::size_t din, std::size_t dout, std::size_t len)
{
    return static_cast<double>(din) * static_cast<double>(dout) * static_cast<double>(len);
}

/// One S4 layer over `channels` sequences of length `len`.
inline double s4_macs(std::size_t channels, std::size_t state, std::size_t len)
{
    const auto n = static_cast<double>(fft::next_pow2(2 * len));
    const double per_channel = 3.0 * 5.0 * n * std::log2(n) + n + 4.0 * static_cast<double>(state) * n +
                               static_cast<double>(len);
    return static_cast<double>(channels) * per_channel;
}

namespace detail {

inline double elementwise(std::size_t c, std::size_t len, double per_element = 1.0)
{
    return per_element * static_cast<double>(c) * static_cast<double>(len);
}

inline double norm_macs(std::size_t c, std::size_t len)
{
    return elementwise(c, len, 2.0);
}

inline double s4_block_macs(const SepConfig& cfg, std::size_t len)
{
    const std::size_t c = cfg.c();
    return norm_macs(c, len) + s4_macs(c, cfg.s(), len) + elementwise(c, len) + linear_macs(c, c, len) +
           elementwise(c, len) + norm_macs(c, len) + 2.0 * linear_macs(c, c, len) + elementwise(c, len) +
           elementwise(c, len);
}

} // namespace detail

/// Analytic MAC count of one inference pass over `samples` input samples.
inline double count_macs_samples(const SepConfig& cfg, std::size_t samples)
{
    const std::size_t c = cfg.c();
    const std::size_t l0 = net::encoder_frames(cfg, samples);
    std::vector<std::size_t> lens{l0};
    for (std::size_t i = 1; i < cfg.scales(); ++i) {
        lens.push_back(lens.back() / 2);
    }
    const std::size_t coarse = lens.back();

    double core = 0.0;
    for (std::size_t i = 1; i < cfg.scales(); ++i) {
        core += conv_macs(c, c, down_kernel, lens[i], c) + detail::norm_macs(c, lens[i]);
    }
    for (std::size_t i = 0; i + 1 < cfg.scales(); ++i) {
        core += detail::elementwise(c, lens[i]) + detail::elementwise(c, coarse);
    }
    if (cfg.mid_s4) {
        core += detail::s4_block_macs(cfg, coarse);
    }
    for (std::size_t i = cfg.scales() - 1; i >= 1; --i) {
        const std::size_t fine = lens[i - 1];
        core += detail::elementwise(c, fine) + detail::elementwise(c, lens[i]);
        core += 2.0 * (conv_macs(c, c, attn_kernel, fine, c) + detail::norm_macs(c, fine));
        core += 3.0 * detail::elementwise(c, fine);
        if (!cfg.tiny) {
            core += detail::s4_block_macs(cfg, fine);
        }
    }

    double total = conv_macs(1, c, cfg.enc_kernel(), l0);
    total += static_cast<double>(cfg.repeats()) * core;
    total += static_cast<double>(cfg.repeats() - 1) * detail::elementwise(c, l0);
    total += linear_macs(c, cfg.n() * c, l0) + detail::elementwise(cfg.n() * c, l0);
    total += static_cast<double>(cfg.n()) * (detail::elementwise(c, l0) + conv_macs(c, 1, cfg.enc_kernel(), l0));
    return total;
}

/// G MACs per second of audio.
inline double count_macs(const SepConfig& cfg, double seconds_of_audio = 1.0)
{
    if (!(seconds_of_audio > 0.0)) {
        throw invalid_argument("count_macs: seconds_of_audio must be positive");
    }
    const auto samples = static_cast<std::size_t>(std::llround(seconds_of_audio * cfg.sample_rate_hz));
    return count_macs_samples(cfg, samples) / seconds_of_audio / 1e9;
}

inline std::string hardware_id()
{
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                auto name = line.substr(colon + 1);
                name.erase(0, name.find_first_not_of(' '));
                return name + " (" + std::to_string(std::thread::hardware_concurrency()) + " logical cpus)";
            }
        }
    }
    return "unknown cpu";
}

/// time(kernel_fast at 2L) / time(at L) for each L in `lengths`, using the
/// median of `reps` timings per length.
inline std::vector<double> kernel_timing_ratios(std::size_t state_size, const std::vector<std::size_t>& lengths,
                                                std::size_t reps = 7)
{
    ScopedThreadLimit single(1);
    const ssm::DPLRSystem sys = ssm::hippo_legs_init(state_size, 1);
    auto median_time = [&](std::size_t len) {
        std::vector<double> t;
        for (std::size_t r = 0; r < reps; ++r) {
            const auto start = std::chrono::steady_clock::now();
            const auto k = ssm::kernel_fast(sys, len);
            const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start;
            if (k.k.empty()) {
                throw std::logic_error("kernel_fast returned nothing");
            }
            t.push_back(d.count());
        }
        std::nth_element(t.begin(), t.begin() + static_cast<long>(t.size() / 2), t.end());
        return t[t.size() / 2];
    };
    std::vector<double> out;
    for (std::size_t len : lengths) {
        out.push_back(median_time(2 * len) / median_time(len));
    }
    return out;
}

struct ComplexityReport {
    std::size_t params = 0;
    double macs_per_second_of_audio = 0.0; // G/s
    double cpu_rtf_forward_s = 0.0;
    double cpu_rtf_forward_backward_s = -1.0; // negative when not measured
    std::size_t rtf_runs = 0;
    std::size_t warmup_runs = 0;
    std::string hardware;
};

struct RtfOptions {
    std::size_t runs = 1000;
    std::size_t warmup = 1;
    std::size_t clips = 10;
    double clip_seconds = 1.0;
    bool backward = false;
    std::uint64_t seed = 0;
};

namespace detail {

inline double time_clips(const std::vector<Tensor>& clips, const ModelParams& params, const SepConfig& cfg,
                         bool backward)
{
    const auto start = std::chrono::steady_clock::now();
    for (const auto& x : clips) {
        if (backward) {
            Tape tape;
            const ParamVars p = bind_params(tape, params);
            const Var est = net::unfold_forward(tape.constant(x), p, cfg, s4::Mode::train);
            Tensor target(est.shape(), 0.0);
            for (std::size_t i = 0; i < target.size(); ++i) {
                target[i] = x[i % x.size()];
            }
            const Var loss = objectives::pit_si_snr_loss(est, target);
            (void)tape.backward(loss);
        } else {
            (void)net::infer(x, params, cfg, s4::Mode::conv);
        }
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    return elapsed.count();
}

} // namespace detail

/// Times forward (and optionally forward+backward) passes over `clips`
/// random clips, pinned to one thread. Warm-up runs are excluded.
inline ComplexityReport measure_rtf(const SepConfig& cfg, const ModelParams& params, const RtfOptions& opt = {})
{
    if (opt.runs == 0 || opt.clips == 0) {
        throw invalid_argument("measure_rtf: runs and clips must be >= 1");
    }
    ScopedThreadLimit single(1);
    const auto samples = static_cast<std::size_t>(std::llround(opt.clip_seconds * cfg.sample_rate_hz));
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> noise(0.0, 0.1);
    std::vector<Tensor> clips;
    for (std::size_t i = 0; i < opt.clips; ++i) {
        Tensor x({1, 1, samples});
        for (double& v : x.values()) {
            v = noise(rng);
        }
        clips.push_back(std::move(x));
    }

    auto rtf = [&](bool backward) {
        for (std::size_t i = 0; i < opt.warmup; ++i) {
            (void)detail::time_clips(clips, params, cfg, backward);
        }
        double total = 0.0;
        for (std::size_t r = 0; r < opt.runs; ++r) {
            total += detail::time_clips(clips, params, cfg, backward);
        }
        const double per_clip = total / static_cast<double>(opt.runs) / static_cast<double>(opt.clips);
        return per_clip / opt.clip_seconds;
    };

    ComplexityReport out;
    out.params = count_parameters(cfg);
    out.macs_per_second_of_audio = count_macs(cfg);
    out.cpu_rtf_forward_s = rtf(false);
    if (opt.backward) {
        out.cpu_rtf_forward_backward_s = rtf(true);
    }
    out.rtf_runs = opt.runs;
    out.warmup_runs = opt.warmup;
    out.hardware = hardware_id();
    return out;
}

inline void write_report(std::ostream& os, const ComplexityReport& r)
{
    os << "# MAC convention: " << mac_convention << '\n';
    os << "# hardware: " << r.hardware << '\n';
    os << "params = " << r.params << '\n';
    os << "macs_per_second_of_audio_g = " << r.macs_per_second_of_audio << '\n';
    os << "cpu_rtf_forward_s = " << r.cpu_rtf_forward_s << '\n';
    if (r.cpu_rtf_forward_backward_s >= 0.0) {
        os << "cpu_rtf_forward_backward_s = " << r.cpu_rtf_forward_backward_s << '\n';
    }
    os << "rtf_runs = " << r.rtf_runs << '\n';
    os << "warmup_runs = " << r.warmup_runs << '\n';
}

} // namespace s4m::profile

#endif
