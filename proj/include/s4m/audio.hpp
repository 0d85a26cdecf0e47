#ifndef S4M_AUDIO_HPP
#define S4M_AUDIO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "s4m/error.hpp"
#include "s4m/parallel.hpp"

namespace s4m::audio {

struct AudioClip {
    std::vector<double> samples;
    int sample_rate_hz = 0;
};

// ---------------------------------------------------------------- WAV I/O

namespace detail {

inline std::uint32_t le32(const unsigned char* p)
{
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t le16(const unsigned char* p)
{
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline void put16(std::string& out, std::uint16_t v)
{
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
}

} // namespace detail

/// Parses a RIFF/WAVE image holding 16-bit PCM mono audio.
inline AudioClip decode_wav(const std::string& bytes, const std::string& origin = "<memory>")
{
    auto fail = [&](const std::string& m) { throw format_error(origin + ": " + m); };
    const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 12) {
        fail("truncated RIFF header");
    }
    if (bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) {
        fail("not a RIFF/WAVE file");
    }
    std::size_t pos = 12;
    bool have_fmt = false;
    AudioClip clip;
    while (pos + 8 <= bytes.size()) {
        const std::string id = bytes.substr(pos, 4);
        const std::size_t size = detail::le32(b + pos + 4);
        const std::size_t body = pos + 8;
        if (body + size > bytes.size()) {
            fail("truncated '" + id + "' chunk");
        }
        if (id == "fmt ") {
            if (size < 16) {
                fail("fmt chunk too short");
            }
            const std::uint16_t format = detail::le16(b + body);
            const std::uint16_t channels = detail::le16(b + body + 2);
            const std::uint16_t bits = detail::le16(b + body + 14);
            if (format != 1) {
                fail("not PCM (format tag " + std::to_string(format) + ")");
            }
            if (channels != 1) {
                fail("not mono (" + std::to_string(channels) + " channels)");
            }
            if (bits != 16) {
                fail("not 16-bit (" + std::to_string(bits) + " bits per sample)");
            }
            clip.sample_rate_hz = static_cast<int>(detail::le32(b + body + 4));
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) {
                fail("data chunk before fmt chunk");
            }
            clip.samples.resize(size / 2);
            for (std::size_t i = 0; i < clip.samples.size(); ++i) {
                const auto v = static_cast<std::int16_t>(detail::le16(b + body + 2 * i));
                clip.samples[i] = v / 32768.0;
            }
            return clip;
        }
        pos = body + size + (size & 1);
    }
    fail(have_fmt ? "missing data chunk" : "missing fmt chunk");
    return clip;
}

/// Saturating 16-bit quantization: round(x * 32768) clamped to the int16 range.
inline std::int16_t quantize(double x)
{
    const double v = std::round(x * 32768.0);
    return static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
}

inline std::string encode_wav(const AudioClip& clip)
{
    const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    std::string out = "RIFF";
    detail::put32(out, 36 + data_bytes);
    out += "WAVEfmt ";
    detail::put32(out, 16);
    detail::put16(out, 1);
    detail::put16(out, 1);
    detail::put32(out, static_cast<std::uint32_t>(clip.sample_rate_hz));
    detail::put32(out, static_cast<std::uint32_t>(clip.sample_rate_hz) * 2);
    detail::put16(out, 2);
    detail::put16(out, 16);
    out += "data";
    detail::put32(out, data_bytes);
    for (double x : clip.samples) {
        detail::put16(out, static_cast<std::uint16_t>(quantize(x)));
    }
    return out;
}

inline AudioClip read_wav(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_wav(ss.str(), path);
}

inline void write_wav(const std::string& path, const AudioClip& clip)
{
    for (double x : clip.samples) {
        if (!std::isfinite(x)) {
            throw invalid_argument("write_wav: non-finite sample for " + path);
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw io_error("cannot write " + path);
    }
    const std::string bytes = encode_wav(clip);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw io_error("short write to " + path);
    }
}

// ------------------------------------------------------------------ mixing

inline double power(const std::vector<double>& x)
{
    double acc = 0.0;
    for (double v : x) {
        acc += v * v;
    }
    return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

struct Mixture {
    AudioClip mixture;
    AudioClip source1;
    AudioClip source2;
    double gain = 1.0; // shared peak-normalization factor that was applied
};

/// Peak level that mixtures are brought down to when they would clip.
inline constexpr double peak_target = 0.9;

/// Rescales s2 so that 10 log10(P1 / P2) = snr_db and sums. If the mixture
/// peak exceeds 1, all three signals share a gain that brings it to 0.9.
inline Mixture mix_sources(const AudioClip& s1, const AudioClip& s2, double snr_db)
{
    if (s1.samples.size() != s2.samples.size() || s1.sample_rate_hz != s2.sample_rate_hz) {
        throw invalid_argument("mix_sources: sources differ in length or rate");
    }
    const double p1 = power(s1.samples);
    const double p2 = power(s2.samples);
    if (p1 == 0.0 || p2 == 0.0) {
        throw invalid_argument("mix_sources: silent source");
    }
    const double scale2 = std::sqrt(p1 / (p2 * std::pow(10.0, snr_db / 10.0)));
    Mixture m;
    m.source1 = s1;
    m.source2 = s2;
    m.mixture = s1;
    double peak = 0.0;
    for (std::size_t i = 0; i < s1.samples.size(); ++i) {
        m.source2.samples[i] *= scale2;
        m.mixture.samples[i] = m.source1.samples[i] + m.source2.samples[i];
        peak = std::max(peak, std::abs(m.mixture.samples[i]));
    }
    if (peak > 1.0) {
        m.gain = peak_target / peak;
        for (auto* clip : {&m.mixture, &m.source1, &m.source2}) {
            for (double& v : clip->samples) {
                v *= m.gain;
            }
        }
    }
    return m;
}

// -------------------------------------------------------- synthetic corpus

struct ManifestEntry {
    std::string mixture;
    std::vector<std::string> sources;
    double snr_db = 0.0;
    std::uint64_t seed = 0;
};

using Manifest = std::vector<ManifestEntry>;

inline std::string format_manifest_line(const ManifestEntry& e)
{
    std::ostringstream os;
    os.precision(17);
    os << e.mixture;
    for (const auto& s : e.sources) {
        os << '|' << s;
    }
    os << '|' << e.snr_db << '|' << e.seed;
    return os.str();
}

inline void write_manifest(const std::string& path, const Manifest& m)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw io_error("cannot write manifest " + path);
    }
    for (const auto& e : m) {
        out << format_manifest_line(e) << '\n';
    }
}

/// Reads "mixture|src1|src2|snr_db|seed" records. Relative paths are resolved
/// against the manifest's directory.
inline Manifest read_manifest(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot open manifest " + path);
    }
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    Manifest out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '|')) {
            fields.push_back(f);
        }
        if (fields.size() < 5) {
            throw format_error(path + ":" + std::to_string(lineno) + ": expected mixture|src1|src2|snr|seed");
        }
        auto resolve = [&](const std::string& p) {
            const std::filesystem::path fp(p);
            return (fp.is_absolute() ? fp : base / fp).string();
        };
        ManifestEntry e;
        e.mixture = resolve(fields[0]);
        for (std::size_t i = 1; i + 2 < fields.size(); ++i) {
            e.sources.push_back(resolve(fields[i]));
        }
        try {
            e.snr_db = std::stod(fields[fields.size() - 2]);
            e.seed = std::stoull(fields.back());
        } catch (const std::exception&) {
            throw format_error(path + ":" + std::to_string(lineno) + ": bad snr or seed field");
        }
        out.push_back(std::move(e));
    }
    return out;
}

struct Splits {
    Manifest train;
    Manifest valid;
    Manifest test;
};

/// 80/10/10 by manifest order.
inline Splits split_manifest(const Manifest& m)
{
    const std::size_t n_train = m.size() * 8 / 10;
    const std::size_t n_valid = m.size() / 10;
    Splits s;
    s.train.assign(m.begin(), m.begin() + static_cast<long>(n_train));
    s.valid.assign(m.begin() + static_cast<long>(n_train), m.begin() + static_cast<long>(n_train + n_valid));
    s.test.assign(m.begin() + static_cast<long>(n_train + n_valid), m.end());
    return s;
}

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Independent stream for item `index` of a corpus seeded with `seed`.
inline std::uint64_t item_seed(std::uint64_t seed, std::uint64_t index)
{
    return splitmix64(splitmix64(seed) ^ index);
}

namespace detail {

// RBJ band-pass biquad (constant 0 dB peak gain).
struct Biquad {
    double b0, b1, b2, a1, a2;
    double z1 = 0.0;
    double z2 = 0.0;

    static Biquad bandpass(double center_hz, double q, double sr)
    {
        const double w = 2.0 * std::numbers::pi * center_hz / sr;
        const double alpha = std::sin(w) / (2.0 * q);
        const double a0 = 1.0 + alpha;
        return {alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w) / a0, (1.0 - alpha) / a0};
    }

    double operator()(double x)
    {
        const double y = b0 * x + z1;
        z1 = b1 * x - a1 * y + z2;
        z2 = b2 * x - a2 * y;
        return y;
    }
};

} // namespace detail

inline constexpr double tone_max_hz = 1200.0;
inline constexpr double noise_low_hz = 400.0;
inline constexpr double noise_high_hz = 3400.0;

/// Harmonic stack, f0 ~ U[80, 250] Hz, 1/k amplitudes up to tone_max_hz,
/// under a slow sinusoidal amplitude envelope.
inline std::vector<double> harmonic_source(std::size_t n, int sr, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double f0 = 80.0 + 170.0 * u01(rng);
    const double am_rate = 0.5 + 3.5 * u01(rng);
    const double am_phase = 2.0 * std::numbers::pi * u01(rng);
    const double am_depth = 0.3 + 0.6 * u01(rng);
    const double limit = std::min(tone_max_hz, 0.45 * sr);
    std::vector<double> phases;
    for (double f = f0; f <= limit; f += f0) {
        phases.push_back(2.0 * std::numbers::pi * u01(rng));
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        double v = 0.0;
        for (std::size_t k = 0; k < phases.size(); ++k) {
            const double h = static_cast<double>(k + 1);
            v += std::sin(2.0 * std::numbers::pi * f0 * h * t + phases[k]) / h;
        }
        const double env = 1.0 - am_depth * 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * am_rate * t + am_phase));
        out[i] = env * v;
    }
    return out;
}

/// Band-passed noise switched on and off in bursts of 50-300 ms separated by
/// 20-200 ms gaps, with 10 ms raised-cosine ramps.
inline std::vector<double> burst_source(std::size_t n, int sr, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double hi = std::min(noise_high_hz, 0.45 * sr);
    const double center = std::sqrt(noise_low_hz * hi);
    const double q = center / (hi - noise_low_hz);
    auto f1 = detail::Biquad::bandpass(center, q, sr);
    auto f2 = detail::Biquad::bandpass(center, q, sr);
    std::vector<double> gate(n, 0.0);
    const auto ramp = static_cast<std::size_t>(0.01 * sr);
    std::size_t pos = static_cast<std::size_t>(0.1 * sr * u01(rng));
    while (pos < n) {
        const auto len = static_cast<std::size_t>((0.05 + 0.25 * u01(rng)) * sr);
        for (std::size_t i = 0; i < len && pos + i < n; ++i) {
            double g = 1.0;
            if (i < ramp) {
                g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
            } else if (len - i <= ramp) {
                g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - i) / ramp);
            }
            gate[pos + i] = g;
        }
        pos += len + static_cast<std::size_t>((0.02 + 0.18 * u01(rng)) * sr);
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = gate[i] * f2(f1(normal(rng)));
    }
    // A gate that never opened would leave the source silent.
    if (power(out) == 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = f2(f1(normal(rng)));
        }
    }
    return out;
}

/// One corpus item, fully determined by its seed.
inline Mixture synth_item(std::size_t n, int sr, double snr_lo, double snr_hi, std::uint64_t seed, double* snr_out)
{
    std::mt19937_64 rng(seed);
    const double snr = snr_lo + (snr_hi - snr_lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    AudioClip a{harmonic_source(n, sr, rng), sr};
    AudioClip b{burst_source(n, sr, rng), sr};
    // Put source A at a fixed RMS of 0.1 before mixing.
    const double ga = 0.1 / std::sqrt(power(a.samples));
    for (double& v : a.samples) {
        v *= ga;
    }
    if (snr_out) {
        *snr_out = snr;
    }
    return mix_sources(a, b, snr);
}

/// Writes mix/, s1/, s2/ WAV folders and manifest.txt under out_dir.
inline Manifest synth_corpus(const std::string& out_dir, std::size_t n_items, double duration_s, int sample_rate,
                             double snr_lo, double snr_hi, std::uint64_t seed)
{
    if (n_items < 1) {
        throw invalid_argument("synth_corpus: n_items must be >= 1");
    }
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"mix", "s1", "s2"}) {
        fs::create_directories(fs::path(out_dir) / sub, ec);
        if (ec) {
            throw io_error("cannot create " + (fs::path(out_dir) / sub).string() + ": " + ec.message());
        }
    }
    const auto n = static_cast<std::size_t>(std::lround(duration_s * sample_rate));
    Manifest manifest(n_items);
    parallel_for(n_items, [&](std::size_t i) {
        char name[32];
        std::snprintf(name, sizeof(name), "item_%05zu.wav", i);
        ManifestEntry& e = manifest[i];
        e.seed = item_seed(seed, i);
        const Mixture m = synth_item(n, sample_rate, snr_lo, snr_hi, e.seed, &e.snr_db);
        e.mixture = std::string("mix/") + name;
        e.sources = {std::string("s1/") + name, std::string("s2/") + name};
        write_wav((fs::path(out_dir) / e.mixture).string(), m.mixture);
        write_wav((fs::path(out_dir) / e.sources[0]).string(), m.source1);
        write_wav((fs::path(out_dir) / e.sources[1]).string(), m.source2);
    });
    write_manifest((fs::path(out_dir) / "manifest.txt").string(), manifest);
    return manifest;
}

} // namespace s4m::audio

#endif
