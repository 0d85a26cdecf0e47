#ifndef S4M_CONFIG_HPP
#define S4M_CONFIG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "s4m/error.hpp"

namespace s4m {

struct SepConfig {
    int sample_rate_hz = 8000;
    double enc_kernel_ms = 4.0;
    double enc_stride_ms = 1.0;
    int channels = 32;
    int state_size = 8;
    int num_scales = 4;
    int unfold_repeats = 2;
    int num_speakers = 2;
    bool tiny = true;
    // false drops the S4 block between fusion and decoder (ablation).
    bool mid_s4 = true;

    std::size_t enc_kernel() const { return static_cast<std::size_t>(std::lround(enc_kernel_ms * sample_rate_hz / 1000.0)); }
    std::size_t enc_stride() const { return static_cast<std::size_t>(std::lround(enc_stride_ms * sample_rate_hz / 1000.0)); }
    std::size_t c() const { return static_cast<std::size_t>(channels); }
    std::size_t s() const { return static_cast<std::size_t>(state_size); }
    std::size_t n() const { return static_cast<std::size_t>(num_speakers); }
    std::size_t scales() const { return static_cast<std::size_t>(num_scales); }
    std::size_t repeats() const { return static_cast<std::size_t>(unfold_repeats); }

    bool operator==(const SepConfig&) const = default;

    void validate() const
    {
        auto fail = [](const std::string& m) { throw invalid_argument("SepConfig: " + m); };
        if (sample_rate_hz <= 0) {
            fail("sample_rate_hz must be positive");
        }
        if (!(enc_stride_ms > 0.0) || enc_kernel_ms < enc_stride_ms) {
            fail("need enc_kernel_ms >= enc_stride_ms > 0");
        }
        if (enc_stride() == 0 || enc_kernel() < enc_stride()) {
            fail("encoder kernel/stride round to invalid sample counts");
        }
        if (num_scales < 2) {
            fail("num_scales must be >= 2");
        }
        if (channels < 1 || state_size < 1 || unfold_repeats < 1 || num_speakers < 1) {
            fail("channels, state_size, unfold_repeats and num_speakers must be >= 1");
        }
    }
};

/// Optimization settings. They live in the same key = value file as the
/// model configuration.
struct TrainConfig {
    std::uint64_t seed = 1;
    int batch_size = 4;
    double learning_rate = 1e-3;
    double clip_norm = 5.0;
    int max_epochs = 200;
    int max_steps = 2000;
    int patience = 5;
    double crop_seconds = 0.5;
    int valid_every = 0; // steps between validations; 0 = once per epoch
    bool zero_mean = true;

    bool operator==(const TrainConfig&) const = default;
};

/// Reference-scale presets at 16 kHz (C=512, S=16, B=32).
inline SepConfig reference_config(bool tiny)
{
    SepConfig c;
    c.sample_rate_hz = 16000;
    c.channels = 512;
    c.state_size = 16;
    c.num_scales = 4;
    c.unfold_repeats = 32;
    c.num_speakers = 2;
    c.tiny = tiny;
    return c;
}

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw format_error("config: " + key + " expects true/false, got '" + v + "'");
}

template<typename T>
T parse_number(const std::string& key, const std::string& v)
{
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !is.eof()) {
        throw format_error("config: bad value for " + key + ": '" + v + "'");
    }
    return out;
}

using Setter = std::function<void(const std::string&)>;

inline std::map<std::string, Setter> setters(SepConfig& m, TrainConfig& t)
{
    auto num = [](auto& field) {
        return [&field](const std::string& key) -> Setter {
            return [&field, key](const std::string& v) {
                field = parse_number<std::remove_reference_t<decltype(field)>>(key, v);
            };
        };
    };
    auto flag = [](bool& field, const std::string& key) -> Setter {
        return [&field, key](const std::string& v) { field = parse_bool(key, v); };
    };
    return {
        {"sample_rate_hz", num(m.sample_rate_hz)("sample_rate_hz")},
        {"enc_kernel_ms", num(m.enc_kernel_ms)("enc_kernel_ms")},
        {"enc_stride_ms", num(m.enc_stride_ms)("enc_stride_ms")},
        {"channels", num(m.channels)("channels")},
        {"state_size", num(m.state_size)("state_size")},
        {"num_scales", num(m.num_scales)("num_scales")},
        {"unfold_repeats", num(m.unfold_repeats)("unfold_repeats")},
        {"num_speakers", num(m.num_speakers)("num_speakers")},
        {"tiny", flag(m.tiny, "tiny")},
        {"mid_s4", flag(m.mid_s4, "mid_s4")},
        {"seed", num(t.seed)("seed")},
        {"batch_size", num(t.batch_size)("batch_size")},
        {"learning_rate", num(t.learning_rate)("learning_rate")},
        {"clip_norm", num(t.clip_norm)("clip_norm")},
        {"max_epochs", num(t.max_epochs)("max_epochs")},
        {"max_steps", num(t.max_steps)("max_steps")},
        {"patience", num(t.patience)("patience")},
        {"crop_seconds", num(t.crop_seconds)("crop_seconds")},
        {"valid_every", num(t.valid_every)("valid_every")},
        {"zero_mean", flag(t.zero_mean, "zero_mean")},
    };
}

} // namespace detail

struct ConfigFile {
    SepConfig model;
    TrainConfig train;
};

/// Parses "key = value" lines. Blank lines and lines starting with '#' are
/// skipped; unknown keys are an error.
inline ConfigFile parse_config(std::istream& in)
{
    ConfigFile out;
    auto table = detail::setters(out.model, out.train);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string body = detail::trim(line);
        if (body.empty() || body[0] == '#') {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw format_error("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = detail::trim(body.substr(0, eq));
        const std::string value = detail::trim(body.substr(eq + 1));
        auto it = table.find(key);
        if (it == table.end()) {
            throw format_error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        it->second(value);
    }
    out.model.validate();
    return out;
}

inline ConfigFile load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot open config " + path);
    }
    return parse_config(in);
}

/// Model fields only, one per line, in declaration order. This is also the
/// text embedded in checkpoints.
inline std::string serialize(const SepConfig& c)
{
    std::ostringstream os;
    os.precision(17);
    os << "sample_rate_hz = " << c.sample_rate_hz << '\n'
       << "enc_kernel_ms = " << c.enc_kernel_ms << '\n'
       << "enc_stride_ms = " << c.enc_stride_ms << '\n'
       << "channels = " << c.channels << '\n'
       << "state_size = " << c.state_size << '\n'
       << "num_scales = " << c.num_scales << '\n'
       << "unfold_repeats = " << c.unfold_repeats << '\n'
       << "num_speakers = " << c.num_speakers << '\n'
       << "tiny = " << (c.tiny ? "true" : "false") << '\n'
       << "mid_s4 = " << (c.mid_s4 ? "true" : "false") << '\n';
    return os.str();
}

inline std::string serialize(const TrainConfig& t)
{
    std::ostringstream os;
    os.precision(17);
    os << "seed = " << t.seed << '\n'
       << "batch_size = " << t.batch_size << '\n'
       << "learning_rate = " << t.learning_rate << '\n'
       << "clip_norm = " << t.clip_norm << '\n'
       << "max_epochs = " << t.max_epochs << '\n'
       << "max_steps = " << t.max_steps << '\n'
       << "patience = " << t.patience << '\n'
       << "crop_seconds = " << t.crop_seconds << '\n'
       << "valid_every = " << t.valid_every << '\n'
       << "zero_mean = " << (t.zero_mean ? "true" : "false") << '\n';
    return os.str();
}

} // namespace s4m

#endif
