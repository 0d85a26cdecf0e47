#ifndef S4M_CHECKPOINT_HPP
#define S4M_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "s4m/config.hpp"
#include "s4m/error.hpp"
#include "s4m/model.hpp"

// Layout (all integers little-endian):
//   "S4M1"  u16 version
//   u32 config byte count, config text (key = value lines)
//   u32 entry count, then per entry:
//     u16 name length, name, u8 dtype (0 = f64), u8 rank, u64 dims[rank],
//     u64 byte offset into the data section
//   data section: raw little-endian arrays in directory order

namespace s4m::checkpoint {

inline constexpr char magic[4] = {'S', '4', 'M', '1'};
inline constexpr std::uint16_t version = 1;
inline constexpr std::uint8_t dtype_f64 = 0;

struct Checkpoint {
    SepConfig config;
    ModelParams params;
};

namespace detail {

template<typename T>
void put(std::string& out, T v)
{
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template<typename T>
    T get(const char* what)
    {
        need(sizeof(T), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::string text(std::size_t n, const char* what)
    {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t size() const { return bytes_.size(); }

    void need(std::size_t n, const char* what) const
    {
        if (pos_ + n > bytes_.size()) {
            throw format_error(std::string("checkpoint truncated while reading ") + what);
        }
    }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode(const SepConfig& config, const ModelParams& params)
{
    std::string out(magic, 4);
    detail::put<std::uint16_t>(out, version);
    const std::string cfg = serialize(config);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        detail::put<std::uint8_t>(out, dtype_f64);
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            detail::put<std::uint64_t>(out, d);
        }
        detail::put<std::uint64_t>(out, offset);
        offset += t.size() * sizeof(double);
    }
    for (const auto& [name, t] : params) {
        for (double v : t.values()) {
            detail::put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    return out;
}

inline Checkpoint decode(const std::string& bytes)
{
    detail::Reader r(bytes);
    if (r.text(4, "magic") != std::string(magic, 4)) {
        throw format_error("checkpoint: bad magic (expected S4M1)");
    }
    const auto ver = r.get<std::uint16_t>("version");
    if (ver != version) {
        throw format_error("checkpoint: unsupported version " + std::to_string(ver));
    }
    Checkpoint out;
    std::istringstream cfg(r.text(r.get<std::uint32_t>("config length"), "config"));
    out.config = parse_config(cfg).model;

    struct Entry {
        std::string name;
        shape_t shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    const auto count = r.get<std::uint32_t>("entry count");
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.text(r.get<std::uint16_t>("name length"), "name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype != dtype_f64) {
            throw format_error("checkpoint: entry " + e.name + " has unknown dtype " + std::to_string(dtype));
        }
        const auto rank = r.get<std::uint8_t>("rank");
        for (std::uint8_t d = 0; d < rank; ++d) {
            e.shape.push_back(r.get<std::uint64_t>("shape"));
        }
        e.offset = r.get<std::uint64_t>("offset");
        entries.push_back(std::move(e));
    }
    const std::size_t data_start = r.pos();
    for (const auto& e : entries) {
        const std::size_t n = numel(e.shape);
        if (data_start + e.offset + n * sizeof(double) > r.size()) {
            throw format_error("checkpoint truncated in data for " + e.name);
        }
        Tensor t(e.shape, 0.0, true);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = 0;
            const std::size_t at = data_start + e.offset + i * sizeof(double);
            for (std::size_t b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + b])) << (8 * b);
            }
            t[i] = std::bit_cast<double>(bits);
        }
        out.params.emplace(e.name, std::move(t));
    }
    for (const auto& spec : param_specs(out.config)) {
        auto it = out.params.find(spec.name);
        if (it == out.params.end() || it->second.shape() != spec.shape) {
            throw format_error("checkpoint: parameter " + spec.name + " missing or mis-shaped for its config");
        }
    }
    return out;
}

inline void save(const std::string& path, const SepConfig& config, const ModelParams& params)
{
    const std::string bytes = encode(config, params);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw io_error("cannot write checkpoint " + tmp);
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw io_error("short write to " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw io_error("cannot move checkpoint into place at " + path);
    }
}

inline Checkpoint load(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open checkpoint " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode(ss.str());
}

} // namespace s4m::checkpoint

#endif
