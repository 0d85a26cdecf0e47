#ifndef S4M_MODEL_HPP
#define S4M_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "s4m/config.hpp"
#include "s4m/ssm.hpp"
#include "s4m/tensor.hpp"

namespace s4m {

using ModelParams = std::map<std::string, Tensor>;
using ParamVars = std::map<std::string, Var>;

inline constexpr std::size_t down_kernel = 5;
inline constexpr std::size_t attn_kernel = 5;

enum class Init { fan_in, zeros, ones, s4 };

struct ParamSpec {
    std::string name;
    shape_t shape;
    Init init;
    std::size_t fan_in = 1;
};

/// Fields of one per-channel DPLR layer; each is [C, S] except d, log_dt [C].
inline const std::vector<std::string>& s4_fields()
{
    static const std::vector<std::string> f{"lambda_re", "lambda_im", "p_re", "p_im", "q_re", "q_im",
                                            "b_re",      "b_im",      "c_re", "c_im", "d",    "log_dt"};
    return f;
}

namespace detail {

inline void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c)
{
    out.push_back({prefix + ".gain", {c}, Init::ones});
    out.push_back({prefix + ".bias", {c}, Init::zeros});
}

inline void add_conv(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t cout, std::size_t cin_per_group,
                     std::size_t k, bool bias = true)
{
    out.push_back({prefix + ".weight", {cout, cin_per_group, k}, Init::fan_in, cin_per_group * k});
    if (bias) {
        out.push_back({prefix + ".bias", {cout}, Init::zeros});
    }
}

inline void add_s4_block(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c, std::size_t s)
{
    add_norm(out, prefix + ".norm1", c);
    for (const auto& f : s4_fields()) {
        const bool per_channel = f == "d" || f == "log_dt";
        out.push_back({prefix + ".s4." + f, per_channel ? shape_t{c} : shape_t{c, s}, Init::s4});
    }
    add_conv(out, prefix + ".proj", c, c, 1);
    add_norm(out, prefix + ".norm2", c);
    add_conv(out, prefix + ".ffn1", c, c, 1);
    add_conv(out, prefix + ".ffn2", c, c, 1);
}

} // namespace detail

/// Every parameter tensor of the network, in a fixed order that depends only
/// on the configuration.
inline std::vector<ParamSpec> param_specs(const SepConfig& cfg)
{
    cfg.validate();
    const std::size_t c = cfg.c();
    std::vector<ParamSpec> out;
    detail::add_conv(out, "encoder", c, 1, cfg.enc_kernel(), false);
    for (std::size_t i = 1; i < cfg.scales(); ++i) {
        const std::string p = "down" + std::to_string(i);
        detail::add_conv(out, p, c, 1, down_kernel);
        detail::add_norm(out, p + ".norm", c);
    }
    if (cfg.mid_s4) {
        detail::add_s4_block(out, "mid", c, cfg.s());
    }
    for (std::size_t i = cfg.scales() - 1; i >= 1; --i) {
        const std::string p = "dec" + std::to_string(i);
        for (const char* f : {".f1", ".f2"}) {
            detail::add_conv(out, p + f, c, 1, attn_kernel);
            detail::add_norm(out, p + f + ".norm", c);
        }
        if (!cfg.tiny) {
            detail::add_s4_block(out, p + ".block", c, cfg.s());
        }
    }
    detail::add_conv(out, "mask", cfg.n() * c, c, 1);
    // Transposed conv weight layout is [Cin, Cout, k].
    out.push_back({"decoder.weight", {c, 1, cfg.enc_kernel()}, Init::fan_in, c});
    out.push_back({"decoder.bias", {1}, Init::zeros});
    return out;
}

inline std::size_t count_parameters(const SepConfig& cfg)
{
    std::size_t total = 0;
    for (const auto& spec : param_specs(cfg)) {
        total += numel(spec.shape);
    }
    return total;
}

/// Seeded initialization. Convolutions draw U(-1/sqrt(fan_in), 1/sqrt(fan_in));
/// each S4 channel gets its own HiPPO-LegS system.
inline ModelParams init_params(const SepConfig& cfg, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    ModelParams out;
    const auto specs = param_specs(cfg);
    for (const auto& spec : specs) {
        Tensor t(spec.shape, 0.0, true);
        switch (spec.init) {
        case Init::fan_in: {
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : t.values()) {
                v = dist(rng);
            }
            break;
        }
        case Init::ones:
            std::fill(t.values().begin(), t.values().end(), 1.0);
            break;
        case Init::zeros:
        case Init::s4:
            break;
        }
        out.emplace(spec.name, std::move(t));
    }
    // S4 layers are filled per block once all their tensors exist.
    for (const auto& spec : specs) {
        const std::string suffix = ".s4.lambda_re";
        if (spec.name.size() < suffix.size() ||
            spec.name.compare(spec.name.size() - suffix.size(), suffix.size(), suffix) != 0) {
            continue;
        }
        const std::string prefix = spec.name.substr(0, spec.name.size() - std::string("lambda_re").size());
        const std::size_t c = spec.shape[0];
        const std::size_t s = spec.shape[1];
        for (std::size_t h = 0; h < c; ++h) {
            const ssm::DPLRSystem sys = ssm::hippo_legs_init(s, rng());
            auto put = [&](const char* field, const ssm::cvec& v) {
                Tensor& re = out.at(prefix + field + "_re");
                Tensor& im = out.at(prefix + field + "_im");
                for (std::size_t i = 0; i < s; ++i) {
                    re[h * s + i] = v(static_cast<Eigen::Index>(i)).real();
                    im[h * s + i] = v(static_cast<Eigen::Index>(i)).imag();
                }
            };
            put("lambda", sys.lambda);
            put("p", sys.p);
            put("q", sys.q);
            put("b", sys.b);
            put("c", sys.c);
            out.at(prefix + "d")[h] = sys.d;
            out.at(prefix + "log_dt")[h] = sys.log_dt;
        }
    }
    return out;
}

/// Registers every parameter as a named leaf.
inline ParamVars bind_params(Tape& tape, const ModelParams& params)
{
    ParamVars out;
    for (const auto& [name, t] : params) {
        out.emplace(name, tape.leaf(name, t));
    }
    return out;
}

} // namespace s4m

#endif
