#ifndef S4M_VERIFY_HPP
#define S4M_VERIFY_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "s4m/gradcheck.hpp"
#include "s4m/model.hpp"
#include "s4m/net.hpp"
#include "s4m/objectives.hpp"
#include "s4m/s4_layer.hpp"
#include "s4m/ssm.hpp"

namespace s4m::verify {

struct Property {
    std::string suite;
    std::string name;
    std::size_t samples = 0;
    double max_error = 0.0;
    double tolerance = 0.0;

    bool passed() const { return std::isfinite(max_error) && max_error < tolerance; }
};

struct Report {
    std::vector<Property> properties;

    bool passed() const
    {
        return std::all_of(properties.begin(), properties.end(), [](const Property& p) { return p.passed(); });
    }

    const Property* find(const std::string& name) const
    {
        for (const auto& p : properties) {
            if (p.name == name) {
                return &p;
            }
        }
        return nullptr;
    }
};

struct Options {
    // Test fixture: negates b_bar on the recurrent path only.
    bool flip_b_bar = false;
};

inline const std::vector<std::string>& suite_names()
{
    static const std::vector<std::string> names{"kernels", "grads", "duality", "upit"};
    return names;
}

namespace detail {

// Tracks the worst error of one property across its samples.
class Tracker {
public:
    Tracker(std::string suite, std::string name, double tolerance) : p_{std::move(suite), std::move(name), 0, 0.0, tolerance} {}

    void add(double error)
    {
        ++p_.samples;
        if (std::isnan(error) || error > p_.max_error) {
            p_.max_error = std::isnan(error) ? std::numeric_limits<double>::infinity() : error;
        }
    }

    void add_many(std::size_t count, double worst)
    {
        add(worst);
        p_.samples += count - 1;
    }

    Property done() const { return p_; }

private:
    Property p_;
};

inline double rel_l2(const std::vector<double>& a, const std::vector<double>& b)
{
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline std::vector<double> normal_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(n);
    for (double& x : v) {
        x = dist(rng);
    }
    return v;
}

inline ssm::DiscreteSSM discrete(const ssm::DPLRSystem& sys, const Options& opt)
{
    ssm::DiscreteSSM d = ssm::discretize_bilinear(sys);
    if (opt.flip_b_bar) {
        d.b_bar = -d.b_bar;
    }
    return d;
}

// Zero-mean SI-SNR written out directly, independent of the objectives code.
inline double reference_si_snr(std::vector<double> est, std::vector<double> tgt)
{
    const double me = std::accumulate(est.begin(), est.end(), 0.0) / static_cast<double>(est.size());
    const double mt = std::accumulate(tgt.begin(), tgt.end(), 0.0) / static_cast<double>(tgt.size());
    double dot = 0.0;
    double tt = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) {
        est[i] -= me;
        tgt[i] -= mt;
        dot += est[i] * tgt[i];
        tt += tgt[i] * tgt[i];
    }
    const double alpha = dot / (tt + objectives::eps);
    double sig = 0.0;
    double err = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) {
        const double s = alpha * tgt[i];
        sig += s * s;
        err += (est[i] - s) * (est[i] - s);
    }
    return 10.0 * std::log10((sig + objectives::eps) / (err + objectives::eps));
}

// Best assignment by dynamic programming over subsets of targets; returns
// (mean SI-SNR, target index per estimate).
inline std::pair<double, std::vector<std::size_t>> subset_dp_assignment(const std::vector<double>& table, std::size_t n)
{
    const std::size_t full = std::size_t{1} << n;
    std::vector<double> best(full, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> choice(full, 0);
    best[0] = 0.0;
    for (std::size_t mask = 0; mask < full; ++mask) {
        const auto e = static_cast<std::size_t>(std::popcount(mask));
        if (e >= n || !std::isfinite(best[mask])) {
            continue;
        }
        for (std::size_t t = 0; t < n; ++t) {
            if (mask & (std::size_t{1} << t)) {
                continue;
            }
            const std::size_t next = mask | (std::size_t{1} << t);
            const double v = best[mask] + table[e * n + t];
            if (v > best[next]) {
                best[next] = v;
                choice[next] = t;
            }
        }
    }
    std::vector<std::size_t> perm(n);
    std::size_t mask = full - 1;
    for (std::size_t e = n; e-- > 0;) {
        perm[e] = choice[mask];
        mask &= ~(std::size_t{1} << perm[e]);
    }
    return {best[full - 1] / static_cast<double>(n), perm};
}

inline Tensor rows_tensor(const std::vector<std::vector<double>>& rows)
{
    Tensor t({rows.size(), rows.front().size()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].begin(), rows[r].end(), t.data() + r * rows[r].size());
    }
    return t;
}

} // namespace detail

inline Report run_kernels(const Options& = {})
{
    Report out;
    detail::Tracker oracle("kernels", "kernel_fast_vs_naive_rel_l2", 1e-6);
    for (std::size_t s : {1u, 2u, 3u, 4u, 7u, 8u, 16u, 31u, 32u}) {
        for (std::size_t len : {8u, 100u, 256u, 1024u}) {
            for (std::uint64_t seed = 0; seed < 20; ++seed) {
                const auto sys = ssm::hippo_legs_init(s, 1000 * s + seed);
                const auto fast = ssm::kernel_fast(sys, len);
                const auto naive = ssm::kernel_naive(ssm::discretize_bilinear(sys), len);
                oracle.add(detail::rel_l2(fast.k, naive.k));
            }
        }
    }
    out.properties.push_back(oracle.done());

    detail::Tracker rebuild("kernels", "hippo_dplr_reconstruction_rel", 1e-10);
    detail::Tracker real_parts("kernels", "hippo_eigenvalue_real_part_abs", 1e-9);
    for (std::size_t s : {1u, 2u, 4u, 8u, 16u}) {
        const auto dec = ssm::hippo_legs_decompose(s);
        const auto sys = ssm::hippo_legs_init(s, 7 + s);
        const ssm::cmat rebuilt = dec.v * sys.dense_a() * dec.v.adjoint();
        rebuild.add((rebuilt - dec.a.cast<ssm::cplx>()).norm() / dec.a.norm());
        for (Eigen::Index i = 0; i < sys.lambda.size(); ++i) {
            real_parts.add(std::abs(sys.lambda(i).real() + 0.5));
        }
    }
    out.properties.push_back(rebuild.done());
    out.properties.push_back(real_parts.done());
    return out;
}

inline Report run_duality(const Options& opt = {})
{
    Report out;
    std::mt19937_64 rng(99);
    detail::Tracker dual("duality", "recurrence_vs_fft_convolution_max_abs", 1e-8);
    for (std::size_t s : {1u, 4u, 8u, 16u}) {
        for (std::size_t len : {16u, 512u, 4096u}) {
            const auto sys = ssm::hippo_legs_init(s, rng());
            const auto x = detail::normal_vector(len, rng);
            const auto rec = ssm::run_recurrent(detail::discrete(sys, opt), x);
            const auto conv = ssm::apply_convolution(ssm::kernel_fast(sys, len), x, sys.d);
            double err = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                err = std::max(err, std::abs(rec[i] - conv[i]));
            }
            dual.add(err);
        }
    }
    out.properties.push_back(dual.done());

    detail::Tracker impulse("duality", "impulse_response_equals_kernel_plus_d", 1e-8);
    for (std::size_t s : {1u, 2u, 8u, 16u}) {
        const auto sys = ssm::hippo_legs_init(s, rng());
        const std::size_t len = 1024;
        std::vector<double> x(len, 0.0);
        x[0] = 1.0;
        const auto y = ssm::run_recurrent(detail::discrete(sys, opt), x);
        const auto k = ssm::kernel_naive(ssm::discretize_bilinear(sys), len);
        double err = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            err = std::max(err, std::abs(y[i] - k.k[i] - (i == 0 ? sys.d : 0.0)));
        }
        impulse.add(err);
    }
    out.properties.push_back(impulse.done());
    return out;
}

inline Report run_grads(const Options& = {})
{
    using gradcheck::random_tensor;
    Report out;
    std::mt19937_64 rng(2024);
    auto primitive = [&](const std::string& name, const gradcheck::Builder& build,
                         const std::vector<std::vector<shape_t>>& cases) {
        detail::Tracker t("grads", "grad_" + name, 1e-6);
        for (const auto& shapes : cases) {
            std::vector<Tensor> inputs;
            for (const auto& s : shapes) {
                inputs.push_back(random_tensor(s, rng));
            }
            for (double e : gradcheck::max_rel_errors(build, inputs, rng())) {
                t.add(e);
            }
        }
        out.properties.push_back(t.done());
    };

    primitive(
        "conv1d",
        [](Tape&, const std::vector<Var>& in) { return ops::conv1d(in[0], in[1], in[2], 2, 1, 1, 1); },
        {{{2, 3, 8}, {3, 3, 2}, {3}}, {{1, 2, 9}, {4, 2, 3}, {4}}});
    primitive(
        "conv1d_depthwise_dilated",
        [](Tape&, const std::vector<Var>& in) { return ops::conv1d(in[0], in[1], in[2], 2, 2, 4, 4); },
        {{{1, 4, 12}, {4, 1, 5}, {4}}, {{2, 4, 16}, {4, 1, 5}, {4}}});
    primitive(
        "conv1d_transposed",
        [](Tape&, const std::vector<Var>& in) { return ops::conv1d_transposed(in[0], in[1], in[2], 2); },
        {{{2, 2, 6}, {2, 3, 4}, {3}}, {{1, 3, 5}, {3, 1, 8}, {1}}});
    primitive(
        "gelu", [](Tape&, const std::vector<Var>& in) { return ops::gelu(in[0]); }, {{{2, 3, 4}}, {{1, 1, 9}}});
    primitive(
        "sigmoid", [](Tape&, const std::vector<Var>& in) { return ops::sigmoid(in[0]); }, {{{2, 3, 4}}, {{1, 1, 9}}});
    primitive(
        "relu", [](Tape&, const std::vector<Var>& in) { return ops::relu(in[0]); }, {{{2, 3, 4}}, {{1, 1, 9}}});
    primitive(
        "add_sub_mul_scale",
        [](Tape&, const std::vector<Var>& in) {
            return ops::scale(ops::sub(ops::mul(in[0], in[1]), ops::add(in[0], in[1])), 0.7);
        },
        {{{2, 3, 4}, {2, 3, 4}}, {{1, 2, 7}, {1, 2, 7}}});
    primitive(
        "linear", [](Tape&, const std::vector<Var>& in) { return ops::linear(in[0], in[1], in[2]); },
        {{{2, 3, 4}, {2, 4}, {2}}, {{1, 5, 2}, {6, 2}, {6}}});
    primitive(
        "avg_pool1d", [](Tape&, const std::vector<Var>& in) { return ops::avg_pool1d(in[0], 4, 4); },
        {{{2, 3, 16}}, {{1, 2, 8}}});
    primitive(
        "nearest_upsample", [](Tape&, const std::vector<Var>& in) { return ops::nearest_upsample(in[0], 2); },
        {{{2, 3, 5}}, {{1, 1, 4}}});
    primitive(
        "global_norm", [](Tape&, const std::vector<Var>& in) { return ops::global_norm(in[0], in[1], in[2]); },
        {{{2, 3, 5}, {3}, {3}}, {{1, 4, 8}, {4}, {4}}});
    primitive(
        "fft_conv", [](Tape&, const std::vector<Var>& in) { return ops::fft_conv(in[0], in[1], in[2]); },
        {{{2, 3, 16}, {3, 16}, {3}}, {{1, 2, 33}, {2, 33}, {2}}});
    primitive(
        "shape_ops",
        [](Tape&, const std::vector<Var>& in) {
            const Var cropped = ops::crop_time(ops::pad_time(in[0], 2, 2), 1, 5);
            const Var a = ops::channel_slice(cropped, 1, 1);
            return ops::concat_channels({a, cropped, ops::scale(a, 2.0)});
        },
        {{{2, 2, 4}}, {{1, 3, 6}}});
    primitive(
        "mean_sum", [](Tape&, const std::vector<Var>& in) { return ops::mean(ops::mul(in[0], in[0])); },
        {{{2, 3, 4}}});

    {
        detail::Tracker t("grads", "grad_pit_si_snr_loss", 1e-6);
        for (std::size_t n : {1u, 2u, 3u}) {
            const Tensor targets = random_tensor({2, n, 40}, rng);
            Tensor est = random_tensor({2, n, 40}, rng, 0.5);
            for (std::size_t i = 0; i < est.size(); ++i) {
                est[i] += targets[i];
            }
            auto build = [&](Tape&, const std::vector<Var>& in) {
                return objectives::pit_si_snr_loss(in[0], targets);
            };
            t.add(gradcheck::max_rel_errors(build, {est}, rng())[0]);
        }
        out.properties.push_back(t.done());
    }

    SepConfig cfg;
    cfg.channels = 4;
    cfg.state_size = 4;
    cfg.unfold_repeats = 2;
    cfg.tiny = true;
    {
        detail::Tracker t("grads", "grad_dplr_kernel", 1e-6);
        auto params = init_params(cfg, 7);
        std::normal_distribution<double> noise(0.0, 0.1);
        std::vector<Tensor> inputs;
        for (const auto& f : s4_fields()) {
            Tensor v = params.at("mid.s4." + f);
            for (double& x : v.values()) {
                x += noise(rng);
            }
            if (f == "log_dt") {
                std::fill(v.values().begin(), v.values().end(), std::log(0.05));
            }
            inputs.push_back(v);
        }
        auto build = [](Tape&, const std::vector<Var>& in) {
            s4::Layer layer{in[0], in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], in[11]};
            return s4::dplr_kernel(layer, 24);
        };
        for (double e : gradcheck::max_rel_errors(build, inputs, 3)) {
            t.add(e);
        }
        out.properties.push_back(t.done());
    }
    {
        detail::Tracker t("grads", "grad_end_to_end_tiny_sampled", 1e-3);
        const auto params = init_params(cfg, 29);
        const Tensor x = random_tensor({2, 1, 200}, rng, 0.3);
        const Tensor targets = random_tensor({2, 2, 200}, rng);
        auto loss = [&](Tape& tape, const ParamVars& p) {
            return objectives::pit_si_snr_loss(net::unfold_forward(tape.constant(x), p, cfg), targets);
        };
        const auto r = gradcheck::sampled_param_check(params, loss, 40, 32);
        t.add_many(r.checked, r.max_rel_error);
        out.properties.push_back(t.done());
    }
    return out;
}

inline Report run_upit(const Options& = {})
{
    Report out;
    std::mt19937_64 rng(1234);
    detail::Tracker brute("upit", "upit_vs_subset_dp_loss_abs", 1e-9);
    detail::Tracker perm_match("upit", "upit_vs_subset_dp_permutation_mismatch", 0.5);
    for (std::size_t n = 1; n <= 4; ++n) {
        for (int trial = 0; trial < 15; ++trial) {
            std::vector<std::vector<double>> tgt;
            std::vector<std::vector<double>> est;
            for (std::size_t i = 0; i < n; ++i) {
                tgt.push_back(detail::normal_vector(64, rng));
            }
            for (std::size_t i = 0; i < n; ++i) {
                auto e = detail::normal_vector(64, rng, 0.8);
                const auto& src = tgt[(i + static_cast<std::size_t>(trial)) % n];
                for (std::size_t t = 0; t < 64; ++t) {
                    e[t] += src[t];
                }
                est.push_back(e);
            }
            std::vector<double> table(n * n);
            for (std::size_t e = 0; e < n; ++e) {
                for (std::size_t t = 0; t < n; ++t) {
                    table[e * n + t] = detail::reference_si_snr(est[e], tgt[t]);
                }
            }
            const auto [best, perm] = detail::subset_dp_assignment(table, n);
            const auto got = objectives::upit_loss(detail::rows_tensor(est), detail::rows_tensor(tgt));
            brute.add(std::abs(got.loss + best));
            perm_match.add(got.permutation == perm ? 0.0 : 1.0);
        }
    }
    out.properties.push_back(brute.done());
    out.properties.push_back(perm_match.done());

    // Exact equality: any positive difference fails.
    detail::Tracker sym("upit", "upit_permutation_symmetry_abs", std::numeric_limits<double>::denorm_min());
    for (std::size_t n = 2; n <= 4; ++n) {
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<std::vector<double>> tgt;
            std::vector<std::vector<double>> est;
            for (std::size_t i = 0; i < n; ++i) {
                tgt.push_back(detail::normal_vector(50, rng));
                est.push_back(detail::normal_vector(50, rng));
            }
            const auto base = objectives::upit_loss(detail::rows_tensor(est), detail::rows_tensor(tgt));
            std::vector<std::size_t> sigma(n);
            std::iota(sigma.begin(), sigma.end(), 0);
            do {
                std::vector<std::vector<double>> permuted;
                for (std::size_t e = 0; e < n; ++e) {
                    permuted.push_back(est[sigma[e]]);
                }
                const auto got = objectives::upit_loss(detail::rows_tensor(permuted), detail::rows_tensor(tgt));
                double err = std::abs(got.loss - base.loss);
                for (std::size_t e = 0; e < n; ++e) {
                    if (got.permutation[e] != base.permutation[sigma[e]]) {
                        err = std::numeric_limits<double>::infinity();
                    }
                }
                sym.add(err);
            } while (std::next_permutation(sigma.begin(), sigma.end()));
        }
    }
    out.properties.push_back(sym.done());
    return out;
}

/// Runs one suite or "all". Unknown names raise invalid_argument.
inline Report run(const std::string& suite, const Options& opt = {})
{
    using Runner = Report (*)(const Options&);
    const std::vector<std::pair<std::string, Runner>> table{
        {"kernels", run_kernels}, {"grads", run_grads}, {"duality", run_duality}, {"upit", run_upit}};
    Report out;
    bool matched = false;
    for (const auto& [name, fn] : table) {
        if (suite == "all" || suite == name) {
            matched = true;
            const Report r = fn(opt);
            out.properties.insert(out.properties.end(), r.properties.begin(), r.properties.end());
        }
    }
    if (!matched) {
        throw invalid_argument("verify: unknown suite '" + suite + "' (expected kernels, grads, duality, upit or all)");
    }
    return out;
}

inline void write_report(std::ostream& os, const Report& r)
{
    os << "suite,property,samples,max_error,tolerance,status\n";
    for (const auto& p : r.properties) {
        os << p.suite << ',' << p.name << ',' << p.samples << ',' << std::setprecision(3) << std::scientific
           << p.max_error << ',' << p.tolerance << ',' << (p.passed() ? "PASS" : "FAIL") << '\n';
    }
    os << std::defaultfloat;
    os << (r.passed() ? "all properties passed" : "FAILED") << '\n';
}

} // namespace s4m::verify

#endif
