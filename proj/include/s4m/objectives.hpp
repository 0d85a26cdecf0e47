#ifndef S4M_OBJECTIVES_HPP
#define S4M_OBJECTIVES_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "s4m/error.hpp"
#include "s4m/tensor.hpp"

namespace s4m::objectives {

inline constexpr double eps = 1e-8;

struct PermutationResult {
    // permutation[e] is the target index assigned to estimate e.
    std::vector<std::size_t> permutation;
    // Negated mean SI-SNR (dB) under that assignment.
    double loss = 0.0;
};

namespace detail {

inline std::vector<double> centered(std::span<const double> v, bool zero_mean)
{
    std::vector<double> out(v.begin(), v.end());
    if (zero_mean && !out.empty()) {
        double mean = 0.0;
        for (double x : out) {
            mean += x;
        }
        mean /= static_cast<double>(out.size());
        for (double& x : out) {
            x -= mean;
        }
    }
    return out;
}

inline void check_pair(std::span<const double> estimate, std::span<const double> target)
{
    if (estimate.size() != target.size()) {
        throw invalid_argument("si_snr: estimate length " + std::to_string(estimate.size()) + " != target length " +
                               std::to_string(target.size()));
    }
    if (std::all_of(target.begin(), target.end(), [](double v) { return v == 0.0; })) {
        throw invalid_argument("si_snr: target is all zeros");
    }
}

struct SnrParts {
    double alpha;
    double s_energy;
    double e_energy;
    double value;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b)
{
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline SnrParts si_snr_parts(const std::vector<double>& est, const std::vector<double>& tgt)
{
    const double yy = dot(tgt, tgt);
    const double alpha = dot(est, tgt) / (yy + eps);
    double e_energy = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) {
        const double e = alpha * tgt[i] - est[i];
        e_energy += e * e;
    }
    const double s_energy = alpha * alpha * yy;
    return {alpha, s_energy, e_energy, 10.0 * std::log10((s_energy + eps) / (e_energy + eps))};
}

} // namespace detail

/// Scale-invariant SNR in dB:
///   s = (<est, y> / (|y|^2 + eps)) y,  e = s - est,
///   10 log10((|s|^2 + eps) / (|e|^2 + eps)),
/// after optional zero-mean centering of both signals.
inline double si_snr(std::span<const double> estimate, std::span<const double> target, bool zero_mean = true)
{
    detail::check_pair(estimate, target);
    return detail::si_snr_parts(detail::centered(estimate, zero_mean), detail::centered(target, zero_mean)).value;
}

/// Plain SDR, 10 log10((|y|^2 + eps) / (|y - est|^2 + eps)).
inline double sdr(std::span<const double> estimate, std::span<const double> target)
{
    detail::check_pair(estimate, target);
    double yy = 0.0;
    double ee = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        yy += target[i] * target[i];
        ee += (target[i] - estimate[i]) * (target[i] - estimate[i]);
    }
    return 10.0 * std::log10((yy + eps) / (ee + eps));
}

inline double si_sdri(std::span<const double> estimate, std::span<const double> target,
                      std::span<const double> mixture, bool zero_mean = true)
{
    return si_snr(estimate, target, zero_mean) - si_snr(mixture, target, zero_mean);
}

inline double sdri(std::span<const double> estimate, std::span<const double> target, std::span<const double> mixture)
{
    return sdr(estimate, target) - sdr(mixture, target);
}

/// Pairwise SI-SNR table: table[e * n + t] = si_snr(estimate e, target t).
inline std::vector<double> pairwise_si_snr(const Tensor& estimates, const Tensor& targets, bool zero_mean = true)
{
    if (estimates.rank() != 2 || estimates.shape() != targets.shape()) {
        throw invalid_argument("upit: shape mismatch " + shape_str(estimates.shape()) + " vs " +
                               shape_str(targets.shape()));
    }
    const std::size_t n = estimates.dim(0);
    const std::size_t len = estimates.dim(1);
    std::vector<double> table(n * n);
    for (std::size_t e = 0; e < n; ++e) {
        for (std::size_t t = 0; t < n; ++t) {
            table[e * n + t] = si_snr(estimates.values().subspan(e * len, len), targets.values().subspan(t * len, len),
                                      zero_mean);
        }
    }
    return table;
}

/// Utterance-level PIT by exhaustive enumeration of the N! assignments.
/// Ties keep the lexicographically first permutation.
inline PermutationResult upit_from_table(const std::vector<double>& table, std::size_t n)
{
    if (n > 8) {
        throw unsupported("upit: " + std::to_string(n) + " sources exceeds the enumeration limit of 8");
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) {
        perm[i] = i;
    }
    std::vector<std::size_t> inverse(n);
    PermutationResult best;
    double best_sum = -std::numeric_limits<double>::infinity();
    do {
        for (std::size_t e = 0; e < n; ++e) {
            inverse[perm[e]] = e;
        }
        // Sum in target order so relabelling the estimates cannot change the bits.
        double total = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            total += table[inverse[t] * n + t];
        }
        if (total > best_sum) {
            best_sum = total;
            best.permutation = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    best.loss = -best_sum / static_cast<double>(n);
    return best;
}

/// estimates, targets: [N, T].
inline PermutationResult upit_loss(const Tensor& estimates, const Tensor& targets, bool zero_mean = true)
{
    if (estimates.rank() == 2 && estimates.dim(0) > 8) {
        throw unsupported("upit: " + std::to_string(estimates.dim(0)) + " sources exceeds the enumeration limit of 8");
    }
    return upit_from_table(pairwise_si_snr(estimates, targets, zero_mean), estimates.dim(0));
}

/// Gradient of si_snr with respect to the estimate.
inline std::vector<double> si_snr_gradient(std::span<const double> estimate, std::span<const double> target,
                                           bool zero_mean = true)
{
    detail::check_pair(estimate, target);
    const auto est = detail::centered(estimate, zero_mean);
    const auto tgt = detail::centered(target, zero_mean);
    const auto parts = detail::si_snr_parts(est, tgt);
    const double yy = detail::dot(tgt, tgt);
    double ye = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) {
        ye += tgt[i] * (parts.alpha * tgt[i] - est[i]);
    }
    const double k = 10.0 / std::numbers::ln10;
    std::vector<double> grad(est.size());
    for (std::size_t i = 0; i < est.size(); ++i) {
        const double ds = 2.0 * parts.alpha * yy * tgt[i] / (yy + eps);
        const double de = 2.0 * (tgt[i] * ye / (yy + eps) - (parts.alpha * tgt[i] - est[i]));
        grad[i] = k * (ds / (parts.s_energy + eps) - de / (parts.e_energy + eps));
    }
    if (zero_mean) {
        double mean = 0.0;
        for (double g : grad) {
            mean += g;
        }
        mean /= static_cast<double>(grad.size());
        for (double& g : grad) {
            g -= mean;
        }
    }
    return grad;
}

/// Differentiable uPIT SI-SNR objective averaged over the batch.
/// estimates: [B, N, T] on a tape; targets: [B, N, T]. The best assignment
/// per item is chosen on the current values and held fixed for the gradient.
inline Var pit_si_snr_loss(const Var& estimates, const Tensor& targets, bool zero_mean = true,
                           std::vector<PermutationResult>* assignments = nullptr)
{
    if (estimates.value().rank() != 3 || estimates.shape() != targets.shape()) {
        throw invalid_argument("pit_si_snr_loss: shape mismatch " + shape_str(estimates.shape()) + " vs " +
                               shape_str(targets.shape()));
    }
    const std::size_t batch = targets.dim(0);
    const std::size_t n = targets.dim(1);
    const std::size_t len = targets.dim(2);
    std::vector<PermutationResult> results;
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        Tensor est({n, len});
        Tensor tgt({n, len});
        std::copy_n(estimates.value().data() + b * n * len, n * len, est.data());
        std::copy_n(targets.data() + b * n * len, n * len, tgt.data());
        results.push_back(upit_loss(est, tgt, zero_mean));
        total += results.back().loss;
    }
    if (assignments) {
        *assignments = results;
    }
    const double value = total / static_cast<double>(batch);
    return estimates.tape()->record(
        Tensor({1}, value), {estimates}, [=](std::span<const double> g, GradBuffer& grads) {
            auto ge = grads.at(estimates);
            const double* ev = estimates.value().data();
            const double w = -g[0] / static_cast<double>(batch * n);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t e = 0; e < n; ++e) {
                    const std::size_t t = results[b].permutation[e];
                    const std::size_t eoff = (b * n + e) * len;
                    const std::size_t toff = (b * n + t) * len;
                    auto d = si_snr_gradient(std::span<const double>(ev + eoff, len),
                                             targets.values().subspan(toff, len), zero_mean);
                    for (std::size_t i = 0; i < len; ++i) {
                        ge[eoff + i] += w * d[i];
                    }
                }
            }
        });
}

struct EvalRow {
    std::string utterance_id;
    double si_sdri_db = 0.0;
    double sdri_db = 0.0;
};

/// CSV evaluation report with a trailing mean row.
inline void write_eval_report(std::ostream& os, const std::vector<EvalRow>& rows)
{
    os << "utterance_id,si_sdri_db,sdri_db\n";
    double si = 0.0;
    double sd = 0.0;
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        os << r.utterance_id << ',' << r.si_sdri_db << ',' << r.sdri_db << '\n';
        si += r.si_sdri_db;
        sd += r.sdri_db;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    os << "mean," << si / n << ',' << sd / n << '\n';
}

} // namespace s4m::objectives

#endif
