#ifndef S4M_SSM_HPP
#define S4M_SSM_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "s4m/error.hpp"
#include "s4m/fft.hpp"

namespace s4m::ssm {

using cplx = std::complex<double>;
using cvec = Eigen::VectorXcd;
using cmat = Eigen::MatrixXcd;

/// Continuous-time single-input single-output state space with
/// A = diag(lambda) - p q^*. Output uses the unconjugated product C h.
struct DPLRSystem {
    std::size_t state_size = 0;
    cvec lambda;
    cvec p;
    cvec q;
    cvec b;
    cvec c;
    double d = 0.0;
    double log_dt = 0.0;

    double dt() const { return std::exp(log_dt); }

    cmat dense_a() const
    {
        cmat a = -p * q.adjoint();
        a.diagonal() += lambda;
        return a;
    }
};

/// Bilinear discretization (a_bar, b_bar, c_bar, d) at step dt.
struct DiscreteSSM {
    cmat a_bar;
    cvec b_bar;
    cvec c_bar;
    double d = 0.0;
    double dt = 0.0;

    std::size_t state_size() const { return static_cast<std::size_t>(b_bar.size()); }
};

struct SSMKernel {
    std::vector<double> k;
    std::size_t length = 0;
    // max |Im| of the complex kernel before taking the real part.
    double imag_residue = 0.0;
};

struct RecurrentState {
    cvec h;

    static RecurrentState zeros(std::size_t state_size)
    {
        return {cvec::Zero(static_cast<Eigen::Index>(state_size))};
    }
};

/// Real HiPPO-LegS pair (A, B), 0-indexed.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> hippo_legs(std::size_t state_size)
{
    const auto n = static_cast<Eigen::Index>(state_size);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        b(i) = std::sqrt(2.0 * static_cast<double>(i) + 1.0);
        for (Eigen::Index k = 0; k < i; ++k) {
            a(i, k) = -std::sqrt(2.0 * static_cast<double>(i) + 1.0) * std::sqrt(2.0 * static_cast<double>(k) + 1.0);
        }
        a(i, i) = -(static_cast<double>(i) + 1.0);
    }
    return {a, b};
}

/// Normal-plus-low-rank split of HiPPO-LegS:
/// A = V diag(lambda) V^* - p p^T with V unitary and eigenvectors of
/// conjugate eigenvalues stored as exact conjugates of each other.
struct LegSDecomposition {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;
    Eigen::VectorXd p;
    cvec lambda;
    cmat v;
    // partner[n] is the index holding conj(lambda[n]); partner[n] == n for
    // the real mode of odd state sizes.
    std::vector<std::size_t> partner;
};

inline LegSDecomposition hippo_legs_decompose(std::size_t state_size)
{
    if (state_size == 0) {
        throw invalid_argument("hippo_legs: state size must be >= 1");
    }
    const auto n = static_cast<Eigen::Index>(state_size);
    LegSDecomposition out;
    std::tie(out.a, out.b) = hippo_legs(state_size);
    out.p.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.p(i) = std::sqrt(static_cast<double>(i) + 0.5);
    }

    // A + p p^T = -I/2 + S with S skew-symmetric. i*S is Hermitian with real
    // spectrum mu; S v = -i mu v, so lambda = -1/2 - i mu.
    Eigen::MatrixXd normal = out.a + out.p * out.p.transpose();
    Eigen::MatrixXd skew = normal + 0.5 * Eigen::MatrixXd::Identity(n, n);
    skew = 0.5 * (skew - skew.transpose());
    cmat herm = cplx(0.0, 1.0) * skew.cast<cplx>();
    Eigen::SelfAdjointEigenSolver<cmat> solver(herm);
    const Eigen::VectorXd mu = solver.eigenvalues();
    const cmat vecs = solver.eigenvectors();

    out.lambda.resize(n);
    out.v.resize(n, n);
    out.partner.assign(state_size, 0);
    // mu is ascending and symmetric about zero: pair index i with n-1-i.
    Eigen::Index slot = 0;
    for (Eigen::Index i = 0; i < n / 2; ++i) {
        const cvec head = vecs.col(i);
        out.lambda(slot) = cplx(-0.5, -mu(i));
        out.lambda(slot + 1) = cplx(-0.5, mu(i));
        out.v.col(slot) = head;
        out.v.col(slot + 1) = head.conjugate();
        out.partner[static_cast<std::size_t>(slot)] = static_cast<std::size_t>(slot + 1);
        out.partner[static_cast<std::size_t>(slot + 1)] = static_cast<std::size_t>(slot);
        slot += 2;
    }
    if (n % 2 == 1) {
        // Null vector of a real skew matrix: rotate to a real vector.
        cvec z = vecs.col(n / 2);
        Eigen::Index arg = 0;
        z.cwiseAbs().maxCoeff(&arg);
        z *= std::conj(z(arg)) / std::abs(z(arg));
        Eigen::VectorXd re = z.real();
        re.normalize();
        out.lambda(slot) = cplx(-0.5, 0.0);
        out.v.col(slot) = re.cast<cplx>();
        out.partner[static_cast<std::size_t>(slot)] = static_cast<std::size_t>(slot);
    }
    return out;
}

/// HiPPO-LegS DPLR initialization rotated into the eigenbasis, q = p.
/// C is drawn standard normal per conjugate pair and mirrored onto the
/// partner so the kernel stays real; log_dt ~ U[log 1e-3, log 1e-1].
inline DPLRSystem hippo_legs_init(std::size_t state_size, std::uint64_t seed)
{
    const LegSDecomposition dec = hippo_legs_decompose(state_size);
    const auto n = static_cast<Eigen::Index>(state_size);
    DPLRSystem sys;
    sys.state_size = state_size;
    sys.lambda = dec.lambda;
    const cmat vh = dec.v.adjoint();
    sys.p = vh * dec.p.cast<cplx>();
    sys.q = sys.p;
    sys.b = vh * dec.b.cast<cplx>();
    sys.c.resize(n);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(std::log(1e-3), std::log(1e-1));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto partner = static_cast<Eigen::Index>(dec.partner[static_cast<std::size_t>(i)]);
        if (partner < i) {
            sys.c(i) = std::conj(sys.c(partner));
        } else if (partner == i) {
            sys.c(i) = cplx(normal(rng), 0.0);
        } else {
            const double re = normal(rng);
            const double im = normal(rng);
            sys.c(i) = cplx(re, im);
        }
    }
    sys.d = 1.0;
    sys.log_dt = uniform(rng);
    return sys;
}

/// Bilinear transform of a dense system:
/// a_bar = (I - dt/2 A)^-1 (I + dt/2 A), b_bar = (I - dt/2 A)^-1 dt B.
inline DiscreteSSM discretize_bilinear(const cmat& a, const cvec& b, const cvec& c, double d, double dt)
{
    const auto n = a.rows();
    if (a.cols() != n || b.size() != n || c.size() != n) {
        throw invalid_argument("discretize_bilinear: inconsistent state dimensions");
    }
    const cmat eye = cmat::Identity(n, n);
    const cmat backward = eye - (dt / 2.0) * a;
    const cmat forward = eye + (dt / 2.0) * a;
    Eigen::FullPivLU<cmat> lu(backward);
    lu.setThreshold(1e-13);
    if (!lu.isInvertible()) {
        std::ostringstream msg;
        msg << "discretize_bilinear: (I - dt/2 A) is singular at dt = " << dt;
        throw numeric_singularity(msg.str(), dt);
    }
    DiscreteSSM out;
    out.a_bar = lu.solve(forward);
    out.b_bar = lu.solve(cvec(dt * b));
    out.c_bar = c;
    out.d = d;
    out.dt = dt;
    return out;
}

inline DiscreteSSM discretize_bilinear(const DPLRSystem& sys)
{
    return discretize_bilinear(sys.dense_a(), sys.b, sys.c, sys.d, sys.dt());
}

inline double spectral_radius(const cmat& m)
{
    Eigen::ComplexEigenSolver<cmat> es(m, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// K_k = Re(c_bar a_bar^k b_bar) by explicit propagation, O(S^2 L).
inline SSMKernel kernel_naive(const DiscreteSSM& disc, std::size_t length)
{
    if (length == 0) {
        throw invalid_argument("kernel_naive: length must be >= 1");
    }
    SSMKernel out;
    out.length = length;
    out.k.resize(length);
    cvec v = disc.b_bar;
    cvec next(v.size());
    for (std::size_t i = 0; i < length; ++i) {
        const cplx value = (disc.c_bar.transpose() * v)(0);
        out.k[i] = value.real();
        out.imag_residue = std::max(out.imag_residue, std::abs(value.imag()));
        next.noalias() = disc.a_bar * v;
        v.swap(next);
    }
    return out;
}

inline cmat matrix_power(cmat base, std::size_t exponent)
{
    cmat result = cmat::Identity(base.rows(), base.cols());
    while (exponent > 0) {
        if (exponent & 1U) {
            result = result * base;
        }
        exponent >>= 1U;
        if (exponent > 0) {
            base = base * base;
        }
    }
    return result;
}

/// Kernel from the truncated generating function at the roots of unity.
///
/// With z_j = exp(-2 pi i j / L) the length-L generating function of the
/// bilinear system is
///   K^(z) = C~ (I - a_bar z)^-1 b_bar = 2/(1+z) C~ (g(z) - A)^-1 B,
///   g(z) = (2/dt) (1-z)/(1+z),  C~ = C (I - a_bar^L).
/// The rank-1 term is removed with Woodbury, leaving four Cauchy sums per
/// node. The node z = -1 is evaluated from its limit C~ dt B / 2.
/// An inverse DFT then recovers the coefficients. Non power-of-two lengths
/// are computed at the next power of two and truncated.
inline SSMKernel kernel_fast(const DPLRSystem& sys, std::size_t length)
{
    if (length == 0) {
        throw invalid_argument("kernel_fast: length must be >= 1");
    }
    const std::size_t padded = fft::next_pow2(length);
    const double dt = sys.dt();
    const DiscreteSSM disc = discretize_bilinear(sys);
    const auto n = static_cast<Eigen::Index>(sys.state_size);

    const cmat trunc = cmat::Identity(n, n) - matrix_power(disc.a_bar, padded);
    const cvec ctilde = (sys.c.transpose() * trunc).transpose();
    const cvec qc = sys.q.conjugate();

    std::vector<cplx> spectrum(padded);
    for (std::size_t j = 0; j < padded; ++j) {
        const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(padded);
        const cplx z(std::cos(angle), std::sin(angle));
        if (2 * j == padded) {
            spectrum[j] = 0.5 * dt * (ctilde.transpose() * sys.b)(0);
            continue;
        }
        const cplx g = (2.0 / dt) * (1.0 - z) / (1.0 + z);
        cplx k00 = 0.0;
        cplx k01 = 0.0;
        cplx k10 = 0.0;
        cplx k11 = 0.0;
        for (Eigen::Index s = 0; s < n; ++s) {
            const cplx r = 1.0 / (g - sys.lambda(s));
            k00 += ctilde(s) * sys.b(s) * r;
            k01 += ctilde(s) * sys.p(s) * r;
            k10 += qc(s) * sys.b(s) * r;
            k11 += qc(s) * sys.p(s) * r;
        }
        const cplx denom = 1.0 + k11;
        if (std::abs(denom) < 1e-12) {
            std::ostringstream msg;
            msg << "kernel_fast: 1 + k11 vanishes at node " << j << " of " << padded;
            throw numeric_singularity(msg.str(), dt, static_cast<long>(j));
        }
        spectrum[j] = (2.0 / (1.0 + z)) * (k00 - k01 * k10 / denom);
    }
    fft::transform(spectrum, true);

    SSMKernel out;
    out.length = length;
    out.k.resize(length);
    for (std::size_t i = 0; i < length; ++i) {
        out.k[i] = spectrum[i].real();
        out.imag_residue = std::max(out.imag_residue, std::abs(spectrum[i].imag()));
    }
    return out;
}

/// y_t = sum_{j<=t} K_j x_{t-j} + d x_t via zero-padded FFT.
inline std::vector<double> apply_convolution(const SSMKernel& kernel, std::span<const double> x, double d)
{
    if (kernel.length != x.size() || kernel.k.size() != x.size()) {
        std::ostringstream msg;
        msg << "apply_convolution: kernel length " << kernel.length << " != input length " << x.size();
        throw invalid_argument(msg.str());
    }
    auto y = fft::causal_convolve(kernel.k, x);
    for (std::size_t t = 0; t < y.size(); ++t) {
        y[t] += d * x[t];
    }
    return y;
}

/// One recurrence step: h_k = a_bar h_{k-1} + b_bar x_k, y_k = Re(c_bar h_k) + d x_k.
inline std::pair<RecurrentState, double> step_recurrent(const DiscreteSSM& disc, const RecurrentState& state, double x)
{
    if (state.h.size() != disc.b_bar.size()) {
        throw invalid_argument("step_recurrent: state dimension does not match the system");
    }
    RecurrentState next{disc.a_bar * state.h + disc.b_bar * x};
    const double y = (disc.c_bar.transpose() * next.h)(0).real() + disc.d * x;
    return {std::move(next), y};
}

/// Runs the recurrence over a whole sequence from the zero state.
inline std::vector<double> run_recurrent(const DiscreteSSM& disc, std::span<const double> x)
{
    std::vector<double> y(x.size());
    cvec h = cvec::Zero(static_cast<Eigen::Index>(disc.state_size()));
    cvec next(h.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        next.noalias() = disc.a_bar * h;
        next += disc.b_bar * x[t];
        h.swap(next);
        y[t] = (disc.c_bar.transpose() * h)(0).real() + disc.d * x[t];
    }
    return y;
}

} // namespace s4m::ssm

#endif
