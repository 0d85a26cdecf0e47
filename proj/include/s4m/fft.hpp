#ifndef S4M_FFT_HPP
#define S4M_FFT_HPP

#include <algorithm>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

namespace s4m::fft {

namespace detail {

// fftw planner calls are not reentrant; execution on plan-owned buffers is.
inline std::mutex& planner_mutex()
{
    static std::mutex m;
    return m;
}

struct real_plan {
    explicit real_plan(int size) : n(size)
    {
        std::lock_guard lock(planner_mutex());
        in = fftw_alloc_real(static_cast<std::size_t>(n));
        out = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
        forward = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
        backward = fftw_plan_dft_c2r_1d(n, out, in, FFTW_ESTIMATE);
    }
    ~real_plan()
    {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(forward);
        fftw_destroy_plan(backward);
        fftw_free(in);
        fftw_free(out);
    }
    real_plan(const real_plan&) = delete;
    real_plan& operator=(const real_plan&) = delete;

    int n;
    double* in;
    fftw_complex* out;
    fftw_plan forward;
    fftw_plan backward;
};

struct complex_plan {
    explicit complex_plan(int size) : n(size)
    {
        std::lock_guard lock(planner_mutex());
        buf = fftw_alloc_complex(static_cast<std::size_t>(n));
        forward = fftw_plan_dft_1d(n, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        backward = fftw_plan_dft_1d(n, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~complex_plan()
    {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(forward);
        fftw_destroy_plan(backward);
        fftw_free(buf);
    }
    complex_plan(const complex_plan&) = delete;
    complex_plan& operator=(const complex_plan&) = delete;

    int n;
    fftw_complex* buf;
    fftw_plan forward;
    fftw_plan backward;
};

inline real_plan& real_plan_for(int n)
{
    thread_local std::map<int, std::unique_ptr<real_plan>> cache;
    auto& slot = cache[n];
    if (!slot) {
        slot = std::make_unique<real_plan>(n);
    }
    return *slot;
}

inline complex_plan& complex_plan_for(int n)
{
    thread_local std::map<int, std::unique_ptr<complex_plan>> cache;
    auto& slot = cache[n];
    if (!slot) {
        slot = std::make_unique<complex_plan>(n);
    }
    return *slot;
}

} // namespace detail

inline std::size_t next_pow2(std::size_t n)
{
    std::size_t p = 1;
    while (p < n) {
        p <<= 1;
    }
    return p;
}

// In-place DFT. forward: X_j = sum_k x_k exp(-2 pi i jk/n).
// inverse is normalized by 1/n.
inline void transform(std::span<std::complex<double>> data, bool inverse)
{
    const int n = static_cast<int>(data.size());
    if (n == 0) {
        return;
    }
    auto& plan = detail::complex_plan_for(n);
    for (int i = 0; i < n; ++i) {
        plan.buf[i][0] = data[i].real();
        plan.buf[i][1] = data[i].imag();
    }
    fftw_execute(inverse ? plan.backward : plan.forward);
    const double scale = inverse ? 1.0 / n : 1.0;
    for (int i = 0; i < n; ++i) {
        data[i] = {plan.buf[i][0] * scale, plan.buf[i][1] * scale};
    }
}

// First k.size() == x.size() samples of the linear (non-circular)
// convolution y_t = sum_{j<=t} k_j x_{t-j}. Both inputs are zero-padded to a
// power of two >= 2L so the circular product never wraps.
inline std::vector<double> causal_convolve(std::span<const double> k, std::span<const double> x)
{
    const std::size_t len = x.size();
    std::vector<double> y(len, 0.0);
    if (len == 0) {
        return y;
    }
    const int n = static_cast<int>(next_pow2(2 * len));
    auto& plan = detail::real_plan_for(n);
    const std::size_t bins = static_cast<std::size_t>(n / 2 + 1);

    std::vector<std::complex<double>> kf(bins);
    std::fill(plan.in, plan.in + n, 0.0);
    std::copy(k.begin(), k.begin() + static_cast<std::ptrdiff_t>(std::min(k.size(), len)), plan.in);
    fftw_execute(plan.forward);
    for (std::size_t i = 0; i < bins; ++i) {
        kf[i] = {plan.out[i][0], plan.out[i][1]};
    }

    std::fill(plan.in, plan.in + n, 0.0);
    std::copy(x.begin(), x.end(), plan.in);
    fftw_execute(plan.forward);
    for (std::size_t i = 0; i < bins; ++i) {
        std::complex<double> v(plan.out[i][0], plan.out[i][1]);
        v *= kf[i];
        plan.out[i][0] = v.real();
        plan.out[i][1] = v.imag();
    }
    fftw_execute(plan.backward);
    const double scale = 1.0 / n;
    for (std::size_t t = 0; t < len; ++t) {
        y[t] = plan.in[t] * scale;
    }
    return y;
}

// Adjoint of causal_convolve in its second argument:
// r_j = sum_{t>=j} k_{t-j} g_t.
inline std::vector<double> causal_correlate(std::span<const double> k, std::span<const double> g)
{
    std::vector<double> rev(g.rbegin(), g.rend());
    auto c = causal_convolve(k, rev);
    return {c.rbegin(), c.rend()};
}

} // namespace s4m::fft

#endif
