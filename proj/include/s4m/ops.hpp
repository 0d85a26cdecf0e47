#ifndef S4M_OPS_HPP
#define S4M_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "s4m/fft.hpp"
#include "s4m/parallel.hpp"
#include "s4m/tensor.hpp"

// Differentiable primitives. Each op computes its value eagerly and records
// a backward rule on the tape of its inputs.

namespace s4m::ops {

namespace detail {

inline void require(bool ok, const std::string& what)
{
    if (!ok) {
        throw invalid_argument(what);
    }
}

inline void require_same_shape(const char* op, const Var& a, const Var& b)
{
    if (a.shape() != b.shape()) {
        std::ostringstream msg;
        msg << op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape());
        throw invalid_argument(msg.str());
    }
}

inline void require_rank(const char* op, const Var& a, std::size_t rank)
{
    if (a.value().rank() != rank) {
        std::ostringstream msg;
        msg << op << ": expected rank " << rank << ", got shape " << shape_str(a.shape());
        throw invalid_argument(msg.str());
    }
}

// Ceil division for possibly negative numerators with positive divisor.
inline long ceil_div(long a, long b)
{
    return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

inline long floor_div(long a, long b)
{
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}

// Range of output indices t with 0 <= t*stride + offset < len.
inline std::pair<long, long> valid_range(long offset, long stride, long len, long out_len)
{
    const long lo = std::max(0L, ceil_div(-offset, stride));
    const long hi = std::min(out_len, floor_div(len - 1 - offset, stride) + 1);
    return {lo, hi};
}

template<typename Fn>
Tensor elementwise(const Var& x, Fn&& f)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = f(xv[i]);
    }
    return out;
}

} // namespace detail

inline Var add(const Var& a, const Var& b)
{
    detail::require_same_shape("add", a, b);
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return a.tape()->record(std::move(out), {a, b}, [a, b](std::span<const double> g, GradBuffer& grads) {
        for (const Var& v : {a, b}) {
            if (grads.wants(v)) {
                auto gv = grads.at(v);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gv[i] += g[i];
                }
            }
        }
    });
}

inline Var sub(const Var& a, const Var& b)
{
    detail::require_same_shape("sub", a, b);
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] - bv[i];
    }
    return a.tape()->record(std::move(out), {a, b}, [a, b](std::span<const double> g, GradBuffer& grads) {
        if (grads.wants(a)) {
            auto ga = grads.at(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        }
        if (grads.wants(b)) {
            auto gb = grads.at(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] -= g[i];
            }
        }
    });
}

inline Var mul(const Var& a, const Var& b)
{
    detail::require_same_shape("mul", a, b);
    Tensor out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return a.tape()->record(std::move(out), {a, b}, [a, b](std::span<const double> g, GradBuffer& grads) {
        if (grads.wants(a)) {
            auto ga = grads.at(a);
            const auto& bv = b.value();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bv[i];
            }
        }
        if (grads.wants(b)) {
            auto gb = grads.at(b);
            const auto& av = a.value();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * av[i];
            }
        }
    });
}

inline Var scale(const Var& x, double s)
{
    Tensor out = detail::elementwise(x, [s](double v) { return s * v; });
    return x.tape()->record(std::move(out), {x}, [x, s](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += s * g[i];
        }
    });
}

inline double gelu_value(double v)
{
    return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
}

inline double gelu_slope(double v)
{
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + v * pdf;
}

/// Exact GELU, x * Phi(x).
inline Var gelu(const Var& x)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = gelu_value(xv[i]);
    }
    return x.tape()->record(std::move(out), {x}, [x](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        const auto& xv = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * gelu_slope(xv[i]);
        }
    });
}

inline Var sigmoid(const Var& x)
{
    Tensor out = detail::elementwise(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const Tape* tape = x.tape();
    // The rule reads this op's own output, which lands at the next node id.
    const std::size_t self = tape->size();
    return x.tape()->record(std::move(out), {x}, [x, self, tape](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        const auto& yv = tape->value(self);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
        }
    });
}

inline Var relu(const Var& x)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    }
    return x.tape()->record(std::move(out), {x}, [x](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        const auto& xv = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0) {
                gx[i] += g[i];
            }
        }
    });
}

inline Var sum(const Var& x)
{
    double acc = 0.0;
    for (double v : x.value().values()) {
        acc += v;
    }
    return x.tape()->record(Tensor({1}, acc), {x}, [x](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (double& v : gx) {
            v += g[0];
        }
    });
}

inline Var mean(const Var& x)
{
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

inline std::size_t conv1d_output_length(std::size_t len, std::size_t kernel, std::size_t stride,
                                        std::size_t dilation, std::size_t padding)
{
    const long span = static_cast<long>(dilation) * (static_cast<long>(kernel) - 1) + 1;
    const long num = static_cast<long>(len) + 2 * static_cast<long>(padding) - span;
    if (num < 0) {
        return 0;
    }
    return static_cast<std::size_t>(num / static_cast<long>(stride) + 1);
}

/// Grouped 1-D cross-correlation.
/// x: [B, Cin, L], w: [Cout, Cin/groups, k], bias: [Cout].
inline Var conv1d(const Var& x, const Var& w, const std::optional<Var>& bias, std::size_t stride = 1,
                  std::size_t dilation = 1, std::size_t padding = 0, std::size_t groups = 1)
{
    detail::require_rank("conv1d", x, 3);
    detail::require_rank("conv1d", w, 3);
    const std::size_t batch = x.dim(0);
    const std::size_t cin = x.dim(1);
    const std::size_t len = x.dim(2);
    const std::size_t cout = w.dim(0);
    const std::size_t cin_g = w.dim(1);
    const std::size_t k = w.dim(2);
    detail::require(stride >= 1 && dilation >= 1 && groups >= 1, "conv1d: stride, dilation and groups must be >= 1");
    if (cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups) {
        std::ostringstream msg;
        msg << "conv1d: weight " << shape_str(w.shape()) << " incompatible with input " << shape_str(x.shape())
            << " and groups " << groups;
        throw invalid_argument(msg.str());
    }
    if (bias && bias->shape() != shape_t{cout}) {
        throw invalid_argument("conv1d: bias shape " + shape_str(bias->shape()) + " vs weight " +
                               shape_str(w.shape()));
    }
    const std::size_t out_len = conv1d_output_length(len, k, stride, dilation, padding);
    if (out_len == 0) {
        std::ostringstream msg;
        msg << "conv1d: non-positive output length for input " << shape_str(x.shape()) << " and weight "
            << shape_str(w.shape());
        throw invalid_argument(msg.str());
    }
    const std::size_t cout_g = cout / groups;

    Tensor out({batch, cout, out_len});
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    double* yv = out.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* y = yv + (b * cout + o) * out_len;
            if (bias) {
                std::fill(y, y + out_len, bias->value()[o]);
            }
            const std::size_t g = o / cout_g;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
                const double* xs = xv + (b * cin + g * cin_g + ci) * len;
                for (std::size_t j = 0; j < k; ++j) {
                    const double wj = wv[(o * cin_g + ci) * k + j];
                    const long offset = static_cast<long>(j * dilation) - static_cast<long>(padding);
                    auto [lo, hi] = detail::valid_range(offset, static_cast<long>(stride), static_cast<long>(len),
                                                        static_cast<long>(out_len));
                    if (stride == 1) {
                        const double* src = xs + offset;
                        for (long t = lo; t < hi; ++t) {
                            y[t] += wj * src[t];
                        }
                    } else {
                        for (long t = lo; t < hi; ++t) {
                            y[t] += wj * xs[t * static_cast<long>(stride) + offset];
                        }
                    }
                }
            }
        }
    }

    std::vector<Var> inputs{x, w};
    if (bias) {
        inputs.push_back(*bias);
    }
    return x.tape()->record(std::move(out), inputs, [=](std::span<const double> g, GradBuffer& grads) {
        const double* xv = x.value().data();
        const double* wv = w.value().data();
        const bool want_x = grads.wants(x);
        const bool want_w = grads.wants(w);
        double* gx = want_x ? grads.at(x).data() : nullptr;
        double* gw = want_w ? grads.at(w).data() : nullptr;
        if (bias && grads.wants(*bias)) {
            auto gb = grads.at(*bias);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* gy = g.data() + (b * cout + o) * out_len;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < out_len; ++t) {
                        acc += gy[t];
                    }
                    gb[o] += acc;
                }
            }
        }
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < cout; ++o) {
                const double* gy = g.data() + (b * cout + o) * out_len;
                const std::size_t grp = o / cout_g;
                for (std::size_t ci = 0; ci < cin_g; ++ci) {
                    const std::size_t xoff = (b * cin + grp * cin_g + ci) * len;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t widx = (o * cin_g + ci) * k + j;
                        const long offset = static_cast<long>(j * dilation) - static_cast<long>(padding);
                        auto [lo, hi] = detail::valid_range(offset, static_cast<long>(stride), static_cast<long>(len),
                                                            static_cast<long>(out_len));
                        const long s = static_cast<long>(stride);
                        if (gw) {
                            double acc = 0.0;
                            const double* xs = xv + xoff;
                            for (long t = lo; t < hi; ++t) {
                                acc += gy[t] * xs[t * s + offset];
                            }
                            gw[widx] += acc;
                        }
                        if (gx) {
                            const double wj = wv[widx];
                            double* dst = gx + xoff;
                            for (long t = lo; t < hi; ++t) {
                                dst[t * s + offset] += wj * gy[t];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint of conv1d (no padding, dilation 1).
/// x: [B, Cin, L], w: [Cin, Cout, k], bias: [Cout]; output length (L-1)*stride + k.
inline Var conv1d_transposed(const Var& x, const Var& w, const std::optional<Var>& bias, std::size_t stride = 1)
{
    detail::require_rank("conv1d_transposed", x, 3);
    detail::require_rank("conv1d_transposed", w, 3);
    detail::require(stride >= 1, "conv1d_transposed: stride must be >= 1");
    const std::size_t batch = x.dim(0);
    const std::size_t cin = x.dim(1);
    const std::size_t len = x.dim(2);
    if (w.dim(0) != cin) {
        throw invalid_argument("conv1d_transposed: weight " + shape_str(w.shape()) + " incompatible with input " +
                               shape_str(x.shape()));
    }
    const std::size_t cout = w.dim(1);
    const std::size_t k = w.dim(2);
    if (bias && bias->shape() != shape_t{cout}) {
        throw invalid_argument("conv1d_transposed: bias shape " + shape_str(bias->shape()) + " vs weight " +
                               shape_str(w.shape()));
    }
    detail::require(len >= 1 && k >= 1, "conv1d_transposed: non-positive output length");
    const std::size_t out_len = (len - 1) * stride + k;

    Tensor out({batch, cout, out_len});
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* y = out.data() + (b * cout + o) * out_len;
            if (bias) {
                std::fill(y, y + out_len, bias->value()[o]);
            }
            for (std::size_t c = 0; c < cin; ++c) {
                const double* xs = xv + (b * cin + c) * len;
                for (std::size_t j = 0; j < k; ++j) {
                    const double wj = wv[(c * cout + o) * k + j];
                    for (std::size_t t = 0; t < len; ++t) {
                        y[t * stride + j] += wj * xs[t];
                    }
                }
            }
        }
    }

    std::vector<Var> inputs{x, w};
    if (bias) {
        inputs.push_back(*bias);
    }
    return x.tape()->record(std::move(out), inputs, [=](std::span<const double> g, GradBuffer& grads) {
        const double* xv = x.value().data();
        const double* wv = w.value().data();
        double* gx = grads.wants(x) ? grads.at(x).data() : nullptr;
        double* gw = grads.wants(w) ? grads.at(w).data() : nullptr;
        if (bias && grads.wants(*bias)) {
            auto gb = grads.at(*bias);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* gy = g.data() + (b * cout + o) * out_len;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < out_len; ++t) {
                        acc += gy[t];
                    }
                    gb[o] += acc;
                }
            }
        }
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < cout; ++o) {
                const double* gy = g.data() + (b * cout + o) * out_len;
                for (std::size_t c = 0; c < cin; ++c) {
                    const double* xs = xv + (b * cin + c) * len;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t widx = (c * cout + o) * k + j;
                        if (gw) {
                            double acc = 0.0;
                            for (std::size_t t = 0; t < len; ++t) {
                                acc += gy[t * stride + j] * xs[t];
                            }
                            gw[widx] += acc;
                        }
                        if (gx) {
                            double* dst = gx + (b * cin + c) * len;
                            const double wj = wv[widx];
                            for (std::size_t t = 0; t < len; ++t) {
                                dst[t] += wj * gy[t * stride + j];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Affine map over the last axis. x: [..., Din], w: [Dout, Din], bias: [Dout].
inline Var linear(const Var& x, const Var& w, const std::optional<Var>& bias)
{
    detail::require_rank("linear", w, 2);
    const auto& xs = x.shape();
    detail::require(!xs.empty(), "linear: scalar input");
    const std::size_t din = xs.back();
    const std::size_t dout = w.dim(0);
    if (w.dim(1) != din) {
        throw invalid_argument("linear: shape mismatch " + shape_str(xs) + " vs " + shape_str(w.shape()));
    }
    if (bias && bias->shape() != shape_t{dout}) {
        throw invalid_argument("linear: bias shape " + shape_str(bias->shape()) + " vs " + shape_str(w.shape()));
    }
    const std::size_t rows = x.value().size() / din;
    shape_t out_shape = xs;
    out_shape.back() = dout;
    Tensor out(out_shape);
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < dout; ++o) {
            double acc = bias ? bias->value()[o] : 0.0;
            for (std::size_t i = 0; i < din; ++i) {
                acc += wv[o * din + i] * xv[r * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    std::vector<Var> inputs{x, w};
    if (bias) {
        inputs.push_back(*bias);
    }
    return x.tape()->record(std::move(out), inputs, [=](std::span<const double> g, GradBuffer& grads) {
        const double* xv = x.value().data();
        const double* wv = w.value().data();
        double* gx = grads.wants(x) ? grads.at(x).data() : nullptr;
        double* gw = grads.wants(w) ? grads.at(w).data() : nullptr;
        double* gb = bias && grads.wants(*bias) ? grads.at(*bias).data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < dout; ++o) {
                const double go = g[r * dout + o];
                if (gb) {
                    gb[o] += go;
                }
                for (std::size_t i = 0; i < din; ++i) {
                    if (gw) {
                        gw[o * din + i] += go * xv[r * din + i];
                    }
                    if (gx) {
                        gx[r * din + i] += go * wv[o * din + i];
                    }
                }
            }
        }
    });
}

/// x: [B, C, L] -> [B, C, (L - window)/stride + 1].
inline Var avg_pool1d(const Var& x, std::size_t window, std::size_t stride)
{
    detail::require_rank("avg_pool1d", x, 3);
    detail::require(window >= 1 && stride >= 1, "avg_pool1d: window and stride must be >= 1");
    const std::size_t rows = x.dim(0) * x.dim(1);
    const std::size_t len = x.dim(2);
    detail::require(len >= window, "avg_pool1d: input " + shape_str(x.shape()) + " shorter than window");
    const std::size_t out_len = (len - window) / stride + 1;
    Tensor out({x.dim(0), x.dim(1), out_len});
    const double inv = 1.0 / static_cast<double>(window);
    const double* xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < out_len; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < window; ++j) {
                acc += xv[r * len + t * stride + j];
            }
            out[r * out_len + t] = acc * inv;
        }
    }
    return x.tape()->record(std::move(out), {x}, [=](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < out_len; ++t) {
                const double v = g[r * out_len + t] * inv;
                for (std::size_t j = 0; j < window; ++j) {
                    gx[r * len + t * stride + j] += v;
                }
            }
        }
    });
}

/// Repeats every time step `factor` times. x: [B, C, L] -> [B, C, L*factor].
inline Var nearest_upsample(const Var& x, std::size_t factor)
{
    detail::require_rank("nearest_upsample", x, 3);
    detail::require(factor >= 1, "nearest_upsample: factor must be >= 1");
    const std::size_t rows = x.dim(0) * x.dim(1);
    const std::size_t len = x.dim(2);
    Tensor out({x.dim(0), x.dim(1), len * factor});
    const double* xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < len * factor; ++t) {
            out[r * len * factor + t] = xv[r * len + t / factor];
        }
    }
    return x.tape()->record(std::move(out), {x}, [=](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < len * factor; ++t) {
                gx[r * len + t / factor] += g[r * len * factor + t];
            }
        }
    });
}

/// Normalizes each [C, L] feature map to zero mean and unit variance over
/// channels and time jointly, then applies per-channel gain and bias.
inline Var global_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-8)
{
    detail::require_rank("global_norm", x, 3);
    const std::size_t batch = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t len = x.dim(2);
    if (gain.shape() != shape_t{ch} || bias.shape() != shape_t{ch}) {
        throw invalid_argument("global_norm: gain/bias shapes " + shape_str(gain.shape()) + ", " +
                               shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    }
    const std::size_t n = ch * len;
    std::vector<double> inv_std(batch);
    std::vector<double> means(batch);
    Tensor out(x.shape());
    const double* xv = x.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xs = xv + b * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mu += xs[i];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            var += (xs[i] - mu) * (xs[i] - mu);
        }
        var /= static_cast<double>(n);
        means[b] = mu;
        inv_std[b] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < ch; ++c) {
            const double gc = gain.value()[c];
            const double bc = bias.value()[c];
            for (std::size_t t = 0; t < len; ++t) {
                const std::size_t i = c * len + t;
                out[b * n + i] = gc * (xs[i] - mu) * inv_std[b] + bc;
            }
        }
    }
    return x.tape()->record(
        std::move(out), {x, gain, bias}, [=](std::span<const double> g, GradBuffer& grads) {
            const double* xv = x.value().data();
            double* gx = grads.wants(x) ? grads.at(x).data() : nullptr;
            double* gg = grads.wants(gain) ? grads.at(gain).data() : nullptr;
            double* gb = grads.wants(bias) ? grads.at(bias).data() : nullptr;
            std::vector<double> ghat(n);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* xs = xv + b * n;
                const double* gy = g.data() + b * n;
                double mean_ghat = 0.0;
                double mean_ghat_xhat = 0.0;
                for (std::size_t c = 0; c < ch; ++c) {
                    const double gc = gain.value()[c];
                    for (std::size_t t = 0; t < len; ++t) {
                        const std::size_t i = c * len + t;
                        const double xhat = (xs[i] - means[b]) * inv_std[b];
                        if (gg) {
                            gg[c] += gy[i] * xhat;
                        }
                        if (gb) {
                            gb[c] += gy[i];
                        }
                        ghat[i] = gy[i] * gc;
                        mean_ghat += ghat[i];
                        mean_ghat_xhat += ghat[i] * xhat;
                    }
                }
                if (!gx) {
                    continue;
                }
                mean_ghat /= static_cast<double>(n);
                mean_ghat_xhat /= static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const double xhat = (xs[i] - means[b]) * inv_std[b];
                    gx[b * n + i] += inv_std[b] * (ghat[i] - mean_ghat - xhat * mean_ghat_xhat);
                }
            }
        });
}

/// Per-channel causal long convolution y = K_h * x + d_h x.
/// x: [B, H, L], kernel: [H, L], d: [H].
inline Var fft_conv(const Var& x, const Var& kernel, const Var& d)
{
    detail::require_rank("fft_conv", x, 3);
    detail::require_rank("fft_conv", kernel, 2);
    const std::size_t batch = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t len = x.dim(2);
    if (kernel.shape() != shape_t{h, len} || d.shape() != shape_t{h}) {
        throw invalid_argument("fft_conv: kernel " + shape_str(kernel.shape()) + " / d " + shape_str(d.shape()) +
                               " incompatible with input " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    const double* xv = x.value().data();
    const double* kv = kernel.value().data();
    parallel_for(h, [&](std::size_t c) {
        std::span<const double> kc(kv + c * len, len);
        const double dc = d.value()[c];
        for (std::size_t b = 0; b < batch; ++b) {
            std::span<const double> xs(xv + (b * h + c) * len, len);
            auto y = fft::causal_convolve(kc, xs);
            double* dst = out.data() + (b * h + c) * len;
            for (std::size_t t = 0; t < len; ++t) {
                dst[t] = y[t] + dc * xs[t];
            }
        }
    });
    return x.tape()->record(std::move(out), {x, kernel, d}, [=](std::span<const double> g, GradBuffer& grads) {
        const double* xv = x.value().data();
        const double* kv = kernel.value().data();
        double* gx = grads.wants(x) ? grads.at(x).data() : nullptr;
        double* gk = grads.wants(kernel) ? grads.at(kernel).data() : nullptr;
        double* gd = grads.wants(d) ? grads.at(d).data() : nullptr;
        parallel_for(h, [&](std::size_t c) {
            std::span<const double> kc(kv + c * len, len);
            const double dc = d.value()[c];
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t off = (b * h + c) * len;
                std::span<const double> xs(xv + off, len);
                std::span<const double> gy(g.data() + off, len);
                if (gx) {
                    auto r = fft::causal_correlate(kc, gy);
                    for (std::size_t t = 0; t < len; ++t) {
                        gx[off + t] += r[t] + dc * gy[t];
                    }
                }
                if (gk) {
                    auto r = fft::causal_correlate(xs, gy);
                    for (std::size_t t = 0; t < len; ++t) {
                        gk[c * len + t] += r[t];
                    }
                }
                if (gd) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < len; ++t) {
                        acc += gy[t] * xs[t];
                    }
                    gd[c] += acc;
                }
            }
        });
    });
}

/// Zero-pads the time axis. x: [B, C, L] -> [B, C, left + L + right].
inline Var pad_time(const Var& x, std::size_t left, std::size_t right)
{
    detail::require_rank("pad_time", x, 3);
    const std::size_t rows = x.dim(0) * x.dim(1);
    const std::size_t len = x.dim(2);
    const std::size_t out_len = left + len + right;
    Tensor out({x.dim(0), x.dim(1), out_len});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.value().data() + r * len, len, out.data() + r * out_len + left);
    }
    return x.tape()->record(std::move(out), {x}, [=](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < len; ++t) {
                gx[r * len + t] += g[r * out_len + left + t];
            }
        }
    });
}

/// Time window [start, start + count) of x: [B, C, L].
inline Var crop_time(const Var& x, std::size_t start, std::size_t count)
{
    detail::require_rank("crop_time", x, 3);
    const std::size_t len = x.dim(2);
    detail::require(start + count <= len, "crop_time: window exceeds input " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0) * x.dim(1);
    Tensor out({x.dim(0), x.dim(1), count});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.value().data() + r * len + start, count, out.data() + r * count);
    }
    return x.tape()->record(std::move(out), {x}, [=](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < count; ++t) {
                gx[r * len + start + t] += g[r * count + t];
            }
        }
    });
}

/// Channels [start, start + count) of x: [B, C, L].
inline Var channel_slice(const Var& x, std::size_t start, std::size_t count)
{
    detail::require_rank("channel_slice", x, 3);
    const std::size_t batch = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t len = x.dim(2);
    detail::require(start + count <= ch, "channel_slice: range exceeds input " + shape_str(x.shape()));
    Tensor out({batch, count, len});
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(x.value().data() + (b * ch + start) * len, count * len, out.data() + b * count * len);
    }
    return x.tape()->record(std::move(out), {x}, [=](std::span<const double> g, GradBuffer& grads) {
        auto gx = grads.at(x);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < count * len; ++i) {
                gx[(b * ch + start) * len + i] += g[b * count * len + i];
            }
        }
    });
}

/// Concatenates [B, C_i, L] tensors along the channel axis.
inline Var concat_channels(const std::vector<Var>& parts)
{
    detail::require(!parts.empty(), "concat_channels: no inputs");
    const std::size_t batch = parts[0].dim(0);
    const std::size_t len = parts[0].dim(2);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank("concat_channels", p, 3);
        if (p.dim(0) != batch || p.dim(2) != len) {
            throw invalid_argument("concat_channels: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                   shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor out({batch, total, len});
    std::size_t at = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t b = 0; b < batch; ++b) {
            std::copy_n(p.value().data() + b * c * len, c * len, out.data() + (b * total + at) * len);
        }
        at += c;
    }
    return parts[0].tape()->record(std::move(out), parts, [=](std::span<const double> g, GradBuffer& grads) {
        std::size_t at = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.dim(1);
            if (grads.wants(p)) {
                auto gp = grads.at(p);
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t i = 0; i < c * len; ++i) {
                        gp[b * c * len + i] += g[(b * total + at) * len + i];
                    }
                }
            }
            at += c;
        }
    });
}

} // namespace s4m::ops

#endif
