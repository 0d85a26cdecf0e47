#ifndef S4M_S4_LAYER_HPP
#define S4M_S4_LAYER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "s4m/model.hpp"
#include "s4m/ops.hpp"
#include "s4m/parallel.hpp"
#include "s4m/ssm.hpp"

// A bank of H independent single-channel DPLR state space layers, one per
// feature channel.

namespace s4m::s4 {

/// train: differentiable kernel by dense state propagation.
/// conv: kernel_fast followed by FFT convolution (no gradient).
/// recurrent: step-by-step recurrence (no gradient).
enum class Mode { train, conv, recurrent };

/// Real parts of lambda are clamped here so the continuous system stays
/// strictly stable while training.
inline constexpr double max_lambda_re = -1e-4;

struct Layer {
    Var lambda_re, lambda_im, p_re, p_im, q_re, q_im, b_re, b_im, c_re, c_im, d, log_dt;

    static Layer from(const ParamVars& params, const std::string& prefix)
    {
        auto g = [&](const char* f) { return params.at(prefix + f); };
        return {g("lambda_re"), g("lambda_im"), g("p_re"), g("p_im"), g("q_re"), g("q_im"),
                g("b_re"),      g("b_im"),      g("c_re"), g("c_im"), g("d"),    g("log_dt")};
    }

    std::vector<Var> inputs() const
    {
        return {lambda_re, lambda_im, p_re, p_im, q_re, q_im, b_re, b_im, c_re, c_im, d, log_dt};
    }

    std::size_t channels() const { return lambda_re.dim(0); }
    std::size_t state_size() const { return lambda_re.dim(1); }

    /// Continuous system of channel h, with the lambda clamp applied.
    ssm::DPLRSystem system(std::size_t h) const
    {
        const std::size_t s = state_size();
        ssm::DPLRSystem sys;
        sys.state_size = s;
        auto gather = [&](const Var& re, const Var& im, bool clamp = false) {
            ssm::cvec v(static_cast<Eigen::Index>(s));
            for (std::size_t i = 0; i < s; ++i) {
                double r = re.value()[h * s + i];
                if (clamp) {
                    r = std::min(r, max_lambda_re);
                }
                v(static_cast<Eigen::Index>(i)) = ssm::cplx(r, im.value()[h * s + i]);
            }
            return v;
        };
        sys.lambda = gather(lambda_re, lambda_im, true);
        sys.p = gather(p_re, p_im);
        sys.q = gather(q_re, q_im);
        sys.b = gather(b_re, b_im);
        sys.c = gather(c_re, c_im);
        sys.d = d.value()[h];
        sys.log_dt = log_dt.value()[h];
        return sys;
    }
};

/// K[h, k] = Re(c_h^T abar_h^k bbar_h) for k < length, differentiable in
/// every DPLR parameter. Cost O(H S^2 L).
inline Var dplr_kernel(const Layer& layer, std::size_t length)
{
    using ssm::cmat;
    using ssm::cplx;
    using ssm::cvec;
    const std::size_t h_count = layer.channels();
    const std::size_t s = layer.state_size();
    const auto si = static_cast<Eigen::Index>(s);
    const auto li = static_cast<Eigen::Index>(length);

    Tensor out({h_count, length});
    parallel_for(h_count, [&](std::size_t h) {
        const auto disc = ssm::discretize_bilinear(layer.system(h));
        cvec v = disc.b_bar;
        double* dst = out.data() + h * length;
        for (std::size_t k = 0; k < length; ++k) {
            dst[k] = disc.c_bar.cwiseProduct(v).sum().real();
            v = disc.a_bar * v;
        }
    });

    const std::vector<Var> inputs = layer.inputs();
    return layer.lambda_re.tape()->record(std::move(out), inputs, [=](std::span<const double> g, GradBuffer& grads) {
        std::vector<double*> gp(inputs.size(), nullptr);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (grads.wants(inputs[i])) {
                gp[i] = grads.at(inputs[i]).data();
            }
        }
        parallel_for(h_count, [&](std::size_t h) {
            const ssm::DPLRSystem sys = layer.system(h);
            const double dt = sys.dt();
            const cmat a = sys.dense_a();
            const cmat eye = cmat::Identity(si, si);
            const cmat m_inv = (eye - (dt / 2.0) * a).inverse();
            const cmat abar = m_inv * (eye + (dt / 2.0) * a);
            const cvec bbar = m_inv * (dt * sys.b);
            const cvec& c = sys.c;

            cmat states(si, li);
            states.col(0) = bbar;
            for (Eigen::Index k = 1; k < li; ++k) {
                states.col(k) = abar * states.col(k - 1);
            }
            Eigen::Map<const Eigen::VectorXd> gk(g.data() + h * length, li);
            // K_k = Re(c^T v_k): the adjoint of v_k is g_k conj(c).
            const cvec g_c = states.conjugate() * gk.cast<cplx>();
            cmat adj(si, li);
            adj.col(li - 1) = gk(li - 1) * c.conjugate();
            const cmat abar_h = abar.adjoint();
            for (Eigen::Index k = li - 1; k-- > 0;) {
                adj.col(k) = gk(k) * c.conjugate() + abar_h * adj.col(k + 1);
            }
            cmat g_abar = cmat::Zero(si, si);
            if (li > 1) {
                g_abar = adj.rightCols(li - 1) * states.leftCols(li - 1).adjoint();
            }
            const cvec g_bbar = adj.col(0);

            const cmat m_inv_h = m_inv.adjoint();
            const cvec g_w = m_inv_h * g_bbar;
            const cmat g_n = m_inv_h * g_abar;
            const cmat g_m = -g_n * abar.adjoint() - g_w * bbar.adjoint();
            const cvec g_b = dt * g_w;
            double g_dt = (g_w.conjugate().cwiseProduct(sys.b)).sum().real();
            g_dt += (g_n - g_m).conjugate().cwiseProduct(a).sum().real() / 2.0;
            const cmat g_a = (dt / 2.0) * (g_n - g_m);
            const cvec g_lambda = g_a.diagonal();
            const cvec g_p = -g_a * sys.q;
            const cvec g_q = -g_a.adjoint() * sys.p;

            auto scatter = [&](std::size_t re_idx, const cvec& v) {
                for (std::size_t i = 0; i < s; ++i) {
                    const auto ii = static_cast<Eigen::Index>(i);
                    if (gp[re_idx]) {
                        gp[re_idx][h * s + i] += v(ii).real();
                    }
                    if (gp[re_idx + 1]) {
                        gp[re_idx + 1][h * s + i] += v(ii).imag();
                    }
                }
            };
            cvec g_lambda_masked = g_lambda;
            for (std::size_t i = 0; i < s; ++i) {
                if (layer.lambda_re.value()[h * s + i] > max_lambda_re) {
                    g_lambda_masked(static_cast<Eigen::Index>(i)).real(0.0);
                }
            }
            scatter(0, g_lambda_masked);
            scatter(2, g_p);
            scatter(4, g_q);
            scatter(6, g_b);
            scatter(8, g_c);
            if (gp[11]) {
                gp[11][h] += dt * g_dt;
            }
        });
    });
}

/// y[b, h, :] = K_h * u[b, h, :] + d_h u[b, h, :].  u: [B, H, L].
inline Var apply(const Layer& layer, const Var& u, Mode mode)
{
    const std::size_t batch = u.dim(0);
    const std::size_t h_count = u.dim(1);
    const std::size_t len = u.dim(2);
    if (h_count != layer.channels()) {
        throw invalid_argument("s4 layer: " + std::to_string(layer.channels()) + " channels, input " +
                               shape_str(u.shape()));
    }
    Tape& tape = *u.tape();
    switch (mode) {
    case Mode::train:
        return ops::fft_conv(u, dplr_kernel(layer, len), layer.d);
    case Mode::conv: {
        Tensor k({h_count, len});
        parallel_for(h_count, [&](std::size_t h) {
            const auto kern = ssm::kernel_fast(layer.system(h), len);
            std::copy(kern.k.begin(), kern.k.end(), k.data() + h * len);
        });
        return ops::fft_conv(u, tape.constant(std::move(k)), layer.d);
    }
    case Mode::recurrent: {
        Tensor y(u.shape());
        parallel_for(h_count, [&](std::size_t h) {
            const auto disc = ssm::discretize_bilinear(layer.system(h));
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t off = (b * h_count + h) * len;
                const auto out = ssm::run_recurrent(disc, u.value().values().subspan(off, len));
                std::copy(out.begin(), out.end(), y.data() + off);
            }
        });
        return tape.constant(std::move(y));
    }
    }
    throw invalid_argument("s4 layer: unknown mode");
}

} // namespace s4m::s4

#endif
