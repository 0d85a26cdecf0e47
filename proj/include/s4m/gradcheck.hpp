#ifndef S4M_GRADCHECK_HPP
#define S4M_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "s4m/ops.hpp"
#include "s4m/tensor.hpp"

// Finite-difference checks of reverse-mode gradients.

namespace s4m::gradcheck {

using Builder = std::function<s4m::Var(s4m::Tape&, const std::vector<s4m::Var>&)>;

inline s4m::Tensor random_tensor(const s4m::shape_t& shape, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> dist(0.0, scale);
    s4m::Tensor t(shape);
    for (double& v : t.values()) {
        v = dist(rng);
    }
    return t;
}

// Compares reverse-mode gradients with central differences of the scalar
// probe L = sum_i r_i y_i (fixed random r, so the whole vector-Jacobian
// product is exercised). The error for each input is
//   max_j |analytic_j - numeric_j| / max_j |numeric_j|.
inline std::vector<double> max_rel_errors(const Builder& build, const std::vector<s4m::Tensor>& inputs,
                                          std::uint64_t seed, double h = 1e-6)
{
    std::mt19937_64 rng(seed);
    std::vector<double> projection;
    auto evaluate = [&](const std::vector<s4m::Tensor>& values) {
        s4m::Tape tape(false);
        std::vector<s4m::Var> vars;
        for (const auto& v : values) {
            vars.push_back(tape.constant(v));
        }
        const auto& y = build(tape, vars).value();
        if (projection.empty()) {
            std::normal_distribution<double> dist(0.0, 1.0);
            projection.resize(y.size());
            for (double& r : projection) {
                r = dist(rng);
            }
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            acc += projection[i] * y[i];
        }
        return acc;
    };
    evaluate(inputs);

    s4m::Tape tape;
    std::vector<s4m::Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        s4m::Tensor t = inputs[i];
        t.set_requires_grad(true);
        vars.push_back(tape.leaf("in" + std::to_string(i), t));
    }
    s4m::Var y = build(tape, vars);
    s4m::Var loss = s4m::ops::sum(s4m::ops::mul(y, tape.constant(s4m::Tensor(y.shape(), projection))));
    const auto grads = tape.backward(loss);

    std::vector<double> errors;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& analytic = grads.at("in" + std::to_string(i));
        double max_diff = 0.0;
        double max_ref = 0.0;
        auto values = inputs;
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double x0 = values[i][j];
            values[i][j] = x0 + h;
            const double fp = evaluate(values);
            values[i][j] = x0 - h;
            const double fm = evaluate(values);
            values[i][j] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            max_diff = std::max(max_diff, std::abs(numeric - analytic[j]));
            max_ref = std::max(max_ref, std::abs(numeric));
        }
        errors.push_back(max_diff / std::max(max_ref, 1e-12));
    }
    return errors;
}

// Sampled-coordinate check for a scalar loss over a named parameter store.
// Each sampled coordinate contributes |a - n| / max(|a|, |n|); coordinates
// whose gradients are both below `floor` are skipped as uninformative.
struct SampledCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

using LossBuilder = std::function<s4m::Var(s4m::Tape&, const std::map<std::string, s4m::Var>&)>;

inline SampledCheck sampled_param_check(const std::map<std::string, s4m::Tensor>& params, const LossBuilder& loss_fn,
                                        std::size_t samples, std::uint64_t seed, double h = 1e-6,
                                        double floor = 1e-5)
{
    auto bind_all = [](s4m::Tape& tape, const std::map<std::string, s4m::Tensor>& values) {
        std::map<std::string, s4m::Var> vars;
        for (const auto& [name, t] : values) {
            vars.emplace(name, tape.leaf(name, t));
        }
        return vars;
    };
    auto evaluate = [&](const std::map<std::string, s4m::Tensor>& values) {
        s4m::Tape tape(false);
        return loss_fn(tape, bind_all(tape, values)).value()[0];
    };
    s4m::Tape tape;
    auto vars = bind_all(tape, params);
    const auto grads = tape.backward(loss_fn(tape, vars));

    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, t] : params) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            coords.emplace_back(name, i);
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    SampledCheck out;
    auto values = params;
    for (const auto& [name, i] : coords) {
        if (out.checked == samples) {
            break;
        }
        const double analytic = grads.at(name)[i];
        const double x0 = values.at(name)[i];
        values.at(name)[i] = x0 + h;
        const double fp = evaluate(values);
        values.at(name)[i] = x0 - h;
        const double fm = evaluate(values);
        values.at(name)[i] = x0;
        const double numeric = (fp - fm) / (2.0 * h);
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        if (scale < floor) {
            continue;
        }
        out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / scale);
        ++out.checked;
    }
    return out;
}

} // namespace s4m::gradcheck

#endif
