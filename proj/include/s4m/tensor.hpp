#ifndef S4M_TENSOR_HPP
#define S4M_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "s4m/error.hpp"

namespace s4m {

using shape_t = std::vector<std::size_t>;

inline std::size_t numel(const shape_t& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const shape_t& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles. The shape is fixed at construction.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(shape_t shape, double fill = 0.0, bool requires_grad = false)
        : shape_(std::move(shape)), values_(numel(shape_), fill), requires_grad_(requires_grad)
    {
    }

    Tensor(shape_t shape, std::vector<double> values, bool requires_grad = false)
        : shape_(std::move(shape)), values_(std::move(values)), requires_grad_(requires_grad)
    {
        if (values_.size() != numel(shape_)) {
            std::ostringstream msg;
            msg << "Tensor: shape " << shape_str(shape_) << " needs " << numel(shape_) << " values, got "
                << values_.size();
            throw invalid_argument(msg.str());
        }
    }

    const shape_t& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return values_.size(); }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    const double* data() const { return values_.data(); }
    double* data() { return values_.data(); }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    shape_t shape_;
    std::vector<double> values_;
    bool requires_grad_ = false;
};

using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const shape_t& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    std::size_t id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Gradient storage handed to backward rules. Buffers are allocated lazily;
/// rules must check wants() before accumulating into an input.
class GradBuffer {
public:
    GradBuffer(const Tape& tape, std::vector<std::vector<double>>& grads) : tape_(tape), grads_(grads) {}

    bool wants(const Var& v) const;
    std::span<double> at(const Var& v);

private:
    const Tape& tape_;
    std::vector<std::vector<double>>& grads_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, GradBuffer& grads)>;

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every input precedes its consumers and a single
/// reverse sweep visits each node once.
class Tape {
public:
    explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(std::string name, Tensor value)
    {
        const bool grad = record_ && value.requires_grad();
        nodes_.push_back(Node{std::move(value), {}, grad, std::move(name)});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value)
    {
        value.set_requires_grad(false);
        nodes_.push_back(Node{std::move(value), {}, false, {}});
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn)
    {
        return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
    }

    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn)
    {
        bool grad = false;
        for (const auto& in : inputs) {
            if (in.tape_ != this) {
                throw invalid_argument("Tape::record: input belongs to a different tape");
            }
            grad = grad || nodes_[in.id_].needs_grad;
        }
        value.set_requires_grad(false);
        Node node{std::move(value), {}, grad, {}};
        if (grad) {
            node.backward = std::move(fn);
        }
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool needs_grad(const Var& v) const { return nodes_.at(v.id_).needs_grad; }
    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Every named leaf that requires a
    /// gradient appears in the result; unreached leaves get zeros.
    Gradients backward(const Var& loss) const
    {
        if (loss.tape_ != this) {
            throw invalid_argument("backward: loss is not on this tape");
        }
        if (value(loss.id_).size() != 1) {
            throw invalid_argument("backward: loss must be a scalar, got shape " +
                                   shape_str(value(loss.id_).shape()));
        }
        std::vector<std::vector<double>> grads(nodes_.size());
        GradBuffer buffer(*this, grads);
        if (nodes_[loss.id_].needs_grad) {
            grads[loss.id_].assign(1, 1.0);
        }
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (!node.backward || grads[i].empty()) {
                continue;
            }
            node.backward(grads[i], buffer);
        }
        Gradients out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& node = nodes_[i];
            if (node.name.empty() || !node.needs_grad) {
                continue;
            }
            Tensor g(node.value.shape(), 0.0);
            if (!grads[i].empty()) {
                std::copy(grads[i].begin(), grads[i].end(), g.data());
            }
            auto [it, inserted] = out.emplace(node.name, g);
            if (!inserted) {
                for (std::size_t k = 0; k < g.size(); ++k) {
                    it->second[k] += g[k];
                }
            }
        }
        return out;
    }

private:
    friend class Var;
    friend class GradBuffer;

    struct Node {
        Tensor value;
        BackwardFn backward;
        bool needs_grad = false;
        std::string name;
    };

    std::vector<Node> nodes_;
    bool record_;
};

inline const Tensor& Var::value() const
{
    return tape_->value(id_);
}

inline bool GradBuffer::wants(const Var& v) const
{
    return tape_.needs_grad(v);
}

inline std::span<double> GradBuffer::at(const Var& v)
{
    auto& g = grads_[v.id()];
    if (g.empty()) {
        g.assign(tape_.value(v.id()).size(), 0.0);
    }
    return g;
}

inline double global_norm_of(const Gradients& grads)
{
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.values()) {
            sq += v * v;
        }
    }
    return std::sqrt(sq);
}

/// Rescales all gradients by max_norm / g when their joint L2 norm g exceeds
/// max_norm. Returns g.
inline double clip_grad_norm(Gradients& grads, double max_norm)
{
    if (!(max_norm > 0.0)) {
        throw invalid_argument("clip_grad_norm: max_norm must be positive");
    }
    const double norm = global_norm_of(grads);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (double& v : g.values()) {
                v *= scale;
            }
        }
    }
    return norm;
}

} // namespace s4m

#endif
