#pragma once

// Dense 64-bit arrays and the reverse-mode tape that records operations on
// them. Operators live in ops.hpp; the optimizer in adam.hpp.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "qdown/error.hpp"

namespace qdown {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill)
    {
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        require(data_.size() == shape_size(shape_), ErrorKind::shape,
                "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // NCHW accessor for rank-4 tensors.
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    double item() const
    {
        require(data_.size() == 1, ErrorKind::shape, "item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    // Gradient accumulator. Allocated on first use, always congruent with data.
    std::vector<double>& grad()
    {
        if (grad_.size() != data_.size())
            grad_.assign(data_.size(), 0.0);
        return grad_;
    }
    const std::vector<double>& grad() const { return grad_; }
    void zero_grad() { grad().assign(data_.size(), 0.0); }

    Tensor reshaped(Shape s) const
    {
        require(shape_size(s) == data_.size(), ErrorKind::shape,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Record of one forward evaluation. Nodes are appended in evaluation order, so
/// record order is a topological order and backward walks it in reverse.
class Graph {
public:
    using Backprop = std::function<void(Graph&, std::size_t)>;

    explicit Graph(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool training() const noexcept { return training_; }
    std::mt19937_64& rng() noexcept { return rng_; }

    Var constant(Tensor t) { return push(std::move(t), false, nullptr, {}); }

    /// Differentiable leaf that is not a model parameter (used for raw head
    /// outputs in routing diagnostics and for finite-difference checks).
    Var input(Tensor t) { return push(std::move(t), true, nullptr, {}); }

    /// Leaf bound to a model parameter; backward() writes d(loss)/d(param) into p.grad().
    Var parameter(Tensor& p)
    {
        p.grad();
        return push(Tensor(p.shape(), p.storage()), true, &p, {});
    }

    Var record(Tensor value, std::initializer_list<Var> parents, Backprop fn)
    {
        bool rg = false;
        for (const Var& v : parents)
            rg = rg || nodes_[v.id].requires_grad;
        return push(std::move(value), rg, nullptr, rg ? std::move(fn) : Backprop{});
    }

    Var record(Tensor value, const std::vector<Var>& parents, Backprop fn)
    {
        bool rg = false;
        for (const Var& v : parents)
            rg = rg || nodes_[v.id].requires_grad;
        return push(std::move(value), rg, nullptr, rg ? std::move(fn) : Backprop{});
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Node gradient after the most recent backward(); empty for constants.
    const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }
    std::vector<double>& grad_of(std::size_t id) { return nodes_[id].grad; }

    void backward(Var loss)
    {
        require(loss.graph == this, ErrorKind::shape, "backward: loss belongs to a different graph");
        require(nodes_[loss.id].value.size() == 1, ErrorKind::shape,
                "backward: loss must be scalar, got " + shape_str(nodes_[loss.id].value.shape()));
        for (Node& n : nodes_) {
            if (n.requires_grad)
                n.grad.assign(n.value.size(), 0.0);
            else
                n.grad.clear();
        }
        for (Node& n : nodes_)
            if (n.param)
                n.param->zero_grad();
        if (!nodes_[loss.id].requires_grad)
            return;
        nodes_[loss.id].grad[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backprop)
                n.backprop(*this, i);
        }
        for (Node& n : nodes_) {
            if (!n.param)
                continue;
            auto& g = n.param->grad();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += n.grad[k];
        }
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        Backprop backprop;
        Tensor* param = nullptr;
        bool requires_grad = false;
    };

    Var push(Tensor value, bool requires_grad, Tensor* param, Backprop fn)
    {
        nodes_.push_back(Node{std::move(value), {}, std::move(fn), param, requires_grad});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool training_;
    std::mt19937_64 rng_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

} // namespace qdown
