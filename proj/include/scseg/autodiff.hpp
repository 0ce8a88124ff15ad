#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "scseg/tensor.hpp"

namespace scseg {

template <typename T>
class Graph;

/// Activation patterns of piecewise-linear ops, recorded on one evaluation and
/// replayed on later ones. Replaying pins finite-difference probes to the
/// smooth piece containing the recorded point.
struct BranchTape {
    std::vector<std::vector<std::uint8_t>> patterns;  // one per op, in recording order
    bool replay = false;
    std::size_t cursor = 0;
};

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph<T>& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Tensor<T>& value() const { return graph_->value(id_); }
    const Shape& shape() const { return value().shape; }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Tape of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so the tape is its own topological
/// order: every node's inputs have smaller ids. backward() replays the tape in
/// reverse, calling each node's gradient rule exactly once. Gradients of
/// parameter leaves are accumulated into the bound Parameter::grad.
///
/// A graph is single-threaded; separate graphs may be used concurrently as long
/// as they do not share Parameter objects during backward().
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Input that never receives a gradient.
    Var<T> constant(Tensor<T> value);
    /// Leaf whose gradient is readable via grad() after backward().
    Var<T> variable(Tensor<T> value);
    /// Leaf bound to a persistent parameter; backward() adds into p.grad.
    Var<T> parameter(Parameter<T>& p);

    /// Append an operation node. `fn` may be empty for non-differentiable results.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

    /// Reverse-mode sweep from a scalar loss. Throws ShapeError if `loss` is not scalar.
    void backward(Var<T> loss);

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id)->value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id)->requires_grad; }

    /// Gradient of the loss w.r.t. node `v`; all zeros if `v` is not on a path to the loss.
    Tensor<T> grad(Var<T> v) const;

    /// Mutable gradient storage of node `id`, allocated (zeroed) on first access.
    /// Used by gradient rules to accumulate into their inputs.
    std::span<T> grad_buffer(std::size_t id);
    /// Incoming gradient of node `id` during backward (empty if none arrived).
    std::span<const T> upstream(std::size_t id) const;

    /// Optional record/replay of piecewise-op branches; not owned.
    void set_branch_tape(BranchTape* tape) { tape_ = tape; }
    BranchTape* branch_tape() const { return tape_; }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id)->inputs; }

private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter<T>* bound = nullptr;
        bool requires_grad = false;
    };

    std::vector<std::unique_ptr<Node>> nodes_;
    bool swept_ = false;
    BranchTape* tape_ = nullptr;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace scseg
