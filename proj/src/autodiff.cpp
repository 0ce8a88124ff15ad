#include "scseg/autodiff.hpp"

#include <cmath>
#include <sstream>

namespace scseg {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
bool all_finite(const std::vector<T>& values) {
    for (T v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template bool all_finite(const std::vector<float>&);
template bool all_finite(const std::vector<double>&);

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    auto node = std::make_unique<Node>();
    value.requires_grad = false;
    node->value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
    auto node = std::make_unique<Node>();
    value.requires_grad = true;
    node->value = std::move(value);
    node->requires_grad = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
    auto v = variable(p.value);
    nodes_.back()->bound = &p;
    return v;
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    auto node = std::make_unique<Node>();
    node->value = std::move(value);
    for (const auto& in : inputs) {
        if (&in.graph() != this) throw std::logic_error("operand recorded on a different graph");
        node->inputs.push_back(in.id());
        node->requires_grad = node->requires_grad || nodes_[in.id()]->requires_grad;
    }
    if (node->requires_grad) node->backward = std::move(fn);
    node->value.requires_grad = node->requires_grad;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::span<T> Graph<T>::grad_buffer(std::size_t id) {
    Node& n = *nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
}

template <typename T>
std::span<const T> Graph<T>::upstream(std::size_t id) const {
    return nodes_.at(id)->grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (&loss.graph() != this) throw std::logic_error("loss recorded on a different graph");
    if (loss.value().size() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (swept_) throw std::logic_error("backward already ran on this graph");
    swept_ = true;

    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = *nodes_[i];
        if (n.grad.empty() || !n.requires_grad) continue;
        if (n.backward) n.backward(*this, i);
        if (n.bound != nullptr) {
            auto& dst = n.bound->grad.data;
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
        }
    }
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> v) const {
    const Node& n = *nodes_.at(v.id());
    if (n.grad.empty()) return Tensor<T>(n.value.shape);
    return Tensor<T>(n.value.shape, n.grad);
}

template class Graph<float>;
template class Graph<double>;

}  // namespace scseg
