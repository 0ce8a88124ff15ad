#include "scseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "scseg/ops.hpp"

namespace scseg {

VoxelSelection balanced_select(std::span<const std::uint8_t> labels, std::uint64_t seed) {
    if (labels.empty()) throw std::invalid_argument("balanced_select: empty batch");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    std::size_t n_min = labels.size();
    for (const auto& [c, idx] : members) n_min = std::min(n_min, idx.size());

    std::mt19937_64 rng(seed);
    VoxelSelection sel;
    sel.indices.reserve(n_min * members.size());
    for (auto& [c, idx] : members) {
        // partial Fisher-Yates: the first n_min slots become a uniform sample
        for (std::size_t k = 0; k < n_min; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
            std::swap(idx[k], idx[pick(rng)]);
        }
        sel.indices.insert(sel.indices.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_min));
        sel.per_class_counts[c] = n_min;
    }
    std::sort(sel.indices.begin(), sel.indices.end());
    return sel;
}

VoxelSelection select_all(std::span<const std::uint8_t> labels) {
    VoxelSelection sel;
    sel.indices.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        sel.indices[i] = i;
        ++sel.per_class_counts[labels[i]];
    }
    return sel;
}

template <typename T>
Var<T> cross_entropy(Var<T> probs, std::span<const std::uint8_t> labels, const VoxelSelection& selection) {
    const Shape& s = probs.shape();
    if (s.size() != 5) throw ShapeError("cross_entropy: probabilities must be [N,C,X,Y,Z], got " + to_string(s));
    const std::size_t N = s[0], C = s[1], V = s[2] * s[3] * s[4];
    if (labels.size() != N * V) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N * V) +
                         " voxels");
    }
    if (selection.indices.empty()) throw std::invalid_argument("cross_entropy: empty selection");
    const auto& p = probs.value().data;
    std::vector<std::size_t> at(selection.indices.size());  // offset of p[label] per selected voxel
    double total = 0.0;
    for (std::size_t k = 0; k < at.size(); ++k) {
        const std::size_t i = selection.indices[k];
        if (i >= N * V) throw std::out_of_range("cross_entropy: selected voxel " + std::to_string(i) + " out of range");
        if (labels[i] >= C) throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " >= C");
        at[k] = ((i / V) * C + labels[i]) * V + i % V;
        total -= std::log(std::max(static_cast<double>(p[at[k]]), kProbabilityClamp));
    }
    const double inv = 1.0 / static_cast<double>(at.size());
    const std::size_t ip = probs.id();
    return probs.graph().record(Tensor<T>::scalar(static_cast<T>(total * inv)), {probs},
                                [=, at = std::move(at)](Graph<T>& gr, std::size_t self) {
                                    const double up = gr.upstream(self)[0];
                                    const auto& pv = gr.value(ip).data;
                                    auto dp = gr.grad_buffer(ip);
                                    for (std::size_t o : at) {
                                        const double v = pv[o];
                                        if (v >= kProbabilityClamp) dp[o] += static_cast<T>(-up * inv / v);
                                    }
                                });
}

template <typename T>
Var<T> total_loss(Var<T> ce, Var<T> ctr, T lambda_ctr) {
    if (!(lambda_ctr >= T(0))) throw std::invalid_argument("total_loss: lambda_ctr must be >= 0");
    if (lambda_ctr == T(0)) return ce;
    return ops::add(ce, ops::scale(ctr, lambda_ctr));
}

template Var<float> cross_entropy(Var<float>, std::span<const std::uint8_t>, const VoxelSelection&);
template Var<double> cross_entropy(Var<double>, std::span<const std::uint8_t>, const VoxelSelection&);
template Var<float> total_loss(Var<float>, Var<float>, float);
template Var<double> total_loss(Var<double>, Var<double>, double);

}  // namespace scseg
