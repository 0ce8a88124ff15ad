#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "scseg/autodiff.hpp"

namespace scseg {

/// Probabilities below this are clamped before the log.
inline constexpr double kProbabilityClamp = 1e-12;

/// Flat voxel indices into a patch batch (n * XYZ + v), ascending and unique.
struct VoxelSelection {
    std::vector<std::size_t> indices;
    std::map<int, std::size_t> per_class_counts;
};

/// For every class present, exactly N_min = min_c N_c voxels drawn uniformly
/// without replacement. Deterministic given `seed`.
VoxelSelection balanced_select(std::span<const std::uint8_t> labels, std::uint64_t seed);

/// Every voxel, uniform weight (the unbalanced control).
VoxelSelection select_all(std::span<const std::uint8_t> labels);

/// Mean over the selection of -log(max(p[label], clamp)). Below the clamp the
/// gradient is zero.
///
/// probs: [N, C, X, Y, Z]; labels: N * XYZ class indices. Throws std::invalid_argument
/// on an empty selection.
template <typename T>
Var<T> cross_entropy(Var<T> probs, std::span<const std::uint8_t> labels, const VoxelSelection& selection);

/// ce + lambda * ctr. With lambda == 0 the result is `ce` itself, so the
/// contrastive term contributes no gradient at all.
template <typename T>
Var<T> total_loss(Var<T> ce, Var<T> ctr, T lambda_ctr);

inline double total_loss(double ce, double ctr, double lambda_ctr) { return ce + lambda_ctr * ctr; }

}  // namespace scseg
