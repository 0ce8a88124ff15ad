#pragma once

#include <cstddef>
#include <span>

#include "scseg/autodiff.hpp"

// Differentiable operations recorded on a Graph. Volumetric tensors use the
// [N, C, X, Y, Z] layout with Z contiguous.
namespace scseg::ops {

inline constexpr double kInstanceNormEps = 1e-5;

/// 3-D cross-correlation. Kernel [Cout, Cin, k, k, k] with k in {1, 3},
/// stride in {1, 2}, padding < k. Pass an invalid Var for no bias.
/// Output extent per axis: floor((X + 2 * padding - k) / stride) + 1.
template <typename T>
Var<T> conv3d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding);

/// Per-(sample, channel) normalisation with population variance, then affine gamma/beta.
template <typename T>
Var<T> instance_norm(Var<T> input, Var<T> gamma, Var<T> beta, double eps = kInstanceNormEps);

template <typename T>
Var<T> relu(Var<T> input);

/// Softmax along `axis`, computed with max subtraction.
template <typename T>
Var<T> softmax(Var<T> input, std::size_t axis);

/// Natural log; throws DomainError on any non-positive element.
template <typename T>
Var<T> log(Var<T> input);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> sum(Var<T> input);
template <typename T>
Var<T> mean(Var<T> input);

/// Nearest-neighbour upsampling by 2 along each spatial axis.
template <typename T>
Var<T> upsample_nearest2(Var<T> input);

/// Concatenation along the channel axis (axis 1).
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);

/// Rows of a [N, C, X, Y, Z] field at flat voxel indices n * XYZ + v, as a [Q, C] matrix.
template <typename T>
Var<T> gather_voxels(Var<T> field, std::span<const std::size_t> indices);

/// u.v / (|u| |v|) for two vectors of equal length. Throws DomainError on a zero-norm operand.
template <typename T>
Var<T> cosine_similarity(Var<T> u, Var<T> v);

}  // namespace scseg::ops
