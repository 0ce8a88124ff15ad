#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scseg/autodiff.hpp"
#include "scseg/data.hpp"
#include "scseg/metrics.hpp"

// Finite-difference checks and brute-force reference implementations. The
// oracles share no code with the library paths they are compared against.
namespace scseg::verify {

inline constexpr double kGradStep = 1e-4;
inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kRelFloor = 1e-8;

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// Scalar function of one tensor argument, recorded on a fresh graph.
using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

/// Max elementwise relative error between the reverse-mode gradient of f at
/// `point` and central differences with the given step. ReLU patterns of the
/// centre evaluation are replayed on every probe, so the differences measure
/// the smooth piece on which the reverse-mode gradient is defined.
double grad_check(const ScalarFn& f, const Tensor<double>& point, double step = kGradStep);

/// Same for persistent parameters: f builds the loss from the parameters it binds.
double grad_check_parameters(const std::function<Var<double>(Graph<double>&)>& f,
                             const std::vector<Parameter<double>*>& params, double step = kGradStep);

struct CheckResult {
    std::string name;
    double error = 0.0;      // observed worst case
    double tolerance = 0.0;
    bool passed = false;
};

/// Every differentiable operation, the composite conv/norm/relu chain, the
/// network and the full joint loss through network and bank (8^3 patches).
std::vector<CheckResult> gradient_suite(std::uint64_t seed = 0, std::size_t repeats = 20);

/// Brute-force oracles: contrastive loss, cross-entropy, Dice, ASD, conv3d,
/// instance norm, distance transform.
std::vector<CheckResult> oracle_suite(std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Reference implementations

/// Direct loops over [N,Cin,X,Y,Z] input and [Cout,Cin,k,k,k] kernel.
std::vector<double> conv3d_reference(const std::vector<double>& input, const std::vector<std::size_t>& ishape,
                                     const std::vector<double>& kernel, std::size_t cout, std::size_t k,
                                     const std::vector<double>& bias, int stride, int padding,
                                     std::vector<std::size_t>& oshape);

std::vector<double> instance_norm_reference(const std::vector<double>& input, const std::vector<std::size_t>& shape,
                                            const std::vector<double>& gamma, const std::vector<double>& beta, double eps);

/// Exp-variant loss by enumerating every proxy for every query, no shared helpers.
double contrastive_reference(const std::vector<std::vector<double>>& queries, const std::vector<int>& labels,
                             const std::vector<std::vector<std::vector<double>>>& bank, double tau);

double cross_entropy_reference(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels);

double dice_reference(const BinaryMask& a, const BinaryMask& b);

/// O(n^2) pairwise minimum over 6-connectivity boundary voxels.
double asd_reference(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing_mm);

}  // namespace scseg::verify
