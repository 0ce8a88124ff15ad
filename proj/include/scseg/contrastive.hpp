#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scseg/autodiff.hpp"

namespace scseg {

/// Which reading of the proxy loss to evaluate.
///   Exp:     -log( e^{s+/t} / (e^{s+/t} + sum_neg e^{s-/t}) )
///   Literal: -log( (s+/t) / (s+/t + sum_neg s-/t) ), undefined for non-positive arguments
enum class ContrastiveVariant { Exp, Literal };

std::string to_string(ContrastiveVariant v);
ContrastiveVariant contrastive_variant_from_string(const std::string& s);

/// Norms below this are clamped before normalisation.
inline constexpr double kNormClamp = 1e-12;

/// C x M x D trainable proxies; row-group c holds the M proxies of class c.
template <typename T>
struct MemoryBank {
    std::size_t classes = 0, per_class = 0, dim = 0;
    Parameter<T> proxies;  // shape {C, M, D}

    std::size_t rows() const { return classes * per_class; }
    const T* row(std::size_t c, std::size_t m) const { return proxies.value.data.data() + (c * per_class + m) * dim; }
};

/// Standard-normal entries, then every proxy scaled to unit L2 norm.
template <typename T>
MemoryBank<T> init_memory_bank(std::size_t classes, std::size_t per_class, std::size_t dim, std::uint64_t seed);

/// Flat proxy row indices (c * M + m) split by class agreement with `label`.
struct ProxySelection {
    std::vector<std::size_t> positives;  // M entries
    std::vector<std::size_t> negatives;  // M * (C - 1) entries, ascending
};

/// Throws std::out_of_range when label >= classes.
ProxySelection select_proxies(std::size_t classes, std::size_t per_class, std::size_t label);

template <typename T>
ProxySelection select_proxies(const MemoryBank<T>& bank, std::size_t label) {
    return select_proxies(bank.classes, bank.per_class, label);
}

/// Mean over queries of the per-query proxy loss, each averaged over its M positives.
/// The denominator for positive j holds k+_j and every negative, never the other positives.
///
/// queries: [Q, D]; labels: Q class indices; bank: [C, M, D]. Differentiable in
/// both queries and bank. Literal variant throws DomainError naming the query
/// whose log argument is non-positive.
template <typename T>
Var<T> contrastive_loss(Var<T> queries, std::span<const std::uint8_t> labels, Var<T> bank, T tau,
                        ContrastiveVariant variant);

extern template struct MemoryBank<float>;
extern template struct MemoryBank<double>;

}  // namespace scseg
