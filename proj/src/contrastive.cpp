#include "scseg/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace scseg {

std::string to_string(ContrastiveVariant v) { return v == ContrastiveVariant::Exp ? "exp" : "literal"; }

ContrastiveVariant contrastive_variant_from_string(const std::string& s) {
    if (s == "exp") return ContrastiveVariant::Exp;
    if (s == "literal") return ContrastiveVariant::Literal;
    throw std::invalid_argument("unknown contrastive variant '" + s + "' (expected exp|literal)");
}

template <typename T>
MemoryBank<T> init_memory_bank(std::size_t classes, std::size_t per_class, std::size_t dim, std::uint64_t seed) {
    if (classes == 0 || per_class == 0 || dim == 0) throw std::invalid_argument("memory bank extents must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<T> values(classes * per_class * dim);
    std::vector<double> row(dim);
    for (std::size_t r = 0; r < classes * per_class; ++r) {
        double norm = 0.0;
        // Redraw the (astronomically unlikely) all-zero row so every proxy has unit norm.
        do {
            norm = 0.0;
            for (auto& v : row) {
                v = normal(rng);
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (std::size_t d = 0; d < dim; ++d) values[r * dim + d] = static_cast<T>(row[d] / norm);
    }
    MemoryBank<T> bank;
    bank.classes = classes;
    bank.per_class = per_class;
    bank.dim = dim;
    bank.proxies = Parameter<T>("memory_bank", Tensor<T>(Shape{classes, per_class, dim}, std::move(values)));
    return bank;
}

ProxySelection select_proxies(std::size_t classes, std::size_t per_class, std::size_t label) {
    if (label >= classes) {
        throw std::out_of_range("select_proxies: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(classes) + ")");
    }
    ProxySelection sel;
    sel.positives.reserve(per_class);
    sel.negatives.reserve(per_class * (classes - 1));
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t m = 0; m < per_class; ++m) (c == label ? sel.positives : sel.negatives).push_back(c * per_class + m);
    return sel;
}

namespace {

/// Rows of `x` ([rows, D]) scaled to unit norm; norms clamped below at kNormClamp.
template <typename T>
void normalise_rows(const std::vector<T>& x, std::size_t rows, std::size_t D, std::vector<T>& unit, std::vector<T>& norm) {
    unit.resize(rows * D);
    norm.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(x[r * D + d]) * x[r * D + d];
        const T n = static_cast<T>(std::max(std::sqrt(s), kNormClamp));
        norm[r] = n;
        for (std::size_t d = 0; d < D; ++d) unit[r * D + d] = x[r * D + d] / n;
    }
}

/// dL/dx for x -> x / max(|x|, clamp), given dL/dunit.
template <typename T>
void unnormalise_grad(const T* unit, T norm, const T* dunit, std::size_t D, T* dx) {
    if (static_cast<double>(norm) <= kNormClamp) {
        for (std::size_t d = 0; d < D; ++d) dx[d] += dunit[d] / norm;
        return;
    }
    T dot = T(0);
    for (std::size_t d = 0; d < D; ++d) dot += dunit[d] * unit[d];
    for (std::size_t d = 0; d < D; ++d) dx[d] += (dunit[d] - dot * unit[d]) / norm;
}

}  // namespace

template <typename T>
Var<T> contrastive_loss(Var<T> queries, std::span<const std::uint8_t> labels, Var<T> bank, T tau,
                        ContrastiveVariant variant) {
    const Shape& qs = queries.shape();
    const Shape& bs = bank.shape();
    if (qs.size() != 2) throw ShapeError("contrastive_loss: queries must be [Q, D], got " + to_string(qs));
    if (bs.size() != 3) throw ShapeError("contrastive_loss: bank must be [C, M, D], got " + to_string(bs));
    const std::size_t Q = qs[0], D = qs[1], C = bs[0], M = bs[1];
    if (bs[2] != D) throw ShapeError("contrastive_loss: query dim " + std::to_string(D) + " != bank dim " + std::to_string(bs[2]));
    if (Q == 0) throw ShapeError("contrastive_loss: empty query set");
    if (labels.size() != Q) throw ShapeError("contrastive_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(Q) + " queries");
    if (C < 2) throw ShapeError("contrastive_loss: bank needs at least two classes");
    if (!(tau > T(0))) throw std::invalid_argument("contrastive_loss: tau must be > 0");
    for (std::size_t i = 0; i < Q; ++i) {
        if (labels[i] >= C) throw std::out_of_range("contrastive_loss: query " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " >= C");
    }

    const std::size_t R = C * M;
    std::vector<T> qn, qnorm, kn, knorm;
    normalise_rows(queries.value().data, Q, D, qn, qnorm);
    normalise_rows(bank.value().data, R, D, kn, knorm);

    // coef[i * R + r] = dLoss / d sim(q_i, k_r)
    std::vector<T> coef(Q * R, T(0));
    std::vector<double> z(R);
    double total = 0.0;
    const double inv_tau = 1.0 / static_cast<double>(tau);
    const double w = 1.0 / (static_cast<double>(M) * static_cast<double>(Q));
    for (std::size_t i = 0; i < Q; ++i) {
        const T* q = qn.data() + i * D;
        for (std::size_t r = 0; r < R; ++r) {
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(q[d]) * kn[r * D + d];
            z[r] = s * inv_tau;
        }
        const std::size_t pos0 = labels[i] * M;
        T* ci = coef.data() + i * R;
        if (variant == ContrastiveVariant::Exp) {
            const double zmax = *std::max_element(z.begin(), z.end());
            double neg = 0.0;
            for (std::size_t r = 0; r < R; ++r)
                if (r < pos0 || r >= pos0 + M) neg += std::exp(z[r] - zmax);
            double neg_weight = 0.0;  // sum_j 1 / (e^{z_j} + S_neg), shifted
            for (std::size_t j = pos0; j < pos0 + M; ++j) {
                const double ej = std::exp(z[j] - zmax);
                const double denom = ej + neg;
                total += std::log(denom) - (z[j] - zmax);
                ci[j] = static_cast<T>((ej / denom - 1.0) * w * inv_tau);
                neg_weight += 1.0 / denom;
            }
            for (std::size_t r = 0; r < R; ++r)
                if (r < pos0 || r >= pos0 + M) ci[r] = static_cast<T>(std::exp(z[r] - zmax) * neg_weight * w * inv_tau);
        } else {
            double neg = 0.0;
            for (std::size_t r = 0; r < R; ++r)
                if (r < pos0 || r >= pos0 + M) neg += z[r];
            double neg_weight = 0.0;
            for (std::size_t j = pos0; j < pos0 + M; ++j) {
                const double a = z[j], denom = a + neg;
                const double arg = denom != 0.0 ? a / denom : 0.0;
                if (!(arg > 0.0) || !std::isfinite(arg)) {
                    throw DomainError("contrastive_loss (literal): non-positive log argument for query " +
                                      std::to_string(i) + " and positive proxy " + std::to_string(j - pos0));
                }
                total -= std::log(arg);
                ci[j] = static_cast<T>((-1.0 / a + 1.0 / denom) * w * inv_tau);
                neg_weight += 1.0 / denom;
            }
            for (std::size_t r = 0; r < R; ++r)
                if (r < pos0 || r >= pos0 + M) ci[r] = static_cast<T>(neg_weight * w * inv_tau);
        }
    }
    const T loss = static_cast<T>(total / (static_cast<double>(M) * static_cast<double>(Q)));

    const std::size_t iq = queries.id(), ib = bank.id();
    return queries.graph().record(
        Tensor<T>::scalar(loss), {queries, bank},
        [=, qn = std::move(qn), qnorm = std::move(qnorm), kn = std::move(kn), knorm = std::move(knorm),
         coef = std::move(coef)](Graph<T>& gr, std::size_t self) {
            const T up = gr.upstream(self)[0];
            std::vector<T> du(D);
            if (gr.requires_grad(iq)) {
                auto dq = gr.grad_buffer(iq);
                for (std::size_t i = 0; i < Q; ++i) {
                    std::fill(du.begin(), du.end(), T(0));
                    for (std::size_t r = 0; r < R; ++r) {
                        const T c = up * coef[i * R + r];
                        for (std::size_t d = 0; d < D; ++d) du[d] += c * kn[r * D + d];
                    }
                    unnormalise_grad(qn.data() + i * D, qnorm[i], du.data(), D, dq.data() + i * D);
                }
            }
            if (gr.requires_grad(ib)) {
                auto dk = gr.grad_buffer(ib);
                for (std::size_t r = 0; r < R; ++r) {
                    std::fill(du.begin(), du.end(), T(0));
                    for (std::size_t i = 0; i < Q; ++i) {
                        const T c = up * coef[i * R + r];
                        for (std::size_t d = 0; d < D; ++d) du[d] += c * qn[i * D + d];
                    }
                    unnormalise_grad(kn.data() + r * D, knorm[r], du.data(), D, dk.data() + r * D);
                }
            }
        });
}

template struct MemoryBank<float>;
template struct MemoryBank<double>;
template MemoryBank<float> init_memory_bank(std::size_t, std::size_t, std::size_t, std::uint64_t);
template MemoryBank<double> init_memory_bank(std::size_t, std::size_t, std::size_t, std::uint64_t);
template Var<float> contrastive_loss(Var<float>, std::span<const std::uint8_t>, Var<float>, float, ContrastiveVariant);
template Var<double> contrastive_loss(Var<double>, std::span<const std::uint8_t>, Var<double>, double,
                                      ContrastiveVariant);

}  // namespace scseg
