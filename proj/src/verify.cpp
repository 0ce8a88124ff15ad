#include "scseg/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "scseg/contrastive.hpp"
#include "scseg/losses.hpp"
#include "scseg/network.hpp"
#include "scseg/ops.hpp"
#include "scseg/random.hpp"

namespace scseg::verify {

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kRelFloor});
}

double grad_check(const ScalarFn& f, const Tensor<double>& point, double step) {
    BranchTape tape;
    std::vector<double> analytic;
    {
        Graph<double> g;
        g.set_branch_tape(&tape);
        Var<double> x = g.variable(point);
        g.backward(f(g, x));
        analytic = g.grad(x).data;
    }
    tape.replay = true;
    auto eval = [&](const Tensor<double>& at) {
        tape.cursor = 0;
        Graph<double> g;
        g.set_branch_tape(&tape);
        return f(g, g.variable(at)).value()[0];
    };
    double worst = 0.0;
    Tensor<double> probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double x0 = probe.data[i];
        probe.data[i] = x0 + step;
        const double fp = eval(probe);
        probe.data[i] = x0 - step;
        const double fm = eval(probe);
        probe.data[i] = x0;
        worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * step)));
    }
    return worst;
}

double grad_check_parameters(const std::function<Var<double>(Graph<double>&)>& f,
                             const std::vector<Parameter<double>*>& params, double step) {
    BranchTape tape;
    for (auto* p : params) p->zero_grad();
    {
        Graph<double> g;
        g.set_branch_tape(&tape);
        g.backward(f(g));
    }
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad.data);
    tape.replay = true;
    auto eval = [&] {
        tape.cursor = 0;
        Graph<double> g;
        g.set_branch_tape(&tape);
        return f(g).value()[0];
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& v = params[k]->value.data;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double x0 = v[i];
            v[i] = x0 + step;
            const double fp = eval();
            v[i] = x0 - step;
            const double fm = eval();
            v[i] = x0;
            worst = std::max(worst, relative_error(analytic[k][i], (fp - fm) / (2.0 * step)));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Reference implementations

std::vector<double> conv3d_reference(const std::vector<double>& input, const std::vector<std::size_t>& is,
                                     const std::vector<double>& kernel, std::size_t cout, std::size_t k,
                                     const std::vector<double>& bias, int stride, int padding,
                                     std::vector<std::size_t>& os) {
    const long N = static_cast<long>(is[0]), Ci = static_cast<long>(is[1]);
    const long X = static_cast<long>(is[2]), Y = static_cast<long>(is[3]), Z = static_cast<long>(is[4]);
    const long K = static_cast<long>(k), S = stride, Pd = padding, Co = static_cast<long>(cout);
    const long OX = (X + 2 * Pd - K) / S + 1, OY = (Y + 2 * Pd - K) / S + 1, OZ = (Z + 2 * Pd - K) / S + 1;
    os = {is[0], cout, static_cast<std::size_t>(OX), static_cast<std::size_t>(OY), static_cast<std::size_t>(OZ)};
    std::vector<double> out(static_cast<std::size_t>(N * Co * OX * OY * OZ));
    for (long n = 0; n < N; ++n)
        for (long co = 0; co < Co; ++co)
            for (long ox = 0; ox < OX; ++ox)
                for (long oy = 0; oy < OY; ++oy)
                    for (long oz = 0; oz < OZ; ++oz) {
                        double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
                        for (long ci = 0; ci < Ci; ++ci)
                            for (long a = 0; a < K; ++a)
                                for (long b = 0; b < K; ++b)
                                    for (long c = 0; c < K; ++c) {
                                        const long x = ox * S - Pd + a, y = oy * S - Pd + b, z = oz * S - Pd + c;
                                        if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) continue;
                                        acc += input[static_cast<std::size_t>((((n * Ci + ci) * X + x) * Y + y) * Z + z)] *
                                               kernel[static_cast<std::size_t>((((co * Ci + ci) * K + a) * K + b) * K + c)];
                                    }
                        out[static_cast<std::size_t>((((n * Co + co) * OX + ox) * OY + oy) * OZ + oz)] = acc;
                    }
    return out;
}

std::vector<double> instance_norm_reference(const std::vector<double>& input, const std::vector<std::size_t>& s,
                                            const std::vector<double>& gamma, const std::vector<double>& beta, double eps) {
    const std::size_t V = s[2] * s[3] * s[4];
    std::vector<double> out(input.size());
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t c = 0; c < s[1]; ++c) {
            const std::size_t base = (n * s[1] + c) * V;
            double mean = 0.0;
            for (std::size_t v = 0; v < V; ++v) mean += input[base + v];
            mean /= static_cast<double>(V);
            double var = 0.0;
            for (std::size_t v = 0; v < V; ++v) var += (input[base + v] - mean) * (input[base + v] - mean);
            var /= static_cast<double>(V);
            for (std::size_t v = 0; v < V; ++v) out[base + v] = (input[base + v] - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
        }
    return out;
}

double contrastive_reference(const std::vector<std::vector<double>>& queries, const std::vector<int>& labels,
                             const std::vector<std::vector<std::vector<double>>>& bank, double tau) {
    auto cosine = [](const std::vector<double>& u, const std::vector<double>& v) {
        double dot = 0.0, nu = 0.0, nv = 0.0;
        for (std::size_t d = 0; d < u.size(); ++d) {
            dot += u[d] * v[d];
            nu += u[d] * u[d];
            nv += v[d] * v[d];
        }
        return dot / (std::sqrt(nu) * std::sqrt(nv));
    };
    double total = 0.0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const auto& positives = bank[static_cast<std::size_t>(labels[i])];
        double per_query = 0.0;
        for (const auto& kp : positives) {
            const double num = std::exp(cosine(queries[i], kp) / tau);
            double den = num;
            for (std::size_t c = 0; c < bank.size(); ++c) {
                if (static_cast<int>(c) == labels[i]) continue;
                for (const auto& kn : bank[c]) den += std::exp(cosine(queries[i], kn) / tau);
            }
            per_query += -std::log(num / den);
        }
        total += per_query / static_cast<double>(positives.size());
    }
    return total / static_cast<double>(queries.size());
}

double cross_entropy_reference(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        for (std::size_t c = 0; c < probs[i].size(); ++c) {
            const double y = static_cast<int>(c) == labels[i] ? 1.0 : 0.0;
            total -= y * std::log(std::max(probs[i][c], 1e-12));
        }
    }
    return total / static_cast<double>(probs.size());
}

double dice_reference(const BinaryMask& a, const BinaryMask& b) {
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t x = 0; x < a.dims[0]; ++x)
        for (std::size_t y = 0; y < a.dims[1]; ++y)
            for (std::size_t z = 0; z < a.dims[2]; ++z) {
                const std::size_t i = (x * a.dims[1] + y) * a.dims[2] + z;
                const bool ia = a.inside[i] != 0, ib = b.inside[i] != 0;
                sa += ia;
                sb += ib;
                inter += ia && ib;
            }
    return sa + sb == 0.0 ? 1.0 : 2.0 * inter / (sa + sb);
}

namespace {

std::vector<std::array<long, 3>> surface(const BinaryMask& m) {
    const long X = static_cast<long>(m.dims[0]), Y = static_cast<long>(m.dims[1]), Z = static_cast<long>(m.dims[2]);
    auto in = [&](long x, long y, long z) {
        if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) return false;
        return m.inside[static_cast<std::size_t>((x * Y + y) * Z + z)] != 0;
    };
    static const long off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    std::vector<std::array<long, 3>> out;
    for (long x = 0; x < X; ++x)
        for (long y = 0; y < Y; ++y)
            for (long z = 0; z < Z; ++z) {
                if (!in(x, y, z)) continue;
                bool edge = false;
                for (const auto& o : off) edge = edge || !in(x + o[0], y + o[1], z + o[2]);
                if (edge) out.push_back({x, y, z});
            }
    return out;
}

}  // namespace

double asd_reference(const BinaryMask& a, const BinaryMask& b, const Spacing& sp) {
    const auto sa = surface(a), sb = surface(b);
    auto directed = [&](const std::vector<std::array<long, 3>>& from, const std::vector<std::array<long, 3>>& to) {
        double sum = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                double d2 = 0.0;
                for (int ax = 0; ax < 3; ++ax) {
                    const double d = static_cast<double>(p[ax] - q[ax]) * sp[ax];
                    d2 += d * d;
                }
                best = std::min(best, std::sqrt(d2));
            }
            sum += best;
        }
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (directed(sa, sb) + directed(sb, sa));
}

// ---------------------------------------------------------------------------
// Suites

namespace {

using Rng = std::mt19937_64;

Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(s);
    for (auto& v : t.data) v = u(rng);
    return t;
}

/// Values of magnitude in [0.05, 1] with random sign, keeping finite differences off kinks.
Tensor<double> kink_free_tensor(const Shape& s, Rng& rng) {
    std::uniform_real_distribution<double> mag(0.05, 1.0);
    std::bernoulli_distribution sign(0.5);
    Tensor<double> t(s);
    for (auto& v : t.data) v = sign(rng) ? mag(rng) : -mag(rng);
    return t;
}

/// sum(y * w) with fixed random weights w, so no output direction is left untested.
Var<double> probe_sum(Graph<double>& g, Var<double> y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(y, g.constant(random_tensor(y.shape(), rng))));
}

class Tally {
public:
    void add(const std::string& name, double err, double tol) {
        auto& r = results_[name];
        if (r.name.empty()) {
            r.name = name;
            r.tolerance = tol;
            order_.push_back(name);
        }
        r.error = std::max(r.error, std::isnan(err) ? std::numeric_limits<double>::infinity() : err);
    }
    std::vector<CheckResult> finish() const {
        std::vector<CheckResult> out;
        for (const auto& n : order_) {
            CheckResult r = results_.at(n);
            r.passed = r.error <= r.tolerance;
            out.push_back(r);
        }
        return out;
    }

private:
    std::map<std::string, CheckResult> results_;
    std::vector<std::string> order_;
};

struct ConvCase {
    int k, stride, padding;
};
constexpr ConvCase kConvCases[] = {{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {1, 2, 0}, {3, 1, 0}, {3, 2, 0}, {3, 1, 2}, {3, 2, 2}};

NetworkConfig small_network() {
    NetworkConfig c;
    c.in_channels = 2;
    c.levels = 2;
    c.base_channels = 4;
    c.feature_dim = 8;
    c.classes = 4;
    c.head_channels = 8;
    return c;
}

/// Patch batch with piecewise-constant labels so every class occurs.
std::vector<std::uint8_t> block_labels(std::size_t N, std::size_t P, Rng& rng) {
    std::vector<std::uint8_t> labels(N * P * P * P);
    std::uniform_int_distribution<int> cls(0, 3);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t x = 0; x < P; ++x)
            for (std::size_t y = 0; y < P; ++y)
                for (std::size_t z = 0; z < P; ++z) {
                    const std::size_t i = ((n * P + x) * P + y) * P + z;
                    labels[i] = static_cast<std::uint8_t>((x * 4 / P + (y >= P / 2 ? 1 : 0) + n) % 4);
                }
    for (int flips = 0; flips < 5; ++flips) labels[rng() % labels.size()] = static_cast<std::uint8_t>(cls(rng));
    return labels;
}

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed, std::size_t repeats) {
    Tally t;
    const double tol = kGradTolerance;
    for (std::size_t r = 0; r < repeats; ++r) {
        Rng rng(derive_seed(seed, r));
        const std::uint64_t ps = rng();

        // conv3d: input, kernel and bias over every supported geometry
        {
            const ConvCase cc = kConvCases[r % std::size(kConvCases)];
            const auto k = static_cast<std::size_t>(cc.k);
            const Tensor<double> x = random_tensor({1, 2, 4, 5, 3}, rng);
            const Tensor<double> w = random_tensor({3, 2, k, k, k}, rng);
            const Tensor<double> b = random_tensor({3}, rng);
            auto conv = [&](Graph<double>& g, Var<double> xi, Var<double> wi, Var<double> bi) {
                return probe_sum(g, ops::conv3d(xi, wi, bi, cc.stride, cc.padding), ps);
            };
            t.add("conv3d/input", grad_check([&](Graph<double>& g, Var<double> v) { return conv(g, v, g.constant(w), g.constant(b)); }, x), tol);
            t.add("conv3d/kernel", grad_check([&](Graph<double>& g, Var<double> v) { return conv(g, g.constant(x), v, g.constant(b)); }, w), tol);
            t.add("conv3d/bias", grad_check([&](Graph<double>& g, Var<double> v) { return conv(g, g.constant(x), g.constant(w), v); }, b), tol);
        }
        // instance_norm
        {
            const Tensor<double> x = random_tensor({2, 3, 3, 2, 4}, rng);
            const Tensor<double> gm = random_tensor({3}, rng, 0.5, 1.5);
            const Tensor<double> bt = random_tensor({3}, rng);
            auto norm = [&](Graph<double>& g, Var<double> xi, Var<double> gi, Var<double> bi) {
                return probe_sum(g, ops::instance_norm(xi, gi, bi), ps);
            };
            t.add("instance_norm/input", grad_check([&](Graph<double>& g, Var<double> v) { return norm(g, v, g.constant(gm), g.constant(bt)); }, x), tol);
            t.add("instance_norm/gamma", grad_check([&](Graph<double>& g, Var<double> v) { return norm(g, g.constant(x), v, g.constant(bt)); }, gm), tol);
            t.add("instance_norm/beta", grad_check([&](Graph<double>& g, Var<double> v) { return norm(g, g.constant(x), g.constant(gm), v); }, bt), tol);
        }
        // elementwise, reductions, reshaping
        {
            const Tensor<double> x = kink_free_tensor({2, 3, 2, 2, 2}, rng);
            const Tensor<double> y = random_tensor({2, 3, 2, 2, 2}, rng);
            const Tensor<double> pos = random_tensor({2, 3, 2, 2, 2}, rng, 0.2, 2.0);
            const Tensor<double> y2 = random_tensor({2, 2, 2, 2, 2}, rng);
            {
                // mask selection itself, which replayed probes take as given
                Rng wr(ps);
                const Tensor<double> w = random_tensor(x.shape, wr);
                Graph<double> g;
                Var<double> v = g.variable(x);
                g.backward(probe_sum(g, ops::relu(v), ps));
                const Tensor<double> dx = g.grad(v);
                double err = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double want = x.data[i] > 0.0 ? w.data[i] : 0.0;
                    err = std::max(err, std::abs(dx.data[i] - want) + std::abs(g.value(1).data[i] - std::max(x.data[i], 0.0)));
                }
                t.add("relu/mask", err, 0.0);
            }
            t.add("relu", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::relu(v), ps); }, x), tol);
            t.add("softmax", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::softmax(v, 1), ps); }, y), tol);
            t.add("softmax/axis0", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::softmax(v, 0), ps); }, y), tol);
            t.add("log", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::log(v), ps); }, pos), tol);
            t.add("add", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::add(v, g.constant(y)), ps); }, x), tol);
            t.add("mul", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::mul(g.constant(y), v), ps); }, x), tol);
            t.add("mul/square", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::mul(v, v), ps); }, x), tol);
            t.add("scale", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::scale(v, -1.7), ps); }, x), tol);
            t.add("sum", grad_check([&](Graph<double>&, Var<double> v) { return ops::sum(v); }, x), tol);
            t.add("mean", grad_check([&](Graph<double>&, Var<double> v) { return ops::mean(v); }, x), tol);
            t.add("upsample_nearest2", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::upsample_nearest2(v), ps); }, x), tol);
            t.add("concat_channels", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::concat_channels(v, g.constant(y2)), ps); }, x), tol);
            t.add("concat_channels/second", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::concat_channels(g.constant(x), v), ps); }, y2), tol);
            const std::vector<std::size_t> idx{0, 5, 7, 9, 15, 5};
            t.add("gather_voxels", grad_check([&](Graph<double>& g, Var<double> v) { return probe_sum(g, ops::gather_voxels<double>(v, idx), ps); }, y), tol);
        }
        // cosine similarity
        {
            const Tensor<double> u = random_tensor({5}, rng), k = random_tensor({5}, rng);
            t.add("cosine_similarity", grad_check([&](Graph<double>& g, Var<double> v) { return ops::cosine_similarity(v, g.constant(k)); }, u), tol);
            t.add("cosine_similarity/second", grad_check([&](Graph<double>& g, Var<double> v) { return ops::cosine_similarity(g.constant(u), v); }, k), tol);
        }
        // proxy contrastive loss, both readings
        {
            const std::size_t C = 3, M = 1 + r % 3, D = 4, Q = 5;
            const Tensor<double> q = random_tensor({Q, D}, rng), bank = random_tensor({C, M, D}, rng);
            std::vector<std::uint8_t> lab(Q);
            for (auto& l : lab) l = static_cast<std::uint8_t>(rng() % C);
            const double tau = 0.1 + 0.4 * static_cast<double>(r % 5) / 4.0;
            auto ctr = [&](Graph<double>&, Var<double> qi, Var<double> bi, ContrastiveVariant var) {
                return contrastive_loss(qi, lab, bi, tau, var);
            };
            t.add("contrastive_exp/queries", grad_check([&](Graph<double>& g, Var<double> v) { return ctr(g, v, g.constant(bank), ContrastiveVariant::Exp); }, q), tol);
            t.add("contrastive_exp/bank", grad_check([&](Graph<double>& g, Var<double> v) { return ctr(g, g.constant(q), v, ContrastiveVariant::Exp); }, bank), tol);
            // positive orthant keeps every literal log argument positive
            const Tensor<double> qp = random_tensor({Q, D}, rng, 0.1, 1.0), bp = random_tensor({C, M, D}, rng, 0.1, 1.0);
            t.add("contrastive_literal/queries", grad_check([&](Graph<double>& g, Var<double> v) { return ctr(g, v, g.constant(bp), ContrastiveVariant::Literal); }, qp), tol);
            t.add("contrastive_literal/bank", grad_check([&](Graph<double>& g, Var<double> v) { return ctr(g, g.constant(qp), v, ContrastiveVariant::Literal); }, bp), tol);
        }
        // cross-entropy and the joint sum
        {
            const Tensor<double> p = random_tensor({2, 4, 2, 2, 2}, rng, 0.05, 1.0);
            std::vector<std::uint8_t> lab(16);
            for (auto& l : lab) l = static_cast<std::uint8_t>(rng() % 4);
            const VoxelSelection sel = balanced_select(lab, rng());
            t.add("cross_entropy", grad_check([&](Graph<double>&, Var<double> v) { return cross_entropy(v, lab, sel); }, p), tol);
            const Tensor<double> two = random_tensor({2}, rng);
            t.add("total_loss", grad_check([&](Graph<double>& g, Var<double> v) {
                      Var<double> parts = ops::mul(v, g.constant(Tensor<double>({2}, {1.0, 0.0})));
                      Var<double> ce = ops::sum(parts);
                      Var<double> ctr = ops::sum(ops::mul(v, g.constant(Tensor<double>({2}, {0.0, 1.0}))));
                      return total_loss(ce, ctr, 0.5);
                  }, two), tol);
        }
    }

    // composite chain on an 8^3 patch
    {
        Rng rng(derive_seed(seed, 1000));
        const std::uint64_t ps = rng();
        const Tensor<double> x = random_tensor({1, 2, 8, 8, 8}, rng);
        const Tensor<double> w = random_tensor({3, 2, 3, 3, 3}, rng, -0.3, 0.3);
        const Tensor<double> gm = random_tensor({3}, rng, 0.5, 1.5), bt = random_tensor({3}, rng, -0.2, 0.2);
        auto chain = [&](Graph<double>& g, Var<double> xi, Var<double> wi) {
            Var<double> h = ops::conv3d(xi, wi, Var<double>(), 1, 1);
            h = ops::relu(ops::instance_norm(h, g.constant(gm), g.constant(bt)));
            return probe_sum(g, h, ps);
        };
        t.add("conv3d+instance_norm+relu/input", grad_check([&](Graph<double>& g, Var<double> v) { return chain(g, v, g.constant(w)); }, x), tol);
        t.add("conv3d+instance_norm+relu/kernel", grad_check([&](Graph<double>& g, Var<double> v) { return chain(g, g.constant(x), v); }, w), tol);
    }

    // network and the joint loss through network and memory bank
    {
        Rng rng(derive_seed(seed, 2000));
        const NetworkConfig cfg = small_network();
        auto net = build_network<double>(cfg, rng());
        const std::size_t N = 2, P = 8;
        const Tensor<double> x = random_tensor({N, 2, P, P, P}, rng);
        const std::uint64_t ps = rng();
        auto params = net.parameters();
        t.add("extract_features/parameters", grad_check_parameters([&](Graph<double>& g) {
                  return probe_sum(g, extract_features(net.extractor, g, g.constant(x)), ps);
              }, net.extractor.parameters()), tol);
        t.add("classify(extract_features)/parameters", grad_check_parameters([&](Graph<double>& g) {
                  return probe_sum(g, classify(net.classifier, g, extract_features(net.extractor, g, g.constant(x))), ps);
              }, params), tol);

        auto bank = init_memory_bank<double>(4, 3, static_cast<std::size_t>(cfg.feature_dim), rng());
        const auto labels = block_labels(N, P, rng);
        const VoxelSelection sel = balanced_select(labels, rng());
        std::vector<std::uint8_t> qlab;
        for (std::size_t i : sel.indices) qlab.push_back(labels[i]);
        auto joint = [&](Graph<double>& g, ContrastiveVariant var) {
            Var<double> feats = extract_features(net.extractor, g, g.constant(x));
            Var<double> probs = classify(net.classifier, g, feats);
            Var<double> ce = cross_entropy(probs, labels, sel);
            Var<double> ctr = contrastive_loss(ops::gather_voxels(feats, sel.indices), qlab, g.parameter(bank.proxies), 0.1, var);
            return total_loss(ce, ctr, 1.0);
        };
        auto all = params;
        all.push_back(&bank.proxies);
        t.add("joint_loss/network+bank", grad_check_parameters([&](Graph<double>& g) { return joint(g, ContrastiveVariant::Exp); }, all), tol);
    }
    return t.finish();
}

std::vector<CheckResult> oracle_suite(std::uint64_t seed) {
    Tally t;
    Rng rng(seed);

    // contrastive loss vs per-proxy enumeration
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t C = 2 + rng() % 2, M = 1 + rng() % 3, D = 1 + rng() % 4, Q = 1 + rng() % 6;
        const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        const Tensor<double> q = random_tensor({Q, D}, rng), b = random_tensor({C, M, D}, rng);
        std::vector<std::uint8_t> lab(Q);
        std::vector<int> ilab(Q);
        for (std::size_t i = 0; i < Q; ++i) ilab[i] = lab[i] = static_cast<std::uint8_t>(rng() % C);
        std::vector<std::vector<double>> qs(Q, std::vector<double>(D));
        std::vector<std::vector<std::vector<double>>> bs(C, std::vector<std::vector<double>>(M, std::vector<double>(D)));
        for (std::size_t i = 0; i < Q; ++i)
            for (std::size_t d = 0; d < D; ++d) qs[i][d] = q.data[i * D + d];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t d = 0; d < D; ++d) bs[c][m][d] = b.data[(c * M + m) * D + d];
        Graph<double> g;
        const double got = contrastive_loss(g.constant(q), lab, g.constant(b), tau, ContrastiveVariant::Exp).value()[0];
        t.add("contrastive_exp vs enumeration (100 instances)", relative_error(got, contrastive_reference(qs, ilab, bs, tau)), 1e-8);
    }

    // cross-entropy vs scalar recomputation
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t C = 2 + rng() % 4;
        Graph<double> g;
        Tensor<double> logits = random_tensor({2, C, 2, 3, 2}, rng, -3.0, 3.0);
        Var<double> probs = ops::softmax(g.constant(logits), 1);
        std::vector<std::uint8_t> lab(24);
        for (auto& l : lab) l = static_cast<std::uint8_t>(rng() % C);
        const VoxelSelection sel = balanced_select(lab, rng());
        const double got = cross_entropy(probs, lab, sel).value()[0];
        std::vector<std::vector<double>> rows;
        std::vector<int> ilab;
        for (std::size_t i : sel.indices) {
            std::vector<double> row(C);
            for (std::size_t c = 0; c < C; ++c) row[c] = probs.value().data[((i / 12) * C + c) * 12 + i % 12];
            rows.push_back(row);
            ilab.push_back(lab[i]);
        }
        t.add("cross_entropy vs recomputation", relative_error(got, cross_entropy_reference(rows, ilab)), 1e-10);
    }

    // Dice and ASD vs brute force on random masks up to 12^3
    for (int inst = 0; inst < 50; ++inst) {
        Dims d{};
        for (auto& e : d) e = 2 + rng() % 11;
        Spacing sp{};
        for (auto& s : sp) s = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
        BinaryMask a{d, std::vector<std::uint8_t>(voxel_count(d))}, b = a;
        const double fa = std::uniform_real_distribution<double>(0.1, 0.7)(rng);
        const double fb = std::uniform_real_distribution<double>(0.1, 0.7)(rng);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& v : a.inside) v = u(rng) < fa;
        for (auto& v : b.inside) v = u(rng) < fb;
        a.inside[rng() % a.inside.size()] = 1;
        b.inside[rng() % b.inside.size()] = 1;
        t.add("dice vs brute force (50 mask pairs)", std::abs(dice(a, b) - dice_reference(a, b)), 1e-10);
        t.add("asd vs O(n^2) brute force (50 mask pairs)",
              relative_error(average_surface_distance(a, b, sp), asd_reference(a, b, sp)), 1e-10);
        // distance transform against direct minimisation over sites
        const auto dt = squared_distance_transform(b, sp);
        double worst = 0.0;
        for (std::size_t x = 0; x < d[0]; ++x)
            for (std::size_t y = 0; y < d[1]; ++y)
                for (std::size_t z = 0; z < d[2]; ++z) {
                    double best = std::numeric_limits<double>::infinity();
                    for (std::size_t i = 0; i < b.inside.size(); ++i) {
                        if (!b.inside[i]) continue;
                        const double dx = (static_cast<double>(x) - static_cast<double>(i / (d[1] * d[2]))) * sp[0];
                        const double dy = (static_cast<double>(y) - static_cast<double>((i / d[2]) % d[1])) * sp[1];
                        const double dz = (static_cast<double>(z) - static_cast<double>(i % d[2])) * sp[2];
                        best = std::min(best, dx * dx + dy * dy + dz * dz);
                    }
                    worst = std::max(worst, relative_error(dt[voxel_index(d, x, y, z)], best));
                }
        t.add("distance transform vs direct minimum", worst, 1e-10);
    }

    // conv3d vs direct loops, every extent <= 6 and every supported geometry
    {
        double worst = 0.0;
        for (std::size_t X = 1; X <= 6; ++X)
            for (std::size_t Y = 1; Y <= 6; ++Y)
                for (std::size_t Z = 1; Z <= 6; ++Z)
                    for (const auto& cc : kConvCases) {
                        const auto k = static_cast<std::size_t>(cc.k);
                        if (X + 2 * static_cast<std::size_t>(cc.padding) < k || Y + 2 * static_cast<std::size_t>(cc.padding) < k ||
                            Z + 2 * static_cast<std::size_t>(cc.padding) < k) {
                            continue;
                        }
                        const Tensor<double> x = random_tensor({2, 2, X, Y, Z}, rng);
                        const Tensor<double> w = random_tensor({3, 2, k, k, k}, rng);
                        const Tensor<double> b = random_tensor({3}, rng);
                        Graph<double> g;
                        const auto& got = ops::conv3d(g.constant(x), g.constant(w), g.constant(b), cc.stride, cc.padding).value();
                        Shape os;
                        const auto ref = conv3d_reference(x.data, x.shape, w.data, 3, k, b.data, cc.stride, cc.padding, os);
                        if (os != got.shape) {
                            worst = std::numeric_limits<double>::infinity();
                            continue;
                        }
                        double scale = 0.0;
                        for (double v : ref) scale = std::max(scale, std::abs(v));
                        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(got.data[i] - ref[i]) / std::max(scale, 1e-300));
                    }
        t.add("conv3d vs direct loops (all extents <= 6)", worst, 1e-10);
    }

    // instance norm vs independent mean/variance
    for (int inst = 0; inst < 10; ++inst) {
        const Tensor<double> x = random_tensor({2, 3, 3, 4, 2}, rng, -2.0, 2.0);
        const Tensor<double> gm = random_tensor({3}, rng), bt = random_tensor({3}, rng);
        Graph<double> g;
        const auto& got = ops::instance_norm(g.constant(x), g.constant(gm), g.constant(bt)).value().data;
        const auto ref = instance_norm_reference(x.data, x.shape, gm.data, bt.data, ops::kInstanceNormEps);
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]) / std::max(std::abs(ref[i]), 1.0));
        t.add("instance_norm vs recomputation", worst, 1e-10);
    }

    // closed forms
    {
        for (std::size_t C : {2, 3, 4, 7}) {
            Graph<double> g;
            Var<double> probs = g.constant(Tensor<double>({1, C, 2, 2, 2}, 1.0 / static_cast<double>(C)));
            std::vector<std::uint8_t> lab(8);
            for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<std::uint8_t>(i % C);
            const double ce = cross_entropy(probs, lab, select_all(lab)).value()[0];
            t.add("uniform cross-entropy = ln C", std::abs(ce - std::log(static_cast<double>(C))), 1e-10);

            Var<double> sm = ops::softmax(g.constant(Tensor<double>({2, C}, 3.25)), 1);
            double worst = 0.0;
            for (double v : sm.value().data) worst = std::max(worst, std::abs(v - 1.0 / static_cast<double>(C)));
            t.add("softmax of equal logits = 1/C", worst, 1e-12);
        }
        Graph<double> g;
        Var<double> q = g.constant(Tensor<double>({1, 2}, {1.0, 0.0}));
        Var<double> b = g.constant(Tensor<double>({2, 1, 2}, {1.0, 0.0, 0.0, 1.0}));
        const std::vector<std::uint8_t> lab{0};
        const double toy = contrastive_loss(q, lab, b, 0.1, ContrastiveVariant::Exp).value()[0];
        t.add("toy contrastive = log(1 + e^-10)", std::abs(toy - std::log1p(std::exp(-10.0))), 1e-10);
    }
    return t.finish();
}

}  // namespace scseg::verify
