#include "scseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "conv_kernels.hpp"

namespace scseg::ops {

namespace {

void require(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

template <typename T>
void require_volume(const Var<T>& v, const char* op) {
    require(v.shape().size() == 5, std::string(op) + ": expected [N,C,X,Y,Z] input, got " + to_string(v.shape()));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

std::size_t spatial(const Shape& s) { return s[2] * s[3] * s[4]; }

}  // namespace

template <typename T>
Var<T> conv3d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding) {
    require_volume(input, "conv3d");
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    require(ks.size() == 5, "conv3d: kernel must be [Cout,Cin,k,k,k], got " + to_string(ks));
    require(ks[2] == ks[3] && ks[3] == ks[4] && (ks[2] == 1 || ks[2] == 3),
            "conv3d: kernel must be cubic with k in {1,3}, got " + to_string(ks));
    require(ks[1] == is[1], "conv3d: input has " + std::to_string(is[1]) + " channels but kernel expects " +
                                std::to_string(ks[1]) + " (kernel " + to_string(ks) + ", input " + to_string(is) + ")");
    require(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
    const int k = static_cast<int>(ks[2]);
    require(padding >= 0 && padding < k, "conv3d: padding must satisfy 0 <= padding < k");
    if (bias.valid()) {
        require(bias.shape() == Shape{ks[0]}, "conv3d: bias must be [Cout], got " + to_string(bias.shape()));
    }

    detail::ConvGeometry g;
    g.cin = is[1];
    g.cout = ks[0];
    g.x = is[2];
    g.y = is[3];
    g.z = is[4];
    g.k = k;
    g.stride = stride;
    g.pad = padding;
    auto out_extent = [&](std::size_t e) -> std::size_t {
        const long span = static_cast<long>(e) + 2 * padding - k;
        require(span >= 0, "conv3d: input extent " + std::to_string(e) + " too small for kernel");
        return static_cast<std::size_t>(span / stride + 1);
    };
    g.ox = out_extent(g.x);
    g.oy = out_extent(g.y);
    g.oz = out_extent(g.z);

    const std::size_t N = is[0];
    const std::size_t in_sz = g.cin * g.x * g.y * g.z;
    const std::size_t out_sz = g.cout * g.ox * g.oy * g.oz;
    const std::size_t ov = g.ox * g.oy * g.oz;

    Tensor<T> out(Shape{N, g.cout, g.ox, g.oy, g.oz});
    const T* x = input.value().data.data();
    const T* w = kernel.value().data.data();
    std::vector<T> buf;
    for (std::size_t n = 0; n < N; ++n) {
        T* o = out.data.data() + n * out_sz;
        if (bias.valid()) {
            const T* b = bias.value().data.data();
            for (std::size_t co = 0; co < g.cout; ++co) std::fill(o + co * ov, o + (co + 1) * ov, b[co]);
        }
        detail::split_input(x + n * in_sz, g, g.cin, buf);
        detail::conv_forward(buf, w, g, o);
    }

    std::vector<Var<T>> inputs{input, kernel};
    if (bias.valid()) inputs.push_back(bias);
    const std::size_t in_id = input.id(), k_id = kernel.id();
    const std::size_t b_id = bias.valid() ? bias.id() : std::numeric_limits<std::size_t>::max();
    return input.graph().record(std::move(out), inputs, [=](Graph<T>& gr, std::size_t self) {
        auto dout = gr.upstream(self);
        const T* xin = gr.value(in_id).data.data();
        const T* wk = gr.value(k_id).data.data();
        if (b_id != std::numeric_limits<std::size_t>::max() && gr.requires_grad(b_id)) {
            auto db = gr.grad_buffer(b_id);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < g.cout; ++co) {
                    T s = T(0);
                    const T* d = dout.data() + n * out_sz + co * ov;
                    for (std::size_t v = 0; v < ov; ++v) s += d[v];
                    db[co] += s;
                }
        }
        const bool need_w = gr.requires_grad(k_id), need_x = gr.requires_grad(in_id);
        if (!need_w && !need_x) return;
        std::vector<T> split;
        detail::ConvGeometry gt;
        std::vector<T> wt;
        if (need_x && stride == 1) {
            gt = detail::transposed_geometry(g);
            wt = detail::flip_transpose(wk, g);
        }
        for (std::size_t n = 0; n < N; ++n) {
            const auto dflat = detail::flatten_output_grad(dout.data() + n * out_sz, g);
            if (need_w) {
                detail::split_input(xin + n * in_sz, g, g.cin, split);
                detail::conv_weight_grad(split, dflat, g, gr.grad_buffer(k_id).data());
            }
            if (need_x) {
                T* dx = gr.grad_buffer(in_id).data() + n * in_sz;
                if (stride == 1) {
                    // Stride 1: the input gradient is a forward convolution of the upstream
                    // gradient with the channel-transposed, spatially flipped kernel.
                    detail::split_input(dout.data() + n * out_sz, gt, gt.cin, split);
                    detail::conv_forward(split, wt.data(), gt, dx);
                } else {
                    split.assign(detail::split_size<T>(g, g.cin), T(0));
                    detail::conv_input_grad(split, dflat, wk, g);
                    detail::merge_input_grad(split, g, dx);
                }
            }
        }
    });
}

template <typename T>
Var<T> instance_norm(Var<T> input, Var<T> gamma, Var<T> beta, double eps) {
    require_volume(input, "instance_norm");
    const Shape& s = input.shape();
    const std::size_t N = s[0], C = s[1], V = spatial(s);
    require(V >= 2, "instance_norm: needs at least 2 voxels per slice");
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "instance_norm: gamma/beta must be [C]");

    Tensor<T> out(s);
    std::vector<T> xhat(N * C * V);
    std::vector<T> inv_std(N * C);
    const T* x = input.value().data.data();
    const T* gm = gamma.value().data.data();
    const T* bt = beta.value().data.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* xs = x + nc * V;
        double m = 0.0;
        for (std::size_t v = 0; v < V; ++v) m += xs[v];
        m /= static_cast<double>(V);
        double var = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            const double d = xs[v] - m;
            var += d * d;
        }
        var /= static_cast<double>(V);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[nc] = static_cast<T>(is);
        const std::size_t c = nc % C;
        T* xh = xhat.data() + nc * V;
        T* o = out.data.data() + nc * V;
        for (std::size_t v = 0; v < V; ++v) {
            xh[v] = static_cast<T>((xs[v] - m) * is);
            o[v] = xh[v] * gm[c] + bt[c];
        }
    }

    const std::size_t in_id = input.id(), g_id = gamma.id(), b_id = beta.id();
    return input.graph().record(
        std::move(out), {input, gamma, beta},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr, std::size_t self) {
            auto dy = gr.upstream(self);
            const T* gm2 = gr.value(g_id).data.data();
            const bool need_g = gr.requires_grad(g_id), need_b = gr.requires_grad(b_id);
            const bool need_x = gr.requires_grad(in_id);
            std::span<T> dg, db, dx;
            if (need_g) dg = gr.grad_buffer(g_id);
            if (need_b) db = gr.grad_buffer(b_id);
            if (need_x) dx = gr.grad_buffer(in_id);
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const std::size_t c = nc % C;
                const T* d = dy.data() + nc * V;
                const T* xh = xhat.data() + nc * V;
                double sum_d = 0.0, sum_dx = 0.0;
                for (std::size_t v = 0; v < V; ++v) {
                    sum_d += d[v];
                    sum_dx += static_cast<double>(d[v]) * xh[v];
                }
                if (need_g) dg[c] += static_cast<T>(sum_dx);
                if (need_b) db[c] += static_cast<T>(sum_d);
                if (need_x) {
                    const double mean_d = sum_d / static_cast<double>(V);
                    const double mean_dx = sum_dx / static_cast<double>(V);
                    const double k = static_cast<double>(gm2[c]) * inv_std[nc];
                    T* o = dx.data() + nc * V;
                    for (std::size_t v = 0; v < V; ++v) o[v] += static_cast<T>(k * (d[v] - mean_d - xh[v] * mean_dx));
                }
            }
        });
}

template <typename T>
Var<T> relu(Var<T> input) {
    Tensor<T> out(input.shape());
    const auto& x = input.value().data;
    std::vector<std::uint8_t> on(x.size());
    BranchTape* tape = input.graph().branch_tape();
    if (tape && tape->replay) {
        require(tape->cursor < tape->patterns.size() && tape->patterns[tape->cursor].size() == x.size(),
                "relu: branch tape does not match this graph");
        on = tape->patterns[tape->cursor++];
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) on[i] = x[i] > T(0);
        if (tape) tape->patterns.push_back(on);
    }
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = on[i] ? x[i] : T(0);
    const std::size_t in_id = input.id();
    return input.graph().record(std::move(out), {input}, [in_id, on = std::move(on)](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        auto dx = gr.grad_buffer(in_id);
        for (std::size_t i = 0; i < on.size(); ++i)
            if (on[i]) dx[i] += dy[i];
    });
}

template <typename T>
Var<T> softmax(Var<T> input, std::size_t axis) {
    const Shape& s = input.shape();
    require(axis < s.size(), "softmax: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];

    Tensor<T> out(s);
    const auto& x = input.value().data;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = x[base];
            for (std::size_t c = 1; c < len; ++c) mx = std::max(mx, x[base + c * inner]);
            T total = T(0);
            for (std::size_t c = 0; c < len; ++c) {
                const T e = std::exp(x[base + c * inner] - mx);
                out.data[base + c * inner] = e;
                total += e;
            }
            for (std::size_t c = 0; c < len; ++c) out.data[base + c * inner] /= total;
        }

    const std::size_t in_id = input.id();
    return input.graph().record(std::move(out), {input}, [=](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        const auto& y = gr.value(self).data;
        auto dx = gr.grad_buffer(in_id);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                T dot = T(0);
                for (std::size_t c = 0; c < len; ++c) dot += dy[base + c * inner] * y[base + c * inner];
                for (std::size_t c = 0; c < len; ++c) {
                    const std::size_t i = base + c * inner;
                    dx[i] += y[i] * (dy[i] - dot);
                }
            }
    });
}

template <typename T>
Var<T> log(Var<T> input) {
    const auto& x = input.value().data;
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > T(0))) {
            std::ostringstream os;
            os << "log: non-positive argument " << x[i] << " at element " << i;
            throw DomainError(os.str());
        }
        out.data[i] = std::log(x[i]);
    }
    const std::size_t in_id = input.id();
    return input.graph().record(std::move(out), {input}, [in_id](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        const auto& xv = gr.value(in_id).data;
        auto dx = gr.grad_buffer(in_id);
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dy[i] / xv[i];
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        for (std::size_t id : {ia, ib}) {
            if (!gr.requires_grad(id)) continue;
            auto dx = gr.grad_buffer(id);
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        const auto& av = gr.value(ia).data;
        const auto& bv = gr.value(ib).data;
        if (gr.requires_grad(ia)) {
            auto da = gr.grad_buffer(ia);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (gr.requires_grad(ib)) {
            auto db = gr.grad_buffer(ib);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * factor;
    const std::size_t ia = a.id();
    return a.graph().record(std::move(out), {a}, [ia, factor](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        auto dx = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
    });
}

template <typename T>
Var<T> sum(Var<T> input) {
    T total = T(0);
    for (T v : input.value().data) total += v;
    const std::size_t ia = input.id();
    return input.graph().record(Tensor<T>::scalar(total), {input}, [ia](Graph<T>& gr, std::size_t self) {
        const T d = gr.upstream(self)[0];
        auto dx = gr.grad_buffer(ia);
        for (auto& g : dx) g += d;
    });
}

template <typename T>
Var<T> mean(Var<T> input) {
    const std::size_t n = input.value().size();
    require(n > 0, "mean: empty tensor");
    return scale(sum(input), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> upsample_nearest2(Var<T> input) {
    require_volume(input, "upsample_nearest2");
    const Shape& s = input.shape();
    const std::size_t NC = s[0] * s[1], X = s[2], Y = s[3], Z = s[4];
    Tensor<T> out(Shape{s[0], s[1], 2 * X, 2 * Y, 2 * Z});
    const auto& x = input.value().data;
    const std::size_t OY = 2 * Y, OZ = 2 * Z, OV = 8 * X * Y * Z, V = X * Y * Z;
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t ox = 0; ox < 2 * X; ++ox)
            for (std::size_t oy = 0; oy < OY; ++oy) {
                const T* src = x.data() + nc * V + ((ox / 2) * Y + oy / 2) * Z;
                T* dst = out.data.data() + nc * OV + (ox * OY + oy) * OZ;
                for (std::size_t oz = 0; oz < OZ; ++oz) dst[oz] = src[oz / 2];
            }
    const std::size_t ia = input.id();
    return input.graph().record(std::move(out), {input}, [=](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        auto dx = gr.grad_buffer(ia);
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t ox = 0; ox < 2 * X; ++ox)
                for (std::size_t oy = 0; oy < OY; ++oy) {
                    T* dst = dx.data() + nc * V + ((ox / 2) * Y + oy / 2) * Z;
                    const T* src = dy.data() + nc * OV + (ox * OY + oy) * OZ;
                    for (std::size_t oz = 0; oz < OZ; ++oz) dst[oz / 2] += src[oz];
                }
    });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    require_volume(a, "concat_channels");
    require_volume(b, "concat_channels");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4],
            "concat_channels: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
    const std::size_t N = sa[0], V = spatial(sa), ca = sa[1] * V, cb = sb[1] * V;
    Tensor<T> out(Shape{N, sa[1] + sb[1], sa[2], sa[3], sa[4]});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.value().data.begin() + n * ca, ca, out.data.begin() + n * (ca + cb));
        std::copy_n(b.value().data.begin() + n * cb, cb, out.data.begin() + n * (ca + cb) + ca);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [=](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        if (gr.requires_grad(ia)) {
            auto da = gr.grad_buffer(ia);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < ca; ++i) da[n * ca + i] += dy[n * (ca + cb) + i];
        }
        if (gr.requires_grad(ib)) {
            auto db = gr.grad_buffer(ib);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < cb; ++i) db[n * cb + i] += dy[n * (ca + cb) + ca + i];
        }
    });
}

template <typename T>
Var<T> gather_voxels(Var<T> field, std::span<const std::size_t> indices) {
    require_volume(field, "gather_voxels");
    const Shape& s = field.shape();
    const std::size_t N = s[0], C = s[1], V = spatial(s);
    const auto& x = field.value().data;
    Tensor<T> out(Shape{indices.size(), C});
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    for (std::size_t q = 0; q < idx.size(); ++q) {
        require(idx[q] < N * V, "gather_voxels: voxel index " + std::to_string(idx[q]) + " out of range");
        const std::size_t n = idx[q] / V, v = idx[q] % V;
        for (std::size_t c = 0; c < C; ++c) out.data[q * C + c] = x[(n * C + c) * V + v];
    }
    const std::size_t ia = field.id();
    return field.graph().record(std::move(out), {field}, [=, idx = std::move(idx)](Graph<T>& gr, std::size_t self) {
        auto dy = gr.upstream(self);
        auto dx = gr.grad_buffer(ia);
        for (std::size_t q = 0; q < idx.size(); ++q) {
            const std::size_t n = idx[q] / V, v = idx[q] % V;
            for (std::size_t c = 0; c < C; ++c) dx[(n * C + c) * V + v] += dy[q * C + c];
        }
    });
}

template <typename T>
Var<T> cosine_similarity(Var<T> u, Var<T> v) {
    require(u.shape().size() == 1 && u.shape() == v.shape(),
            "cosine_similarity: operands must be vectors of equal length, got " + to_string(u.shape()) + " and " +
                to_string(v.shape()));
    const auto& a = u.value().data;
    const auto& b = v.value().data;
    T dot = T(0), na = T(0), nb = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == T(0) || nb == T(0)) throw DomainError("cosine_similarity: zero-norm operand");
    const T sim = dot / (na * nb);
    const std::size_t ia = u.id(), ib = v.id();
    return u.graph().record(Tensor<T>::scalar(sim), {u, v}, [=](Graph<T>& gr, std::size_t self) {
        const T d = gr.upstream(self)[0];
        const auto& av = gr.value(ia).data;
        const auto& bv = gr.value(ib).data;
        // d sim / d a = b / (|a||b|) - sim * a / |a|^2
        if (gr.requires_grad(ia)) {
            auto da = gr.grad_buffer(ia);
            for (std::size_t i = 0; i < av.size(); ++i) da[i] += d * (bv[i] / (na * nb) - sim * av[i] / (na * na));
        }
        if (gr.requires_grad(ib)) {
            auto db = gr.grad_buffer(ib);
            for (std::size_t i = 0; i < bv.size(); ++i) db[i] += d * (av[i] / (na * nb) - sim * bv[i] / (nb * nb));
        }
    });
}

#define SCSEG_INSTANTIATE_OPS(T)                                                 \
    template Var<T> conv3d(Var<T>, Var<T>, Var<T>, int, int);                    \
    template Var<T> instance_norm(Var<T>, Var<T>, Var<T>, double);               \
    template Var<T> relu(Var<T>);                                                \
    template Var<T> softmax(Var<T>, std::size_t);                                \
    template Var<T> log(Var<T>);                                                 \
    template Var<T> add(Var<T>, Var<T>);                                         \
    template Var<T> mul(Var<T>, Var<T>);                                         \
    template Var<T> scale(Var<T>, T);                                            \
    template Var<T> sum(Var<T>);                                                 \
    template Var<T> mean(Var<T>);                                                \
    template Var<T> upsample_nearest2(Var<T>);                                   \
    template Var<T> concat_channels(Var<T>, Var<T>);                             \
    template Var<T> gather_voxels(Var<T>, std::span<const std::size_t>);         \
    template Var<T> cosine_similarity(Var<T>, Var<T>);

SCSEG_INSTANTIATE_OPS(float)
SCSEG_INSTANTIATE_OPS(double)

#undef SCSEG_INSTANTIATE_OPS

}  // namespace scseg::ops
