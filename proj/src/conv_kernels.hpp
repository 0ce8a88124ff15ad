#pragma once

// Direct 3-D convolution kernels for one sample in [C, X, Y, Z] layout.
//
// The input is copied into a zero-padded buffer split by stride phase along
// all three axes:
//   buf[c][phase_x][phase_y][phase_z][gx][gy][gz],  padded coord = g * stride + phase
// With this layout every kernel tap reads a contiguous run of the buffer for a
// whole output plane (oy, oz) flattened with row length Gz. Columns oz >= OZ of
// that flattened plane are junk: they are computed but never stored, and their
// upstream gradients are zero.
//
// All loops have a fixed order, so results are deterministic for a given shape.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace scseg::detail {

struct ConvGeometry {
    std::size_t cin = 0, cout = 0;
    std::size_t x = 0, y = 0, z = 0;     // input extents
    std::size_t ox = 0, oy = 0, oz = 0;  // output extents
    int k = 3, stride = 1, pad = 1;

    std::size_t s() const { return static_cast<std::size_t>(stride); }
    std::size_t kk() const { return static_cast<std::size_t>(k); }
    std::size_t taps() const { return kk() * kk() * kk(); }
    std::size_t grid(std::size_t extent) const { return (extent + 2 * static_cast<std::size_t>(pad) + s() - 1) / s(); }
    std::size_t gx() const { return grid(x); }
    std::size_t gy() const { return grid(y); }
    std::size_t gz() const { return grid(z); }
    std::size_t phase_len() const { return gx() * gy() * gz(); }
    std::size_t channel_len() const { return s() * s() * s() * phase_len(); }
    /// Flattened (oy, oz) plane length, junk columns included.
    std::size_t plane() const { return oy * gz(); }
};

template <typename T>
inline constexpr std::size_t kLanes = 64 / sizeof(T) * 2;  // 32 floats, 16 doubles
inline constexpr std::size_t kChannelBlock = 8;

template <typename T>
std::size_t padded_plane(const ConvGeometry& g) {
    return (g.plane() + kLanes<T> - 1) / kLanes<T> * kLanes<T>;
}

template <typename T>
std::size_t split_size(const ConvGeometry& g, std::size_t channels) {
    // tail absorbs junk-column reads past the last plane
    return channels * g.channel_len() + g.gy() * g.gz() + 2 * kLanes<T> + g.taps();
}

/// Offset of the first element read by tap (kx, ky, kz) for output row ox.
inline std::size_t tap_base(const ConvGeometry& g, std::size_t c, std::size_t ox, std::size_t kx, std::size_t ky,
                            std::size_t kz) {
    const std::size_t s = g.s();
    const std::size_t phase = ((kx % s) * s + (ky % s)) * s + (kz % s);
    return c * g.channel_len() + phase * g.phase_len() + ((ox + kx / s) * g.gy() + ky / s) * g.gz() + kz / s;
}

template <typename T>
void split_input(const T* in, const ConvGeometry& g, std::size_t channels, std::vector<T>& buf) {
    const std::size_t p = static_cast<std::size_t>(g.pad), s = g.s();
    buf.assign(split_size<T>(g, channels), T(0));
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t x = 0; x < g.x; ++x)
            for (std::size_t y = 0; y < g.y; ++y) {
                const T* src = in + ((c * g.x + x) * g.y + y) * g.z;
                const std::size_t px = x + p, py = y + p;
                const std::size_t row = c * g.channel_len() + ((px % s) * s + py % s) * s * g.phase_len() +
                                        ((px / s) * g.gy() + py / s) * g.gz();
                if (s == 1) {
                    std::memcpy(buf.data() + row + p, src, g.z * sizeof(T));
                } else {
                    for (std::size_t z = 0; z < g.z; ++z) {
                        const std::size_t pz = z + p;
                        buf[row + (pz % s) * g.phase_len() + pz / s] = src[z];
                    }
                }
            }
}

/// din[c][x][y][z] += split gradient at the matching padded position.
template <typename T>
void merge_input_grad(const std::vector<T>& buf, const ConvGeometry& g, T* din) {
    const std::size_t p = static_cast<std::size_t>(g.pad), s = g.s();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t x = 0; x < g.x; ++x)
            for (std::size_t y = 0; y < g.y; ++y) {
                T* dst = din + ((c * g.x + x) * g.y + y) * g.z;
                const std::size_t px = x + p, py = y + p;
                const std::size_t row = c * g.channel_len() + ((px % s) * s + py % s) * s * g.phase_len() +
                                        ((px / s) * g.gy() + py / s) * g.gz();
                for (std::size_t z = 0; z < g.z; ++z) {
                    const std::size_t pz = z + p;
                    dst[z] += buf[row + (pz % s) * g.phase_len() + pz / s];
                }
            }
}

/// Upstream gradient rearranged into flattened planes [cout][ox][padded_plane], zero in junk columns.
template <typename T>
std::vector<T> flatten_output_grad(const T* dout, const ConvGeometry& g) {
    const std::size_t pp = padded_plane<T>(g), GZ = g.gz();
    std::vector<T> flat(g.cout * g.ox * pp, T(0));
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t ox = 0; ox < g.ox; ++ox)
            for (std::size_t oy = 0; oy < g.oy; ++oy) {
                const T* src = dout + ((co * g.ox + ox) * g.oy + oy) * g.oz;
                std::memcpy(flat.data() + (co * g.ox + ox) * pp + oy * GZ, src, g.oz * sizeof(T));
            }
    return flat;
}

// CB: compile-time output-channel block, 0 = runtime `cb`.
template <typename T, std::size_t CB>
void forward_block(const T* buf, const T* w, const ConvGeometry& g, std::size_t co0, std::size_t cb_rt, T* out) {
    constexpr std::size_t J = kLanes<T>;
    const std::size_t cb = CB ? CB : cb_rt;
    const std::size_t k = g.kk(), taps = g.taps(), GZ = g.gz(), L = g.plane();
    const std::size_t OV = g.ox * g.oy * g.oz;
    alignas(64) T acc[kChannelBlock][J];
    for (std::size_t ox = 0; ox < g.ox; ++ox)
        for (std::size_t j0 = 0; j0 < L; j0 += J) {
            for (std::size_t b = 0; b < cb; ++b)
                for (std::size_t j = 0; j < J; ++j) acc[b][j] = T(0);
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const T* wc = w + (co0 * g.cin + ci) * taps;
                for (std::size_t kx = 0; kx < k; ++kx)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kz = 0; kz < k; ++kz) {
                            const T* r = buf + tap_base(g, ci, ox, kx, ky, kz) + j0;
                            const std::size_t tap = (kx * k + ky) * k + kz;
                            for (std::size_t b = 0; b < cb; ++b) {
                                const T wv = wc[b * g.cin * taps + tap];
#pragma GCC ivdep
                                for (std::size_t j = 0; j < J; ++j) acc[b][j] += wv * r[j];
                            }
                        }
            }
            const std::size_t jn = std::min(J, L - j0);
            for (std::size_t j = 0; j < jn; ++j) {
                const std::size_t oy = (j0 + j) / GZ, oz = (j0 + j) % GZ;
                if (oz >= g.oz) continue;
                T* o = out + co0 * OV + (ox * g.oy + oy) * g.oz + oz;
                for (std::size_t b = 0; b < cb; ++b) o[b * OV] += acc[b][j];
            }
        }
}

/// out += conv(in); `buf` is the split input.
template <typename T>
void conv_forward(const std::vector<T>& buf, const T* w, const ConvGeometry& g, T* out) {
    for (std::size_t co0 = 0; co0 < g.cout; co0 += kChannelBlock) {
        const std::size_t cb = std::min(kChannelBlock, g.cout - co0);
        if (cb == kChannelBlock) {
            forward_block<T, kChannelBlock>(buf.data(), w, g, co0, cb, out);
        } else {
            forward_block<T, 0>(buf.data(), w, g, co0, cb, out);
        }
    }
}

template <typename T, std::size_t CB>
void weight_grad_block(const T* buf, const T* dflat, const ConvGeometry& g, std::size_t ci, std::size_t co0,
                       std::size_t cb_rt, T* dw) {
    constexpr std::size_t J = kLanes<T>;
    const std::size_t cb = CB ? CB : cb_rt;
    const std::size_t k = g.kk(), taps = g.taps(), pp = padded_plane<T>(g);
    alignas(64) T acc[kChannelBlock][J];
    for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kz = 0; kz < k; ++kz) {
                for (std::size_t b = 0; b < cb; ++b)
                    for (std::size_t j = 0; j < J; ++j) acc[b][j] = T(0);
                for (std::size_t ox = 0; ox < g.ox; ++ox) {
                    const T* r0 = buf + tap_base(g, ci, ox, kx, ky, kz);
                    const T* d0 = dflat + (co0 * g.ox + ox) * pp;
                    for (std::size_t j0 = 0; j0 < pp; j0 += J) {
                        const T* r = r0 + j0;
                        for (std::size_t b = 0; b < cb; ++b) {
                            const T* d = d0 + b * g.ox * pp + j0;
#pragma GCC ivdep
                            for (std::size_t j = 0; j < J; ++j) acc[b][j] += d[j] * r[j];
                        }
                    }
                }
                const std::size_t tap = (kx * k + ky) * k + kz;
                for (std::size_t b = 0; b < cb; ++b) {
                    T s = T(0);
                    for (std::size_t j = 0; j < J; ++j) s += acc[b][j];
                    dw[((co0 + b) * g.cin + ci) * taps + tap] += s;
                }
            }
}

/// dw += correlation of the flattened upstream gradient with the split input.
template <typename T>
void conv_weight_grad(const std::vector<T>& buf, const std::vector<T>& dflat, const ConvGeometry& g, T* dw) {
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t co0 = 0; co0 < g.cout; co0 += kChannelBlock) {
            const std::size_t cb = std::min(kChannelBlock, g.cout - co0);
            if (cb == kChannelBlock) {
                weight_grad_block<T, kChannelBlock>(buf.data(), dflat.data(), g, ci, co0, cb, dw);
            } else {
                weight_grad_block<T, 0>(buf.data(), dflat.data(), g, ci, co0, cb, dw);
            }
        }
}

/// Accumulates the input gradient into split buffer `gbuf` (zeroed, split_size(g, cin)).
template <typename T>
void conv_input_grad(std::vector<T>& gbuf, const std::vector<T>& dflat, const T* w, const ConvGeometry& g) {
    constexpr std::size_t J = kLanes<T>;
    const std::size_t k = g.kk(), taps = g.taps(), pp = padded_plane<T>(g);
    std::vector<T> wt(g.cout);
    alignas(64) T acc[J];
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t kx = 0; kx < k; ++kx)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kz = 0; kz < k; ++kz) {
                    const std::size_t tap = (kx * k + ky) * k + kz;
                    for (std::size_t co = 0; co < g.cout; ++co) wt[co] = w[(co * g.cin + ci) * taps + tap];
                    for (std::size_t ox = 0; ox < g.ox; ++ox) {
                        T* r0 = gbuf.data() + tap_base(g, ci, ox, kx, ky, kz);
                        for (std::size_t j0 = 0; j0 < pp; j0 += J) {
                            T* r = r0 + j0;
                            for (std::size_t j = 0; j < J; ++j) acc[j] = r[j];
                            for (std::size_t co = 0; co < g.cout; ++co) {
                                const T wv = wt[co];
                                const T* d = dflat.data() + (co * g.ox + ox) * pp + j0;
#pragma GCC ivdep
                                for (std::size_t j = 0; j < J; ++j) acc[j] += wv * d[j];
                            }
                            for (std::size_t j = 0; j < J; ++j) r[j] = acc[j];
                        }
                    }
                }
}

/// Geometry of the stride-1 input-gradient convolution: channels swapped,
/// padding k - 1 - pad, output extents equal to the forward input extents.
inline ConvGeometry transposed_geometry(const ConvGeometry& g) {
    ConvGeometry t;
    t.cin = g.cout;
    t.cout = g.cin;
    t.x = g.ox;
    t.y = g.oy;
    t.z = g.oz;
    t.ox = g.x;
    t.oy = g.y;
    t.oz = g.z;
    t.k = g.k;
    t.stride = 1;
    t.pad = g.k - 1 - g.pad;
    return t;
}

/// w[co][ci][tap] -> w'[ci][co][taps - 1 - tap].
template <typename T>
std::vector<T> flip_transpose(const T* w, const ConvGeometry& g) {
    const std::size_t taps = g.taps();
    std::vector<T> wt(g.cout * g.cin * taps);
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t tap = 0; tap < taps; ++tap)
                wt[(ci * g.cout + co) * taps + (taps - 1 - tap)] = w[(co * g.cin + ci) * taps + tap];
    return wt;
}

}  // namespace scseg::detail
