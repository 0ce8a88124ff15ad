#include "scseg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace scseg {

std::map<int, BoundingBox> tissue_bounding_boxes(const LabelMap& labels, int classes) {
    std::map<int, BoundingBox> boxes;
    const Dims& d = labels.dims;
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t z = 0; z < d[2]; ++z) {
                const int c = labels.at(x, y, z);
                if (c == 0 || c >= classes) continue;
                const std::array<std::size_t, 3> p{x, y, z};
                auto [it, fresh] = boxes.try_emplace(c, BoundingBox{p, p});
                if (fresh) continue;
                for (std::size_t a = 0; a < 3; ++a) {
                    it->second.lo[a] = std::min(it->second.lo[a], p[a]);
                    it->second.hi[a] = std::max(it->second.hi[a], p[a]);
                }
            }
    return boxes;
}

std::pair<std::size_t, std::size_t> corner_range(std::size_t lo, std::size_t hi, std::size_t extent, std::size_t P) {
    if (P == 0 || P > extent) throw std::invalid_argument("patch size " + std::to_string(P) + " exceeds extent " + std::to_string(extent));
    const std::size_t first = lo + 1 > P ? lo + 1 - P : 0;
    const std::size_t last = std::min(extent - P, hi);
    return {first, last};
}

namespace {

std::vector<int> resolve_channels(const Volume& v, const std::vector<int>& channels) {
    if (channels.empty()) {
        std::vector<int> all(v.channels);
        for (std::size_t c = 0; c < v.channels; ++c) all[c] = static_cast<int>(c);
        return all;
    }
    for (int c : channels) {
        if (c < 0 || static_cast<std::size_t>(c) >= v.channels) {
            throw std::invalid_argument("channel " + std::to_string(c) + " not in volume with " + std::to_string(v.channels) + " channels");
        }
    }
    return channels;
}

void check_fits(const Volume& v, const LabelMap& l, std::size_t P) {
    if (v.dims != l.dims) throw std::invalid_argument("volume and label dims differ");
    for (std::size_t a = 0; a < 3; ++a) {
        if (P == 0 || P > v.dims[a]) {
            throw std::invalid_argument("patch size " + std::to_string(P) + " exceeds volume extent " + std::to_string(v.dims[a]));
        }
    }
}

void copy_patch(const Volume& v, const LabelMap& l, const std::array<std::size_t, 3>& c, std::size_t P,
                const std::vector<int>& ch, float* image, std::uint8_t* labels) {
    const std::size_t V = voxel_count(v.dims), P3 = P * P * P;
    for (std::size_t k = 0; k < ch.size(); ++k)
        for (std::size_t x = 0; x < P; ++x)
            for (std::size_t y = 0; y < P; ++y) {
                const float* src = v.voxels.data() + static_cast<std::size_t>(ch[k]) * V + voxel_index(v.dims, c[0] + x, c[1] + y, c[2]);
                std::copy(src, src + P, image + k * P3 + (x * P + y) * P);
            }
    for (std::size_t x = 0; x < P; ++x)
        for (std::size_t y = 0; y < P; ++y) {
            const std::uint8_t* src = l.labels.data() + voxel_index(l.dims, c[0] + x, c[1] + y, c[2]);
            std::copy(src, src + P, labels + (x * P + y) * P);
        }
}

}  // namespace

Patch extract_patch(const Volume& volume, const LabelMap& labels, std::array<std::size_t, 3> corner, std::size_t P,
                    const std::vector<int>& channels) {
    check_fits(volume, labels, P);
    for (std::size_t a = 0; a < 3; ++a) {
        if (corner[a] + P > volume.dims[a]) throw std::invalid_argument("patch window leaves the volume");
    }
    const auto ch = resolve_channels(volume, channels);
    Patch p;
    p.corner = corner;
    p.image.resize(ch.size() * P * P * P);
    p.labels.resize(P * P * P);
    copy_patch(volume, labels, corner, P, ch, p.image.data(), p.labels.data());
    return p;
}

Patch sample_patch(const Volume& volume, const LabelMap& labels, const BoundingBox& box, std::size_t P,
                   std::mt19937_64& rng, const std::vector<int>& channels) {
    check_fits(volume, labels, P);
    std::array<std::size_t, 3> corner{};
    for (std::size_t a = 0; a < 3; ++a) {
        if (box.lo[a] > box.hi[a] || box.hi[a] >= volume.dims[a]) throw std::invalid_argument("bounding box outside the volume");
        const auto [first, last] = corner_range(box.lo[a], box.hi[a], volume.dims[a], P);
        corner[a] = std::uniform_int_distribution<std::size_t>(first, last)(rng);
    }
    return extract_patch(volume, labels, corner, P, channels);
}

BatchSampler::BatchSampler(const std::vector<Subject>& subjects, SamplerConfig cfg, std::uint64_t seed)
    : subjects_(&subjects), cfg_(std::move(cfg)), rng_(seed) {
    if (subjects.empty()) throw std::invalid_argument("sampler: no subjects");
    if (cfg_.batch_size == 0) throw std::invalid_argument("sampler: batch_size must be >= 1");
    if (cfg_.strata.empty()) throw std::invalid_argument("sampler: no strata");
    double total = 0.0;
    for (const auto& [pool, w] : cfg_.pool_weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("sampler: pool weights must be >= 0");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("sampler: pool weights must sum to 1");
    for (std::size_t i = 0; i < subjects.size(); ++i) members_[subjects[i].pool].push_back(i);
    double acc = 0.0;
    for (const auto& [pool, w] : cfg_.pool_weights) {
        if (w == 0.0) continue;
        if (members_[pool].empty()) throw std::invalid_argument("sampler: pool '" + to_string(pool) + "' has positive weight but no subjects");
        acc += w;
        pools_.emplace_back(pool, acc);
    }
    pools_.back().second = 1.0;
    int classes = 0;
    for (int s : cfg_.strata) classes = std::max(classes, s + 1);
    for (const auto& s : subjects) {
        check_fits(s.volume, s.labels, cfg_.patch_size);
        boxes_.push_back(tissue_bounding_boxes(s.labels, classes));
    }
}

PatchBatch BatchSampler::next() {
    const auto& subjects = *subjects_;
    const std::size_t P = cfg_.patch_size, P3 = P * P * P;
    const std::size_t ch = cfg_.channels.empty() ? subjects.front().volume.channels : cfg_.channels.size();
    PatchBatch batch;
    batch.images = Tensor<float>(Shape{cfg_.batch_size, ch, P, P, P});
    batch.labels.resize(cfg_.batch_size * P3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t n = 0; n < cfg_.batch_size; ++n) {
        const double u = unit(rng_);
        Pool pool = pools_.back().first;
        for (const auto& [p, cum] : pools_) {
            if (u < cum) {
                pool = p;
                break;
            }
        }
        const auto& members = members_.at(pool);
        const std::size_t si = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng_)];
        const int stratum = cfg_.strata[cursor_++ % cfg_.strata.size()];
        const Subject& s = subjects[si];
        const auto it = boxes_[si].find(stratum);
        // a class absent from this subject falls back to the whole volume
        const BoundingBox box = it != boxes_[si].end()
                                    ? it->second
                                    : BoundingBox{{0, 0, 0}, {s.volume.dims[0] - 1, s.volume.dims[1] - 1, s.volume.dims[2] - 1}};
        Patch p = sample_patch(s.volume, s.labels, box, P, rng_, cfg_.channels);
        if (p.image.size() != ch * P3) throw std::invalid_argument("sampler: subjects differ in channel count");
        std::copy(p.image.begin(), p.image.end(), batch.images.data.begin() + static_cast<std::ptrdiff_t>(n * ch * P3));
        std::copy(p.labels.begin(), p.labels.end(), batch.labels.begin() + static_cast<std::ptrdiff_t>(n * P3));
        batch.provenance.push_back({si, pool, stratum, p.corner});
    }
    return batch;
}

PatchBatch assemble_batch(const std::vector<Subject>& subjects, const SamplerConfig& cfg, std::uint64_t seed) {
    BatchSampler sampler(subjects, cfg, seed);
    return sampler.next();
}

}  // namespace scseg
