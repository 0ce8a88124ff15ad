#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "scseg/data.hpp"
#include "scseg/tensor.hpp"

namespace scseg {

/// Inclusive voxel bounds.
struct BoundingBox {
    std::array<std::size_t, 3> lo{0, 0, 0};
    std::array<std::size_t, 3> hi{0, 0, 0};
    bool operator==(const BoundingBox&) const = default;
};

/// Tightest box per foreground class (1..C-1) present in the map.
std::map<int, BoundingBox> tissue_bounding_boxes(const LabelMap& labels, int classes);

struct Patch {
    std::vector<float> image;          // [channels.size(), P, P, P]
    std::vector<std::uint8_t> labels;  // [P, P, P]
    std::array<std::size_t, 3> corner{0, 0, 0};
};

/// Inclusive range of patch corners along one axis whose window [c, c + P)
/// intersects [lo, hi] and lies inside [0, extent).
std::pair<std::size_t, std::size_t> corner_range(std::size_t lo, std::size_t hi, std::size_t extent, std::size_t P);

/// Corner drawn uniformly (independently per axis) from the legal corners for `box`.
/// `channels` selects volume channels in order; empty means all.
/// Throws std::invalid_argument when P exceeds any volume extent.
Patch sample_patch(const Volume& volume, const LabelMap& labels, const BoundingBox& box, std::size_t P,
                   std::mt19937_64& rng, const std::vector<int>& channels = {});

/// Copy of the window at `corner`.
Patch extract_patch(const Volume& volume, const LabelMap& labels, std::array<std::size_t, 3> corner, std::size_t P,
                    const std::vector<int>& channels = {});

struct Provenance {
    std::size_t subject = 0;  // index into the subject list
    Pool pool = Pool::Clean;
    int stratum = 0;          // foreground class whose box was used
    std::array<std::size_t, 3> corner{0, 0, 0};
};

struct PatchBatch {
    Tensor<float> images;              // [N, channels, P, P, P]
    std::vector<std::uint8_t> labels;  // N * P^3
    std::vector<Provenance> provenance;
};

struct SamplerConfig {
    std::size_t patch_size = 32;
    std::size_t batch_size = 2;
    std::map<Pool, double> pool_weights{{Pool::Clean, 0.5}, {Pool::Uncorrected, 0.5}};
    std::vector<int> strata{1, 2, 3};  // foreground classes cycled round-robin
    std::vector<int> channels;         // empty = all volume channels
};

/// Owns the random stream and the round-robin cursor; deterministic given its seed.
class BatchSampler {
public:
    BatchSampler(const std::vector<Subject>& subjects, SamplerConfig cfg, std::uint64_t seed);

    /// Per item: pool by weight, subject uniformly within the pool, next stratum
    /// in round-robin order, then sample_patch from that class's box.
    PatchBatch next();

    const SamplerConfig& config() const { return cfg_; }
    std::size_t cursor() const { return cursor_; }

private:
    const std::vector<Subject>* subjects_;
    SamplerConfig cfg_;
    std::mt19937_64 rng_;
    std::size_t cursor_ = 0;
    std::vector<std::pair<Pool, double>> pools_;            // positive weights, cumulative
    std::map<Pool, std::vector<std::size_t>> members_;
    std::vector<std::map<int, BoundingBox>> boxes_;
};

/// One batch from a fresh sampler (convenience for single draws).
PatchBatch assemble_batch(const std::vector<Subject>& subjects, const SamplerConfig& cfg, std::uint64_t seed);

}  // namespace scseg
