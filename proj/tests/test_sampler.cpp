#include <doctest.h>

#include <cmath>
#include <random>

#include "scseg/sampler.hpp"

using namespace scseg;

namespace {

BoundingBox scan_box(const LabelMap& m, int cls) {
    BoundingBox b{{SIZE_MAX, SIZE_MAX, SIZE_MAX}, {0, 0, 0}};
    for (std::size_t x = 0; x < m.dims[0]; ++x)
        for (std::size_t y = 0; y < m.dims[1]; ++y)
            for (std::size_t z = 0; z < m.dims[2]; ++z)
                if (m.at(x, y, z) == cls) {
                    const std::size_t p[3] = {x, y, z};
                    for (int a = 0; a < 3; ++a) {
                        b.lo[a] = std::min(b.lo[a], p[a]);
                        b.hi[a] = std::max(b.hi[a], p[a]);
                    }
                }
    return b;
}

// volume whose channel c holds c * 1000 + flat index, labels random in [0, classes)
Subject make_subject(Dims d, std::uint64_t seed, Pool pool, int classes = 4) {
    Subject s;
    s.id = "s" + std::to_string(seed);
    s.pool = pool;
    s.volume = Volume(d, 2, {1.0, 1.0, 1.0});
    const std::size_t V = voxel_count(d);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < V; ++i) s.volume.voxels[c * V + i] = static_cast<float>(c * 1000 + i);
    s.labels = LabelMap(d);
    std::mt19937_64 rng(seed);
    for (auto& l : s.labels.labels) l = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(classes));
    return s;
}

}  // namespace

TEST_CASE("bounding boxes") {
    LabelMap m({5, 6, 7});
    m.at(2, 3, 4) = 1;
    auto boxes = tissue_bounding_boxes(m, 4);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes.at(1) == BoundingBox{{2, 3, 4}, {2, 3, 4}});

    LabelMap full({3, 4, 5}, 2);
    CHECK(tissue_bounding_boxes(full, 4).at(2) == BoundingBox{{0, 0, 0}, {2, 3, 4}});
    CHECK(tissue_bounding_boxes(LabelMap({3, 3, 3}), 4).empty());

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        LabelMap r({4 + rng() % 5, 4 + rng() % 5, 4 + rng() % 5});
        for (auto& l : r.labels) l = static_cast<std::uint8_t>(rng() % 40 == 0 ? 1 + rng() % 3 : 0);
        const auto got = tissue_bounding_boxes(r, 4);
        for (int c = 1; c < 4; ++c) {
            const bool present = std::count(r.labels.begin(), r.labels.end(), c) > 0;
            REQUIRE(got.count(c) == static_cast<std::size_t>(present));
            if (!present) continue;
            const auto& b = got.at(c);
            CHECK(b == scan_box(r, c));
            // minimal: every face of the box touches the class
            for (int a = 0; a < 3; ++a)
                for (std::size_t face : {b.lo[a], b.hi[a]}) {
                    bool touched = false;
                    for (std::size_t x = b.lo[0]; x <= b.hi[0]; ++x)
                        for (std::size_t y = b.lo[1]; y <= b.hi[1]; ++y)
                            for (std::size_t z = b.lo[2]; z <= b.hi[2]; ++z) {
                                const std::size_t p[3] = {x, y, z};
                                touched = touched || (p[a] == face && r.at(x, y, z) == c);
                            }
                    CHECK(touched);
                }
        }
    }
    // labels >= classes are ignored
    LabelMap big({2, 2, 2}, 7);
    CHECK(tissue_bounding_boxes(big, 4).empty());
}

TEST_CASE("corner range") {
    CHECK(corner_range(10, 20, 48, 8) == std::pair<std::size_t, std::size_t>{3, 20});
    CHECK(corner_range(0, 0, 10, 4) == std::pair<std::size_t, std::size_t>{0, 0});
    CHECK(corner_range(9, 9, 10, 4) == std::pair<std::size_t, std::size_t>{6, 6});
    CHECK(corner_range(0, 9, 10, 10) == std::pair<std::size_t, std::size_t>{0, 0});
    CHECK_THROWS_AS(corner_range(0, 3, 4, 5), std::invalid_argument);
    CHECK_THROWS_AS(corner_range(0, 3, 4, 0), std::invalid_argument);
    // brute-force enumeration of legal corners
    for (std::size_t E = 1; E <= 9; ++E)
        for (std::size_t P = 1; P <= E; ++P)
            for (std::size_t lo = 0; lo < E; ++lo)
                for (std::size_t hi = lo; hi < E; ++hi) {
                    std::vector<std::size_t> legal;
                    for (std::size_t c = 0; c + P <= E; ++c)
                        if (c <= hi && c + P > lo) legal.push_back(c);
                    const auto [a, b] = corner_range(lo, hi, E, P);
                    REQUIRE(!legal.empty());
                    CHECK(a == legal.front());
                    CHECK(b == legal.back());
                    CHECK(legal.size() == b - a + 1);
                }
}

TEST_CASE("extracted patches copy the window") {
    const auto s = make_subject({6, 7, 8}, 2, Pool::Clean);
    const auto p = extract_patch(s.volume, s.labels, {1, 2, 3}, 4);
    CHECK(p.image.size() == 2 * 64);
    for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t z = 0; z < 4; ++z) {
                const std::size_t i = (x * 4 + y) * 4 + z;
                CHECK(p.labels[i] == s.labels.at(x + 1, y + 2, z + 3));
                CHECK(p.image[i] == s.volume.at(0, x + 1, y + 2, z + 3));
                CHECK(p.image[64 + i] == s.volume.at(1, x + 1, y + 2, z + 3));
            }
    const auto only1 = extract_patch(s.volume, s.labels, {1, 2, 3}, 4, {1});
    CHECK(std::vector<float>(p.image.begin() + 64, p.image.end()) == only1.image);
    CHECK(extract_patch(s.volume, s.labels, {0, 0, 0}, 4, {1, 0}).image[0] == 1000.0f);
    CHECK_THROWS_AS(extract_patch(s.volume, s.labels, {3, 0, 0}, 4), std::invalid_argument);
    CHECK_THROWS_AS(extract_patch(s.volume, s.labels, {0, 0, 0}, 7), std::invalid_argument);
    CHECK_THROWS_AS(extract_patch(s.volume, s.labels, {0, 0, 0}, 4, {2}), std::invalid_argument);
}

TEST_CASE("patch equal to the volume has a single corner") {
    const auto s = make_subject({5, 5, 5}, 3, Pool::Clean);
    std::mt19937_64 rng(0);
    const auto p = sample_patch(s.volume, s.labels, BoundingBox{{1, 1, 1}, {3, 3, 3}}, 5, rng);
    CHECK(p.corner == std::array<std::size_t, 3>{0, 0, 0});
    CHECK(p.labels == s.labels.labels);
}

TEST_CASE("corners are uniform over the legal range and patches intersect the box") {
    const auto s = make_subject({20, 20, 20}, 4, Pool::Clean);
    const BoundingBox box{{8, 2, 15}, {10, 4, 19}};
    const std::size_t P = 6, T = 20000;
    std::mt19937_64 rng(5);
    std::array<std::map<std::size_t, std::size_t>, 3> freq;
    for (std::size_t t = 0; t < T; ++t) {
        const auto p = sample_patch(s.volume, s.labels, box, P, rng);
        for (int a = 0; a < 3; ++a) {
            CHECK(p.corner[a] + P <= 20);
            CHECK(p.corner[a] <= box.hi[a]);
            CHECK(p.corner[a] + P > box.lo[a]);
            ++freq[a][p.corner[a]];
        }
    }
    for (int a = 0; a < 3; ++a) {
        const auto [lo, hi] = corner_range(box.lo[a], box.hi[a], 20, P);
        const std::size_t K = hi - lo + 1;
        CHECK(freq[a].size() == K);
        const double p = 1.0 / static_cast<double>(K), sd = std::sqrt(T * p * (1 - p));
        for (const auto& [c, n] : freq[a]) CHECK(std::abs(static_cast<double>(n) - T * p) <= 4.0 * sd);
    }
}

TEST_CASE("batch sampler: pool proportions, round-robin strata, determinism") {
    std::vector<Subject> subjects;
    for (std::uint64_t i = 0; i < 6; ++i) subjects.push_back(make_subject({10, 10, 10}, 10 + i, i < 4 ? Pool::Clean : Pool::Uncorrected));
    SamplerConfig cfg;
    cfg.patch_size = 4;
    cfg.batch_size = 3;
    cfg.pool_weights = {{Pool::Clean, 0.7}, {Pool::Uncorrected, 0.3}};

    BatchSampler sampler(subjects, cfg, 42);
    std::size_t clean = 0, items = 0;
    std::map<int, std::size_t> strata;
    std::vector<std::size_t> per_subject(6, 0);
    for (int b = 0; b < 2000; ++b) {
        const auto batch = sampler.next();
        CHECK(batch.images.shape == Shape{3, 2, 4, 4, 4});
        CHECK(batch.labels.size() == 3 * 64);
        for (const auto& pv : batch.provenance) {
            CHECK(subjects[pv.subject].pool == pv.pool);
            clean += pv.pool == Pool::Clean;
            ++strata[pv.stratum];
            ++per_subject[pv.subject];
            ++items;
        }
    }
    CHECK(sampler.cursor() == items);
    // round robin over {1, 2, 3} with 6000 items gives exact equality
    CHECK(strata == std::map<int, std::size_t>{{1, 2000}, {2, 2000}, {3, 2000}});
    const double sd = std::sqrt(items * 0.7 * 0.3);
    CHECK(std::abs(static_cast<double>(clean) - 0.7 * items) <= 4.0 * sd);
    // subjects uniform within their pool
    for (std::size_t i = 0; i < 6; ++i) {
        const double p = i < 4 ? 0.7 / 4 : 0.3 / 2;
        CHECK(std::abs(static_cast<double>(per_subject[i]) - p * items) <= 4.0 * std::sqrt(items * p * (1 - p)));
    }

    // the batch contents match the recorded provenance
    const auto batch = assemble_batch(subjects, cfg, 7);
    for (std::size_t n = 0; n < 3; ++n) {
        const auto& pv = batch.provenance[n];
        const auto p = extract_patch(subjects[pv.subject].volume, subjects[pv.subject].labels, pv.corner, 4);
        CHECK(std::equal(p.image.begin(), p.image.end(), batch.images.data.begin() + n * 128));
        CHECK(std::equal(p.labels.begin(), p.labels.end(), batch.labels.begin() + n * 64));
    }
    CHECK(assemble_batch(subjects, cfg, 7).images.data == batch.images.data);
    CHECK(assemble_batch(subjects, cfg, 8).images.data != batch.images.data);
}

TEST_CASE("clean-only pool never draws uncorrected subjects") {
    std::vector<Subject> subjects{make_subject({8, 8, 8}, 1, Pool::Clean), make_subject({8, 8, 8}, 2, Pool::Uncorrected)};
    SamplerConfig cfg;
    cfg.patch_size = 4;
    cfg.pool_weights = {{Pool::Clean, 1.0}, {Pool::Uncorrected, 0.0}};
    BatchSampler sampler(subjects, cfg, 3);
    for (int b = 0; b < 200; ++b)
        for (const auto& pv : sampler.next().provenance) CHECK(pv.subject == 0);
}

TEST_CASE("channel selection and strata absent from a subject") {
    std::vector<Subject> subjects{make_subject({8, 8, 8}, 1, Pool::Clean, 2)};  // labels only 0 and 1
    SamplerConfig cfg;
    cfg.patch_size = 4;
    cfg.batch_size = 4;
    cfg.pool_weights = {{Pool::Clean, 1.0}};
    cfg.channels = {1};
    const auto batch = assemble_batch(subjects, cfg, 0);
    CHECK(batch.images.shape == Shape{4, 1, 4, 4, 4});
    for (float v : batch.images.data) CHECK(v >= 1000.0f);
    for (const auto& pv : batch.provenance)
        for (std::size_t c : pv.corner) CHECK(c <= 4);
}

TEST_CASE("sampler configuration errors") {
    std::vector<Subject> clean{make_subject({8, 8, 8}, 1, Pool::Clean)};
    SamplerConfig cfg;
    cfg.patch_size = 4;
    CHECK_THROWS_AS(BatchSampler(clean, cfg, 0), std::invalid_argument);  // uncorrected pool empty
    CHECK_THROWS_AS(BatchSampler({}, cfg, 0), std::invalid_argument);
    cfg.pool_weights = {{Pool::Clean, 0.6}};
    CHECK_THROWS_AS(BatchSampler(clean, cfg, 0), std::invalid_argument);
    cfg.pool_weights = {{Pool::Clean, 1.0}};
    cfg.patch_size = 9;
    CHECK_THROWS_AS(BatchSampler(clean, cfg, 0), std::invalid_argument);
    cfg.patch_size = 4;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(BatchSampler(clean, cfg, 0), std::invalid_argument);
}
