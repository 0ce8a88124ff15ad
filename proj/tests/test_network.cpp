#include <doctest.h>

#include <cmath>
#include <random>

#include "scseg/network.hpp"
#include "scseg/verify.hpp"

using namespace scseg;

namespace {

NetworkConfig small(int in = 2) {
    NetworkConfig c;
    c.in_channels = in;
    c.levels = 2;
    c.base_channels = 4;
    c.feature_dim = 8;
    c.classes = 4;
    c.head_channels = 8;
    return c;
}

template <typename T>
Tensor<T> uniform(const Shape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(u(rng));
    return t;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(small().validate());
    auto c = small();
    c.levels = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small();
    c.base_channels = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small();
    c.feature_dim = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small();
    c.classes = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(NetworkConfig{}.patch_multiple() == 4);
}

TEST_CASE("feature field is full resolution with D channels") {
    auto net = build_network<double>(small(), 1);
    Graph<double> g;
    auto f = extract_features(net.extractor, g, g.constant(uniform<double>({1, 2, 16, 16, 16}, 2)));
    CHECK(f.shape() == Shape{1, 8, 16, 16, 16});
    auto p = classify(net.classifier, g, f);
    CHECK(p.shape() == Shape{1, 4, 16, 16, 16});
    const std::size_t V = 16 * 16 * 16;
    for (std::size_t v = 0; v < V; ++v) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            const double pv = p.value().data[c * V + v];
            CHECK(pv >= 0.0);
            CHECK(pv <= 1.0);
            s += pv;
        }
        REQUIRE(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("default three-level network keeps extents for anisotropic patches") {
    NetworkConfig c;
    c.in_channels = 1;
    auto net = build_network<float>(c, 3);
    Graph<float> g;
    auto f = extract_features(net.extractor, g, g.constant(uniform<float>({2, 1, 8, 12, 16}, 4)));
    CHECK(f.shape() == Shape{2, 16, 8, 12, 16});
}

TEST_CASE("extents not divisible by the level stride are rejected") {
    auto net = build_network<double>(small(), 1);
    Graph<double> g;
    CHECK_THROWS_AS(extract_features(net.extractor, g, g.constant(Tensor<double>({1, 2, 9, 8, 8}))), ShapeError);
    CHECK_THROWS_AS(extract_features(net.extractor, g, g.constant(Tensor<double>({1, 3, 8, 8, 8}))), ShapeError);
    CHECK_THROWS_AS(classify(net.classifier, g, g.constant(Tensor<double>({1, 7, 2, 2, 2}))), ShapeError);
}

TEST_CASE("builds are deterministic given the seed") {
    auto a = build_network<float>(small(), 17), b = build_network<float>(small(), 17), c = build_network<float>(small(), 18);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->value.data == pb[i]->value.data);
        differs = differs || pa[i]->value.data != pc[i]->value.data;
    }
    CHECK(differs);
}

TEST_CASE("initialisation: bounded weights, zero biases, unit gamma") {
    auto net = build_network<double>(small(), 5);
    for (auto* p : net.parameters()) {
        const auto& s = p->value.shape;
        if (p->name.ends_with(".weight")) {
            const double fan_in = static_cast<double>(s[1] * s[2] * s[3] * s[4]);
            const double fan_out = static_cast<double>(s[0] * s[2] * s[3] * s[4]);
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            for (double v : p->value.data) CHECK(std::abs(v) <= bound);
        } else if (p->name.ends_with(".bias") || p->name.ends_with(".beta")) {
            for (double v : p->value.data) CHECK(v == 0.0);
        } else if (p->name.ends_with(".gamma")) {
            for (double v : p->value.data) CHECK(v == 1.0);
        }
    }
}

TEST_CASE("zero input gives a finite feature field") {
    auto net = build_network<double>(small(), 6);
    Graph<double> g;
    auto f = extract_features(net.extractor, g, g.constant(Tensor<double>({1, 2, 8, 8, 8})));
    for (double v : f.value().data) CHECK(std::isfinite(v));
}

TEST_CASE("batch rows are independent") {
    auto net = build_network<double>(small(), 7);
    const auto x = uniform<double>({2, 2, 8, 8, 8}, 8);
    Graph<double> g;
    const auto both = extract_features(net.extractor, g, g.constant(x)).value();
    const std::size_t per = 2 * 512, out_per = 8 * 512;
    for (std::size_t n = 0; n < 2; ++n) {
        Tensor<double> one({1, 2, 8, 8, 8}, std::vector<double>(x.data.begin() + n * per, x.data.begin() + (n + 1) * per));
        Graph<double> g1;
        const auto single = extract_features(net.extractor, g1, g1.constant(one)).value();
        for (std::size_t i = 0; i < out_per; ++i) CHECK(single.data[i] == doctest::Approx(both.data[n * out_per + i]).epsilon(1e-12));
    }
}

TEST_CASE("classifier is voxel local") {
    auto net = build_network<double>(small(), 9);
    auto f = uniform<double>({1, 8, 2, 2, 2}, 10);
    // voxel 5 copies voxel 2
    for (std::size_t c = 0; c < 8; ++c) f.data[c * 8 + 5] = f.data[c * 8 + 2];
    Graph<double> g;
    const auto& p = classify(net.classifier, g, g.constant(f)).value();
    for (std::size_t c = 0; c < 4; ++c) CHECK(p.data[c * 8 + 5] == p.data[c * 8 + 2]);

    // permuting voxels permutes the probabilities identically
    const std::vector<std::size_t> perm{7, 3, 0, 5, 1, 6, 4, 2};
    Tensor<double> fp(f.shape);
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t v = 0; v < 8; ++v) fp.data[c * 8 + v] = f.data[c * 8 + perm[v]];
    Graph<double> g2;
    const auto& pp = classify(net.classifier, g2, g2.constant(fp)).value();
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t v = 0; v < 8; ++v) CHECK(pp.data[c * 8 + v] == p.data[c * 8 + perm[v]]);
}

TEST_CASE("forward is bit-reproducible") {
    auto net = build_network<float>(small(), 11);
    const auto x = uniform<float>({1, 2, 16, 16, 16}, 12);
    Graph<float> a, b;
    CHECK(extract_features(net.extractor, a, a.constant(x)).value().data ==
          extract_features(net.extractor, b, b.constant(x)).value().data);
}

TEST_CASE("add-mode skips build and run") {
    auto c = small();
    c.skip = SkipMode::Add;
    c.levels = 3;
    auto net = build_network<double>(c, 13);
    Graph<double> g;
    CHECK(extract_features(net.extractor, g, g.constant(uniform<double>({1, 2, 8, 8, 8}, 14))).shape() == Shape{1, 8, 8, 8, 8});
    CHECK(skip_mode_from_string(to_string(SkipMode::Add)) == SkipMode::Add);
    CHECK_THROWS_AS(skip_mode_from_string("sum"), std::invalid_argument);
}

TEST_CASE("gradient of sum(features) and of classify(extract) pass grad_check on 8^3") {
    auto net = build_network<double>(small(), 15);
    const auto x = uniform<double>({1, 2, 8, 8, 8}, 16);
    const double fe = verify::grad_check_parameters(
        [&](Graph<double>& g) { return ops::sum(extract_features(net.extractor, g, g.constant(x))); }, net.extractor.parameters());
    CHECK(fe < verify::kGradTolerance);
    const auto w = uniform<double>({1, 4, 8, 8, 8}, 17);
    const double full = verify::grad_check_parameters([&](Graph<double>& g) {
        auto p = classify(net.classifier, g, extract_features(net.extractor, g, g.constant(x)));
        return ops::sum(ops::mul(p, g.constant(w)));
    }, net.parameters());
    CHECK(full < verify::kGradTolerance);
}
