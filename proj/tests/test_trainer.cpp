#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <unistd.h>

#include "scseg/config.hpp"
#include "scseg/trainer.hpp"

using namespace scseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("scseg_trainer_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<Subject> phantoms(std::size_t n, double noise, Dims dims = {16, 16, 16}) {
    std::vector<Subject> out;
    for (std::size_t i = 0; i < n; ++i) {
        PhantomSpec ps;
        ps.dims = dims;
        ps.noise_sigma = noise;
        ps.age_t = n == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1);
        ps.seed = 100 + i;
        auto [v, l] = generate_phantom(ps);
        out.push_back({"p" + std::to_string(i), std::move(v), std::move(l), i % 2 ? Pool::Uncorrected : Pool::Clean, ps.age_t});
    }
    return out;
}

TrainConfig small_config(std::uint64_t seed = 1) {
    TrainConfig c;
    c.network.levels = 2;
    c.network.base_channels = 4;
    c.network.feature_dim = 8;
    c.network.head_channels = 8;
    c.proxies_per_class = 3;
    c.patch_size = 8;
    c.batch_size = 2;
    c.steps = 20;
    c.lr = 1e-3;
    c.init_seed = seed;
    c.sampling_seed = seed + 1000;
    return c;
}

std::vector<std::vector<float>> values(Model& m) {
    std::vector<std::vector<float>> out;
    for (auto* p : m.parameters()) out.push_back(p->value.data);
    return out;
}

template <typename T>
Parameter<T> param(const char* name, Tensor<T> value, Tensor<T> grad) {
    Parameter<T> p(name, std::move(value));
    p.grad = std::move(grad);
    return p;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("adam first step moves every parameter by about lr against its gradient") {
    auto p = param<double>("w", Tensor<double>({4}, {1.0, -2.0, 0.5, 3.0}), Tensor<double>({4}, {0.3, -7.0, 1e-3, 0.0}));
    OptimizerState<double> st;
    adam_step<double>({&p}, st, AdamConfig{});
    CHECK(p.value.data[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-9));
    CHECK(p.value.data[1] == doctest::Approx(-2.0 + 1e-4).epsilon(1e-9));
    CHECK(p.value.data[2] == doctest::Approx(0.5 - 1e-4 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-9));
    CHECK(p.value.data[3] == 3.0);
    CHECK(st.step == 1);

    // second step with a constant gradient: m_hat / sqrt(v_hat) is still 1
    adam_step<double>({&p}, st, AdamConfig{});
    CHECK(p.value.data[0] == doctest::Approx(1.0 - 2e-4).epsilon(1e-9));
}

TEST_CASE("adam leaves parameters with zero gradient unchanged") {
    auto p = param<float>("b", Tensor<float>({3}, {1.0f, 2.0f, 3.0f}), Tensor<float>({3}));
    OptimizerState<float> st;
    for (int i = 0; i < 5; ++i) adam_step<float>({&p}, st, AdamConfig{});
    CHECK(p.value.data == std::vector<float>{1.0f, 2.0f, 3.0f});
}

TEST_CASE("adam refuses non-finite gradients and names the parameter") {
    auto a = param<float>("a", Tensor<float>({1}, 1.0f), Tensor<float>({1}, 0.5f));
    auto b = param<float>("layer.weight", Tensor<float>({2}, 1.0f), Tensor<float>({2}, {0.0f, std::numeric_limits<float>::quiet_NaN()}));
    OptimizerState<float> st;
    try {
        adam_step<float>({&a, &b}, st, AdamConfig{});
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
    }
    CHECK(a.value.data[0] == 1.0f);  // nothing was updated
    b.grad.data[1] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(adam_step<float>({&a, &b}, st, AdamConfig{}), NonFiniteError);
}

TEST_CASE("training config validation") {
    CHECK_NOTHROW(small_config().validate());
    auto c = small_config();
    c.patch_size = 6;  // not a multiple of 4 = 2^levels
    c.network.levels = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.pool_proportions = {{Pool::Clean, 0.4}};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.tiling_overlap = 8;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(small_config().overlap() == 4);
}

TEST_CASE("training is deterministic and seeds matter") {
    const auto subjects = phantoms(4, 0.03);
    auto a = train(small_config(), subjects), b = train(small_config(), subjects), c = train(small_config(2), subjects);
    const auto va = values(a.model), vb = values(b.model), vc = values(c.model);
    bool differs = false;
    for (std::size_t i = 0; i < va.size(); ++i) {
        CHECK(bit_equal(va[i], vb[i]));
        differs = differs || !bit_equal(va[i], vc[i]);
    }
    CHECK(differs);
    REQUIRE(a.log.size() == 20);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].step == i + 1);
        CHECK(a.log[i].total == b.log[i].total);
        CHECK(a.log[i].total == doctest::Approx(a.log[i].ce + a.log[i].ctr).epsilon(1e-6));
    }
}

TEST_CASE("lambda = 0 leaves the bank untouched and the network on the cross-entropy trajectory") {
    const auto subjects = phantoms(4, 0.03);
    auto cfg = small_config();
    cfg.lambda_ctr = 0.0;
    auto run = train(cfg, subjects);
    const auto fresh = init_model(cfg);
    CHECK(bit_equal(run.model.bank.proxies.value.data, fresh.bank.proxies.value.data));

    // the bank size only affects the contrastive term, so the network must not notice it
    cfg.proxies_per_class = 7;
    auto other = train(cfg, subjects);
    auto pa = run.model.net.parameters(), pb = other.model.net.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i]->value.data, pb[i]->value.data));
    for (std::size_t i = 0; i < run.log.size(); ++i) CHECK(run.log[i].total == run.log[i].ce);
}

TEST_CASE("loss decreases on noiseless phantoms") {
    const auto subjects = phantoms(10, 0.0);
    for (std::uint64_t seed : {1, 2, 3}) {
        auto cfg = small_config(seed);
        cfg.steps = 200;
        const auto log = train(cfg, subjects).log;
        auto window = [&](std::size_t from) {
            double s = 0.0;
            for (std::size_t i = from; i < from + 20; ++i) s += log[i].total;
            return s / 20.0;
        };
        CHECK(window(180) < window(0));
        CHECK(window(180) < 0.8 * window(0));
    }
}

TEST_CASE("train writes its artefacts and the checkpoint round-trips bit-exactly") {
    TempDir tmp;
    const auto subjects = phantoms(2, 0.03);
    auto cfg = small_config();
    cfg.steps = 6;
    cfg.checkpoint_every = 3;
    std::size_t calls = 0;
    TrainOptions opts;
    opts.out_dir = tmp.path / "run";
    opts.on_step = [&](const LogRow&) { ++calls; };
    auto res = train(cfg, subjects, opts);
    CHECK(calls == 6);
    CHECK(fs::exists(tmp.path / "run" / "config.json"));
    CHECK(fs::exists(tmp.path / "run" / "checkpoint" / "params.bin"));
    std::ifstream log(tmp.path / "run" / "log.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) ++lines;
    CHECK(lines == 7);

    auto loaded = load_checkpoint(tmp.path / "run" / "checkpoint");
    CHECK(loaded.step == 6);
    CHECK(to_json(loaded.config) == to_json(res.model.config));
    const auto va = values(res.model), vb = values(loaded);
    REQUIRE(va.size() == vb.size());
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(bit_equal(va[i], vb[i]));

    // save again: identical bytes
    save_checkpoint(tmp.path / "again", loaded);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(slurp(tmp.path / "again" / "params.bin") == slurp(tmp.path / "run" / "checkpoint" / "params.bin"));

    // a truncated payload is rejected
    fs::resize_file(tmp.path / "again" / "params.bin", fs::file_size(tmp.path / "again" / "params.bin") - 4);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "again"), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "missing"), std::runtime_error);
}

TEST_CASE("train rejects bad inputs") {
    const auto subjects = phantoms(2, 0.03);
    auto cfg = small_config();
    cfg.channels = {2};
    CHECK_THROWS_AS(train(cfg, subjects), std::invalid_argument);
    CHECK_THROWS_AS(train(small_config(), {}), std::invalid_argument);
    cfg.channels = {1};
    cfg.steps = 2;
    CHECK(train(cfg, subjects).model.config.network.in_channels == 1);
}

TEST_CASE("tile corners cover the extent") {
    CHECK(tile_corners(48, 32, 16) == std::vector<std::size_t>{0, 16});
    CHECK(tile_corners(50, 32, 16) == std::vector<std::size_t>{0, 16, 18});
    CHECK(tile_corners(32, 32, 0) == std::vector<std::size_t>{0});
    CHECK_THROWS_AS(tile_corners(10, 12, 0), std::invalid_argument);
    CHECK_THROWS_AS(tile_corners(40, 8, 8), std::invalid_argument);
    for (std::size_t E = 4; E <= 30; ++E)
        for (std::size_t P = 4; P <= E; P += 4)
            for (std::size_t ov = 0; ov < P; ov += 2) {
                const auto c = tile_corners(E, P, ov);
                std::vector<int> covered(E, 0);
                for (std::size_t s : c) {
                    CHECK(s + P <= E);
                    for (std::size_t i = s; i < s + P; ++i) covered[i] = 1;
                }
                CHECK(std::count(covered.begin(), covered.end(), 1) == static_cast<long>(E));
                CHECK(std::is_sorted(c.begin(), c.end()));
            }
}

TEST_CASE("argmax labels") {
    std::mt19937_64 rng(1);
    const Dims d{3, 4, 5};
    const std::size_t V = 60, C = 4;
    std::vector<float> p(C * V);
    for (auto& v : p) v = static_cast<float>(rng() % 5);  // plenty of ties
    const auto lab = argmax_labels(p, d, C);
    for (std::size_t v = 0; v < V; ++v) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (p[c * V + v] > p[best * V + v]) best = c;
        CHECK(lab.labels[v] == best);
    }
    CHECK_THROWS_AS(argmax_labels(p, {3, 4, 4}, C), std::invalid_argument);
}

TEST_CASE("tiled prediction is a probability field and averaging does not change a single window") {
    const auto subjects = phantoms(1, 0.03);
    auto cfg = small_config();
    cfg.network.in_channels = 2;
    auto model = init_model(cfg);
    const auto whole = predict_volume(model, subjects[0].volume, 0, true);
    const std::size_t V = 16 * 16 * 16;
    CHECK(whole.probs.size() == 4 * V);
    CHECK(whole.features.size() == 8 * V);
    for (std::size_t v = 0; v < V; v += 37) {
        float s = 0.0f;
        for (std::size_t c = 0; c < 4; ++c) s += whole.probs[c * V + v];
        CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
    }
    // patch 16 = volume: overlap is irrelevant and the field equals one forward pass
    cfg.patch_size = 16;
    auto big = init_model(cfg);
    const auto a = predict_volume(big, subjects[0].volume, 0), b = predict_volume(big, subjects[0].volume, 8);
    CHECK(a.probs == b.probs);
    CHECK(predict_volume(model, subjects[0].volume, 4).probs == predict_volume(model, subjects[0].volume, 4).probs);
}

TEST_CASE("evaluation reports every subject and foreground class") {
    const auto subjects = phantoms(2, 0.03);
    auto cfg = small_config();
    cfg.steps = 30;
    auto res = train(cfg, subjects);
    const auto reports = evaluate_model(res.model, subjects, 4);
    REQUIRE(reports.size() == 2);
    for (const auto& r : reports) {
        CHECK(r.classes.size() == 3);
        for (const auto& c : r.classes) {
            CHECK(c.dsc >= 0.0);
            CHECK(c.dsc <= 1.0);
        }
    }
    const double margin = feature_separation_margin(res.model, subjects, 4);
    CHECK(std::isfinite(margin));
    CHECK(std::abs(margin) <= 2.0);
}
