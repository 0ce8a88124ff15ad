#include "scseg/network.hpp"

#include <cmath>
#include <stdexcept>

namespace scseg {

std::string to_string(SkipMode mode) { return mode == SkipMode::Concat ? "concat" : "add"; }

SkipMode skip_mode_from_string(const std::string& s) {
    if (s == "concat") return SkipMode::Concat;
    if (s == "add") return SkipMode::Add;
    throw std::invalid_argument("unknown skip mode '" + s + "' (expected concat|add)");
}

void NetworkConfig::validate() const {
    auto check = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("network config: ") + what);
    };
    check(in_channels >= 1, "in_channels must be >= 1");
    check(levels >= 2 && levels <= 6, "levels must be in [2, 6]");
    check(base_channels >= 4, "base_channels must be >= 4");
    check(feature_dim >= 2, "feature_dim must be >= 2");
    check(classes >= 2 && classes <= 255, "classes must be in [2, 255]");
    check(head_channels >= 1, "head_channels must be >= 1");
}

namespace {

template <typename T>
ConvUnit<T> make_unit(const std::string& name, int cin, int cout, int k, int stride, bool normalise, bool activate,
                      std::mt19937_64& rng) {
    ConvUnit<T> u;
    const auto ks = static_cast<std::size_t>(k);
    const double taps = static_cast<double>(k * k * k);
    const double bound = std::sqrt(6.0 / (cin * taps + cout * taps));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(Shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), ks, ks, ks});
    for (auto& v : w.data) v = static_cast<T>(dist(rng));
    u.weight = Parameter<T>(name + ".weight", std::move(w));
    const Shape cshape{static_cast<std::size_t>(cout)};
    if (normalise) {
        u.gamma = Parameter<T>(name + ".gamma", Tensor<T>(cshape, T(1)));
        u.beta = Parameter<T>(name + ".beta", Tensor<T>(cshape, T(0)));
    } else {
        u.bias = Parameter<T>(name + ".bias", Tensor<T>(cshape, T(0)));
    }
    u.stride = stride;
    u.padding = k / 2;
    u.normalise = normalise;
    u.activate = activate;
    return u;
}

}  // namespace

template <typename T>
Var<T> ConvUnit<T>::forward(Graph<T>& g, Var<T> x) {
    Var<T> w = g.parameter(weight);
    Var<T> b = normalise ? Var<T>() : g.parameter(bias);
    Var<T> y = ops::conv3d(x, w, b, stride, padding);
    if (normalise) y = ops::instance_norm(y, g.parameter(gamma), g.parameter(beta));
    if (activate) y = ops::relu(y);
    return y;
}

template <typename T>
void ConvUnit<T>::collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    if (normalise) {
        out.push_back(&gamma);
        out.push_back(&beta);
    } else {
        out.push_back(&bias);
    }
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(const NetworkConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    const int L = cfg.levels;
    encoder_.push_back(make_unit<T>("enc0", cfg.in_channels, cfg.channels_at(0), 3, 1, true, true, rng));
    for (int l = 1; l < L; ++l) {
        const auto tag = std::to_string(l);
        down_.push_back(make_unit<T>("down" + tag, cfg.channels_at(l - 1), cfg.channels_at(l), 3, 2, true, true, rng));
        encoder_.push_back(make_unit<T>("enc" + tag, cfg.channels_at(l), cfg.channels_at(l), 3, 1, true, true, rng));
    }
    decoder_.resize(static_cast<std::size_t>(L - 1));
    if (cfg.skip == SkipMode::Add) up_match_.resize(static_cast<std::size_t>(L - 1));
    for (int l = L - 2; l >= 0; --l) {
        const auto tag = std::to_string(l);
        const auto i = static_cast<std::size_t>(l);
        if (cfg.skip == SkipMode::Concat) {
            decoder_[i] = make_unit<T>("dec" + tag, cfg.channels_at(l + 1) + cfg.channels_at(l), cfg.channels_at(l), 3, 1,
                                       true, true, rng);
        } else {
            up_match_[i] =
                make_unit<T>("up" + tag, cfg.channels_at(l + 1), cfg.channels_at(l), 3, 1, true, true, rng);
            decoder_[i] = make_unit<T>("dec" + tag, cfg.channels_at(l), cfg.channels_at(l), 3, 1, true, true, rng);
        }
    }
    output_ = make_unit<T>("features", cfg.channels_at(0), cfg.feature_dim, 3, 1, false, false, rng);
}

template <typename T>
Var<T> FeatureExtractor<T>::forward(Graph<T>& g, Var<T> patch) {
    const Shape& s = patch.shape();
    if (s.size() != 5) throw ShapeError("extract_features: patch must be [N,C,X,Y,Z], got " + to_string(s));
    if (s[1] != static_cast<std::size_t>(cfg_.in_channels)) {
        throw ShapeError("extract_features: patch has " + std::to_string(s[1]) + " channels, network expects " +
                         std::to_string(cfg_.in_channels));
    }
    const std::size_t m = cfg_.patch_multiple();
    for (std::size_t a = 2; a < 5; ++a) {
        if (s[a] == 0 || s[a] % m != 0) {
            throw ShapeError("extract_features: patch extents " + to_string(s) + " must be divisible by " +
                             std::to_string(m));
        }
    }
    const auto L = static_cast<std::size_t>(cfg_.levels);
    std::vector<Var<T>> skips(L);
    Var<T> h = encoder_[0].forward(g, patch);
    skips[0] = h;
    for (std::size_t l = 1; l < L; ++l) {
        h = down_[l - 1].forward(g, h);
        h = encoder_[l].forward(g, h);
        skips[l] = h;
    }
    for (std::size_t l = L - 1; l-- > 0;) {
        Var<T> up = ops::upsample_nearest2(h);
        if (cfg_.skip == SkipMode::Concat) {
            h = decoder_[l].forward(g, ops::concat_channels(up, skips[l]));
        } else {
            h = decoder_[l].forward(g, ops::add(up_match_[l].forward(g, up), skips[l]));
        }
    }
    return output_.forward(g, h);
}

template <typename T>
std::vector<Parameter<T>*> FeatureExtractor<T>::parameters() {
    std::vector<Parameter<T>*> out;
    encoder_[0].collect(out);
    for (std::size_t l = 1; l < encoder_.size(); ++l) {
        down_[l - 1].collect(out);
        encoder_[l].collect(out);
    }
    for (std::size_t l = decoder_.size(); l-- > 0;) {
        if (!up_match_.empty()) up_match_[l].collect(out);
        decoder_[l].collect(out);
    }
    output_.collect(out);
    return out;
}

template <typename T>
Classifier<T>::Classifier(const NetworkConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    layers_.push_back(make_unit<T>("head0", cfg.feature_dim, cfg.head_channels, 1, 1, false, true, rng));
    layers_.push_back(make_unit<T>("head1", cfg.head_channels, cfg.head_channels, 1, 1, false, true, rng));
    layers_.push_back(make_unit<T>("head2", cfg.head_channels, cfg.classes, 1, 1, false, false, rng));
}

template <typename T>
Var<T> Classifier<T>::forward(Graph<T>& g, Var<T> features) {
    const Shape& s = features.shape();
    if (s.size() != 5 || s[1] != static_cast<std::size_t>(cfg_.feature_dim)) {
        throw ShapeError("classify: expected [N," + std::to_string(cfg_.feature_dim) + ",X,Y,Z] features, got " +
                         to_string(s));
    }
    Var<T> h = features;
    for (auto& layer : layers_) h = layer.forward(g, h);
    return ops::softmax(h, 1);
}

template <typename T>
std::vector<Parameter<T>*> Classifier<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& layer : layers_) layer.collect(out);
    return out;
}

template <typename T>
std::vector<Parameter<T>*> SegmentationNetwork<T>::parameters() {
    auto out = extractor.parameters();
    for (auto* p : classifier.parameters()) out.push_back(p);
    return out;
}

template <typename T>
SegmentationNetwork<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SegmentationNetwork<T> net;
    net.config = cfg;
    net.extractor = FeatureExtractor<T>(cfg, rng);
    net.classifier = Classifier<T>(cfg, rng);
    return net;
}

template struct ConvUnit<float>;
template struct ConvUnit<double>;
template class FeatureExtractor<float>;
template class FeatureExtractor<double>;
template class Classifier<float>;
template class Classifier<double>;
template struct SegmentationNetwork<float>;
template struct SegmentationNetwork<double>;
template SegmentationNetwork<float> build_network(const NetworkConfig&, std::uint64_t);
template SegmentationNetwork<double> build_network(const NetworkConfig&, std::uint64_t);

}  // namespace scseg
