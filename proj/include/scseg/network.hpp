#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "scseg/autodiff.hpp"
#include "scseg/ops.hpp"

namespace scseg {

enum class SkipMode { Concat, Add };

std::string to_string(SkipMode mode);
SkipMode skip_mode_from_string(const std::string& s);

struct NetworkConfig {
    int in_channels = 2;
    int levels = 3;
    int base_channels = 8;
    int feature_dim = 16;   // D, also the width of the extractor's last layer
    int classes = 4;        // C
    int head_channels = 16; // hidden width of the 1x1x1 MLP head
    SkipMode skip = SkipMode::Concat;
    static constexpr int kernel_size = 3;

    /// Throws std::invalid_argument on an out-of-range field.
    void validate() const;
    /// Spatial extents must be multiples of this.
    std::size_t patch_multiple() const { return std::size_t{1} << (levels - 1); }
    int channels_at(int level) const { return base_channels << level; }

    bool operator==(const NetworkConfig&) const = default;
};

/// conv -> [instance norm -> relu]. Convolutions followed by instance norm carry
/// no bias (it would be cancelled by the mean subtraction).
template <typename T>
struct ConvUnit {
    Parameter<T> weight;
    Parameter<T> bias;   // empty when normalised
    Parameter<T> gamma;  // empty when not normalised
    Parameter<T> beta;
    int stride = 1;
    int padding = 1;
    bool normalise = true;
    bool activate = true;

    Var<T> forward(Graph<T>& g, Var<T> x);
    void collect(std::vector<Parameter<T>*>& out);
};

/// Encoder-decoder feature extractor producing a full-resolution D-channel field.
///
/// Level l has base_channels * 2^l channels. Downsampling is a stride-2
/// convolution; upsampling is nearest-neighbour followed by a convolution over
/// the skip connection (concatenated, or added after a channel-matching conv).
template <typename T>
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(const NetworkConfig& cfg, std::mt19937_64& rng);

    /// patch: [N, in_channels, X, Y, Z] with extents divisible by 2^(levels-1).
    Var<T> forward(Graph<T>& g, Var<T> patch);
    std::vector<Parameter<T>*> parameters();
    const NetworkConfig& config() const { return cfg_; }

private:
    NetworkConfig cfg_;
    std::vector<ConvUnit<T>> encoder_;   // one per level
    std::vector<ConvUnit<T>> down_;      // levels - 1
    std::vector<ConvUnit<T>> up_match_;  // Add mode only, levels - 1
    std::vector<ConvUnit<T>> decoder_;   // levels - 1, index = target level
    ConvUnit<T> output_;
};

/// Voxel-wise MLP: three 1x1x1 convolutions, ReLU after the first two and a
/// softmax over classes after the last.
template <typename T>
class Classifier {
public:
    Classifier() = default;
    Classifier(const NetworkConfig& cfg, std::mt19937_64& rng);

    /// features: [N, D, X, Y, Z] -> probabilities [N, C, X, Y, Z].
    Var<T> forward(Graph<T>& g, Var<T> features);
    std::vector<Parameter<T>*> parameters();

private:
    NetworkConfig cfg_;
    std::vector<ConvUnit<T>> layers_;
};

template <typename T>
struct SegmentationNetwork {
    NetworkConfig config;
    FeatureExtractor<T> extractor;
    Classifier<T> classifier;

    /// Extractor parameters first, then classifier, each in construction order.
    std::vector<Parameter<T>*> parameters();
};

/// Deterministic given (cfg, seed). Weights uniform in +-sqrt(6 / (fan_in + fan_out)),
/// biases zero, instance-norm gamma one and beta zero.
template <typename T>
SegmentationNetwork<T> build_network(const NetworkConfig& cfg, std::uint64_t seed);

template <typename T>
Var<T> extract_features(FeatureExtractor<T>& extractor, Graph<T>& g, Var<T> patch) {
    return extractor.forward(g, patch);
}

template <typename T>
Var<T> classify(Classifier<T>& classifier, Graph<T>& g, Var<T> features) {
    return classifier.forward(g, features);
}

extern template class FeatureExtractor<float>;
extern template class FeatureExtractor<double>;
extern template class Classifier<float>;
extern template class Classifier<double>;

}  // namespace scseg
