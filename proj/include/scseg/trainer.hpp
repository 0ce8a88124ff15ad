#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "scseg/contrastive.hpp"
#include "scseg/data.hpp"
#include "scseg/metrics.hpp"
#include "scseg/network.hpp"

namespace scseg {

struct TrainConfig {
    double lambda_ctr = 1.0;
    std::size_t proxies_per_class = 10;  // M
    double tau = 0.1;
    ContrastiveVariant variant = ContrastiveVariant::Exp;
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::size_t patch_size = 32;
    std::size_t batch_size = 2;
    std::size_t steps = 1000;
    std::uint64_t init_seed = 0;
    std::uint64_t sampling_seed = 0;
    bool balanced = true;
    bool background_queries = true;  // background voxels act as contrastive queries
    std::map<Pool, double> pool_proportions{{Pool::Clean, 0.5}, {Pool::Uncorrected, 0.5}};
    std::vector<int> channels;           // input channels used, empty = all
    std::size_t checkpoint_every = 0;    // 0 = final checkpoint only
    double tiling_overlap = -1.0;        // voxels; negative = patch_size / 2
    NetworkConfig network;               // in_channels is derived from the data and `channels`

    /// Throws std::invalid_argument on an out-of-range field.
    void validate() const;
    std::size_t overlap() const;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m, v;  // mirror each parameter
    std::size_t step = 0;
};

/// Raised before any update when a gradient holds NaN or Inf.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam on p.value using p.grad. State is sized on first use.
/// Throws NonFiniteError naming the first parameter with a non-finite gradient.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Model and checkpoints

struct Model {
    TrainConfig config;
    SegmentationNetwork<float> net;
    MemoryBank<float> bank;
    std::size_t step = 0;

    /// Network parameters in declaration order, then the memory bank.
    std::vector<Parameter<float>*> parameters();
};

/// Fresh model: network from derive_seed(init_seed, 0), bank from derive_seed(init_seed, 1).
Model init_model(const TrainConfig& cfg);

inline constexpr int kCheckpointSchemaVersion = 1;

/// Directory with checkpoint.json and params.bin; each file replaced atomically,
/// params.bin first so checkpoint.json only ever describes a complete payload.
void save_checkpoint(const std::filesystem::path& dir, Model& model);
Model load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Training

struct LogRow {
    std::size_t step = 0;
    double ce = 0.0, ctr = 0.0, total = 0.0, wall_ms = 0.0;
};

struct TrainOptions {
    std::filesystem::path out_dir;           // empty = keep everything in memory
    std::function<void(const LogRow&)> on_step;
};

struct TrainResult {
    Model model;
    std::vector<LogRow> log;
};

/// Per step: sample a batch, extract features, classify, select voxels once,
/// cross-entropy on probabilities plus lambda * contrastive on features, one
/// backward pass, one Adam step over network and bank.
///
/// With out_dir set, writes config.json, log.csv and checkpoint/. A non-finite
/// loss or gradient throws NonFiniteError; the last checkpoint on disk is kept.
TrainResult train(const TrainConfig& cfg, const std::vector<Subject>& subjects, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Window corners along one axis: 0, step, 2 step, ... plus extent - P.
std::vector<std::size_t> tile_corners(std::size_t extent, std::size_t P, std::size_t overlap);

struct FieldPrediction {
    std::vector<float> probs;     // [C, XYZ], averaged over overlapping windows
    std::vector<float> features;  // [D, XYZ], averaged likewise; empty unless requested
};

FieldPrediction predict_volume(Model& model, const Volume& volume, std::size_t overlap, bool with_features = false);

/// Per-voxel argmax over classes (lowest class wins ties).
LabelMap argmax_labels(const std::vector<float>& probs, const Dims& dims, std::size_t classes);

std::vector<SubjectReport> evaluate_model(Model& model, const std::vector<Subject>& subjects, std::size_t overlap);

/// Mean over classes of (mean cosine of a class's voxel features to its own
/// proxies - mean cosine to all other proxies), using reference labels.
double feature_separation_margin(Model& model, const std::vector<Subject>& subjects, std::size_t overlap);

}  // namespace scseg
