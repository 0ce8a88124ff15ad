#include "scseg/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "scseg/config.hpp"
#include "scseg/losses.hpp"
#include "scseg/random.hpp"
#include "scseg/sampler.hpp"

namespace scseg {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("train config: " + what);
    };
    check(lambda_ctr >= 0.0 && std::isfinite(lambda_ctr), "lambda_ctr must be >= 0");
    check(proxies_per_class >= 1, "proxies_per_class must be >= 1");
    check(tau > 0.0 && std::isfinite(tau), "tau must be > 0");
    check(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
    check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "beta1 and beta2 must lie in [0, 1)");
    check(adam_eps > 0.0, "adam_eps must be > 0");
    check(batch_size >= 1, "batch_size must be >= 1");
    check(patch_size >= 1 && patch_size % network.patch_multiple() == 0,
          "patch_size must be a positive multiple of " + std::to_string(network.patch_multiple()));
    check(overlap() < patch_size, "tiling_overlap must be smaller than patch_size");
    double total = 0.0;
    for (const auto& [pool, w] : pool_proportions) {
        check(w >= 0.0, "pool proportions must be >= 0");
        total += w;
    }
    check(std::abs(total - 1.0) < 1e-9, "pool proportions must sum to 1");
    for (int c : channels) check(c >= 0, "channels must be >= 0");
    network.validate();
}

std::size_t TrainConfig::overlap() const {
    return tiling_overlap < 0.0 ? patch_size / 2 : static_cast<std::size_t>(tiling_overlap);
}

// ---------------------------------------------------------------------------

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, OptimizerState<T>& state, const AdamConfig& cfg) {
    for (const auto* p : params) {
        if (!all_finite(p->grad.data)) throw NonFiniteError("non-finite gradient in parameter '" + p->name + "'");
    }
    if (state.m.empty()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->value.size(), T(0));
            state.v.emplace_back(p->value.size(), T(0));
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != p.value.size()) throw std::invalid_argument("adam_step: state shape mismatch for '" + p.name + "'");
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double g = p.grad.data[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
            p.value.data[i] = static_cast<T>(p.value.data[i] - update);
        }
    }
}

template void adam_step(const std::vector<Parameter<float>*>&, OptimizerState<float>&, const AdamConfig&);
template void adam_step(const std::vector<Parameter<double>*>&, OptimizerState<double>&, const AdamConfig&);

// ---------------------------------------------------------------------------

std::vector<Parameter<float>*> Model::parameters() {
    auto out = net.parameters();
    out.push_back(&bank.proxies);
    return out;
}

Model init_model(const TrainConfig& cfg) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.net = build_network<float>(cfg.network, derive_seed(cfg.init_seed, 0));
    m.bank = init_memory_bank<float>(static_cast<std::size_t>(cfg.network.classes), cfg.proxies_per_class,
                                     static_cast<std::size_t>(cfg.network.feature_dim), derive_seed(cfg.init_seed, 1));
    return m;
}

void save_checkpoint(const fs::path& dir, Model& model) {
    fs::create_directories(dir);
    Json params = Json::array();
    std::string payload;
    std::size_t offset = 0;
    for (auto* p : model.parameters()) {
        Json e;
        e["name"] = p->name;
        e["shape"] = p->value.shape;
        e["offset"] = offset;
        e["count"] = p->value.size();
        e["dtype"] = "f32le";
        params.push_back(e);
        for (float v : p->value.data) {
            const auto u = std::bit_cast<std::uint32_t>(v);
            for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
        }
        offset += p->value.size() * 4;
    }
    const fs::path bin = dir / "params.bin", tmp = dir / "params.bin.tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
    fs::rename(tmp, bin);
    Json j;
    j["schema_version"] = kCheckpointSchemaVersion;
    j["step"] = model.step;
    j["init_seed"] = model.config.init_seed;
    j["sampling_seed"] = model.config.sampling_seed;
    j["payload"] = "params.bin";
    j["payload_bytes"] = payload.size();
    j["config"] = to_json(model.config);
    j["parameters"] = params;
    write_json_file(dir / "checkpoint.json", j);
}

Model load_checkpoint(const fs::path& dir) {
    const Json j = read_json_file(dir / "checkpoint.json");
    if (j.value("schema_version", 0) != kCheckpointSchemaVersion) {
        throw std::runtime_error("checkpoint '" + dir.string() + "': unsupported schema_version");
    }
    Model m = init_model(train_config_from_json(j.at("config")));
    m.step = j.at("step").get<std::size_t>();
    std::ifstream in(dir / j.at("payload").get<std::string>(), std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint '" + dir.string() + "': missing payload");
    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (payload.size() != j.at("payload_bytes").get<std::size_t>()) {
        throw std::runtime_error("checkpoint '" + dir.string() + "': payload size mismatch");
    }
    const auto params = m.parameters();
    const Json& list = j.at("parameters");
    if (list.size() != params.size()) throw std::runtime_error("checkpoint '" + dir.string() + "': parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Json& e = list[k];
        auto& p = *params[k];
        if (e.at("name").get<std::string>() != p.name || e.at("shape").get<Shape>() != p.value.shape ||
            e.at("dtype").get<std::string>() != "f32le") {
            throw std::runtime_error("checkpoint '" + dir.string() + "': parameter " + std::to_string(k) + " ('" +
                                     e.at("name").get<std::string>() + "') does not match the model");
        }
        const auto off = e.at("offset").get<std::size_t>();
        if (off + p.value.size() * 4 > payload.size()) throw std::runtime_error("checkpoint payload truncated");
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            std::uint32_t u = 0;
            for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[off + i * 4 + b])) << (8 * b);
            p.value.data[i] = std::bit_cast<float>(u);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------

namespace {

void write_log_header(std::ostream& out) { out << "step,ce,ctr,total,wall_ms\n"; }

void write_log_row(std::ostream& out, const LogRow& r) {
    out << r.step << ',' << std::setprecision(9) << r.ce << ',' << r.ctr << ',' << r.total << ',' << std::setprecision(6)
        << r.wall_ms << '\n';
}

}  // namespace

TrainResult train(const TrainConfig& cfg_in, const std::vector<Subject>& subjects, const TrainOptions& options) {
    if (subjects.empty()) throw std::invalid_argument("train: no training subjects");
    TrainConfig cfg = cfg_in;
    const std::size_t vol_channels = subjects.front().volume.channels;
    cfg.network.in_channels = static_cast<int>(cfg.channels.empty() ? vol_channels : cfg.channels.size());
    for (int c : cfg.channels) {
        if (static_cast<std::size_t>(c) >= vol_channels) throw std::invalid_argument("train: channel " + std::to_string(c) + " not in data");
    }
    cfg.validate();

    TrainResult result;
    result.model = init_model(cfg);
    Model& model = result.model;
    auto params = model.parameters();
    OptimizerState<float> opt;
    const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

    SamplerConfig sc;
    sc.patch_size = cfg.patch_size;
    sc.batch_size = cfg.batch_size;
    sc.pool_weights = cfg.pool_proportions;
    sc.strata.clear();
    for (int c = 1; c < cfg.network.classes; ++c) sc.strata.push_back(c);
    sc.channels = cfg.channels;
    BatchSampler sampler(subjects, sc, derive_seed(cfg.sampling_seed, 0));

    std::ofstream log;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        write_json_file(options.out_dir / "config.json", to_json(cfg));
        log.open(options.out_dir / "log.csv", std::ios::trunc);
        if (!log) throw std::runtime_error("cannot write '" + (options.out_dir / "log.csv").string() + "'");
        write_log_header(log);
    }

    const float tau = static_cast<float>(cfg.tau);
    const float lambda = static_cast<float>(cfg.lambda_ctr);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const PatchBatch batch = sampler.next();
        const VoxelSelection sel =
            cfg.balanced ? balanced_select(batch.labels, derive_seed(cfg.sampling_seed, 1 + step)) : select_all(batch.labels);

        std::vector<std::size_t> qidx;
        std::vector<std::uint8_t> qlab;
        qidx.reserve(sel.indices.size());
        qlab.reserve(sel.indices.size());
        for (std::size_t i : sel.indices) {
            if (!cfg.background_queries && batch.labels[i] == 0) continue;
            qidx.push_back(i);
            qlab.push_back(batch.labels[i]);
        }

        for (auto* p : params) p->zero_grad();
        Graph<float> g;
        Var<float> x = g.constant(batch.images);
        Var<float> feats = extract_features(model.net.extractor, g, x);
        Var<float> probs = classify(model.net.classifier, g, feats);
        Var<float> ce = cross_entropy(probs, batch.labels, sel);
        Var<float> ctr;
        double ctr_value = 0.0;
        if (!qidx.empty()) {
            ctr = contrastive_loss(ops::gather_voxels(feats, qidx), qlab, g.parameter(model.bank.proxies), tau, cfg.variant);
            ctr_value = ctr.value()[0];
        }
        Var<float> total = ctr.valid() ? total_loss(ce, ctr, lambda) : ce;
        LogRow row{step, ce.value()[0], ctr_value, total.value()[0], 0.0};
        if (!std::isfinite(row.total) || !std::isfinite(row.ctr)) {
            throw NonFiniteError("non-finite loss at step " + std::to_string(step) + " (ce " + std::to_string(row.ce) +
                                 ", ctr " + std::to_string(row.ctr) + ")");
        }
        g.backward(total);
        adam_step(params, opt, adam);
        model.step = step;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
        if (log) {
            write_log_row(log, row);
            log.flush();
        }
        if (options.on_step) options.on_step(row);
        if (!options.out_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(options.out_dir / "checkpoint", model);
        }
    }
    if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "checkpoint", model);
    return result;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> tile_corners(std::size_t extent, std::size_t P, std::size_t overlap) {
    if (P == 0 || P > extent) throw std::invalid_argument("tile_corners: patch " + std::to_string(P) + " exceeds extent " + std::to_string(extent));
    if (overlap >= P) throw std::invalid_argument("tile_corners: overlap must be smaller than the patch");
    const std::size_t step = P - overlap;
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c + P <= extent; c += step) out.push_back(c);
    if (out.back() + P != extent) out.push_back(extent - P);
    return out;
}

FieldPrediction predict_volume(Model& model, const Volume& volume, std::size_t overlap, bool with_features) {
    const TrainConfig& cfg = model.config;
    const std::size_t P = cfg.patch_size, C = static_cast<std::size_t>(cfg.network.classes);
    const std::size_t D = static_cast<std::size_t>(cfg.network.feature_dim);
    const Dims& d = volume.dims;
    const std::size_t V = voxel_count(d), P3 = P * P * P;
    const LabelMap dummy(d);
    FieldPrediction out;
    out.probs.assign(C * V, 0.0f);
    if (with_features) out.features.assign(D * V, 0.0f);
    std::vector<float> hits(V, 0.0f);
    const auto cx = tile_corners(d[0], P, overlap), cy = tile_corners(d[1], P, overlap), cz = tile_corners(d[2], P, overlap);
    for (std::size_t x0 : cx)
        for (std::size_t y0 : cy)
            for (std::size_t z0 : cz) {
                const Patch patch = extract_patch(volume, dummy, {x0, y0, z0}, P, cfg.channels);
                Graph<float> g;
                Var<float> x = g.constant(Tensor<float>(Shape{1, patch.image.size() / P3, P, P, P}, patch.image));
                Var<float> feats = extract_features(model.net.extractor, g, x);
                Var<float> probs = classify(model.net.classifier, g, feats);
                const auto& pv = probs.value().data;
                const auto& fv = feats.value().data;
                for (std::size_t i = 0; i < P; ++i)
                    for (std::size_t j = 0; j < P; ++j)
                        for (std::size_t k = 0; k < P; ++k) {
                            const std::size_t src = (i * P + j) * P + k;
                            const std::size_t dst = voxel_index(d, x0 + i, y0 + j, z0 + k);
                            hits[dst] += 1.0f;
                            for (std::size_t c = 0; c < C; ++c) out.probs[c * V + dst] += pv[c * P3 + src];
                            if (with_features)
                                for (std::size_t c = 0; c < D; ++c) out.features[c * V + dst] += fv[c * P3 + src];
                        }
            }
    for (std::size_t v = 0; v < V; ++v) {
        const float inv = 1.0f / hits[v];
        if (hits[v] == 1.0f) continue;
        for (std::size_t c = 0; c < C; ++c) out.probs[c * V + v] *= inv;
        if (with_features)
            for (std::size_t c = 0; c < D; ++c) out.features[c * V + v] *= inv;
    }
    return out;
}

LabelMap argmax_labels(const std::vector<float>& probs, const Dims& dims, std::size_t classes) {
    const std::size_t V = voxel_count(dims);
    if (probs.size() != classes * V) throw std::invalid_argument("argmax_labels: probability field size mismatch");
    LabelMap out(dims);
    for (std::size_t v = 0; v < V; ++v) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (probs[c * V + v] > probs[best * V + v]) best = c;
        out.labels[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

std::vector<SubjectReport> evaluate_model(Model& model, const std::vector<Subject>& subjects, std::size_t overlap) {
    std::vector<SubjectReport> out;
    const int C = model.config.network.classes;
    for (const auto& s : subjects) {
        const auto pred = predict_volume(model, s.volume, overlap);
        const LabelMap labels = argmax_labels(pred.probs, s.volume.dims, static_cast<std::size_t>(C));
        out.push_back({s.id, s.age_t, evaluate(labels, s.labels, s.volume.spacing_mm, C, UndefinedAsd::Record)});
    }
    return out;
}

double feature_separation_margin(Model& model, const std::vector<Subject>& subjects, std::size_t overlap) {
    const std::size_t C = model.bank.classes, M = model.bank.per_class, D = model.bank.dim;
    std::vector<double> kn(C * M * D);
    for (std::size_t r = 0; r < C * M; ++r) {
        const float* k = model.bank.proxies.value.data.data() + r * D;
        double n = 0.0;
        for (std::size_t d = 0; d < D; ++d) n += static_cast<double>(k[d]) * k[d];
        n = std::max(std::sqrt(n), kNormClamp);
        for (std::size_t d = 0; d < D; ++d) kn[r * D + d] = k[d] / n;
    }
    std::vector<double> own(C, 0.0), other(C, 0.0);
    std::vector<std::size_t> count(C, 0);
    std::vector<double> q(D), sim(C * M);
    for (const auto& s : subjects) {
        const auto pred = predict_volume(model, s.volume, overlap, true);
        const std::size_t V = voxel_count(s.volume.dims);
        for (std::size_t v = 0; v < V; ++v) {
            const std::size_t c = s.labels.labels[v];
            double n = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                q[d] = pred.features[d * V + v];
                n += q[d] * q[d];
            }
            n = std::max(std::sqrt(n), kNormClamp);
            double o = 0.0, x = 0.0;
            for (std::size_t r = 0; r < C * M; ++r) {
                double dot = 0.0;
                for (std::size_t d = 0; d < D; ++d) dot += q[d] * kn[r * D + d];
                (r / M == c ? o : x) += dot / n;
            }
            own[c] += o / static_cast<double>(M);
            other[c] += x / static_cast<double>(M * (C - 1));
            ++count[c];
        }
    }
    double margin = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < C; ++c) {
        if (count[c] == 0) continue;
        margin += (own[c] - other[c]) / static_cast<double>(count[c]);
        ++present;
    }
    if (present == 0) throw std::invalid_argument("feature_separation_margin: no voxels");
    return margin / static_cast<double>(present);
}

}  // namespace scseg
