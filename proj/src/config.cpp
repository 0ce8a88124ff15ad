#include "scseg/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace scseg {

namespace {

/// Reads keys from one JSON object and rejects any it was not asked about.
class Fields {
public:
    Fields(const Json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j.is_object()) throw std::invalid_argument(ctx_ + ": expected a JSON object");
        if (j.contains("schema_version")) {
            seen_.insert("schema_version");
            if (j.at("schema_version") != kConfigSchemaVersion) {
                throw std::invalid_argument(ctx_ + ": unsupported schema_version " + j.at("schema_version").dump());
            }
        }
    }

    template <typename V>
    void opt(const char* key, V& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).template get<V>();
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(ctx_ + "." + key + ": " + e.what());
        }
    }

    template <typename V>
    void req(const char* key, V& out) {
        if (!j_.contains(key)) throw std::invalid_argument(ctx_ + ": missing required field '" + key + "'");
        opt(key, out);
    }

    const Json* sub(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw std::invalid_argument(ctx_ + ": unknown field '" + key + "'");
        }
    }

private:
    const Json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

Json versioned() {
    Json j;
    j["schema_version"] = kConfigSchemaVersion;
    return j;
}

}  // namespace

Json to_json(const NetworkConfig& c) {
    Json j;
    j["in_channels"] = c.in_channels;
    j["levels"] = c.levels;
    j["base_channels"] = c.base_channels;
    j["feature_dim"] = c.feature_dim;
    j["classes"] = c.classes;
    j["head_channels"] = c.head_channels;
    j["skip"] = to_string(c.skip);
    j["kernel_size"] = NetworkConfig::kernel_size;
    return j;
}

NetworkConfig network_config_from_json(const Json& j) {
    NetworkConfig c;
    Fields f(j, "network");
    f.opt("in_channels", c.in_channels);
    f.opt("levels", c.levels);
    f.opt("base_channels", c.base_channels);
    f.opt("feature_dim", c.feature_dim);
    f.opt("classes", c.classes);
    f.opt("head_channels", c.head_channels);
    std::string skip = to_string(c.skip);
    f.opt("skip", skip);
    c.skip = skip_mode_from_string(skip);
    int k = NetworkConfig::kernel_size;
    f.opt("kernel_size", k);
    if (k != NetworkConfig::kernel_size) throw std::invalid_argument("network.kernel_size is fixed at 3");
    f.finish();
    c.validate();
    return c;
}

Json to_json(const TrainConfig& c) {
    Json j = versioned();
    j["lambda_ctr"] = c.lambda_ctr;
    j["proxies_per_class"] = c.proxies_per_class;
    j["tau"] = c.tau;
    j["variant"] = to_string(c.variant);
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["patch_size"] = c.patch_size;
    j["batch_size"] = c.batch_size;
    j["steps"] = c.steps;
    j["init_seed"] = c.init_seed;
    j["sampling_seed"] = c.sampling_seed;
    j["balanced"] = c.balanced;
    j["background_queries"] = c.background_queries;
    Json pools;
    for (const auto& [p, w] : c.pool_proportions) pools[to_string(p)] = w;
    j["pool_proportions"] = pools;
    j["channels"] = c.channels;
    j["checkpoint_every"] = c.checkpoint_every;
    j["tiling_overlap"] = c.overlap();
    j["network"] = to_json(c.network);
    return j;
}

TrainConfig train_config_from_json(const Json& j) {
    TrainConfig c;
    Fields f(j, "train config");
    f.opt("lambda_ctr", c.lambda_ctr);
    f.opt("proxies_per_class", c.proxies_per_class);
    f.opt("tau", c.tau);
    std::string variant = to_string(c.variant);
    f.opt("variant", variant);
    c.variant = contrastive_variant_from_string(variant);
    f.opt("lr", c.lr);
    f.opt("beta1", c.beta1);
    f.opt("beta2", c.beta2);
    f.opt("adam_eps", c.adam_eps);
    f.opt("patch_size", c.patch_size);
    f.opt("batch_size", c.batch_size);
    f.opt("steps", c.steps);
    f.req("init_seed", c.init_seed);
    f.req("sampling_seed", c.sampling_seed);
    f.opt("balanced", c.balanced);
    f.opt("background_queries", c.background_queries);
    if (const Json* pools = f.sub("pool_proportions")) {
        if (!pools->is_object()) throw std::invalid_argument("train config.pool_proportions: expected an object");
        c.pool_proportions.clear();
        for (const auto& [name, w] : pools->items()) c.pool_proportions[pool_from_string(name)] = w.get<double>();
    }
    f.opt("channels", c.channels);
    f.opt("checkpoint_every", c.checkpoint_every);
    f.opt("tiling_overlap", c.tiling_overlap);
    if (const Json* net = f.sub("network")) c.network = network_config_from_json(*net);
    f.finish();
    c.validate();
    return c;
}

Json to_json(const PhantomSpec& s) {
    Json j;
    j["age_t"] = s.age_t;
    j["dims"] = s.dims;
    j["spacing_mm"] = s.spacing_mm;
    j["noise_sigma"] = s.noise_sigma;
    j["bias_amplitude"] = s.bias_amplitude;
    j["gyrification_amplitude"] = s.gyrification_amplitude;
    j["seed"] = s.seed;
    j["radii"] = {{"wm", s.radii.wm}, {"gm", s.radii.gm}, {"csf", s.radii.csf}};
    Json contrast = Json::array();
    for (const auto& channel : s.contrast.curves) {
        Json ch = Json::array();
        for (const auto& curve : channel) ch.push_back({{"knots", curve.knots}, {"values", curve.values}});
        contrast.push_back(ch);
    }
    j["contrast"] = contrast;
    return j;
}

PhantomSpec phantom_spec_from_json(const Json& j) {
    PhantomSpec s;
    Fields f(j, "phantom");
    f.opt("age_t", s.age_t);
    f.opt("dims", s.dims);
    f.opt("spacing_mm", s.spacing_mm);
    f.opt("noise_sigma", s.noise_sigma);
    f.opt("bias_amplitude", s.bias_amplitude);
    f.opt("gyrification_amplitude", s.gyrification_amplitude);
    f.opt("seed", s.seed);
    if (const Json* r = f.sub("radii")) {
        Fields rf(*r, "phantom.radii");
        rf.opt("wm", s.radii.wm);
        rf.opt("gm", s.radii.gm);
        rf.opt("csf", s.radii.csf);
        rf.finish();
    }
    if (const Json* c = f.sub("contrast")) {
        s.contrast.curves.clear();
        for (const auto& ch : *c) {
            std::vector<ContrastCurve> curves;
            for (const auto& cv : ch) {
                ContrastCurve curve;
                Fields cf(cv, "phantom.contrast");
                cf.req("knots", curve.knots);
                cf.req("values", curve.values);
                cf.finish();
                if (curve.knots.empty() || curve.knots.size() != curve.values.size() ||
                    !std::is_sorted(curve.knots.begin(), curve.knots.end())) {
                    throw std::invalid_argument("phantom.contrast: knots must be ascending and match values");
                }
                curves.push_back(std::move(curve));
            }
            s.contrast.curves.push_back(std::move(curves));
        }
    }
    f.finish();
    s.validate();
    return s;
}

Json to_json(const DatasetSpec& s) {
    Json j = versioned();
    j["train"] = s.train;
    j["val"] = s.val;
    j["test"] = s.test;
    j["uncorrected"] = s.uncorrected;
    j["flip_rate"] = s.flip_rate;
    j["age_min"] = s.age_min;
    j["age_max"] = s.age_max;
    j["seed"] = s.seed;
    Json p = to_json(s.phantom);
    p.erase("age_t");
    p.erase("seed");
    j["phantom"] = p;
    return j;
}

DatasetSpec dataset_spec_from_json(const Json& j) {
    DatasetSpec s;
    Fields f(j, "dataset spec");
    f.opt("train", s.train);
    f.opt("val", s.val);
    f.opt("test", s.test);
    f.opt("uncorrected", s.uncorrected);
    f.opt("flip_rate", s.flip_rate);
    f.opt("age_min", s.age_min);
    f.opt("age_max", s.age_max);
    f.req("seed", s.seed);
    if (const Json* p = f.sub("phantom")) {
        if (p->contains("age_t") || p->contains("seed")) {
            throw std::invalid_argument("dataset spec.phantom: age_t and seed are set per subject");
        }
        s.phantom = phantom_spec_from_json(*p);
    }
    f.finish();
    s.validate();
    return s;
}

Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out << j.dump(2) << '\n';
        if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace scseg
