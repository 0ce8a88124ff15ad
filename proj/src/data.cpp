#include "scseg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "scseg/random.hpp"

namespace scseg {

namespace fs = std::filesystem;
using nlohmann::json;

Volume::Volume(Dims d, std::size_t ch, Spacing sp) : dims(d), channels(ch), spacing_mm(sp), voxels(ch * voxel_count(d), 0.0f) {}

std::size_t count_invalid_labels(const LabelMap& labels, int classes) {
    return static_cast<std::size_t>(std::count_if(labels.labels.begin(), labels.labels.end(),
                                                  [classes](std::uint8_t v) { return v >= classes; }));
}

void validate_labels(const LabelMap& labels, int classes) {
    if (labels.labels.size() != voxel_count(labels.dims)) throw std::invalid_argument("label map size does not match dims");
    for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        if (labels.labels[i] >= classes) {
            throw std::invalid_argument("label " + std::to_string(labels.labels[i]) + " at voxel " + std::to_string(i) +
                                        " is not below C = " + std::to_string(classes) + " (" +
                                        std::to_string(count_invalid_labels(labels, classes)) + " invalid voxels)");
        }
    }
}

// ---------------------------------------------------------------------------

double ContrastCurve::operator()(double t) const {
    if (knots.empty() || knots.size() != values.size()) throw std::invalid_argument("contrast curve: malformed knots");
    if (t <= knots.front()) return values.front();
    if (t >= knots.back()) return values.back();
    const auto hi = static_cast<std::size_t>(std::upper_bound(knots.begin(), knots.end(), t) - knots.begin());
    const std::size_t lo = hi - 1;
    const double f = (t - knots[lo]) / (knots[hi] - knots[lo]);
    return values[lo] + f * (values[hi] - values[lo]);
}

ContrastSchedule ContrastSchedule::lifespan_default() {
    const std::vector<double> k{0.0, 0.1, 0.4, 1.0};
    auto flat = [&](double v) { return ContrastCurve{k, {v, v, v, v}}; };
    ContrastSchedule s;
    s.curves = {
        // T1-like: WM rises through GM at 0.1 (isointense) to adult WM > GM > CSF.
        {flat(0.0), flat(0.15), ContrastCurve{k, {0.45, 0.45, 0.50, 0.50}}, ContrastCurve{k, {0.30, 0.45, 0.75, 0.72}}},
        // T2-like: WM < GM < CSF throughout.
        {flat(0.0), flat(0.90), ContrastCurve{k, {0.60, 0.55, 0.50, 0.50}}, ContrastCurve{k, {0.40, 0.35, 0.30, 0.32}}},
    };
    return s;
}

void PhantomSpec::validate() const {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("phantom spec: " + what);
    };
    check(age_t >= 0.0 && age_t <= 1.0, "age_t must lie in [0, 1]");
    for (std::size_t a = 0; a < 3; ++a) {
        check(dims[a] >= 16, "every dimension must be >= 16, got " + std::to_string(dims[a]));
        check(spacing_mm[a] > 0.0, "spacing must be > 0");
    }
    check(noise_sigma >= 0.0, "noise_sigma must be >= 0");
    check(bias_amplitude >= 0.0 && bias_amplitude < 1.0, "bias_amplitude must lie in [0, 1)");
    check(gyrification_amplitude >= 0.0, "gyrification_amplitude must be >= 0");
    check(radii.wm > 0.0 && radii.wm <= radii.gm && radii.gm <= radii.csf && radii.csf <= 1.0,
          "radii must satisfy 0 < wm <= gm <= csf <= 1");
    check(contrast.curves.size() == 2, "contrast schedule needs two channels");
    for (const auto& ch : contrast.curves) check(ch.size() == kDefaultClasses, "contrast schedule needs four tissues");
}

std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const Dims& d = spec.dims;
    const double age = spec.age_t;

    std::array<double, 3> centre{}, semi{}, phase{};
    for (std::size_t a = 0; a < 3; ++a) centre[a] = 0.5 * static_cast<double>(d[a]) - 0.5 + unit(rng);
    const double growth = 0.88 + 0.12 * age;
    for (std::size_t a = 0; a < 3; ++a) semi[a] = 0.5 * static_cast<double>(d[a]) * 0.92 * growth * (1.0 + 0.05 * unit(rng));
    for (auto& p : phase) p = M_PI * unit(rng);
    const double wm_base = spec.radii.wm * (0.92 + 0.08 * age);
    constexpr double kFold = 7.0;  // angular frequency of the folding pattern

    LabelMap labels(d);
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t z = 0; z < d[2]; ++z) {
                const double u = (static_cast<double>(x) - centre[0]) / semi[0];
                const double v = (static_cast<double>(y) - centre[1]) / semi[1];
                const double w = (static_cast<double>(z) - centre[2]) / semi[2];
                const double r = std::sqrt(u * u + v * v + w * w);
                std::uint8_t t = kBackground;
                if (r < spec.radii.csf) {
                    const double inv = r > 0.0 ? 1.0 / r : 0.0;
                    const double fold = (std::sin(kFold * u * inv + phase[0]) + std::sin(kFold * v * inv + phase[1]) +
                                         std::sin(kFold * w * inv + phase[2])) / 3.0;
                    const double r_wm = std::min(wm_base + spec.gyrification_amplitude * fold, spec.radii.gm);
                    t = r < r_wm ? kWM : (r < spec.radii.gm ? kGM : kCSF);
                }
                labels.at(x, y, z) = t;
            }

    constexpr std::size_t kChannels = 2;
    // Trilinear bias: corner values scaled so the largest |corner| equals the amplitude.
    std::array<std::array<double, 8>, kChannels> corner{};
    for (auto& c : corner) {
        double peak = 0.0;
        for (auto& v : c) {
            v = unit(rng);
            peak = std::max(peak, std::abs(v));
        }
        for (auto& v : c) v = peak > 0.0 ? v / peak * spec.bias_amplitude : 0.0;
    }
    std::normal_distribution<double> noise(0.0, 1.0);
    Volume vol(d, kChannels, spec.spacing_mm);
    auto frac = [&](std::size_t i, std::size_t a) {
        return d[a] > 1 ? static_cast<double>(i) / static_cast<double>(d[a] - 1) : 0.0;
    };
    std::array<std::array<double, kDefaultClasses>, kChannels> mu{};
    for (std::size_t c = 0; c < kChannels; ++c)
        for (int t = 0; t < kDefaultClasses; ++t) mu[c][static_cast<std::size_t>(t)] = spec.contrast.mean(c, t, age);
    for (std::size_t c = 0; c < kChannels; ++c) {
        const auto& k = corner[c];
        for (std::size_t x = 0; x < d[0]; ++x)
            for (std::size_t y = 0; y < d[1]; ++y)
                for (std::size_t z = 0; z < d[2]; ++z) {
                    const double fx = frac(x, 0), fy = frac(y, 1), fz = frac(z, 2);
                    const double c00 = k[0] * (1 - fz) + k[1] * fz, c01 = k[2] * (1 - fz) + k[3] * fz;
                    const double c10 = k[4] * (1 - fz) + k[5] * fz, c11 = k[6] * (1 - fz) + k[7] * fz;
                    const double bias = (c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx;
                    double value = mu[c][labels.at(x, y, z)] * (1.0 + bias);
                    if (spec.noise_sigma > 0.0) value += spec.noise_sigma * noise(rng);
                    vol.at(c, x, y, z) = static_cast<float>(value);
                }
    }
    return {std::move(vol), std::move(labels)};
}

bool is_boundary_adjacent(const LabelMap& m, std::size_t x, std::size_t y, std::size_t z) {
    const std::uint8_t own = m.at(x, y, z);
    const Dims& d = m.dims;
    return (x > 0 && m.at(x - 1, y, z) != own) || (x + 1 < d[0] && m.at(x + 1, y, z) != own) ||
           (y > 0 && m.at(x, y - 1, z) != own) || (y + 1 < d[1] && m.at(x, y + 1, z) != own) ||
           (z > 0 && m.at(x, y, z - 1) != own) || (z + 1 < d[2] && m.at(x, y, z + 1) != own);
}

LabelMap corrupt_labels(const LabelMap& labels, double flip_rate, std::uint64_t seed) {
    if (!(flip_rate >= 0.0 && flip_rate < 0.5)) throw std::invalid_argument("corrupt_labels: flip_rate must lie in [0, 0.5)");
    LabelMap out = labels;
    if (flip_rate == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const Dims& d = labels.dims;
    std::vector<std::uint8_t> others;
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t z = 0; z < d[2]; ++z) {
                const std::uint8_t own = labels.at(x, y, z);
                others.clear();
                auto add = [&](std::uint8_t v) {
                    if (v != own && std::find(others.begin(), others.end(), v) == others.end()) others.push_back(v);
                };
                if (x > 0) add(labels.at(x - 1, y, z));
                if (x + 1 < d[0]) add(labels.at(x + 1, y, z));
                if (y > 0) add(labels.at(x, y - 1, z));
                if (y + 1 < d[1]) add(labels.at(x, y + 1, z));
                if (z > 0) add(labels.at(x, y, z - 1));
                if (z + 1 < d[2]) add(labels.at(x, y, z + 1));
                if (others.empty()) continue;
                std::sort(others.begin(), others.end());
                if (coin(rng) < flip_rate) {
                    std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
                    out.at(x, y, z) = others[pick(rng)];
                }
            }
    return out;
}

// ---------------------------------------------------------------------------
// File format

namespace {

constexpr std::size_t kMaxHeader = 1 << 16;

void write_atomic(const fs::path& path, const std::string& header, const char* payload, std::size_t bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        out.put('\n');
        out.write(payload, static_cast<std::streamsize>(bytes));
        if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
    fs::rename(tmp, path);
}

struct RawFile {
    json header;
    std::string payload;
};

RawFile read_raw(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::string line;
    char ch = 0;
    while (in.get(ch) && ch != '\n') {
        line.push_back(ch);
        if (line.size() > kMaxHeader) throw MalformedHeaderError(path.string() + ": header line too long");
    }
    if (ch != '\n') throw MalformedHeaderError(path.string() + ": missing header terminator");
    RawFile raw;
    try {
        raw.header = json::parse(line);
    } catch (const json::exception& e) {
        throw MalformedHeaderError(path.string() + ": header is not valid JSON (" + e.what() + ")");
    }
    std::ostringstream rest;
    rest << in.rdbuf();
    raw.payload = rest.str();
    return raw;
}

template <typename V>
V header_field(const json& h, const char* key, const fs::path& path) {
    if (!h.is_object() || !h.contains(key)) throw MalformedHeaderError(path.string() + ": header lacks '" + key + "'");
    try {
        return h.at(key).get<V>();
    } catch (const json::exception&) {
        throw MalformedHeaderError(path.string() + ": header field '" + key + "' has the wrong type");
    }
}

/// Validates magic, version, dtype and kind; returns dims.
Dims check_header(const json& h, const fs::path& path, const char* kind, const char* dtype) {
    if (header_field<std::string>(h, "magic", path) != kFileMagic) throw MalformedHeaderError(path.string() + ": bad magic");
    if (header_field<int>(h, "version", path) != kFileVersion) {
        throw MalformedHeaderError(path.string() + ": unsupported version " + h.at("version").dump());
    }
    const auto dt = header_field<std::string>(h, "dtype", path);
    if (dt != dtype) throw DtypeMismatchError(path.string() + ": dtype '" + dt + "', expected '" + dtype + "'");
    const auto k = header_field<std::string>(h, "kind", path);
    if (k != kind) throw MalformedHeaderError(path.string() + ": kind '" + k + "', expected '" + kind + "'");
    const auto dims = header_field<std::vector<std::size_t>>(h, "dims", path);
    if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
        throw MalformedHeaderError(path.string() + ": dims must be three positive integers");
    }
    return {dims[0], dims[1], dims[2]};
}

void check_payload(const RawFile& raw, std::size_t expected, const fs::path& path) {
    if (raw.payload.size() < expected) {
        throw TruncatedPayloadError(path.string() + ": header declares " + std::to_string(expected) +
                                    " payload bytes, file holds " + std::to_string(raw.payload.size()));
    }
    if (raw.payload.size() > expected) {
        throw MalformedHeaderError(path.string() + ": header declares " + std::to_string(expected) +
                                   " payload bytes, file holds " + std::to_string(raw.payload.size()));
    }
}

}  // namespace

void write_volume(const fs::path& path, const Volume& v) {
    if (v.voxels.size() != v.channels * voxel_count(v.dims)) throw std::invalid_argument("write_volume: inconsistent volume");
    json h = {{"magic", kFileMagic}, {"version", kFileVersion}, {"kind", "volume"},
              {"dims", v.dims},      {"channels", v.channels},  {"spacing_mm", v.spacing_mm},
              {"dtype", "f32le"}};
    std::string bytes(v.voxels.size() * 4, '\0');
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(v.voxels[i]);
        for (std::size_t b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
    write_atomic(path, h.dump(), bytes.data(), bytes.size());
}

Volume read_volume(const fs::path& path) {
    const RawFile raw = read_raw(path);
    const Dims dims = check_header(raw.header, path, "volume", "f32le");
    const auto channels = header_field<std::size_t>(raw.header, "channels", path);
    const auto spacing = header_field<std::vector<double>>(raw.header, "spacing_mm", path);
    if (channels == 0) throw MalformedHeaderError(path.string() + ": channels must be positive");
    if (spacing.size() != 3 || !(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0)) {
        throw MalformedHeaderError(path.string() + ": spacing_mm must be three positive numbers");
    }
    Volume v(dims, channels, {spacing[0], spacing[1], spacing[2]});
    check_payload(raw, v.voxels.size() * 4, path);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        std::uint32_t u = 0;
        for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw.payload[i * 4 + b])) << (8 * b);
        v.voxels[i] = std::bit_cast<float>(u);
    }
    return v;
}

void write_labels(const fs::path& path, const LabelMap& m) {
    if (m.labels.size() != voxel_count(m.dims)) throw std::invalid_argument("write_labels: inconsistent label map");
    json h = {{"magic", kFileMagic}, {"version", kFileVersion}, {"kind", "labels"},
              {"dims", m.dims},      {"channels", 1},           {"dtype", "u8"}};
    write_atomic(path, h.dump(), reinterpret_cast<const char*>(m.labels.data()), m.labels.size());
}

LabelMap read_labels(const fs::path& path) {
    const RawFile raw = read_raw(path);
    const Dims dims = check_header(raw.header, path, "labels", "u8");
    LabelMap m(dims);
    check_payload(raw, m.labels.size(), path);
    std::memcpy(m.labels.data(), raw.payload.data(), m.labels.size());
    return m;
}

// ---------------------------------------------------------------------------
// Manifest

std::string to_string(Pool p) { return p == Pool::Clean ? "clean" : "uncorrected"; }

Pool pool_from_string(const std::string& s) {
    if (s == "clean") return Pool::Clean;
    if (s == "uncorrected") return Pool::Uncorrected;
    throw std::invalid_argument("unknown pool '" + s + "' (expected clean|uncorrected)");
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("manifest '" + path.string() + "' is not valid JSON: " + e.what());
    }
    if (!j.is_array()) throw std::runtime_error("manifest '" + path.string() + "' must be a JSON array");
    const fs::path base = path.parent_path();
    std::vector<ManifestEntry> out;
    for (const auto& e : j) {
        try {
            ManifestEntry m;
            for (const auto& [key, value] : e.items()) {
                if (key != "volume_path" && key != "label_path" && key != "pool" && key != "age_t") {
                    throw std::runtime_error("unknown key '" + key + "'");
                }
            }
            const fs::path vp = e.at("volume_path").get<std::string>();
            const fs::path lp = e.at("label_path").get<std::string>();
            m.volume_path = vp.is_absolute() ? vp : base / vp;
            m.label_path = lp.is_absolute() ? lp : base / lp;
            m.pool = pool_from_string(e.at("pool").get<std::string>());
            m.age_t = e.at("age_t").get<double>();
            out.push_back(std::move(m));
        } catch (const std::exception& ex) {
            throw std::runtime_error("manifest '" + path.string() + "' entry " + std::to_string(out.size()) + ": " + ex.what());
        }
    }
    return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) {
        const fs::path r = fs::absolute(p).lexically_relative(base);
        return (r.empty() || *r.begin() == "..") ? fs::absolute(p).string() : r.generic_string();
    };
    json j = json::array();
    for (const auto& e : entries) {
        j.push_back({{"volume_path", rel(e.volume_path)},
                     {"label_path", rel(e.label_path)},
                     {"pool", to_string(e.pool)},
                     {"age_t", e.age_t}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

std::vector<Subject> load_subjects(const std::vector<ManifestEntry>& entries, int classes) {
    std::vector<Subject> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        Subject s;
        s.id = e.volume_path.stem().string();
        s.volume = read_volume(e.volume_path);
        s.labels = read_labels(e.label_path);
        if (s.volume.dims != s.labels.dims) {
            throw std::runtime_error("subject '" + s.id + "': volume and label dims differ");
        }
        validate_labels(s.labels, classes);
        s.pool = e.pool;
        s.age_t = e.age_t;
        out.push_back(std::move(s));
    }
    return out;
}

void DatasetSpec::validate() const {
    if (train == 0 || test == 0) throw std::invalid_argument("dataset spec: train and test must be >= 1");
    if (uncorrected > train) throw std::invalid_argument("dataset spec: uncorrected exceeds train");
    if (!(flip_rate >= 0.0 && flip_rate < 0.5)) throw std::invalid_argument("dataset spec: flip_rate must lie in [0, 0.5)");
    if (!(age_min >= 0.0 && age_min <= age_max && age_max <= 1.0)) {
        throw std::invalid_argument("dataset spec: need 0 <= age_min <= age_max <= 1");
    }
    PhantomSpec p = phantom;
    p.age_t = age_min;
    p.validate();
}

DatasetPaths generate_dataset(const DatasetSpec& spec, const fs::path& dir) {
    spec.validate();
    fs::create_directories(dir);
    const std::size_t total = spec.train + spec.val + spec.test;
    const std::array<std::size_t, 3> quota{spec.train, spec.val, spec.test};
    std::array<std::size_t, 3> dealt{0, 0, 0};
    std::array<std::vector<ManifestEntry>, 3> splits;
    std::size_t corrupted = 0;
    for (std::size_t k = 0; k < total; ++k) {
        // deal to the split furthest behind its proportional share
        std::size_t split = 0;
        double best = -1e300;
        for (std::size_t s = 0; s < 3; ++s) {
            if (dealt[s] >= quota[s]) continue;
            const double lag = static_cast<double>(quota[s]) * static_cast<double>(k + 1) / static_cast<double>(total) -
                               static_cast<double>(dealt[s]);
            if (lag > best) {
                best = lag;
                split = s;
            }
        }
        const std::size_t index_in_split = dealt[split]++;
        PhantomSpec ps = spec.phantom;
        ps.age_t = total > 1 ? spec.age_min + (spec.age_max - spec.age_min) * static_cast<double>(k) / static_cast<double>(total - 1)
                             : spec.age_min;
        ps.seed = derive_seed(spec.seed, 2 * k);
        auto [vol, lab] = generate_phantom(ps);
        ManifestEntry e;
        e.age_t = ps.age_t;
        if (split == 0) {
            // spread corrupted subjects evenly over the training ages
            const std::size_t before = index_in_split * spec.uncorrected / spec.train;
            const std::size_t after = (index_in_split + 1) * spec.uncorrected / spec.train;
            if (after > before && corrupted < spec.uncorrected) {
                lab = corrupt_labels(lab, spec.flip_rate, derive_seed(spec.seed, 2 * k + 1));
                e.pool = Pool::Uncorrected;
                ++corrupted;
            }
        }
        char name[32];
        std::snprintf(name, sizeof name, "subject_%03zu", k);
        e.volume_path = dir / (std::string(name) + ".vol");
        e.label_path = dir / (std::string(name) + ".lab");
        write_volume(e.volume_path, vol);
        write_labels(e.label_path, lab);
        splits[split].push_back(std::move(e));
    }
    DatasetPaths paths{dir / "manifest.json", dir / "manifest_val.json", dir / "manifest_test.json"};
    write_manifest(paths.train, splits[0]);
    write_manifest(paths.val, splits[1]);
    write_manifest(paths.test, splits[2]);
    return paths;
}

}  // namespace scseg
