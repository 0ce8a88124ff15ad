#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scseg {

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

inline constexpr int kDefaultClasses = 4;  // 0 background, 1 CSF, 2 GM, 3 WM
enum Tissue : std::uint8_t { kBackground = 0, kCSF = 1, kGM = 2, kWM = 3 };

inline std::size_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }
inline std::size_t voxel_index(const Dims& d, std::size_t x, std::size_t y, std::size_t z) {
    return (x * d[1] + y) * d[2] + z;
}

/// Channel-major intensities: voxels[c * XYZ + (x * Y + y) * Z + z].
struct Volume {
    Dims dims{0, 0, 0};
    std::size_t channels = 0;
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<float> voxels;

    Volume() = default;
    Volume(Dims d, std::size_t ch, Spacing sp);

    float& at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) {
        return voxels[c * voxel_count(dims) + voxel_index(dims, x, y, z)];
    }
    float at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
        return voxels[c * voxel_count(dims) + voxel_index(dims, x, y, z)];
    }
    bool operator==(const Volume&) const = default;
};

struct LabelMap {
    Dims dims{0, 0, 0};
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    explicit LabelMap(Dims d, std::uint8_t fill = 0) : dims(d), labels(voxel_count(d), fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t z) { return labels[voxel_index(dims, x, y, z)]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const { return labels[voxel_index(dims, x, y, z)]; }
    bool operator==(const LabelMap&) const = default;
};

/// Number of labels >= classes (0 for a valid map).
std::size_t count_invalid_labels(const LabelMap& labels, int classes);
/// Throws std::invalid_argument describing the first label >= classes.
void validate_labels(const LabelMap& labels, int classes);

// ---------------------------------------------------------------------------
// Phantom generation

/// Per-class mean intensity as a piecewise-linear function of age_t.
struct ContrastCurve {
    std::vector<double> knots;   // ascending age_t positions
    std::vector<double> values;  // same length as knots

    double operator()(double age_t) const;
};

/// curves[channel][class]; channel 0 is T1-like, channel 1 T2-like.
struct ContrastSchedule {
    std::vector<std::vector<ContrastCurve>> curves;

    /// Channel-0 WM and GM coincide at age 0.1; WM > GM > CSF from age 0.4 on.
    /// Channel 1 keeps WM < GM < CSF at every age.
    static ContrastSchedule lifespan_default();
    double mean(std::size_t channel, int tissue, double age_t) const { return curves.at(channel).at(tissue)(age_t); }
};

/// Shell outer radii in units of the brain ellipsoid (background beyond `csf`).
struct ShellRadii {
    double wm = 0.55;
    double gm = 0.78;
    double csf = 0.92;
};

struct PhantomSpec {
    double age_t = 0.5;
    Dims dims{48, 48, 48};
    Spacing spacing_mm{1.0, 1.0, 1.0};
    double noise_sigma = 0.03;
    double bias_amplitude = 0.1;
    double gyrification_amplitude = 0.06;
    std::uint64_t seed = 0;
    ShellRadii radii;
    ContrastSchedule contrast = ContrastSchedule::lifespan_default();

    void validate() const;
};

/// Deterministic given spec. Labels are the noiseless geometry; the volume has
/// two channels (T1-like, T2-like) with a trilinear multiplicative bias field and
/// additive Gaussian noise.
std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec);

/// Each voxel whose 6-neighbourhood holds another class is, with probability
/// flip_rate, relabelled to one of those other neighbouring classes chosen
/// uniformly. Decisions use the input map only, so flips do not cascade.
LabelMap corrupt_labels(const LabelMap& labels, double flip_rate, std::uint64_t seed);

/// True when some 6-neighbour inside the grid has a different label.
bool is_boundary_adjacent(const LabelMap& labels, std::size_t x, std::size_t y, std::size_t z);

// ---------------------------------------------------------------------------
// File format: one JSON header line, '\n', raw little-endian payload.

class FileFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class MalformedHeaderError : public FileFormatError {
public:
    using FileFormatError::FileFormatError;
};
class TruncatedPayloadError : public FileFormatError {
public:
    using FileFormatError::FileFormatError;
};
class DtypeMismatchError : public FileFormatError {
public:
    using FileFormatError::FileFormatError;
};

inline constexpr const char* kFileMagic = "scseg-volume";
inline constexpr int kFileVersion = 1;

void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelMap& m);
LabelMap read_labels(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset manifest

enum class Pool { Clean, Uncorrected };
std::string to_string(Pool p);
Pool pool_from_string(const std::string& s);

struct ManifestEntry {
    std::filesystem::path volume_path;  // absolute after read_manifest
    std::filesystem::path label_path;
    Pool pool = Pool::Clean;
    double age_t = 0.0;
};

/// Relative paths are resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct Subject {
    std::string id;
    Volume volume;
    LabelMap labels;
    Pool pool = Pool::Clean;
    double age_t = 0.0;
};

/// Loads every entry, checking volume/label alignment and label range.
std::vector<Subject> load_subjects(const std::vector<ManifestEntry>& entries, int classes);

/// A train/val/test phantom collection. Ages are spread evenly over
/// [age_min, age_max] and each goes to the split furthest behind its share, so
/// every split spans the range. `uncorrected` training subjects, spread evenly
/// over the training ages, get corrupted labels.
struct DatasetSpec {
    std::size_t train = 16, val = 4, test = 4;
    std::size_t uncorrected = 8;
    double flip_rate = 0.2;
    double age_min = 0.0, age_max = 1.0;
    std::uint64_t seed = 0;
    PhantomSpec phantom;  // age_t and seed are overridden per subject

    void validate() const;
};

struct DatasetPaths {
    std::filesystem::path train, val, test;  // manifest files
};

/// Writes volumes, labels and manifest.json / manifest_val.json / manifest_test.json into `dir`.
DatasetPaths generate_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

}  // namespace scseg
