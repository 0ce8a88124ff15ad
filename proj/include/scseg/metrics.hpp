#pragma once

#include <array>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "scseg/data.hpp"

namespace scseg {

/// Raised when a metric has no defined value (ASD with an empty surface).
class UndefinedMetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct BinaryMask {
    Dims dims{0, 0, 0};
    std::vector<std::uint8_t> inside;  // 0 or 1
};

BinaryMask class_mask(const LabelMap& labels, int cls);

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice(const BinaryMask& a, const BinaryMask& b);
double dice(const LabelMap& pred, const LabelMap& gt, int cls);

using Voxel = std::array<std::size_t, 3>;

/// Mask voxels with at least one of the six face neighbours outside the mask;
/// the grid border counts as outside. Returned in index order.
std::vector<Voxel> boundary_voxels(const BinaryMask& mask);

/// Exact squared Euclidean distance (mm^2) from every voxel centre to the nearest
/// site; separable lower-envelope transform. Infinity everywhere when there are no sites.
std::vector<double> squared_distance_transform(const BinaryMask& sites, const Spacing& spacing_mm);

/// Symmetric mean surface distance in mm between the 6-connectivity boundaries.
/// Throws UndefinedMetricError when either boundary is empty.
double average_surface_distance(const BinaryMask& pred, const BinaryMask& gt, const Spacing& spacing_mm);

struct ClassReport {
    int cls = 0;
    double dsc = 0.0;
    double asd_mm = 0.0;     // NaN when undefined and recorded rather than thrown
    bool asd_defined = true;
    std::size_t pred_voxels = 0, gt_voxels = 0;
};

struct SubjectReport {
    std::string id;
    double age_t = 0.0;
    std::vector<ClassReport> classes;  // foreground classes 1..C-1
};

enum class UndefinedAsd { Throw, Record };

/// Dice and ASD for every foreground class.
std::vector<ClassReport> evaluate(const LabelMap& pred, const LabelMap& gt, const Spacing& spacing_mm, int classes,
                                  UndefinedAsd policy = UndefinedAsd::Throw);

struct MeanStd {
    double mean = 0.0, std = 0.0;  // population std
    std::size_t n = 0;
};

/// Population mean and std; n = 0 and NaN fields for an empty input.
MeanStd mean_std(const std::vector<double>& values);

struct ClassAggregate {
    int cls = 0;
    MeanStd dsc, asd_mm;  // ASD over subjects where it is defined
};

std::vector<ClassAggregate> aggregate(const std::vector<SubjectReport>& reports);

std::string class_name(int cls, int classes);

inline constexpr int kReportSchemaVersion = 1;

void write_report_json(std::ostream& out, const std::vector<SubjectReport>& reports, int classes);
/// Aligned plain-text table of mean +- std per class.
void write_report_table(std::ostream& out, const std::vector<SubjectReport>& reports, int classes);
/// One row per (subject, class): subject,age_t,class,dsc,asd_mm,pred_voxels,gt_voxels.
void write_report_csv(std::ostream& out, const std::vector<SubjectReport>& reports, int classes);

}  // namespace scseg
