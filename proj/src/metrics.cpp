#include "scseg/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace scseg {

BinaryMask class_mask(const LabelMap& labels, int cls) {
    BinaryMask m{labels.dims, std::vector<std::uint8_t>(labels.labels.size())};
    for (std::size_t i = 0; i < labels.labels.size(); ++i) m.inside[i] = labels.labels[i] == cls ? 1 : 0;
    return m;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
    if (a.dims != b.dims) throw std::invalid_argument("dice: masks are not aligned");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.inside.size(); ++i) {
        na += a.inside[i];
        nb += b.inside[i];
        both += a.inside[i] & b.inside[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice(const LabelMap& pred, const LabelMap& gt, int cls) { return dice(class_mask(pred, cls), class_mask(gt, cls)); }

std::vector<Voxel> boundary_voxels(const BinaryMask& m) {
    const Dims& d = m.dims;
    auto in = [&](std::size_t x, std::size_t y, std::size_t z) { return m.inside[voxel_index(d, x, y, z)] != 0; };
    std::vector<Voxel> out;
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t z = 0; z < d[2]; ++z) {
                if (!in(x, y, z)) continue;
                const bool interior = x > 0 && x + 1 < d[0] && y > 0 && y + 1 < d[1] && z > 0 && z + 1 < d[2] &&
                                      in(x - 1, y, z) && in(x + 1, y, z) && in(x, y - 1, z) && in(x, y + 1, z) &&
                                      in(x, y, z - 1) && in(x, y, z + 1);
                if (!interior) out.push_back({x, y, z});
            }
    return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// out[p] = min_q ((p - q) * h)^2 + f[q] over a strided line.
void lower_envelope(double* f, std::size_t n, std::size_t stride, double h, std::vector<double>& work,
                    std::vector<std::size_t>& v, std::vector<double>& zb) {
    work.resize(n);
    v.resize(n);
    zb.resize(n + 1);
    for (std::size_t i = 0; i < n; ++i) work[i] = f[i * stride];
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (work[q] == kInf) continue;
        const double pq = static_cast<double>(q) * h;
        if (!any) {
            v[0] = q;
            zb[0] = -kInf;
            zb[1] = kInf;
            k = 0;
            any = true;
            continue;
        }
        auto meet = [&](std::size_t r) {
            const double pr = static_cast<double>(r) * h;
            return ((work[q] + pq * pq) - (work[r] + pr * pr)) / (2.0 * (pq - pr));
        };
        double s = meet(v[k]);
        while (s <= zb[k]) s = meet(v[--k]);  // zb[0] = -inf stops the walk
        ++k;
        v[k] = q;
        zb[k] = s;
        zb[k + 1] = kInf;
    }
    if (!any) return;  // line stays at infinity
    k = 0;
    for (std::size_t p = 0; p < n; ++p) {
        const double pp = static_cast<double>(p) * h;
        while (zb[k + 1] < pp) ++k;
        const double dv = pp - static_cast<double>(v[k]) * h;
        f[p * stride] = dv * dv + work[v[k]];
    }
}

}  // namespace

std::vector<double> squared_distance_transform(const BinaryMask& sites, const Spacing& sp) {
    const Dims& d = sites.dims;
    std::vector<double> f(sites.inside.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites.inside[i] ? 0.0 : kInf;
    std::vector<double> work, zb;
    std::vector<std::size_t> v;
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t y = 0; y < d[1]; ++y) lower_envelope(f.data() + voxel_index(d, x, y, 0), d[2], 1, sp[2], work, v, zb);
    for (std::size_t x = 0; x < d[0]; ++x)
        for (std::size_t z = 0; z < d[2]; ++z) lower_envelope(f.data() + voxel_index(d, x, 0, z), d[1], d[2], sp[1], work, v, zb);
    for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t z = 0; z < d[2]; ++z) lower_envelope(f.data() + voxel_index(d, 0, y, z), d[0], d[1] * d[2], sp[0], work, v, zb);
    return f;
}

double average_surface_distance(const BinaryMask& pred, const BinaryMask& gt, const Spacing& sp) {
    if (pred.dims != gt.dims) throw std::invalid_argument("average_surface_distance: masks are not aligned");
    const auto bp = boundary_voxels(pred);
    const auto bg = boundary_voxels(gt);
    if (bp.empty() || bg.empty()) {
        throw UndefinedMetricError(std::string("average_surface_distance: ") + (bp.empty() ? "prediction" : "reference") +
                                   " surface is empty");
    }
    auto directed = [&](const std::vector<Voxel>& from, const std::vector<Voxel>& to) {
        BinaryMask sites{pred.dims, std::vector<std::uint8_t>(pred.inside.size(), 0)};
        for (const auto& p : to) sites.inside[voxel_index(pred.dims, p[0], p[1], p[2])] = 1;
        const auto dt = squared_distance_transform(sites, sp);
        double sum = 0.0;
        for (const auto& p : from) sum += std::sqrt(dt[voxel_index(pred.dims, p[0], p[1], p[2])]);
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

std::vector<ClassReport> evaluate(const LabelMap& pred, const LabelMap& gt, const Spacing& sp, int classes, UndefinedAsd policy) {
    if (pred.dims != gt.dims) throw std::invalid_argument("evaluate: prediction and reference are not aligned");
    std::vector<ClassReport> out;
    for (int c = 1; c < classes; ++c) {
        const auto a = class_mask(pred, c), b = class_mask(gt, c);
        ClassReport r;
        r.cls = c;
        r.dsc = dice(a, b);
        for (auto v : a.inside) r.pred_voxels += v;
        for (auto v : b.inside) r.gt_voxels += v;
        try {
            r.asd_mm = average_surface_distance(a, b, sp);
        } catch (const UndefinedMetricError&) {
            if (policy == UndefinedAsd::Throw) throw;
            r.asd_mm = std::numeric_limits<double>::quiet_NaN();
            r.asd_defined = false;
        }
        out.push_back(r);
    }
    return out;
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd m;
    m.n = values.size();
    if (values.empty()) {
        m.mean = m.std = std::numeric_limits<double>::quiet_NaN();
        return m;
    }
    double s = 0.0;
    for (double v : values) s += v;
    m.mean = s / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size()));
    return m;
}

std::vector<ClassAggregate> aggregate(const std::vector<SubjectReport>& reports) {
    std::vector<ClassAggregate> out;
    if (reports.empty()) return out;
    for (std::size_t k = 0; k < reports.front().classes.size(); ++k) {
        std::vector<double> d, a;
        for (const auto& r : reports) {
            const auto& c = r.classes.at(k);
            d.push_back(c.dsc);
            if (c.asd_defined) a.push_back(c.asd_mm);
        }
        out.push_back({reports.front().classes[k].cls, mean_std(d), mean_std(a)});
    }
    return out;
}

std::string class_name(int cls, int classes) {
    if (classes == kDefaultClasses) {
        static const char* names[] = {"BG", "CSF", "GM", "WM"};
        return names[cls];
    }
    return "class" + std::to_string(cls);
}

namespace {

nlohmann::ordered_json number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

void write_report_json(std::ostream& out, const std::vector<SubjectReport>& reports, int classes) {
    using oj = nlohmann::ordered_json;
    oj j;
    j["schema_version"] = kReportSchemaVersion;
    j["classes"] = classes;
    oj subjects = oj::array();
    for (const auto& r : reports) {
        oj s;
        s["id"] = r.id;
        s["age_t"] = r.age_t;
        oj cs = oj::array();
        for (const auto& c : r.classes) {
            oj e;
            e["class"] = class_name(c.cls, classes);
            e["label"] = c.cls;
            e["dsc"] = c.dsc;
            e["asd_mm"] = number_or_null(c.asd_mm);
            e["pred_voxels"] = c.pred_voxels;
            e["gt_voxels"] = c.gt_voxels;
            cs.push_back(e);
        }
        s["classes"] = cs;
        subjects.push_back(s);
    }
    j["subjects"] = subjects;
    oj agg = oj::array();
    for (const auto& a : aggregate(reports)) {
        oj e;
        e["class"] = class_name(a.cls, classes);
        e["label"] = a.cls;
        e["dsc_mean"] = number_or_null(a.dsc.mean);
        e["dsc_std"] = number_or_null(a.dsc.std);
        e["asd_mm_mean"] = number_or_null(a.asd_mm.mean);
        e["asd_mm_std"] = number_or_null(a.asd_mm.std);
        e["subjects"] = a.dsc.n;
        e["asd_defined"] = a.asd_mm.n;
        agg.push_back(e);
    }
    j["aggregate"] = agg;
    out << j.dump(2) << '\n';
}

void write_report_table(std::ostream& out, const std::vector<SubjectReport>& reports, int classes) {
    out << std::left << std::setw(8) << "class" << std::right << std::setw(20) << "DSC (%)" << std::setw(20)
        << "ASD (mm)" << std::setw(10) << "n" << '\n';
    out << std::fixed;
    for (const auto& a : aggregate(reports)) {
        std::ostringstream dsc, asd;
        dsc << std::fixed << std::setprecision(2) << 100.0 * a.dsc.mean << " +- " << 100.0 * a.dsc.std;
        asd << std::fixed << std::setprecision(3) << a.asd_mm.mean << " +- " << a.asd_mm.std;
        out << std::left << std::setw(8) << class_name(a.cls, classes) << std::right << std::setw(20) << dsc.str()
            << std::setw(20) << asd.str() << std::setw(10) << a.dsc.n << '\n';
    }
    out << std::defaultfloat;
}

void write_report_csv(std::ostream& out, const std::vector<SubjectReport>& reports, int classes) {
    out << "subject,age_t,class,dsc,asd_mm,pred_voxels,gt_voxels\n";
    out << std::setprecision(17);
    for (const auto& r : reports)
        for (const auto& c : r.classes) {
            out << r.id << ',' << r.age_t << ',' << class_name(c.cls, classes) << ',' << c.dsc << ',';
            if (c.asd_defined) out << c.asd_mm;
            out << ',' << c.pred_voxels << ',' << c.gt_voxels << '\n';
        }
}

}  // namespace scseg
