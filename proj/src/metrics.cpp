#include "voxmed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace voxmed {

namespace {

struct Point3 {
    i64 x, y, z;
};

// Face-connected boundary voxels; everything outside the volume counts as
// background, so masks touching the border contribute surface there.
std::vector<Point3> surface_voxels(const MaskVolume& m) {
    std::vector<Point3> surf;
    const Dims3 d = m.dims;
    for (i64 z = 0; z < d.z; ++z)
        for (i64 y = 0; y < d.y; ++y)
            for (i64 x = 0; x < d.x; ++x) {
                if (!m.at(0, x, y, z)) continue;
                const bool boundary =
                    x == 0 || !m.at(0, x - 1, y, z) || x == d.x - 1 || !m.at(0, x + 1, y, z) ||
                    y == 0 || !m.at(0, x, y - 1, z) || y == d.y - 1 || !m.at(0, x, y + 1, z) ||
                    z == 0 || !m.at(0, x, y, z - 1) || z == d.z - 1 || !m.at(0, x, y, z + 1);
                if (boundary) surf.push_back({x, y, z});
            }
    return surf;
}

// Distance from every point of `from` to the nearest point of `to`, in mm.
std::vector<double> directed_distances(const std::vector<Point3>& from,
                                       const std::vector<Point3>& to,
                                       std::array<double, 3> sp) {
    std::vector<double> out(from.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::size_t i = 0; i < from.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : to) {
            const double dx = static_cast<double>(from[i].x - t.x) * sp[0];
            const double dy = static_cast<double>(from[i].y - t.y) * sp[1];
            const double dz = static_cast<double>(from[i].z - t.z) * sp[2];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        out[i] = std::sqrt(best);
    }
    return out;
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    if (pct >= 100.0) return values.back();
    const double rank = pct / 100.0 * static_cast<double>(values.size());
    const std::size_t idx =
        std::min(values.size() - 1,
                 static_cast<std::size_t>(std::max(0.0, std::ceil(rank) - 1.0)));
    return values[idx];
}

}  // namespace

CaseMetrics binary_metrics(const MaskVolume& pred, const MaskVolume& ref,
                           std::array<double, 3> spacing, double hausdorff_percentile) {
    check(pred.dims == ref.dims, "metrics: mask dims differ (", to_string(pred.dims), " vs ",
          to_string(ref.dims), ")");
    i64 tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0;
        const bool r = ref.data[i] != 0;
        tp += p && r;
        fp += p && !r;
        fn += !p && r;
    }
    CaseMetrics m;
    const i64 pred_n = tp + fp, ref_n = tp + fn;
    if (pred_n == 0 && ref_n == 0) {
        m.dsc = m.precision = m.sensitivity = 1.0;
        m.assd_mm = m.hausdorff_mm = 0.0;
        return m;
    }
    m.dsc = pred_n + ref_n > 0 ? 2.0 * static_cast<double>(tp) /
                                     static_cast<double>(pred_n + ref_n)
                               : 1.0;
    m.precision = pred_n > 0 ? static_cast<double>(tp) / static_cast<double>(pred_n) : 0.0;
    m.sensitivity = ref_n > 0 ? static_cast<double>(tp) / static_cast<double>(ref_n) : 0.0;

    if (pred_n == 0 || ref_n == 0) {
        m.assd_mm = m.hausdorff_mm = std::numeric_limits<double>::quiet_NaN();
        m.surface_defined = false;
        return m;
    }
    const auto sp = surface_voxels(pred);
    const auto sr = surface_voxels(ref);
    auto d_pr = directed_distances(sp, sr, spacing);
    auto d_rp = directed_distances(sr, sp, spacing);
    double sum = 0.0;
    for (double d : d_pr) sum += d;
    for (double d : d_rp) sum += d;
    m.assd_mm = sum / static_cast<double>(d_pr.size() + d_rp.size());
    std::vector<double> pooled = d_pr;
    pooled.insert(pooled.end(), d_rp.begin(), d_rp.end());
    m.hausdorff_mm = percentile(std::move(pooled), hausdorff_percentile);
    return m;
}

MaskVolume binarize(const LabelVolume& labels, const std::vector<i64>& classes) {
    MaskVolume m(1, labels.dims, labels.spacing);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const i64 v = labels.data[i];
        m.data[i] = std::find(classes.begin(), classes.end(), v) != classes.end() ? 1 : 0;
    }
    return m;
}

MetricReport aggregate(std::vector<MetricRow> rows) {
    MetricReport r;
    r.rows = std::move(rows);
    if (r.rows.empty()) return r;
    auto stat = [&](auto get, bool surface) {
        double sum = 0.0, sq = 0.0;
        i64 n = 0;
        for (const auto& row : r.rows) {
            if (surface && !row.metrics.surface_defined) continue;
            const double v = get(row.metrics);
            sum += v;
            sq += v * v;
            ++n;
        }
        if (n == 0) return std::array<double, 2>{std::numeric_limits<double>::quiet_NaN(),
                                                 std::numeric_limits<double>::quiet_NaN()};
        const double mean = sum / static_cast<double>(n);
        return std::array<double, 2>{mean, std::sqrt(std::max(0.0, sq / static_cast<double>(n) -
                                                                        mean * mean))};
    };
    auto set = [&](auto get, double CaseMetrics::* field, bool surface) {
        const auto ms = stat(get, surface);
        r.mean.*field = ms[0];
        r.stddev.*field = ms[1];
    };
    set([](const CaseMetrics& m) { return m.dsc; }, &CaseMetrics::dsc, false);
    set([](const CaseMetrics& m) { return m.precision; }, &CaseMetrics::precision, false);
    set([](const CaseMetrics& m) { return m.sensitivity; }, &CaseMetrics::sensitivity, false);
    set([](const CaseMetrics& m) { return m.assd_mm; }, &CaseMetrics::assd_mm, true);
    set([](const CaseMetrics& m) { return m.hausdorff_mm; }, &CaseMetrics::hausdorff_mm, true);
    r.mean.surface_defined = true;
    r.stddev.surface_defined = true;
    return r;
}

MetricReport evaluate_labels(const LabelVolume& pred, const LabelVolume& ref, i64 classes,
                             std::array<double, 3> spacing, double hausdorff_percentile) {
    check(pred.dims == ref.dims, "evaluate_labels: label map dims differ");
    std::vector<MetricRow> rows;
    std::vector<i64> all_fg;
    for (i64 c = 1; c < classes; ++c) all_fg.push_back(c);
    for (i64 c = 1; c < classes; ++c) {
        MetricRow row;
        row.name = "class" + std::to_string(c);
        row.metrics = binary_metrics(binarize(pred, {c}), binarize(ref, {c}), spacing,
                                     hausdorff_percentile);
        rows.push_back(std::move(row));
    }
    if (all_fg.size() > 1) {
        MetricRow row;
        row.name = "foreground";
        row.metrics = binary_metrics(binarize(pred, all_fg), binarize(ref, all_fg), spacing,
                                     hausdorff_percentile);
        rows.push_back(std::move(row));
    }
    return aggregate(std::move(rows));
}

}  // namespace voxmed
