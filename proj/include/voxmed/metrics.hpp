#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxmed/tensor.hpp"

namespace voxmed {

// Overlap and surface-distance metrics for one binary mask pair. Distances
// are in millimetres using the voxel spacing. With both masks empty the
// overlap metrics are 1 and the distances 0 by convention; with exactly one
// empty mask the distances are undefined (NaN, surface_defined = false).
struct CaseMetrics {
    double dsc = 0.0;
    double precision = 0.0;
    double sensitivity = 0.0;
    double assd_mm = 0.0;
    double hausdorff_mm = 0.0;
    bool surface_defined = true;
};

CaseMetrics binary_metrics(const MaskVolume& pred, const MaskVolume& ref,
                           std::array<double, 3> spacing, double hausdorff_percentile = 100.0);

MaskVolume binarize(const LabelVolume& labels, const std::vector<i64>& classes);

struct MetricRow {
    std::string name;
    CaseMetrics metrics;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    CaseMetrics mean;
    CaseMetrics stddev;
};

// Aggregates rows into mean/std; distances average over the rows where they
// are defined.
MetricReport aggregate(std::vector<MetricRow> rows);

// Per-foreground-class comparison of two label maps plus a merged-foreground
// row; classes = number of classes including background.
MetricReport evaluate_labels(const LabelVolume& pred, const LabelVolume& ref, i64 classes,
                             std::array<double, 3> spacing, double hausdorff_percentile = 100.0);

}  // namespace voxmed
