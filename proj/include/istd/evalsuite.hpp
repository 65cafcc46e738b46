#pragma once

#include <string>

#include "istd/field.hpp"

namespace istd {

struct Component {
    std::vector<std::size_t> pixels; // linear indices, ascending
    double cx = 0.0;
    double cy = 0.0;
};

// 8-connected components, ordered by the scanline position of their first
// pixel; centroids are mean pixel coordinates.
std::vector<Component> connected_components(const BinaryMask& mask);

// |a & b| / |a | b|, defined as 1 when both masks are empty.
double pixel_iou(const BinaryMask& pred, const BinaryMask& gt);

struct PerImageMetrics {
    std::string id;
    double iou = 1.0;
    int detected_targets = 0;
    int total_targets = 0;
    long long false_pixels = 0;
    // Raw counts so the aggregates are recomputable from the rows.
    long long intersection = 0;
    long long union_pixels = 0;
    long long image_pixels = 0;
};

struct MetricsReport {
    double iou = 1.0;  // pooled over all pixels
    double niou = 1.0; // mean of per-image IoU
    double pd = 1.0;   // matched GT components / total GT components
    double fa = 0.0;   // pixels of unmatched predicted components / all pixels
    std::vector<PerImageMetrics> per_image;
};

// Target matching: a GT component is detected iff some predicted component
// centroid lies within dist_thresh of its centroid; assignment is greedy by
// distance and one-to-one. False-alarm pixels are those of unmatched
// predicted components.
MetricsReport dataset_metrics(const std::vector<BinaryMask>& preds,
                              const std::vector<BinaryMask>& gts, double dist_thresh = 3.0,
                              const std::vector<std::string>* ids = nullptr);

// JSON document with the aggregate metrics (fa also scaled by 1e6, the unit
// the benchmarks report) and the per-image rows.
void write_report(const std::string& path, const MetricsReport& report);

} // namespace istd
