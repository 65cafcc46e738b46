#pragma once

#include "istd/field.hpp"

namespace istd {

// Dense superpixel segmentation. labels are compact ids in [0, count); each
// label's pixel set is 4-connected.
struct SuperpixelLabels {
    int width = 0;
    int height = 0;
    std::vector<int> labels;
    int count = 0;

    int at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct SlicParams {
    int cell = 16;
    double compactness = 10.0;
    int iters = 10;
};

// SLIC on the single-channel image: k-means over (intensity, spatial)
// features with seeds on a cell grid, search window +-cell around each
// center, then connectivity enforcement (orphan fragments merge into the
// largest adjacent label). Intensity enters the cost in 8-bit units
// (255 * I), the scale the usual compactness values are calibrated for.
// Deterministic: fixed iteration order, cost ties keep the lower seed index.
SuperpixelLabels slic(const ScalarField& image, int cell, double compactness, int iters);

inline SuperpixelLabels slic(const ScalarField& image, const SlicParams& p = {}) {
    return slic(image, p.cell, p.compactness, p.iters);
}

// 1 exactly on pixels sharing the label at p.
BinaryMask region_mask(const SuperpixelLabels& labels, const PointAnnotation& p);

} // namespace istd
