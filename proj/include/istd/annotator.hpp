#pragma once

#include "istd/datakit.hpp"
#include "istd/diffusion.hpp"
#include "istd/superpixel.hpp"

namespace istd {

// Soft pseudo-mask for one annotated target.
struct SoftMask {
    ScalarField field;
    PointAnnotation source;
};

struct AnnotateOptions {
    DiffusionParams diffusion;
    SlicParams slic;
    double rel_threshold = 0.3; // binarization level for export/scoring
};

// rho * normalized-diffusion + (1-rho) * superpixel-region, renormalized.
// The diffusion source is a unit delta at p over weights built from the
// image.
SoftMask generate_pseudo_label(const ScalarField& image, const PointAnnotation& p,
                               const DiffusionParams& params, const SuperpixelLabels& spx);

// Pixel is 1 iff value >= rel_threshold * max; a degenerate all-zero mask
// keeps only the source pixel.
BinaryMask binarize(const SoftMask& m, double rel_threshold);

// Merged per-image label: pixelwise max over the image's point labels;
// zero points give an all-zero label. One slic segmentation per image.
ScalarField annotate_image(const ScalarField& image, const std::vector<PointAnnotation>& points,
                           const AnnotateOptions& opts);

// Regenerates sample.pseudo_label (and the cached label statistics) for the
// whole set; images are processed independently and may run in parallel.
// A point outside its image raises AnnotationError naming the sample.
void annotate_dataset(std::vector<Sample>& samples, const AnnotateOptions& opts);

// Area fraction and 4*pi*area/perimeter^2 (clamped to [0,1]) of the label
// binarized at rel_threshold; used as meta-network features.
struct LabelStats {
    double area_fraction = 0.0;
    double compactness = 0.0;
};
LabelStats label_stats(const ScalarField& label, double rel_threshold);

// Coarse-mode jitter: moves each point uniformly inside the ground-truth
// component it belongs to when truth is available, otherwise within a 3-px
// disk (clamped to the image).
std::vector<PointAnnotation> coarsen_points(const std::vector<PointAnnotation>& points,
                                            const BinaryMask* gt_mask, int width, int height,
                                            uint64_t seed);

} // namespace istd
