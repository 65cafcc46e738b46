#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "istd/field.hpp"

namespace istd {

// One training/eval unit: image, its point labels, the current pseudo-label,
// and optional ground truth (synthetic data always has it).
struct Sample {
    std::string id;
    ScalarField image;
    std::vector<PointAnnotation> points;
    ScalarField pseudo_label;
    BinaryMask gt_mask;
    bool has_gt = false;
    int bucket = 0; // difficulty tag for weight analysis (0 = easy/default)

    // Cached pseudo-label statistics, refreshed on every (re)annotation.
    double label_area_fraction = 0.0;
    double label_compactness = 0.0;
};

enum class PointMode { Centroid, Coarse };

// Deterministic synthetic infrared scene: rotated anisotropic Gaussian
// targets over low-frequency clutter plus white noise. Ground truth is the
// half-max footprint of each target.
struct SceneSpec {
    int width = 256;
    int height = 256;
    int min_targets = 1;
    int max_targets = 3;
    double amp_lo = 0.2;
    double amp_hi = 0.9;
    double sigma_lo = 1.0;
    double sigma_hi = 4.0;
    double clutter = 0.15;     // low-frequency smoothed-noise amplitude
    double noise_sigma = 0.01; // additive white noise sigma
    uint64_t seed = 0;
    PointMode point_mode = PointMode::Centroid;
};

struct Scene {
    ScalarField image;
    BinaryMask gt_mask;
    std::vector<PointAnnotation> points;
    double mean_amplitude = 0.0;
};

Scene synth_scene(const SceneSpec& spec);

// n scenes with per-scene seeds derived from spec.seed; ids are zero-padded
// indices. bucket = 1 for mean target amplitude < 0.5, else 0.
std::vector<Sample> synth_dataset(const SceneSpec& spec, int n);

// --- file formats ------------------------------------------------------

// PGM (P5), 8- or 16-bit. Images are written 16-bit; masks 8-bit 0/255.
void write_pgm(const std::string& path, const ScalarField& f);
void write_pgm(const std::string& path, const BinaryMask& mask);
ScalarField load_pgm(const std::string& path);
BinaryMask load_pgm_mask(const std::string& path);

// SMSK soft-mask container: "SMSK", u32le width, u32le height, then
// width*height float32le row-major.
void write_smsk(const std::string& path, const ScalarField& f);
ScalarField load_smsk(const std::string& path);

// --- dataset layout -----------------------------------------------------
// root/images/<id>.pgm, root/masks/<id>.pgm (optional),
// root/points.csv (image_id,x,y,target_id), root/splits.csv (image_id,split)

struct DatasetEntry {
    std::string id;
    std::string image_path;
    std::string mask_path; // empty when absent
    std::vector<PointAnnotation> points;
    int width = 0;
    int height = 0;
};

struct DatasetIndex {
    std::string root;
    std::string split;
    std::vector<DatasetEntry> entries;
};

// Validated index for one split ("" = all splits). Malformed rows, missing
// files, bad magic and out-of-range points raise IngestError naming the spot.
DatasetIndex load_dataset(const std::string& root, const std::string& split);

// Loads pixel data for every entry.
std::vector<Sample> materialize(const DatasetIndex& index);

// Writes the full layout (images, masks when present, points.csv,
// splits.csv) for one split, overwriting existing files.
void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::string& split);

} // namespace istd
