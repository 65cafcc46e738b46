#pragma once

#include <cstdint>
#include <string>

#include "istd/field.hpp"

namespace istd {

// 3-layer fully convolutional detector, channels 1->8->8->1, 3x3 kernels,
// leaky rectifier (slope 0.1) between layers, logistic output. 737
// parameters: 8*9+8 + 8*8*9+8 + 8*9+1.
inline constexpr int kDetectorChannels = 8;
inline constexpr int kDetectorParamCount = 737;
inline constexpr double kLeakySlope = 0.1;

// Parameter layout offsets (weights [oc][ic][ky][kx], then bias).
inline constexpr int kW1 = 0;             // 8*1*9
inline constexpr int kB1 = 72;            // 8
inline constexpr int kW2 = 80;            // 8*8*9
inline constexpr int kB2 = 656;           // 8
inline constexpr int kW3 = 664;           // 1*8*9
inline constexpr int kB3 = 736;           // 1

struct DetectorState {
    std::vector<double> params; // length kDetectorParamCount
    std::vector<double> m, v;   // AdamW moments
    uint64_t step = 0;

    // He-style init from a seeded generator; biases zero, moments zero.
    static DetectorState init(uint64_t seed);

    bool all_finite() const;
};

// Activations captured by a forward pass; consumed by detector_backward.
struct DetectorTape {
    int width = 0;
    int height = 0;
    std::vector<double> params;       // snapshot used by the pass
    std::vector<double> padded_input; // (H+2)*(W+2)
    std::vector<double> pre1;         // 8 planes H*W
    std::vector<double> padded_act1;  // 8 planes (H+2)*(W+2)
    std::vector<double> pre2;         // 8 planes H*W
    std::vector<double> padded_act2;  // 8 planes (H+2)*(W+2)
    std::vector<double> pred;         // H*W
};

struct DetectorForward {
    ScalarField prediction;
    DetectorTape tape;
};

// Same-shape prediction in (0,1) with zero same-padding.
DetectorForward detector_forward(const DetectorState& state, const ScalarField& image);

// Exact reverse-mode parameter gradient of the forward map contracted with
// upstream (d loss / d prediction). Throws TapeError for a tape that does
// not match.
std::vector<double> detector_backward(const DetectorTape& tape, const ScalarField& upstream);

struct SoftIou {
    double loss = 0.0;
    ScalarField grad_pred;
};

// 1 - sum(p*t) / (sum p + sum t - sum(p*t) + eps), eps = 1e-7, with the
// exact gradient w.r.t. the prediction.
SoftIou soft_iou_loss(const ScalarField& pred, const ScalarField& target);

inline constexpr double kSoftIouEps = 1e-7;

// Decoupled-weight-decay adaptive moment step (AdamW).
void adamw_step(DetectorState& state, const std::vector<double>& grad, double lr,
                double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

// "DCKP" checkpoint: u32le param count, f64le params, f64le first and second
// moments, u64le step counter.
void save_checkpoint(const std::string& path, const DetectorState& state);
DetectorState load_checkpoint(const std::string& path);

} // namespace istd
