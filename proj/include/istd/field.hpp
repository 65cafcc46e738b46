#pragma once

#include <cstdint>
#include <vector>

#include "istd/errors.hpp"

namespace istd {

// Row-major 2D grid of doubles. (x, y) = (column, row); index = y*width + x.
// Carries images, thermal fields, soft labels, and predictions.
class ScalarField {
public:
    ScalarField() = default;

    ScalarField(int width, int height, double fill = 0.0)
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(check_dims(width, height)), fill) {}

    ScalarField(int width, int height, std::vector<double> data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(check_dims(width, height))) {
            throw ShapeError("ScalarField: data length != width*height");
        }
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }

    double& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    double at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const ScalarField& other) const {
        return width_ == other.width_ && height_ == other.height_;
    }

    bool all_finite() const;
    double sum() const;
    double min() const;
    double max() const;

private:
    static long long check_dims(int width, int height) {
        if (width < 1 || height < 1) {
            throw ShapeError("ScalarField: width and height must be >= 1");
        }
        return static_cast<long long>(width) * height;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<double> data_;
};

// Single-point target label: the pixel the annotator clicked.
struct PointAnnotation {
    int x = 0;
    int y = 0;
    int target_id = 0;

    bool inside(int width, int height) const {
        return x >= 0 && x < width && y >= 0 && y < height;
    }
};

// Per-pixel {0,1} mask with ScalarField shape semantics.
class BinaryMask {
public:
    BinaryMask() = default;

    BinaryMask(int width, int height, uint8_t fill = 0)
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(static_cast<long long>(width) * height), fill) {
        if (width < 1 || height < 1) {
            throw ShapeError("BinaryMask: width and height must be >= 1");
        }
        if (fill > 1) {
            throw InvalidField("BinaryMask: values must be 0 or 1");
        }
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }

    uint8_t& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    uint8_t at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

    uint8_t& operator[](std::size_t i) { return data_[i]; }
    uint8_t operator[](std::size_t i) const { return data_[i]; }

    const std::vector<uint8_t>& data() const { return data_; }
    std::vector<uint8_t>& data() { return data_; }

    bool same_shape(const BinaryMask& other) const {
        return width_ == other.width_ && height_ == other.height_;
    }

    std::size_t count() const;

    ScalarField as_field() const;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<uint8_t> data_;
};

// (f - min) / (max - min); all zeros when the field is constant. Output in [0,1].
ScalarField normalize_field(const ScalarField& f);

// Per-pixel magnitude of central differences; one-sided at the borders.
// Input is expected normalized but any finite field is accepted.
ScalarField gradient_magnitude(const ScalarField& image);

} // namespace istd
