#include "istd/field.hpp"

#include <algorithm>
#include <cmath>

namespace istd {

bool ScalarField::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

double ScalarField::sum() const {
    double s = 0.0;
    for (double v : data_) {
        s += v;
    }
    return s;
}

double ScalarField::min() const { return *std::min_element(data_.begin(), data_.end()); }

double ScalarField::max() const { return *std::max_element(data_.begin(), data_.end()); }

std::size_t BinaryMask::count() const {
    std::size_t c = 0;
    for (uint8_t v : data_) {
        c += v;
    }
    return c;
}

ScalarField BinaryMask::as_field() const {
    ScalarField f(width_, height_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
        f[i] = data_[i];
    }
    return f;
}

ScalarField normalize_field(const ScalarField& f) {
    if (f.size() == 0) {
        throw InvalidField("normalize_field: empty field");
    }
    if (!f.all_finite()) {
        throw InvalidField("normalize_field: non-finite input");
    }
    const double lo = f.min();
    const double hi = f.max();
    ScalarField out(f.width(), f.height());
    if (hi == lo) {
        return out;
    }
    const double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < f.size(); ++i) {
        out[i] = (f[i] - lo) * inv;
    }
    return out;
}

ScalarField gradient_magnitude(const ScalarField& image) {
    if (image.size() == 0) {
        throw InvalidField("gradient_magnitude: empty field");
    }
    if (!image.all_finite()) {
        throw InvalidField("gradient_magnitude: non-finite input");
    }
    const int w = image.width();
    const int h = image.height();
    ScalarField out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double gx = 0.0;
            if (w > 1) {
                if (x == 0) {
                    gx = image.at(1, y) - image.at(0, y);
                } else if (x == w - 1) {
                    gx = image.at(w - 1, y) - image.at(w - 2, y);
                } else {
                    gx = 0.5 * (image.at(x + 1, y) - image.at(x - 1, y));
                }
            }
            double gy = 0.0;
            if (h > 1) {
                if (y == 0) {
                    gy = image.at(x, 1) - image.at(x, 0);
                } else if (y == h - 1) {
                    gy = image.at(x, h - 1) - image.at(x, h - 2);
                } else {
                    gy = 0.5 * (image.at(x, y + 1) - image.at(x, y - 1));
                }
            }
            out.at(x, y) = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

} // namespace istd
