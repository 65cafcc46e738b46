#include "istd/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace istd {

namespace {

struct Center {
    double x, y, intensity;
};

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

} // namespace

SuperpixelLabels slic(const ScalarField& image, int cell, double compactness, int iters) {
    const int W = image.width();
    const int H = image.height();
    if (cell < 4) {
        throw InvalidParam("slic: cell must be >= 4");
    }
    if (cell > std::min(W, H)) {
        throw InvalidParam("slic: cell larger than the image");
    }
    if (!(compactness > 0.0)) {
        throw InvalidParam("slic: compactness must be > 0");
    }
    if (iters < 1) {
        throw InvalidParam("slic: iters must be >= 1");
    }
    if (!image.all_finite()) {
        throw InvalidField("slic: non-finite image");
    }

    const int nx = std::max(1, W / cell);
    const int ny = std::max(1, H / cell);
    const double sx = static_cast<double>(W) / nx;
    const double sy = static_cast<double>(H) / ny;

    // Seeds at cell centers, moved to the lowest-gradient pixel of the 3x3
    // neighborhood only when that strictly improves; flat images keep the
    // exact fractional centers (and hence exact block partitions).
    const ScalarField grad = gradient_magnitude(image);
    std::vector<Center> centers;
    centers.reserve(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            double cx = (i + 0.5) * sx - 0.5;
            double cy = (j + 0.5) * sy - 0.5;
            const int rx = clampi(static_cast<int>(std::llround(cx)), 0, W - 1);
            const int ry = clampi(static_cast<int>(std::llround(cy)), 0, H - 1);
            double best = grad.at(rx, ry);
            int bx = -1, by = -1;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const int px = rx + dx, py = ry + dy;
                    if (px < 0 || px >= W || py < 0 || py >= H) {
                        continue;
                    }
                    if (grad.at(px, py) < best) {
                        best = grad.at(px, py);
                        bx = px;
                        by = py;
                    }
                }
            }
            if (bx >= 0) {
                cx = bx;
                cy = by;
            }
            const int ix = clampi(static_cast<int>(std::llround(cx)), 0, W - 1);
            const int iy = clampi(static_cast<int>(std::llround(cy)), 0, H - 1);
            centers.push_back({cx, cy, image.at(ix, iy)});
        }
    }
    const int k = static_cast<int>(centers.size());

    // Intensity in 8-bit units; spatial scaled by compactness/cell.
    const double intensity_scale = 255.0;
    const double spatial = compactness / cell;
    const double spatial2 = spatial * spatial;

    std::vector<int> labels(static_cast<std::size_t>(W) * H, -1);
    std::vector<double> best_cost(labels.size(), std::numeric_limits<double>::infinity());

    for (int iter = 0; iter < iters; ++iter) {
        std::fill(labels.begin(), labels.end(), -1);
        std::fill(best_cost.begin(), best_cost.end(), std::numeric_limits<double>::infinity());
        for (int c = 0; c < k; ++c) {
            const Center& ct = centers[c];
            const int x0 = clampi(static_cast<int>(std::ceil(ct.x - cell)), 0, W - 1);
            const int x1 = clampi(static_cast<int>(std::floor(ct.x + cell)), 0, W - 1);
            const int y0 = clampi(static_cast<int>(std::ceil(ct.y - cell)), 0, H - 1);
            const int y1 = clampi(static_cast<int>(std::floor(ct.y + cell)), 0, H - 1);
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double di = (image.at(x, y) - ct.intensity) * intensity_scale;
                    const double dx = x - ct.x;
                    const double dy = y - ct.y;
                    const double cost = di * di + spatial2 * (dx * dx + dy * dy);
                    const std::size_t idx = static_cast<std::size_t>(y) * W + x;
                    if (cost < best_cost[idx]) {
                        best_cost[idx] = cost;
                        labels[idx] = c;
                    }
                }
            }
        }
        // Pixels outside every search window (cannot happen with the grid
        // spacing above, but keep the assignment total): nearest center.
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t idx = static_cast<std::size_t>(y) * W + x;
                if (labels[idx] >= 0) {
                    continue;
                }
                double best = std::numeric_limits<double>::infinity();
                for (int c = 0; c < k; ++c) {
                    const double dx = x - centers[c].x;
                    const double dy = y - centers[c].y;
                    const double d2 = dx * dx + dy * dy;
                    if (d2 < best) {
                        best = d2;
                        labels[idx] = c;
                    }
                }
            }
        }
        // Centroid update in (intensity, x, y); empty clusters keep their
        // previous center.
        std::vector<double> sum_x(k, 0.0), sum_y(k, 0.0), sum_i(k, 0.0);
        std::vector<long long> cnt(k, 0);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const int c = labels[static_cast<std::size_t>(y) * W + x];
                sum_x[c] += x;
                sum_y[c] += y;
                sum_i[c] += image.at(x, y);
                ++cnt[c];
            }
        }
        for (int c = 0; c < k; ++c) {
            if (cnt[c] > 0) {
                centers[c].x = sum_x[c] / cnt[c];
                centers[c].y = sum_y[c] / cnt[c];
                centers[c].intensity = sum_i[c] / cnt[c];
            }
        }
    }

    // Connectivity enforcement. Component-label the assignment, keep the
    // largest fragment of every label, merge the rest into the adjacent
    // label with the most pixels (ties: lower label).
    const std::size_t n = labels.size();
    std::vector<int> comp(n, -1);
    std::vector<std::vector<std::size_t>> comp_pixels;
    std::vector<int> comp_label;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n; ++start) {
        if (comp[start] >= 0) {
            continue;
        }
        const int cid = static_cast<int>(comp_pixels.size());
        comp_pixels.emplace_back();
        comp_label.push_back(labels[start]);
        stack.clear();
        stack.push_back(start);
        comp[start] = cid;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            comp_pixels[cid].push_back(p);
            const int x = static_cast<int>(p % W);
            const int y = static_cast<int>(p / W);
            const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& q : nbr) {
                if (q[0] < 0 || q[0] >= W || q[1] < 0 || q[1] >= H) {
                    continue;
                }
                const std::size_t qi = static_cast<std::size_t>(q[1]) * W + q[0];
                if (comp[qi] < 0 && labels[qi] == labels[start]) {
                    comp[qi] = cid;
                    stack.push_back(qi);
                }
            }
        }
    }
    // Largest component per label, ties by first pixel in scanline order
    // (components are numbered in that order already).
    std::vector<int> keeper(k, -1);
    for (int cid = 0; cid < static_cast<int>(comp_pixels.size()); ++cid) {
        const int lab = comp_label[cid];
        if (keeper[lab] < 0 || comp_pixels[cid].size() > comp_pixels[keeper[lab]].size()) {
            keeper[lab] = cid;
        }
    }
    std::vector<long long> label_size(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        ++label_size[labels[i]];
    }
    for (int cid = 0; cid < static_cast<int>(comp_pixels.size()); ++cid) {
        if (keeper[comp_label[cid]] == cid) {
            continue;
        }
        // Orphan: adjacent label with the largest current size.
        int target = -1;
        long long target_size = -1;
        for (const std::size_t p : comp_pixels[cid]) {
            const int x = static_cast<int>(p % W);
            const int y = static_cast<int>(p / W);
            const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& q : nbr) {
                if (q[0] < 0 || q[0] >= W || q[1] < 0 || q[1] >= H) {
                    continue;
                }
                const int lab = labels[static_cast<std::size_t>(q[1]) * W + q[0]];
                if (lab == comp_label[cid]) {
                    continue;
                }
                if (label_size[lab] > target_size ||
                    (label_size[lab] == target_size && lab < target)) {
                    target = lab;
                    target_size = label_size[lab];
                }
            }
        }
        if (target < 0) {
            continue; // whole image is one label
        }
        for (const std::size_t p : comp_pixels[cid]) {
            labels[p] = target;
        }
        label_size[target] += static_cast<long long>(comp_pixels[cid].size());
        label_size[comp_label[cid]] -= static_cast<long long>(comp_pixels[cid].size());
    }

    // Compact relabel in scanline first-occurrence order.
    std::vector<int> remap(k, -1);
    int next_id = 0;
    SuperpixelLabels out;
    out.width = W;
    out.height = H;
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        int& r = remap[labels[i]];
        if (r < 0) {
            r = next_id++;
        }
        out.labels[i] = r;
    }
    out.count = next_id;
    return out;
}

BinaryMask region_mask(const SuperpixelLabels& labels, const PointAnnotation& p) {
    if (!p.inside(labels.width, labels.height)) {
        throw InvalidParam("region_mask: point outside the grid");
    }
    const int target = labels.at(p.x, p.y);
    BinaryMask mask(labels.width, labels.height);
    for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        mask[i] = labels.labels[i] == target ? 1 : 0;
    }
    return mask;
}

} // namespace istd
