#include "istd/annotator.hpp"

#include <algorithm>
#include <cmath>

#include "istd/parallel.hpp"
#include "istd/rng.hpp"

namespace istd {

SoftMask generate_pseudo_label(const ScalarField& image, const PointAnnotation& p,
                               const DiffusionParams& params, const SuperpixelLabels& spx) {
    if (!p.inside(image.width(), image.height())) {
        throw AnnotationError("generate_pseudo_label: point outside the image");
    }
    if (image.width() != spx.width || image.height() != spx.height) {
        throw ShapeError("generate_pseudo_label: superpixel/image shape mismatch");
    }
    params.validate();

    ScalarField source(image.width(), image.height());
    source.at(p.x, p.y) = 1.0;
    const EdgeWeights w = build_edge_weights(image, params.kappa);
    const ScalarField u =
        normalize_field(diffuse(source, w, params.tau, params.steps));
    const BinaryMask region = region_mask(spx, p);

    ScalarField blend(image.width(), image.height());
    const double rho = params.rho;
    for (std::size_t i = 0; i < blend.size(); ++i) {
        blend[i] = rho * u[i] + (1.0 - rho) * region[i];
    }
    SoftMask out;
    out.field = normalize_field(blend);
    out.source = p;
    return out;
}

BinaryMask binarize(const SoftMask& m, double rel_threshold) {
    if (!(rel_threshold > 0.0 && rel_threshold < 1.0)) {
        throw InvalidParam("binarize: rel_threshold must be in (0,1)");
    }
    BinaryMask mask(m.field.width(), m.field.height());
    const double peak = m.field.max();
    if (peak <= 0.0) {
        mask.at(m.source.x, m.source.y) = 1;
        return mask;
    }
    const double cut = rel_threshold * peak;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = m.field[i] >= cut ? 1 : 0;
    }
    return mask;
}

ScalarField annotate_image(const ScalarField& image, const std::vector<PointAnnotation>& points,
                           const AnnotateOptions& opts) {
    ScalarField merged(image.width(), image.height());
    if (points.empty()) {
        return merged;
    }
    const SuperpixelLabels spx = slic(image, opts.slic);
    for (const PointAnnotation& p : points) {
        const SoftMask sm = generate_pseudo_label(image, p, opts.diffusion, spx);
        for (std::size_t i = 0; i < merged.size(); ++i) {
            merged[i] = std::max(merged[i], sm.field[i]);
        }
    }
    return merged;
}

void annotate_dataset(std::vector<Sample>& samples, const AnnotateOptions& opts) {
    parallel_for(samples.size(), [&](std::size_t i) {
        Sample& s = samples[i];
        for (const PointAnnotation& p : s.points) {
            if (!p.inside(s.image.width(), s.image.height())) {
                throw AnnotationError("annotate_dataset: point (" + std::to_string(p.x) + "," +
                                      std::to_string(p.y) + ") outside sample " + s.id);
            }
        }
        s.pseudo_label = annotate_image(s.image, s.points, opts);
        const LabelStats stats = label_stats(s.pseudo_label, opts.rel_threshold);
        s.label_area_fraction = stats.area_fraction;
        s.label_compactness = stats.compactness;
    });
}

LabelStats label_stats(const ScalarField& label, double rel_threshold) {
    LabelStats out;
    const double peak = label.max();
    if (peak <= 0.0) {
        return out;
    }
    const double cut = rel_threshold * peak;
    const int W = label.width();
    const int H = label.height();
    long long area = 0;
    long long perimeter = 0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (label.at(x, y) < cut) {
                continue;
            }
            ++area;
            const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& q : nbr) {
                if (q[0] < 0 || q[0] >= W || q[1] < 0 || q[1] >= H ||
                    label.at(q[0], q[1]) < cut) {
                    ++perimeter; // exposed face
                }
            }
        }
    }
    out.area_fraction = static_cast<double>(area) / static_cast<double>(label.size());
    if (perimeter > 0) {
        const double c = 4.0 * 3.14159265358979323846 * static_cast<double>(area) /
                         (static_cast<double>(perimeter) * static_cast<double>(perimeter));
        out.compactness = std::min(1.0, std::max(0.0, c));
    }
    return out;
}

std::vector<PointAnnotation> coarsen_points(const std::vector<PointAnnotation>& points,
                                            const BinaryMask* gt_mask, int width, int height,
                                            uint64_t seed) {
    std::vector<PointAnnotation> out;
    out.reserve(points.size());
    Rng rng(seed);
    for (const PointAnnotation& p : points) {
        PointAnnotation q = p;
        if (gt_mask && p.inside(gt_mask->width(), gt_mask->height()) &&
            gt_mask->at(p.x, p.y)) {
            // Uniform pixel of the 4-connected truth component under p.
            std::vector<std::size_t> comp;
            std::vector<uint8_t> seen(gt_mask->size(), 0);
            std::vector<std::size_t> stack{static_cast<std::size_t>(p.y) * width + p.x};
            seen[stack[0]] = 1;
            while (!stack.empty()) {
                const std::size_t at = stack.back();
                stack.pop_back();
                comp.push_back(at);
                const int x = static_cast<int>(at % width);
                const int y = static_cast<int>(at / width);
                const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
                for (const auto& nb : nbr) {
                    if (nb[0] < 0 || nb[0] >= width || nb[1] < 0 || nb[1] >= height) {
                        continue;
                    }
                    const std::size_t ni = static_cast<std::size_t>(nb[1]) * width + nb[0];
                    if (!seen[ni] && gt_mask->at(nb[0], nb[1])) {
                        seen[ni] = 1;
                        stack.push_back(ni);
                    }
                }
            }
            std::sort(comp.begin(), comp.end());
            const std::size_t pick = comp[rng.below(comp.size())];
            q.x = static_cast<int>(pick % width);
            q.y = static_cast<int>(pick / width);
        } else {
            // 3-px disk jitter, clamped.
            for (int tries = 0; tries < 64; ++tries) {
                const double dx = rng.uniform(-3.0, 3.0);
                const double dy = rng.uniform(-3.0, 3.0);
                if (dx * dx + dy * dy > 9.0) {
                    continue;
                }
                q.x = std::clamp(p.x + static_cast<int>(std::llround(dx)), 0, width - 1);
                q.y = std::clamp(p.y + static_cast<int>(std::llround(dy)), 0, height - 1);
                break;
            }
        }
        out.push_back(q);
    }
    return out;
}

} // namespace istd
