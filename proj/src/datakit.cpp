#include "istd/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "istd/parallel.hpp"
#include "istd/rng.hpp"

namespace fs = std::filesystem;

namespace istd {

namespace {

constexpr double kHalfMaxLevel = 2.0 * 0.6931471805599453; // q <= 2 ln 2

struct TargetShape {
    double cx, cy, sx, sy, amp, cosr, sinr;

    double quad(double x, double y) const {
        const double dx = x - cx;
        const double dy = y - cy;
        const double a = (dx * cosr + dy * sinr) / sx;
        const double b = (-dx * sinr + dy * cosr) / sy;
        return a * a + b * b;
    }

    double value(double x, double y) const { return amp * std::exp(-0.5 * quad(x, y)); }
};

std::vector<std::size_t> footprint(const TargetShape& t, int W, int H) {
    std::vector<std::size_t> px;
    const double r = std::max(t.sx, t.sy) * std::sqrt(kHalfMaxLevel) + 1.5;
    const int x0 = std::max(0, static_cast<int>(std::floor(t.cx - r)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(t.cx + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(t.cy - r)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(t.cy + r)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if (t.quad(x, y) <= kHalfMaxLevel) {
                px.push_back(static_cast<std::size_t>(y) * W + x);
            }
        }
    }
    return px;
}

// Low-frequency clutter: white noise on a coarse lattice, bilinear upsample.
ScalarField clutter_field(int W, int H, double strength, Rng& rng) {
    const int spacing = 16;
    const int gw = W / spacing + 2;
    const int gh = H / spacing + 2;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gh);
    for (auto& v : grid) {
        v = rng.uniform();
    }
    ScalarField out(W, H);
    for (int y = 0; y < H; ++y) {
        const double fy = static_cast<double>(y) / spacing;
        const int j = static_cast<int>(fy);
        const double ty = fy - j;
        for (int x = 0; x < W; ++x) {
            const double fx = static_cast<double>(x) / spacing;
            const int i = static_cast<int>(fx);
            const double tx = fx - i;
            const double v00 = grid[static_cast<std::size_t>(j) * gw + i];
            const double v10 = grid[static_cast<std::size_t>(j) * gw + i + 1];
            const double v01 = grid[static_cast<std::size_t>(j + 1) * gw + i];
            const double v11 = grid[static_cast<std::size_t>(j + 1) * gw + i + 1];
            out.at(x, y) =
                strength * ((1 - ty) * ((1 - tx) * v00 + tx * v10) +
                            ty * ((1 - tx) * v01 + tx * v11));
        }
    }
    return out;
}

} // namespace

Scene synth_scene(const SceneSpec& spec) {
    if (spec.width < 16 || spec.height < 16) {
        throw InvalidParam("synth_scene: image too small");
    }
    if (spec.min_targets < 0 || spec.max_targets < spec.min_targets) {
        throw InvalidParam("synth_scene: bad target count range");
    }
    Rng rng(spec.seed);
    const int W = spec.width;
    const int H = spec.height;

    Scene scene;
    scene.image = clutter_field(W, H, spec.clutter, rng);
    scene.gt_mask = BinaryMask(W, H);

    const int count =
        spec.min_targets +
        static_cast<int>(spec.max_targets > spec.min_targets
                             ? rng.below(static_cast<uint64_t>(spec.max_targets - spec.min_targets + 1))
                             : 0);

    const double margin = std::min(8.0, std::min(W, H) / 4.0);
    std::vector<TargetShape> targets;
    std::vector<std::vector<std::size_t>> footprints;
    std::vector<int> owner(static_cast<std::size_t>(W) * H, -1);

    for (int t = 0; t < count; ++t) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            TargetShape cand;
            cand.cx = rng.uniform(margin, W - 1 - margin);
            cand.cy = rng.uniform(margin, H - 1 - margin);
            cand.sx = rng.uniform(spec.sigma_lo, spec.sigma_hi);
            cand.sy = rng.uniform(spec.sigma_lo, spec.sigma_hi);
            cand.amp = rng.uniform(spec.amp_lo, spec.amp_hi);
            const double rot = rng.uniform(0.0, 3.14159265358979323846);
            cand.cosr = std::cos(rot);
            cand.sinr = std::sin(rot);
            const auto fp = footprint(cand, W, H);
            if (fp.empty()) {
                continue;
            }
            std::vector<std::size_t> inter(targets.size(), 0);
            for (const std::size_t p : fp) {
                if (owner[p] >= 0) {
                    ++inter[owner[p]];
                }
            }
            bool ok = true;
            for (std::size_t j = 0; j < targets.size(); ++j) {
                const std::size_t lim = std::min(fp.size(), footprints[j].size());
                if (2 * inter[j] > lim) { // overlap > 50% of the smaller footprint
                    ok = false;
                    break;
                }
            }
            if (!ok) {
                continue;
            }
            const int id = static_cast<int>(targets.size());
            for (const std::size_t p : fp) {
                if (owner[p] < 0) {
                    owner[p] = id;
                }
                scene.gt_mask[p] = 1;
            }
            targets.push_back(cand);
            footprints.push_back(fp);
            placed = true;
        }
        if (!placed) {
            throw GenerationError("synth_scene: could not place target without >50% overlap");
        }
    }

    // Render targets over the clutter.
    for (const TargetShape& t : targets) {
        const double r = std::max(t.sx, t.sy) * 4.0 + 2.0;
        const int x0 = std::max(0, static_cast<int>(std::floor(t.cx - r)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(t.cx + r)));
        const int y0 = std::max(0, static_cast<int>(std::floor(t.cy - r)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(t.cy + r)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                scene.image.at(x, y) += t.value(x, y);
            }
        }
    }

    // Annotation points, from the noiseless target signal.
    for (std::size_t j = 0; j < targets.size(); ++j) {
        const TargetShape& t = targets[j];
        PointAnnotation p;
        p.target_id = static_cast<int>(j);
        if (spec.point_mode == PointMode::Centroid) {
            // Intensity centroid of the discretized Gaussian.
            double sw = 0.0, sx = 0.0, sy = 0.0;
            const double r = std::max(t.sx, t.sy) * 4.0 + 2.0;
            const int x0 = std::max(0, static_cast<int>(std::floor(t.cx - r)));
            const int x1 = std::min(W - 1, static_cast<int>(std::ceil(t.cx + r)));
            const int y0 = std::max(0, static_cast<int>(std::floor(t.cy - r)));
            const int y1 = std::min(H - 1, static_cast<int>(std::ceil(t.cy + r)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double v = t.value(x, y);
                    sw += v;
                    sx += v * x;
                    sy += v * y;
                }
            }
            p.x = static_cast<int>(std::llround(sx / sw));
            p.y = static_cast<int>(std::llround(sy / sw));
        } else {
            const auto& fp = footprints[j];
            const std::size_t pick = fp[rng.below(fp.size())];
            p.x = static_cast<int>(pick % W);
            p.y = static_cast<int>(pick / W);
        }
        scene.points.push_back(p);
    }

    // White noise and clip.
    for (std::size_t i = 0; i < scene.image.size(); ++i) {
        double v = scene.image[i] + spec.noise_sigma * rng.normal();
        scene.image[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }

    double amp_sum = 0.0;
    for (const TargetShape& t : targets) {
        amp_sum += t.amp;
    }
    scene.mean_amplitude = targets.empty() ? 0.0 : amp_sum / static_cast<double>(targets.size());
    return scene;
}

std::vector<Sample> synth_dataset(const SceneSpec& spec, int n) {
    std::vector<Sample> out(static_cast<std::size_t>(n));
    Rng base(spec.seed);
    std::vector<uint64_t> seeds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        seeds[static_cast<std::size_t>(i)] = base.fork(static_cast<uint64_t>(i)).next_u64();
    }
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        SceneSpec s = spec;
        s.seed = seeds[i];
        Scene scene = synth_scene(s);
        Sample& smp = out[i];
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%06zu", i);
        smp.id = buf;
        smp.image = std::move(scene.image);
        smp.points = std::move(scene.points);
        smp.gt_mask = std::move(scene.gt_mask);
        smp.has_gt = true;
        smp.bucket = (!smp.points.empty() && scene.mean_amplitude < 0.5) ? 1 : 0;
    });
    return out;
}

// --- PGM ----------------------------------------------------------------

namespace {

void put_u16be(std::string& buf, unsigned v) {
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>(v & 0xff));
}

int pgm_next_token(const std::string& body, std::size_t& pos, const std::string& path) {
    // Skips whitespace and '#' comments.
    while (pos < body.size()) {
        const char c = body[pos];
        if (c == '#') {
            while (pos < body.size() && body[pos] != '\n') {
                ++pos;
            }
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= body.size() || !std::isdigit(static_cast<unsigned char>(body[pos]))) {
        throw IngestError(path + ": malformed PGM header");
    }
    int v = 0;
    while (pos < body.size() && std::isdigit(static_cast<unsigned char>(body[pos]))) {
        v = v * 10 + (body[pos] - '0');
        ++pos;
    }
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IngestError(path + ": cannot open");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IngestError(path + ": cannot open for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IngestError(path + ": write failed");
    }
}

struct PgmRaw {
    int width, height, maxval;
    std::vector<unsigned> values;
};

PgmRaw load_pgm_raw(const std::string& path) {
    const std::string body = read_file(path);
    if (body.size() < 2 || body[0] != 'P' || body[1] != '5') {
        throw IngestError(path + ": bad magic, expected P5");
    }
    std::size_t pos = 2;
    PgmRaw raw;
    raw.width = pgm_next_token(body, pos, path);
    raw.height = pgm_next_token(body, pos, path);
    raw.maxval = pgm_next_token(body, pos, path);
    if (raw.width < 1 || raw.height < 1 || raw.maxval < 1 || raw.maxval > 65535) {
        throw IngestError(path + ": bad PGM dimensions");
    }
    ++pos; // single whitespace after maxval
    const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height;
    const int bytes = raw.maxval > 255 ? 2 : 1;
    if (body.size() - pos < n * static_cast<std::size_t>(bytes)) {
        throw IngestError(path + ": truncated pixel data");
    }
    raw.values.resize(n);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(body.data()) + pos;
    if (bytes == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            raw.values[i] = p[i];
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            raw.values[i] = (static_cast<unsigned>(p[2 * i]) << 8) | p[2 * i + 1];
        }
    }
    return raw;
}

} // namespace

void write_pgm(const std::string& path, const ScalarField& f) {
    std::string buf = "P5\n" + std::to_string(f.width()) + " " + std::to_string(f.height()) +
                      "\n65535\n";
    buf.reserve(buf.size() + f.size() * 2);
    for (std::size_t i = 0; i < f.size(); ++i) {
        double v = f[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        put_u16be(buf, static_cast<unsigned>(std::llround(v * 65535.0)));
    }
    write_file(path, buf);
}

void write_pgm(const std::string& path, const BinaryMask& mask) {
    std::string buf = "P5\n" + std::to_string(mask.width()) + " " +
                      std::to_string(mask.height()) + "\n255\n";
    buf.reserve(buf.size() + mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        buf.push_back(static_cast<char>(mask[i] ? 255 : 0));
    }
    write_file(path, buf);
}

ScalarField load_pgm(const std::string& path) {
    const PgmRaw raw = load_pgm_raw(path);
    ScalarField f(raw.width, raw.height);
    const double inv = 1.0 / raw.maxval;
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        f[i] = raw.values[i] * inv;
    }
    return f;
}

BinaryMask load_pgm_mask(const std::string& path) {
    const PgmRaw raw = load_pgm_raw(path);
    BinaryMask m(raw.width, raw.height);
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        m[i] = raw.values[i] ? 1 : 0;
    }
    return m;
}

// --- SMSK ---------------------------------------------------------------

namespace {

void put_u32le(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

uint32_t get_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

} // namespace

void write_smsk(const std::string& path, const ScalarField& f) {
    std::string buf = "SMSK";
    put_u32le(buf, static_cast<uint32_t>(f.width()));
    put_u32le(buf, static_cast<uint32_t>(f.height()));
    for (std::size_t i = 0; i < f.size(); ++i) {
        const float v = static_cast<float>(f[i]);
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32le(buf, bits);
    }
    write_file(path, buf);
}

ScalarField load_smsk(const std::string& path) {
    const std::string body = read_file(path);
    if (body.size() < 12 || body.compare(0, 4, "SMSK") != 0) {
        throw IngestError(path + ": bad magic, expected SMSK");
    }
    const unsigned char* p = reinterpret_cast<const unsigned char*>(body.data());
    const uint32_t w = get_u32le(p + 4);
    const uint32_t h = get_u32le(p + 8);
    if (w < 1 || h < 1 || w > 1u << 20 || h > 1u << 20) {
        throw IngestError(path + ": bad SMSK dimensions");
    }
    const std::size_t n = static_cast<std::size_t>(w) * h;
    if (body.size() < 12 + n * 4) {
        throw IngestError(path + ": truncated SMSK data");
    }
    ScalarField f(static_cast<int>(w), static_cast<int>(h));
    for (std::size_t i = 0; i < n; ++i) {
        const uint32_t bits = get_u32le(p + 12 + 4 * i);
        float v;
        std::memcpy(&v, &bits, 4);
        f[i] = v;
    }
    if (!f.all_finite()) {
        throw IngestError(path + ": non-finite SMSK values");
    }
    return f;
}

// --- dataset layout ------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

int parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw IngestError(where + ": expected integer, got '" + s + "'");
    }
}

} // namespace

DatasetIndex load_dataset(const std::string& root, const std::string& split) {
    DatasetIndex index;
    index.root = root;
    index.split = split;

    const std::string splits_path = (fs::path(root) / "splits.csv").string();
    const std::string points_path = (fs::path(root) / "points.csv").string();

    std::ifstream splits_in(splits_path);
    if (!splits_in) {
        throw IngestError(splits_path + ": cannot open");
    }
    std::string line;
    if (!std::getline(splits_in, line) || split_csv_line(line) !=
                                              std::vector<std::string>{"image_id", "split"}) {
        throw IngestError(splits_path + ":1: expected header image_id,split");
    }
    std::vector<std::pair<std::string, std::string>> rows;
    std::set<std::string> all_ids;
    int lineno = 1;
    while (std::getline(splits_in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const auto cols = split_csv_line(line);
        if (cols.size() != 2 || cols[0].empty()) {
            throw IngestError(splits_path + ":" + std::to_string(lineno) + ": malformed row");
        }
        if (!all_ids.insert(cols[0]).second) {
            throw IngestError(splits_path + ":" + std::to_string(lineno) + ": duplicate id " +
                              cols[0]);
        }
        rows.push_back({cols[0], cols[1]});
    }

    std::map<std::string, std::vector<PointAnnotation>> points;
    std::ifstream points_in(points_path);
    if (!points_in) {
        throw IngestError(points_path + ": cannot open");
    }
    if (!std::getline(points_in, line) ||
        split_csv_line(line) != std::vector<std::string>{"image_id", "x", "y", "target_id"}) {
        throw IngestError(points_path + ":1: expected header image_id,x,y,target_id");
    }
    lineno = 1;
    std::vector<std::tuple<std::string, PointAnnotation, int>> point_rows;
    while (std::getline(points_in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const auto cols = split_csv_line(line);
        const std::string where = points_path + ":" + std::to_string(lineno);
        if (cols.size() != 4) {
            throw IngestError(where + ": malformed row");
        }
        if (all_ids.find(cols[0]) == all_ids.end()) {
            throw IngestError(where + ": unknown image id " + cols[0]);
        }
        PointAnnotation p;
        p.x = parse_int(cols[1], where);
        p.y = parse_int(cols[2], where);
        p.target_id = parse_int(cols[3], where);
        point_rows.emplace_back(cols[0], p, lineno);
    }

    // Validate points against image headers; build entries for the split.
    std::map<std::string, std::pair<int, int>> dims;
    for (const auto& [id, tag] : rows) {
        const std::string img = (fs::path(root) / "images" / (id + ".pgm")).string();
        if (!fs::exists(img)) {
            throw IngestError(img + ": referenced by splits.csv but missing");
        }
        const PgmRaw raw = load_pgm_raw(img); // also validates magic
        dims[id] = {raw.width, raw.height};
    }
    for (const auto& [id, p, ln] : point_rows) {
        const auto& [w, h] = dims.at(id);
        if (!p.inside(w, h)) {
            throw IngestError(points_path + ":" + std::to_string(ln) + ": point (" +
                              std::to_string(p.x) + "," + std::to_string(p.y) +
                              ") outside image " + id);
        }
        points[id].push_back(p);
    }
    for (const auto& [id, tag] : rows) {
        if (!split.empty() && tag != split) {
            continue;
        }
        DatasetEntry e;
        e.id = id;
        e.image_path = (fs::path(root) / "images" / (id + ".pgm")).string();
        const std::string mask = (fs::path(root) / "masks" / (id + ".pgm")).string();
        if (fs::exists(mask)) {
            e.mask_path = mask;
        }
        auto it = points.find(id);
        if (it != points.end()) {
            e.points = it->second;
        }
        e.width = dims.at(id).first;
        e.height = dims.at(id).second;
        index.entries.push_back(std::move(e));
    }
    return index;
}

std::vector<Sample> materialize(const DatasetIndex& index) {
    std::vector<Sample> out(index.entries.size());
    parallel_for(index.entries.size(), [&](std::size_t i) {
        const DatasetEntry& e = index.entries[i];
        Sample& s = out[i];
        s.id = e.id;
        s.image = load_pgm(e.image_path);
        s.points = e.points;
        if (!e.mask_path.empty()) {
            s.gt_mask = load_pgm_mask(e.mask_path);
            if (s.gt_mask.width() != s.image.width() ||
                s.gt_mask.height() != s.image.height()) {
                throw IngestError(e.mask_path + ": mask shape differs from image");
            }
            s.has_gt = true;
        }
    });
    return out;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::string& split) {
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    std::string points_csv = "image_id,x,y,target_id\n";
    std::string splits_csv = "image_id,split\n";
    for (const Sample& s : samples) {
        write_pgm((fs::path(root) / "images" / (s.id + ".pgm")).string(), s.image);
        if (s.has_gt) {
            write_pgm((fs::path(root) / "masks" / (s.id + ".pgm")).string(), s.gt_mask);
        }
        for (const PointAnnotation& p : s.points) {
            points_csv += s.id + "," + std::to_string(p.x) + "," + std::to_string(p.y) + "," +
                          std::to_string(p.target_id) + "\n";
        }
        splits_csv += s.id + "," + split + "\n";
    }
    write_file((fs::path(root) / "points.csv").string(), points_csv);
    write_file((fs::path(root) / "splits.csv").string(), splits_csv);
}

} // namespace istd
