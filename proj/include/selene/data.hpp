#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "selene/rng.hpp"
#include "selene/tensor.hpp"

namespace selene {

// One segmentation example: [3,H,W] image in [0,1] and an [H,W] class map
// where 255 marks ignored pixels.
struct Sample {
    Tensor image;
    IntTensor mask;
    std::string id;
};

// ---------------------------------------------------------------------------
// Rasterizers (shared by the generator and its tests)
// ---------------------------------------------------------------------------

inline void draw_disk(IntTensor& mask, double cx, double cy, double r, int cls) {
    const int h = mask.dim(0), w = mask.dim(1);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))), y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))), x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= r * r) mask[static_cast<std::size_t>(y) * w + x] = cls;
        }
}

inline void draw_rect(IntTensor& mask, int x0, int y0, int x1, int y1, int cls) {
    const int h = mask.dim(0), w = mask.dim(1);
    for (int y = std::max(0, y0); y < std::min(h, y1); ++y)
        for (int x = std::max(0, x0); x < std::min(w, x1); ++x) mask[static_cast<std::size_t>(y) * w + x] = cls;
}

inline void draw_triangle(IntTensor& mask, double ax, double ay, double bx, double by, double cx, double cy,
                          int cls) {
    const int h = mask.dim(0), w = mask.dim(1);
    const auto side = [](double px, double py, double qx, double qy, double x, double y) {
        return (qx - px) * (y - py) - (qy - py) * (x - px);
    };
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cy}))));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max({ay, by, cy}))));
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cx}))));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max({ax, bx, cx}))));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d1 = side(ax, ay, bx, by, x, y);
            const double d2 = side(bx, by, cx, cy, x, y);
            const double d3 = side(cx, cy, ax, ay, x, y);
            const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            if (!(neg && pos)) mask[static_cast<std::size_t>(y) * w + x] = cls;
        }
}

// ---------------------------------------------------------------------------
// Synthetic dataset: 1-4 non-overlapping shapes over a textured background
// ---------------------------------------------------------------------------

// Generates `count` images of size x size. Class 0 is background; disks,
// rectangles and triangles carry classes 1..3 (limited by num_classes). Every
// sample is a pure function of (seed, index).
inline std::vector<Sample> gen_shapes_dataset(int count, int num_classes, int size, std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("gen_shapes_dataset: num_classes must be >= 2");
    if (count < 0) throw std::invalid_argument("gen_shapes_dataset: negative count");
    if (size < 24) throw std::invalid_argument("gen_shapes_dataset: size too small");
    const int kinds = std::min(3, num_classes - 1);
    const double unit = size / 96.0;
    Rng base(seed);

    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int idx = 0; idx < count; ++idx) {
        Rng rng = base.fork(static_cast<std::uint64_t>(idx));
        Sample s;
        char buf[16];
        std::snprintf(buf, sizeof buf, "s%05d", idx);
        s.id = buf;
        s.image = Tensor(Shape{3, size, size});
        s.mask = IntTensor(Shape{size, size});

        double* img = s.image.data_mut();
        const std::size_t plane = static_cast<std::size_t>(size) * size;
        double bg[3];
        for (double& c : bg) c = rng.uniform(0.15, 0.45);
        for (int ch = 0; ch < 3; ++ch)
            for (std::size_t i = 0; i < plane; ++i)
                img[ch * plane + i] = std::clamp(bg[ch] + rng.normal(0.0, 0.04), 0.0, 1.0);

        struct Placed {
            double cx, cy, r;
        };
        std::vector<Placed> placed;
        const int nshapes = 1 + static_cast<int>(rng.uniform_int(4));
        for (int sh = 0; sh < nshapes; ++sh) {
            const int kind = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(kinds)));
            const int cls = kind + 1;
            const double r = rng.uniform(10.0, 22.0) * unit;
            bool ok = false;
            double cx = 0, cy = 0;
            for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
                cx = rng.uniform(r + 1.0, size - r - 1.0);
                cy = rng.uniform(r + 1.0, size - r - 1.0);
                ok = true;
                for (const Placed& p : placed) {
                    const double dx = cx - p.cx, dy = cy - p.cy;
                    if (std::sqrt(dx * dx + dy * dy) < r + p.r + 2.0) {
                        ok = false;
                        break;
                    }
                }
            }
            if (!ok) continue;
            placed.push_back({cx, cy, r});

            double color[3];
            const int hot = kind;  // class-correlated dominant channel
            for (int ch = 0; ch < 3; ++ch)
                color[ch] = ch == hot ? rng.uniform(0.6, 0.95) : rng.uniform(0.05, 0.35);

            IntTensor before = s.mask;
            if (kind == 0) {
                draw_disk(s.mask, cx, cy, r, cls);
            } else if (kind == 1) {
                const double hw = r * rng.uniform(0.55, 0.8), hh = r * rng.uniform(0.55, 0.8);
                draw_rect(s.mask, static_cast<int>(cx - hw), static_cast<int>(cy - hh), static_cast<int>(cx + hw),
                          static_cast<int>(cy + hh), cls);
            } else {
                const double a = rng.uniform(0.0, 6.283185307179586);
                double vx[3], vy[3];
                for (int v = 0; v < 3; ++v) {
                    const double ang = a + v * 2.0943951023931953;  // 2*pi/3
                    vx[v] = cx + r * std::cos(ang);
                    vy[v] = cy + r * std::sin(ang);
                }
                draw_triangle(s.mask, vx[0], vy[0], vx[1], vy[1], vx[2], vy[2], cls);
            }
            for (std::size_t i = 0; i < plane; ++i) {
                if (s.mask[i] == cls && before[i] != cls)
                    for (int ch = 0; ch < 3; ++ch)
                        img[ch * plane + i] = std::clamp(color[ch] + rng.normal(0.0, 0.04), 0.0, 1.0);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resizing helpers (plain value transforms, not autodiff ops)
// ---------------------------------------------------------------------------

inline Tensor resize_bilinear(const Tensor& image, int ho, int wo) {
    if (image.rank() != 3) throw std::invalid_argument("resize_bilinear: image must be [C,H,W]");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out(Shape{c, ho, wo});
    const double sy = static_cast<double>(h) / ho, sx = static_cast<double>(w) / wo;
    const double* in = image.data();
    double* o = out.data_mut();
    for (int ch = 0; ch < c; ++ch) {
        const double* ip = in + static_cast<std::size_t>(ch) * h * w;
        double* op = o + static_cast<std::size_t>(ch) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            const double srcy = (y + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(srcy));
            const double fy = srcy - y0;
            const int y1 = std::clamp(y0 + 1, 0, h - 1);
            y0 = std::clamp(y0, 0, h - 1);
            for (int x = 0; x < wo; ++x) {
                const double srcx = (x + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(srcx));
                const double fx = srcx - x0;
                const int x1 = std::clamp(x0 + 1, 0, w - 1);
                x0 = std::clamp(x0, 0, w - 1);
                op[y * wo + x] = (1 - fy) * ((1 - fx) * ip[y0 * w + x0] + fx * ip[y0 * w + x1]) +
                                 fy * ((1 - fx) * ip[y1 * w + x0] + fx * ip[y1 * w + x1]);
            }
        }
    }
    return out;
}

inline IntTensor resize_nearest(const IntTensor& mask, int ho, int wo) {
    if (mask.shape.size() != 2) throw std::invalid_argument("resize_nearest: mask must be [H,W]");
    const int h = mask.dim(0), w = mask.dim(1);
    IntTensor out(Shape{ho, wo});
    for (int y = 0; y < ho; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / ho));
        for (int x = 0; x < wo; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / wo));
            out[static_cast<std::size_t>(y) * wo + x] = mask[static_cast<std::size_t>(sy) * w + sx];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation: random scale, horizontal flip, random square crop
// ---------------------------------------------------------------------------

constexpr double kScaleFactors[6] = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0};

// Scale by a factor drawn from kScaleFactors (bilinear image, nearest mask),
// flip horizontally with probability 1/2, then cut a crop_size square at a
// random position. Where the scaled image is smaller than the crop, images
// pad with 0 and masks with the ignore value.
inline Sample augment(const Sample& s, Rng& rng, int crop_size) {
    const int h = s.image.dim(1), w = s.image.dim(2);
    const double f = kScaleFactors[rng.uniform_int(6)];
    const int sh = std::max(1, static_cast<int>(std::llround(h * f)));
    const int sw = std::max(1, static_cast<int>(std::llround(w * f)));

    Tensor img = (sh == h && sw == w) ? s.image.clone() : resize_bilinear(s.image, sh, sw);
    IntTensor msk = (sh == h && sw == w) ? s.mask : resize_nearest(s.mask, sh, sw);

    if (rng.bernoulli(0.5)) {
        Tensor flipped(img.shape());
        double* o = flipped.data_mut();
        const double* in = img.data();
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < sh; ++y)
                for (int x = 0; x < sw; ++x)
                    o[(static_cast<std::size_t>(c) * sh + y) * sw + x] =
                        in[(static_cast<std::size_t>(c) * sh + y) * sw + (sw - 1 - x)];
        img = std::move(flipped);
        IntTensor mflip(msk.shape);
        for (int y = 0; y < sh; ++y)
            for (int x = 0; x < sw; ++x)
                mflip[static_cast<std::size_t>(y) * sw + x] = msk[static_cast<std::size_t>(y) * sw + (sw - 1 - x)];
        msk = std::move(mflip);
    }

    // Per-axis crop window: source offset when the image exceeds the crop,
    // destination offset when it is smaller.
    const auto axis = [&rng, crop_size](int extent) {
        if (extent >= crop_size) return std::pair<int, int>{static_cast<int>(rng.uniform_int(extent - crop_size + 1)), 0};
        return std::pair<int, int>{0, static_cast<int>(rng.uniform_int(crop_size - extent + 1))};
    };
    const auto [src_y, dst_y] = axis(sh);
    const auto [src_x, dst_x] = axis(sw);
    const int len_y = std::min(sh, crop_size), len_x = std::min(sw, crop_size);

    Sample out;
    out.id = s.id;
    out.image = Tensor(Shape{3, crop_size, crop_size});
    out.mask = IntTensor(Shape{crop_size, crop_size});
    std::fill(out.mask.v.begin(), out.mask.v.end(), kIgnoreIndex);
    double* oi = out.image.data_mut();
    const double* ii = img.data();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < len_y; ++y)
            for (int x = 0; x < len_x; ++x)
                oi[(static_cast<std::size_t>(c) * crop_size + dst_y + y) * crop_size + dst_x + x] =
                    ii[(static_cast<std::size_t>(c) * sh + src_y + y) * sw + src_x + x];
    for (int y = 0; y < len_y; ++y)
        for (int x = 0; x < len_x; ++x)
            out.mask[static_cast<std::size_t>(dst_y + y) * crop_size + dst_x + x] =
                msk[static_cast<std::size_t>(src_y + y) * sw + src_x + x];
    return out;
}

// ---------------------------------------------------------------------------
// Labeled/unlabeled partition
// ---------------------------------------------------------------------------

struct SplitSpec {
    double fraction = 0.5;
    std::string fraction_label;  // e.g. "1/8"; used in the file name
    std::uint64_t seed = 0;
    std::vector<std::string> labeled;
    std::vector<std::string> unlabeled;
};

// Seeded shuffle, then a prefix of round(fraction * total) ids is labeled.
inline SplitSpec make_split(const std::vector<Sample>& dataset, double fraction, const std::string& fraction_label,
                            std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0) throw std::invalid_argument("make_split: fraction must lie in (0,1]");
    SplitSpec spec;
    spec.fraction = fraction;
    spec.fraction_label = fraction_label;
    spec.seed = seed;
    std::vector<std::string> ids;
    ids.reserve(dataset.size());
    for (const Sample& s : dataset) ids.push_back(s.id);
    Rng rng(seed);
    rng.shuffle(ids);
    const std::size_t n_labeled = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
    spec.labeled.assign(ids.begin(), ids.begin() + std::min(n_labeled, ids.size()));
    spec.unlabeled.assign(ids.begin() + std::min(n_labeled, ids.size()), ids.end());
    return spec;
}

inline std::string split_filename(const SplitSpec& spec) {
    std::string label = spec.fraction_label;
    for (char& c : label)
        if (c == '/') c = '-';
    return "split_" + label + "_" + std::to_string(spec.seed) + ".txt";
}

inline void write_split(const std::filesystem::path& path, const SplitSpec& spec) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_split: cannot open " + path.string());
    os << "labeled:\n";
    for (const auto& id : spec.labeled) os << id << '\n';
    os << "unlabeled:\n";
    for (const auto& id : spec.unlabeled) os << id << '\n';
}

inline SplitSpec read_split(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_split: cannot open " + path.string());
    SplitSpec spec;
    std::string line;
    int section = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line == "labeled:") {
            section = 1;
        } else if (line == "unlabeled:") {
            section = 2;
        } else if (section == 1) {
            spec.labeled.push_back(line);
        } else if (section == 2) {
            spec.unlabeled.push_back(line);
        } else {
            throw std::runtime_error("read_split: id before section header in " + path.string());
        }
    }
    if (section == 0) throw std::runtime_error("read_split: missing section headers in " + path.string());
    return spec;
}

// ---------------------------------------------------------------------------
// NetPBM I/O: binary P6 images and P5 masks
// ---------------------------------------------------------------------------

namespace detail {

// Reads one PBM header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& is, const std::filesystem::path& path) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty())
        throw std::runtime_error("netpbm: truncated header in " + path.string() + " at byte offset " +
                                 std::to_string(static_cast<long long>(is.tellg())));
    return tok;
}

inline int pnm_int(std::istream& is, const std::filesystem::path& path, const char* what) {
    const std::string tok = pnm_token(is, path);
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(std::string("netpbm: malformed ") + what + " '" + tok + "' in " + path.string() +
                                 " near byte offset " + std::to_string(static_cast<long long>(is.tellg())));
    }
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("write_ppm: image must be [3,H,W], got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ppm: cannot open " + path.string());
    os << "P6\n" << w << ' ' << h << "\n255\n";
    const double* v = image.data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double s = std::clamp(v[c * plane + static_cast<std::size_t>(y) * w + x], 0.0, 1.0);
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(std::floor(s * 255.0 + 0.5));
            }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw std::runtime_error("write_ppm: write failed for " + path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ppm: cannot open " + path.string());
    const std::string magic = detail::pnm_token(is, path);
    if (magic != "P6")
        throw std::runtime_error("read_ppm: bad magic '" + magic + "' in " + path.string() + " at byte offset 0");
    const int w = detail::pnm_int(is, path, "width");
    const int h = detail::pnm_int(is, path, "height");
    const int maxval = detail::pnm_int(is, path, "maxval");
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
        throw std::runtime_error("read_ppm: unsupported dimensions/maxval in " + path.string());
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("read_ppm: truncated raster in " + path.string() + " at byte offset " +
                                 std::to_string(static_cast<long long>(is.gcount())));
    Tensor image(Shape{3, h, w});
    double* v = image.data_mut();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) v[c * plane + i] = static_cast<double>(raw[i * 3 + c]) / maxval;
    return image;
}

inline void write_pgm(const std::filesystem::path& path, const IntTensor& mask) {
    if (mask.shape.size() != 2) throw std::invalid_argument("write_pgm: mask must be [H,W]");
    const int h = mask.dim(0), w = mask.dim(1);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path.string());
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const std::int32_t c = mask[i];
        if (c < 0 || c > 255)
            throw std::invalid_argument("write_pgm: class value " + std::to_string(c) + " does not fit a byte");
        raw[i] = static_cast<unsigned char>(c);
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

inline IntTensor read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
    const std::string magic = detail::pnm_token(is, path);
    if (magic != "P5")
        throw std::runtime_error("read_pgm: bad magic '" + magic + "' in " + path.string() + " at byte offset 0");
    const int w = detail::pnm_int(is, path, "width");
    const int h = detail::pnm_int(is, path, "height");
    const int maxval = detail::pnm_int(is, path, "maxval");
    if (w < 1 || h < 1 || maxval != 255)
        throw std::runtime_error("read_pgm: unsupported dimensions/maxval in " + path.string());
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("read_pgm: truncated raster in " + path.string());
    IntTensor mask(Shape{h, w});
    for (std::size_t i = 0; i < raw.size(); ++i) mask[i] = raw[i];
    return mask;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: images/<id>.ppm, masks/<id>.pgm, split files
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    for (const Sample& s : samples) {
        write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
        write_pgm(dir / "masks" / (s.id + ".pgm"), s.mask);
    }
}

inline Sample load_sample(const std::filesystem::path& dir, const std::string& id, bool with_mask = true) {
    Sample s;
    s.id = id;
    s.image = read_ppm(dir / "images" / (id + ".ppm"));
    if (with_mask) {
        s.mask = read_pgm(dir / "masks" / (id + ".pgm"));
    } else {
        // labels hidden: the unlabeled pool carries an all-ignore mask
        s.mask = IntTensor(Shape{s.image.dim(1), s.image.dim(2)});
        std::fill(s.mask.v.begin(), s.mask.v.end(), kIgnoreIndex);
    }
    return s;
}

inline std::vector<Sample> load_samples(const std::filesystem::path& dir, const std::vector<std::string>& ids,
                                        bool with_mask = true) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(load_sample(dir, id, with_mask));
    return out;
}

inline std::vector<std::string> list_dataset_ids(const std::filesystem::path& dir) {
    std::vector<std::string> ids;
    const auto images = dir / "images";
    if (!std::filesystem::is_directory(images))
        throw std::runtime_error("list_dataset_ids: no images/ directory under " + dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(images))
        if (entry.path().extension() == ".ppm") ids.push_back(entry.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace selene
