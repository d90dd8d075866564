#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace uimm {

// Images are float tensors [3,H,W] with values in [0,1]. The only
// interchange format is binary PPM (P6, maxval 255).

// --- PPM I/O -----------------------------------------------------------------

namespace ppm {

struct ByteReader {
    std::istream& is;
    std::string context;
    uint64_t offset = 0;

    int get() {
        const int c = is.get();
        if (c != EOF) ++offset;
        return c;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(context + ": " + what + " at byte offset " + std::to_string(offset));
    }

    void skip_space_and_comments() {
        for (;;) {
            int c = is.peek();
            if (c == '#') {
                while (c != EOF && c != '\n') c = get();
            } else if (c != EOF && std::isspace(c)) {
                get();
            } else {
                return;
            }
        }
    }

    int read_int() {
        skip_space_and_comments();
        int c = is.peek();
        if (c == EOF || !std::isdigit(c)) fail("expected decimal integer");
        long v = 0;
        while (c != EOF && std::isdigit(c)) {
            get();
            v = v * 10 + (c - '0');
            if (v > 1 << 26) fail("integer out of range");
            c = is.peek();
        }
        return static_cast<int>(v);
    }
};

}  // namespace ppm

inline Tensor load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    ppm::ByteReader r{is, path};
    if (r.get() != 'P' || r.get() != '6') r.fail("not a P6 PPM (bad magic)");
    const int w = r.read_int();
    const int h = r.read_int();
    const int maxval = r.read_int();
    if (w < 1 || h < 1) r.fail("non-positive dimensions");
    if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (only 255)");
    {
        const int c = r.get();
        if (c == EOF || !std::isspace(c)) r.fail("expected single whitespace before payload");
    }
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<size_t>(is.gcount()) != buf.size()) {
        r.offset += static_cast<uint64_t>(std::max<std::streamsize>(is.gcount(), 0));
        r.fail("truncated pixel payload (need " + std::to_string(buf.size()) + " bytes)");
    }
    Tensor img = Tensor::zeros({3, h, w});
    float* p = img.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                p[(static_cast<int64_t>(c) * h + y) * w + x] =
                    static_cast<float>(buf[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
            }
        }
    }
    return img;
}

inline void save_image(const Tensor& img, const std::string& path) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw ShapeError("save_image: expected [3,H,W], got " + shape_str(img.shape()));
    }
    const int h = img.dim(1), w = img.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    const float* p = img.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float v = std::min(1.0f, std::max(0.0f, p[(static_cast<int64_t>(c) * h + y) * w + x]));
                buf[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        }
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed: " + path);
}

// --- shape dataset --------------------------------------------------------------

struct ShapeClass {
    std::string color;
    std::string shape;
};

inline const std::vector<ShapeClass>& default_shape_classes() {
    static const std::vector<ShapeClass> classes = {
        {"red", "circle"},   {"blue", "square"},   {"green", "triangle"}, {"yellow", "ring"},
        {"purple", "circle"}, {"cyan", "square"},  {"orange", "triangle"}, {"white", "ring"},
        {"magenta", "circle"}, {"gray", "square"},
    };
    return classes;
}

inline void shape_color_rgb(const std::string& name, float rgb[3]) {
    struct Entry {
        const char* name;
        float r, g, b;
    };
    static const Entry table[] = {
        {"red", 0.85f, 0.10f, 0.10f},    {"green", 0.10f, 0.75f, 0.15f}, {"blue", 0.10f, 0.20f, 0.85f},
        {"yellow", 0.90f, 0.85f, 0.10f}, {"purple", 0.55f, 0.15f, 0.75f}, {"cyan", 0.10f, 0.80f, 0.80f},
        {"orange", 0.95f, 0.55f, 0.10f}, {"white", 0.95f, 0.95f, 0.95f}, {"magenta", 0.90f, 0.10f, 0.70f},
        {"gray", 0.50f, 0.50f, 0.50f},   {"black", 0.05f, 0.05f, 0.05f},
    };
    for (const auto& e : table) {
        if (name == e.name) {
            rgb[0] = e.r;
            rgb[1] = e.g;
            rgb[2] = e.b;
            return;
        }
    }
    throw UsageError("unknown color name: " + name);
}

struct DatasetEntry {
    std::string file;    // as written in the manifest (relative to it)
    std::string path;    // resolved
    std::string prompt;
    std::string label;
    std::string edit_prompt_1;  // object swap
    std::string edit_prompt_2;  // background change
};

struct ShapeDatasetManifest {
    std::vector<DatasetEntry> entries;
    uint64_t seed = 0;
    int image_size = 32;
};

namespace detail_shapes {

inline bool inside_shape(const std::string& shape, float dx, float dy, float r) {
    if (shape == "circle") return dx * dx + dy * dy <= r * r;
    if (shape == "square") return std::abs(dx) <= r * 0.9f && std::abs(dy) <= r * 0.9f;
    if (shape == "triangle") {
        // Apex up, base down, contained in radius r.
        const float t = (dy + r) / (2.0f * r);  // 0 at apex row, 1 at base
        if (t < 0.0f || t > 1.0f) return false;
        return std::abs(dx) <= r * t;
    }
    if (shape == "ring") {
        const float d2 = dx * dx + dy * dy;
        const float inner = 0.55f * r;
        return d2 <= r * r && d2 >= inner * inner;
    }
    throw UsageError("unknown shape name: " + shape);
}

}  // namespace detail_shapes

// Renders one shape instance. Pure function of (cls, size, rng state); 2x2
// supersampling softens edges so downstream convolutions see gradients.
inline Tensor render_shape_image(const ShapeClass& cls, int size, Rng& rng) {
    float fg[3];
    shape_color_rgb(cls.color, fg);
    float bg[3];
    const float base = uniform<float>(rng, 0.08f, 0.38f);
    for (float& c : bg) c = std::min(0.55f, std::max(0.02f, base + uniform<float>(rng, -0.08f, 0.08f)));

    const float cx = size * 0.5f + uniform<float>(rng, -size / 8.0f, size / 8.0f);
    const float cy = size * 0.5f + uniform<float>(rng, -size / 8.0f, size / 8.0f);
    const float r = uniform<float>(rng, 0.22f, 0.36f) * size;

    Tensor img = Tensor::zeros({3, size, size});
    float* p = img.data();
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    const float px = x + 0.25f + 0.5f * sx;
                    const float py = y + 0.25f + 0.5f * sy;
                    if (detail_shapes::inside_shape(cls.shape, px - cx, py - cy, r)) ++hits;
                }
            }
            const float a = hits / 4.0f;
            for (int c = 0; c < 3; ++c) {
                p[(static_cast<int64_t>(c) * size + y) * size + x] = a * fg[c] + (1.0f - a) * bg[c];
            }
        }
    }
    // Mild texture so images are not piecewise constant.
    for (int64_t i = 0; i < img.numel(); ++i) {
        p[i] = std::min(1.0f, std::max(0.0f, p[i] + uniform<float>(rng, -0.015f, 0.015f)));
    }
    return img;
}

inline std::string shape_prompt(const ShapeClass& cls) { return "a photo of a " + cls.color + " " + cls.shape; }

inline ShapeDatasetManifest gen_shapes_dataset(int n, int size, uint64_t seed, const std::string& out_dir) {
    if (n < 1) throw UsageError("gen_shapes_dataset: n must be >= 1, got " + std::to_string(n));
    if (size < 8) throw UsageError("gen_shapes_dataset: size must be >= 8, got " + std::to_string(size));
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir)) throw IoError("cannot create output directory: " + out_dir);

    const auto& classes = default_shape_classes();
    ShapeDatasetManifest manifest;
    manifest.seed = seed;
    manifest.image_size = size;

    for (int i = 0; i < n; ++i) {
        const ShapeClass& cls = classes[static_cast<size_t>(i) % classes.size()];
        const ShapeClass& swap = classes[(static_cast<size_t>(i) + 1) % classes.size()];
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        Tensor img = render_shape_image(cls, size, rng);

        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
        const std::string path = (fs::path(out_dir) / name).string();
        save_image(img, path);

        DatasetEntry e;
        e.file = name;
        e.path = path;
        e.prompt = shape_prompt(cls);
        e.label = cls.color + "_" + cls.shape;
        e.edit_prompt_1 = shape_prompt(swap);
        e.edit_prompt_2 = "a " + cls.color + " " + cls.shape + " on a " +
                          (cls.color == "white" ? std::string("black") : std::string("white")) + " background";
        manifest.entries.push_back(std::move(e));
    }

    std::ofstream os(fs::path(out_dir) / "manifest.tsv");
    if (!os) throw IoError("cannot write manifest in: " + out_dir);
    for (const auto& e : manifest.entries) {
        os << e.file << '\t' << e.prompt << '\t' << e.label << '\t' << e.edit_prompt_1 << '\t' << e.edit_prompt_2
           << '\n';
    }
    return manifest;
}

inline ShapeDatasetManifest load_manifest(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open: " + manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    ShapeDatasetManifest manifest;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t start = 0;
        for (;;) {
            const size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(start));
                break;
            }
            cols.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (cols.size() != 5) {
            throw IoError(manifest_path + ":" + std::to_string(lineno) + ": expected 5 tab-separated columns, got " +
                          std::to_string(cols.size()));
        }
        DatasetEntry e;
        e.file = cols[0];
        e.path = fs::path(cols[0]).is_absolute() ? cols[0] : (dir / cols[0]).string();
        e.prompt = cols[1];
        e.label = cols[2];
        e.edit_prompt_1 = cols[3];
        e.edit_prompt_2 = cols[4];
        if (e.prompt.empty()) {
            throw IoError(manifest_path + ":" + std::to_string(lineno) + ": empty prompt");
        }
        manifest.entries.push_back(std::move(e));
    }
    if (!manifest.entries.empty()) {
        Tensor first = load_image(manifest.entries.front().path);
        manifest.image_size = first.dim(1);
    }
    return manifest;
}

// Checks the manifest invariant: every path decodes to the declared size.
inline void validate_manifest(const ShapeDatasetManifest& manifest) {
    for (const auto& e : manifest.entries) {
        Tensor img = load_image(e.path);
        if (img.dim(1) != manifest.image_size || img.dim(2) != manifest.image_size) {
            throw IoError("manifest entry " + e.file + " has size " + shape_str(img.shape()) + ", declared " +
                          std::to_string(manifest.image_size));
        }
    }
}

// --- filters ----------------------------------------------------------------------

// Box mean filter with edge replication; kernel must be odd.
inline Tensor mean_filter(const Tensor& img, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) {
        throw UsageError("mean_filter: kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    if (img.rank() != 3) throw ShapeError("mean_filter: expected [C,H,W], got " + shape_str(img.shape()));
    if (kernel == 1) return img.clone();
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const int half = kernel / 2;
    Tensor out = Tensor::zeros(img.shape());
    const float* p = img.data();
    float* q = out.data();
    const float inv = 1.0f / static_cast<float>(kernel * kernel);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float acc = 0.0f;
                for (int dy = -half; dy <= half; ++dy) {
                    const int yy = std::min(h - 1, std::max(0, y + dy));
                    for (int dx = -half; dx <= half; ++dx) {
                        const int xx = std::min(w - 1, std::max(0, x + dx));
                        acc += p[(static_cast<int64_t>(ch) * h + yy) * w + xx];
                    }
                }
                q[(static_cast<int64_t>(ch) * h + y) * w + x] = acc * inv;
            }
        }
    }
    return out;
}

// --- data-free priors -----------------------------------------------------------

struct JigsawConfig {
    int min_grid = 2;
    int max_grid = 8;
    int kernel = 5;          // mean-filter kernel, odd
    int curriculum_len = 20;  // epochs
    uint64_t seed = 0;
    int size = 32;

    void validate() const {
        if (min_grid < 1 || min_grid > max_grid) throw UsageError("jigsaw: need 1 <= min_grid <= max_grid");
        if (kernel < 1 || kernel % 2 == 0) throw UsageError("jigsaw: kernel must be odd");
        if (curriculum_len < 1) throw UsageError("jigsaw: curriculum_len must be >= 1");
        if (size < 4) throw UsageError("jigsaw: size must be >= 4");
    }
};

inline int jigsaw_grid_at(const JigsawConfig& cfg, int curriculum_index) {
    cfg.validate();
    if (curriculum_index < 0 || curriculum_index >= cfg.curriculum_len) {
        throw UsageError("jigsaw: curriculum index " + std::to_string(curriculum_index) + " outside [0," +
                         std::to_string(cfg.curriculum_len - 1) + "]");
    }
    if (cfg.curriculum_len == 1) return cfg.min_grid;
    const double frac = static_cast<double>(curriculum_index) / (cfg.curriculum_len - 1);
    return cfg.min_grid + static_cast<int>(std::lround((cfg.max_grid - cfg.min_grid) * frac));
}

// Tiled random-color image (texture on some tiles), then mean-filtered.
// Pure function of (config, curriculum_index).
inline Tensor gen_jigsaw(const JigsawConfig& cfg, int curriculum_index) {
    const int g = jigsaw_grid_at(cfg, curriculum_index);
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(curriculum_index)));
    const int size = cfg.size;
    Tensor img = Tensor::zeros({3, size, size});
    float* p = img.data();
    for (int ty = 0; ty < g; ++ty) {
        const int y0 = ty * size / g, y1 = (ty + 1) * size / g;
        for (int tx = 0; tx < g; ++tx) {
            const int x0 = tx * size / g, x1 = (tx + 1) * size / g;
            float col[3] = {uniform<float>(rng, 0.0f, 1.0f), uniform<float>(rng, 0.0f, 1.0f),
                            uniform<float>(rng, 0.0f, 1.0f)};
            const bool textured = uniform<float>(rng, 0.0f, 1.0f) < 0.4f;
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        float v = col[c];
                        if (textured) v += uniform<float>(rng, -0.15f, 0.15f);
                        p[(static_cast<int64_t>(c) * size + y) * size + x] =
                            std::min(1.0f, std::max(0.0f, v));
                    }
                }
            }
        }
    }
    return mean_filter(img, cfg.kernel);
}

// Pre-filter variant, exposed for tests that count tile segments.
inline Tensor gen_jigsaw_prefilter(const JigsawConfig& cfg, int curriculum_index) {
    JigsawConfig c = cfg;
    c.kernel = 1;
    return gen_jigsaw(c, curriculum_index);
}

inline Tensor gen_gaussian_prior(int size, uint64_t seed) {
    Rng rng(seed);
    Tensor img = Tensor::zeros({3, size, size});
    float* p = img.data();
    for (int64_t i = 0; i < img.numel(); ++i) {
        p[i] = std::min(1.0f, std::max(0.0f, 0.5f + 0.2f * normal<float>(rng)));
    }
    return img;
}

}  // namespace uimm
