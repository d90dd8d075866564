#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"

namespace uimm {

// --- scalar metrics ------------------------------------------------------------

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("psnr: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double mse = 0.0;
    const float* pa = a.data();
    const float* pb = b.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(n);
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail_ssim {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size));
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - half;
        w[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Separable valid-window Gaussian filtering of one channel plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w,
                                        const std::vector<double>& win) {
    const int k = static_cast<int>(win.size());
    const int oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * img[static_cast<size_t>(y) * w + x + i];
            tmp[static_cast<size_t>(y) * ow + x] = acc;
        }
    }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * tmp[static_cast<size_t>(y + i) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = acc;
        }
    }
    return out;
}

}  // namespace detail_ssim

// Mean local SSIM, 11x11 Gaussian window sigma=1.5, C1=(0.01)^2, C2=(0.03)^2,
// valid windows only, averaged over channels.
inline double ssim(const Tensor& a, const Tensor& b, int window = 11, double sigma = 1.5) {
    if (a.shape() != b.shape()) {
        throw ShapeError("ssim: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (a.rank() != 3) throw ShapeError("ssim: expected [C,H,W], got " + shape_str(a.shape()));
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (h < window || w < window) {
        throw UsageError("ssim: image " + shape_str(a.shape()) + " smaller than window " + std::to_string(window));
    }
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    const auto win = detail_ssim::gaussian_window(window, sigma);
    const int64_t plane = static_cast<int64_t>(h) * w;

    double channel_sum = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        std::vector<double> xa(static_cast<size_t>(plane)), xb(static_cast<size_t>(plane));
        std::vector<double> xaa(static_cast<size_t>(plane)), xbb(static_cast<size_t>(plane)),
            xab(static_cast<size_t>(plane));
        for (int64_t i = 0; i < plane; ++i) {
            const double va = a.data()[static_cast<int64_t>(ch) * plane + i];
            const double vb = b.data()[static_cast<int64_t>(ch) * plane + i];
            xa[static_cast<size_t>(i)] = va;
            xb[static_cast<size_t>(i)] = vb;
            xaa[static_cast<size_t>(i)] = va * va;
            xbb[static_cast<size_t>(i)] = vb * vb;
            xab[static_cast<size_t>(i)] = va * vb;
        }
        const auto mu_a = detail_ssim::filter_valid(xa, h, w, win);
        const auto mu_b = detail_ssim::filter_valid(xb, h, w, win);
        const auto m_aa = detail_ssim::filter_valid(xaa, h, w, win);
        const auto m_bb = detail_ssim::filter_valid(xbb, h, w, win);
        const auto m_ab = detail_ssim::filter_valid(xab, h, w, win);
        double acc = 0.0;
        for (size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = m_aa[i] - ma * ma;
            const double vb = m_bb[i] - mb * mb;
            const double cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        channel_sum += acc / static_cast<double>(mu_a.size());
    }
    return channel_sum / static_cast<double>(c);
}

// Cosine similarity of flattened toy-encoder latents. Stands in for the
// CLIP/DINO feature similarity of the original protocol (substitution is
// recorded in every report header).
template <class T>
double feat_sim(const ToyLdmBundleT<T>& bundle, const TensorT<T>& a, const TensorT<T>& b) {
    TapeT<T> tape;
    tape.set_recording(false);
    TensorT<T> za = bundle.vae.encode(tape, a);
    TensorT<T> zb = bundle.vae.encode(tape, b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < za.numel(); ++i) {
        const double va = za.data()[i], vb = zb.data()[i];
        dot += va * vb;
        na += va * va;
        nb += vb * vb;
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom == 0.0) return 1.0;  // both latents zero: identical
    return dot / denom;
}

// --- report ------------------------------------------------------------------

struct MetricRow {
    std::string image;
    uint64_t seed = 0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double feat_sim = 0.0;
};

struct MetricAggregate {
    double mean_psnr = 0.0, std_psnr = 0.0;
    double mean_ssim = 0.0, std_ssim = 0.0;
    double mean_feat = 0.0, std_feat = 0.0;
};

struct MetricReport {
    std::string label;
    std::string config_hash;
    std::vector<MetricRow> rows;

    MetricAggregate aggregate() const {
        MetricAggregate agg;
        const size_t n = rows.size();
        if (n == 0) return agg;
        for (const auto& r : rows) {
            agg.mean_psnr += r.psnr_db;
            agg.mean_ssim += r.ssim;
            agg.mean_feat += r.feat_sim;
        }
        agg.mean_psnr /= static_cast<double>(n);
        agg.mean_ssim /= static_cast<double>(n);
        agg.mean_feat /= static_cast<double>(n);
        if (n > 1) {
            double vp = 0.0, vs = 0.0, vf = 0.0;
            for (const auto& r : rows) {
                vp += (r.psnr_db - agg.mean_psnr) * (r.psnr_db - agg.mean_psnr);
                vs += (r.ssim - agg.mean_ssim) * (r.ssim - agg.mean_ssim);
                vf += (r.feat_sim - agg.mean_feat) * (r.feat_sim - agg.mean_feat);
            }
            agg.std_psnr = std::sqrt(vp / static_cast<double>(n - 1));
            agg.std_ssim = std::sqrt(vs / static_cast<double>(n - 1));
            agg.std_feat = std::sqrt(vf / static_cast<double>(n - 1));
        }
        return agg;
    }

    // Rows in canonical order regardless of production order.
    void sort_rows() {
        std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
            if (a.image != b.image) return a.image < b.image;
            return a.seed < b.seed;
        });
    }
};

inline void write_report_csv(const MetricReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    char buf[256];
    os << "# experiment: " << report.label << "\n";
    os << "# config: " << report.config_hash << "\n";
    os << "# orientation: metrics compare edit(clean) vs edit(immunized); lower psnr_db/ssim/feat_sim = stronger "
          "immunization\n";
    os << "# substitution: feat_sim is cosine similarity of toy VAE-encoder latents, standing in for CLIP/DINO "
          "feature similarity\n";
    os << "image,seed,psnr_db,ssim,feat_sim\n";
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.10f,%.10f,%.10f\n", r.image.c_str(),
                      static_cast<unsigned long long>(r.seed), r.psnr_db, r.ssim, r.feat_sim);
        os << buf;
    }
    const MetricAggregate agg = report.aggregate();
    std::snprintf(buf, sizeof(buf), "AGG,mean,%.10f,%.10f,%.10f\n", agg.mean_psnr, agg.mean_ssim, agg.mean_feat);
    os << buf;
    std::snprintf(buf, sizeof(buf), "AGG,std,%.10f,%.10f,%.10f\n", agg.std_psnr, agg.std_ssim, agg.std_feat);
    os << buf;
    if (!os) throw IoError("write failed: " + path);
}

// Minimal standalone SVG bar chart of the three metric means.
inline void write_report_svg(const MetricReport& report, const std::string& path) {
    const MetricAggregate agg = report.aggregate();
    struct Bar {
        const char* name;
        double value;
        double norm;  // 0..1 for bar height
    };
    const Bar bars[3] = {
        {"psnr_db", agg.mean_psnr, std::min(1.0, std::max(0.0, agg.mean_psnr / 60.0))},
        {"ssim", agg.mean_ssim, std::min(1.0, std::max(0.0, agg.mean_ssim))},
        {"feat_sim", agg.mean_feat, std::min(1.0, std::max(0.0, agg.mean_feat))},
    };
    const int width = 360, height = 240, base = 200, top = 30;
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "  <text x=\"10\" y=\"18\" font-family=\"monospace\" font-size=\"12\">" << report.label
       << " (metric means)</text>\n";
    os << "  <line x1=\"30\" y1=\"" << base << "\" x2=\"" << width - 10 << "\" y2=\"" << base
       << "\" stroke=\"black\"/>\n";
    char buf[256];
    for (int i = 0; i < 3; ++i) {
        const int bh = static_cast<int>((base - top) * bars[i].norm);
        const int x = 50 + i * 100;
        std::snprintf(buf, sizeof(buf),
                      "  <rect x=\"%d\" y=\"%d\" width=\"60\" height=\"%d\" fill=\"#4477aa\"/>\n", x, base - bh, bh);
        os << buf;
        std::snprintf(buf, sizeof(buf),
                      "  <text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">%s</text>\n", x,
                      base + 16, bars[i].name);
        os << buf;
        std::snprintf(buf, sizeof(buf),
                      "  <text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">%.4f</text>\n", x,
                      base - bh - 6, bars[i].value);
        os << buf;
    }
    os << "</svg>\n";
}

}  // namespace uimm
