#include "p3drad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace p3drad {

namespace {

constexpr double kC1 = 0.01 * 0.01; // (K1 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;
constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kMsWeights3[3] = {0.0448, 0.2856, 0.3001}; // renormalized on use

const std::vector<double>& gaussian_kernel() {
    static const std::vector<double> kernel = [] {
        std::vector<double> k(kWin * kWin);
        const int r = kWin / 2;
        double sum = 0.0;
        for (int y = -r; y <= r; ++y)
            for (int x = -r; x <= r; ++x) {
                const double v = std::exp(-(x * x + y * y) / (2.0 * kSigma * kSigma));
                k[std::size_t((y + r) * kWin + (x + r))] = v;
                sum += v;
            }
        for (double& v : k) v /= sum;
        return k;
    }();
    return kernel;
}

struct Slice {
    int rows = 0, cols = 0;
    std::vector<double> v;
    double at(int r, int c) const { return v[std::size_t(r) * cols + c]; }
};

// View geometry: axial slice d -> (H, W); sagittal slice w -> (D, H);
// coronal slice h -> (D, W).
int view_slice_count(Dims dims, View view) {
    switch (view) {
        case View::axial: return dims.d;
        case View::sagittal: return dims.w;
        default: return dims.h;
    }
}

Slice extract_slice(const Volume3D& vol, View view, int index) {
    Slice s;
    const Dims dm = vol.dims;
    if (view == View::axial) {
        s.rows = dm.h;
        s.cols = dm.w;
        s.v.resize(std::size_t(s.rows) * s.cols);
        for (int h = 0; h < dm.h; ++h)
            for (int w = 0; w < dm.w; ++w)
                s.v[std::size_t(h) * s.cols + w] = vol.at(index, h, w);
    } else if (view == View::sagittal) {
        s.rows = dm.d;
        s.cols = dm.h;
        s.v.resize(std::size_t(s.rows) * s.cols);
        for (int d = 0; d < dm.d; ++d)
            for (int h = 0; h < dm.h; ++h) s.v[std::size_t(d) * s.cols + h] = vol.at(d, h, index);
    } else {
        s.rows = dm.d;
        s.cols = dm.w;
        s.v.resize(std::size_t(s.rows) * s.cols);
        for (int d = 0; d < dm.d; ++d)
            for (int w = 0; w < dm.w; ++w) s.v[std::size_t(d) * s.cols + w] = vol.at(d, index, w);
    }
    return s;
}

bool slice_intersects_mask(const Volume3D& mask, View view, int index) {
    const Dims dm = mask.dims;
    if (view == View::axial) {
        for (int h = 0; h < dm.h; ++h)
            for (int w = 0; w < dm.w; ++w)
                if (mask.at(index, h, w) != 0.0f) return true;
    } else if (view == View::sagittal) {
        for (int d = 0; d < dm.d; ++d)
            for (int h = 0; h < dm.h; ++h)
                if (mask.at(d, h, index) != 0.0f) return true;
    } else {
        for (int d = 0; d < dm.d; ++d)
            for (int w = 0; w < dm.w; ++w)
                if (mask.at(d, index, w) != 0.0f) return true;
    }
    return false;
}

struct SsimSums {
    double ssim = 0, cs = 0, luminance = 0;
    long count = 0;
};

// Gaussian-windowed local statistics over the valid interior (full window
// support), restricted to [r0, r1] x [c0, c1] of window centers.
SsimSums ssim_stats(const Slice& a, const Slice& b, int r0, int r1, int c0, int c1) {
    const auto& kernel = gaussian_kernel();
    const int rad = kWin / 2;
    SsimSums out;
    r0 = std::max(r0, rad);
    r1 = std::min(r1, a.rows - 1 - rad);
    c0 = std::max(c0, rad);
    c1 = std::min(c1, a.cols - 1 - rad);
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int ky = -rad; ky <= rad; ++ky) {
                const double* ar = &a.v[std::size_t(r + ky) * a.cols + (c - rad)];
                const double* br = &b.v[std::size_t(r + ky) * b.cols + (c - rad)];
                const double* kr = &kernel[std::size_t(ky + rad) * kWin];
                for (int kx = 0; kx < kWin; ++kx) {
                    const double av = ar[kx], bv = br[kx], kv = kr[kx];
                    mx += kv * av;
                    my += kv * bv;
                    mxx += kv * av * av;
                    myy += kv * bv * bv;
                    mxy += kv * av * bv;
                }
            }
            const double vx = mxx - mx * mx;
            const double vy = myy - my * my;
            const double cxy = mxy - mx * my;
            const double lum = (2 * mx * my + kC1) / (mx * mx + my * my + kC1);
            const double cs = (2 * cxy + kC2) / (vx + vy + kC2);
            out.ssim += lum * cs;
            out.cs += cs;
            out.luminance += lum;
            ++out.count;
        }
    }
    return out;
}

Slice downsample2(const Slice& s) {
    Slice out;
    out.rows = s.rows / 2;
    out.cols = s.cols / 2;
    out.v.resize(std::size_t(out.rows) * out.cols);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c)
            out.v[std::size_t(r) * out.cols + c] =
                0.25 * (s.at(2 * r, 2 * c) + s.at(2 * r, 2 * c + 1) + s.at(2 * r + 1, 2 * c) +
                        s.at(2 * r + 1, 2 * c + 1));
    return out;
}

int usable_scales(int rows, int cols, int max_scales) {
    int scales = 0;
    int m = std::min(rows, cols);
    while (scales < max_scales && m >= kWin) {
        ++scales;
        m /= 2;
    }
    return std::max(1, scales);
}

// Multi-scale SSIM over a slice pair: contrast-structure terms at every
// scale, full SSIM at the coarsest, standard weights renormalized to the
// scales in use. Identical slices give exactly 1.
double msssim_slice(Slice a, Slice b, int scales) {
    double wsum = 0.0;
    for (int j = 0; j < scales; ++j) wsum += kMsWeights3[j];
    double value = 1.0;
    for (int j = 0; j < scales; ++j) {
        const SsimSums sums = ssim_stats(a, b, 0, a.rows - 1, 0, a.cols - 1);
        if (sums.count == 0) return 1.0; // degenerate geometry; treated as no signal
        const double weight = kMsWeights3[j] / wsum;
        const double term = j + 1 == scales ? sums.ssim / double(sums.count)
                                            : sums.cs / double(sums.count);
        value *= std::pow(std::max(term, 0.0), weight);
        if (j + 1 < scales) {
            a = downsample2(a);
            b = downsample2(b);
        }
    }
    return value;
}

void check_same_dims(const Volume3D& a, const Volume3D& b, const char* what) {
    if (!(a.dims == b.dims))
        throw ValidationError(std::string(what) + ": volume dims mismatch");
}

} // namespace

std::string to_string(View v) {
    switch (v) {
        case View::axial: return "axial";
        case View::sagittal: return "sagittal";
        default: return "coronal";
    }
}

double nrmse(const Volume3D& pred, const Volume3D& truth, const Volume3D& region,
             const Volume3D* range_region) {
    check_same_dims(pred, truth, "nrmse");
    check_same_dims(pred, region, "nrmse");
    const RegionIndexSet reg = masked_region_indices(region);
    if (reg.empty()) throw ValidationError("nrmse: empty region");

    double mse = 0.0;
    for (std::size_t i : reg.indices) {
        const double d = double(pred.data[i]) - double(truth.data[i]);
        mse += d * d;
    }
    mse /= double(reg.count);

    const RegionIndexSet range_set =
        range_region ? masked_region_indices(*range_region) : reg;
    if (range_set.empty()) throw ValidationError("nrmse: empty normalization region");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i : range_set.indices) {
        lo = std::min(lo, double(truth.data[i]));
        hi = std::max(hi, double(truth.data[i]));
    }
    if (hi <= lo) throw ValidationError("nrmse: truth has zero intensity range");
    return std::sqrt(mse) / (hi - lo);
}

double psnr(const Volume3D& pred, const Volume3D& truth, const Volume3D& region) {
    check_same_dims(pred, truth, "psnr");
    check_same_dims(pred, region, "psnr");
    const RegionIndexSet reg = masked_region_indices(region);
    if (reg.empty()) throw ValidationError("psnr: empty region");
    double mse = 0.0;
    for (std::size_t i : reg.indices) {
        const double d = double(pred.data[i]) - double(truth.data[i]);
        mse += d * d;
    }
    mse /= double(reg.count);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim_volume(const Volume3D& pred, const Volume3D& truth, const Volume3D& region) {
    check_same_dims(pred, truth, "ssim_volume");
    check_same_dims(pred, region, "ssim_volume");
    if (masked_region_indices(region).empty())
        throw ValidationError("ssim_volume: empty region");

    double total = 0.0;
    int slices = 0;
    for (int d = 0; d < pred.dims.d; ++d) {
        // Per-slice bounding box of the region.
        int r0 = pred.dims.h, r1 = -1, c0 = pred.dims.w, c1 = -1;
        for (int h = 0; h < pred.dims.h; ++h)
            for (int w = 0; w < pred.dims.w; ++w)
                if (region.at(d, h, w) != 0.0f) {
                    r0 = std::min(r0, h);
                    r1 = std::max(r1, h);
                    c0 = std::min(c0, w);
                    c1 = std::max(c1, w);
                }
        if (r1 < 0) continue;

        const Slice a = extract_slice(pred, View::axial, d);
        const Slice b = extract_slice(truth, View::axial, d);
        SsimSums sums = ssim_stats(a, b, r0, r1, c0, c1);
        if (sums.count == 0) {
            // Bounding box entirely within the window margin; fall back to
            // the nearest valid window centers.
            const int rad = kWin / 2;
            const int rc = std::clamp((r0 + r1) / 2, rad, a.rows - 1 - rad);
            const int cc = std::clamp((c0 + c1) / 2, rad, a.cols - 1 - rad);
            sums = ssim_stats(a, b, rc, rc, cc, cc);
            if (sums.count == 0) continue;
        }
        total += sums.ssim / double(sums.count);
        ++slices;
    }
    if (slices == 0) throw ValidationError("ssim_volume: region has no usable slices");
    return total / double(slices);
}

double pproxy(const Volume3D& pred, const Volume3D& truth, View view,
              const Volume3D* slice_mask, int* scales_used) {
    check_same_dims(pred, truth, "pproxy");
    if (slice_mask) check_same_dims(pred, *slice_mask, "pproxy");

    const int count = view_slice_count(pred.dims, view);
    double total = 0.0;
    int used = 0;
    int scales_min = 3;
    for (int i = 0; i < count; ++i) {
        if (slice_mask && !slice_intersects_mask(*slice_mask, view, i)) continue;
        const Slice a = extract_slice(pred, view, i);
        const Slice b = extract_slice(truth, view, i);
        const int scales = usable_scales(a.rows, a.cols, 3);
        scales_min = std::min(scales_min, scales);
        total += 1.0 - msssim_slice(a, b, scales);
        ++used;
    }
    if (scales_used) *scales_used = used > 0 ? scales_min : 0;
    if (used == 0) return 0.0;
    return total / double(used);
}

double pproxy_avg(const Volume3D& a, const Volume3D& b, const Volume3D* slice_mask) {
    return (pproxy(a, b, View::axial, slice_mask) + pproxy(a, b, View::sagittal, slice_mask) +
            pproxy(a, b, View::coronal, slice_mask)) /
           3.0;
}

double tfi(const Volume3D& orig_t1, const Volume3D& orig_t2, const Volume3D& inp_t1,
           const Volume3D& inp_t2) {
    const double denom = pproxy_avg(orig_t1, orig_t2);
    if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return pproxy_avg(inp_t1, inp_t2) / denom;
}

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

Aggregate aggregate_of(const std::vector<double>& v) {
    Aggregate a;
    a.mean = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.stdev = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
    return a;
}

std::string fmt_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

} // namespace

MetricReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& pred_dir) {
    // Fail up front with the complete list of missing files.
    std::vector<std::string> missing;
    for (const auto& e : manifest.subjects)
        for (const char* suffix : {"_t1_inpainted.vol", "_t2_inpainted.vol"}) {
            const auto p = pred_dir / (e.id + suffix);
            if (!std::filesystem::exists(p)) missing.push_back(p.string());
        }
    if (!missing.empty()) {
        std::string msg = "missing prediction files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw ValidationError(msg);
    }

    MetricReport report;
    for (const auto& e : manifest.subjects) {
        const LongitudinalSample gt = load_sample(manifest, e);
        const Volume3D p1 = load_volume(pred_dir / (e.id + "_t1_inpainted.vol"));
        const Volume3D p2 = load_volume(pred_dir / (e.id + "_t2_inpainted.vol"));

        SubjectMetrics m;
        m.id = e.id;

        auto mean2 = [](double a, double b) { return 0.5 * (a + b); };
        m.nrmse_mask = mean2(nrmse(p1, gt.img_t1, gt.lesion_t1, &gt.brain_mask),
                             nrmse(p2, gt.img_t2, gt.lesion_t2, &gt.brain_mask));
        m.psnr_mask = mean2(psnr(p1, gt.img_t1, gt.lesion_t1),
                            psnr(p2, gt.img_t2, gt.lesion_t2));
        m.ssim_mask = mean2(ssim_volume(p1, gt.img_t1, gt.lesion_t1),
                            ssim_volume(p2, gt.img_t2, gt.lesion_t2));
        m.nrmse_brain = mean2(nrmse(p1, gt.img_t1, gt.brain_mask),
                              nrmse(p2, gt.img_t2, gt.brain_mask));
        m.psnr_brain = mean2(psnr(p1, gt.img_t1, gt.brain_mask),
                             psnr(p2, gt.img_t2, gt.brain_mask));
        m.ssim_brain = mean2(ssim_volume(p1, gt.img_t1, gt.brain_mask),
                             ssim_volume(p2, gt.img_t2, gt.brain_mask));

        int scales = 3;
        auto view_pair = [&](View v) {
            int s1 = 3, s2 = 3;
            const double d1 = pproxy(p1, gt.img_t1, v, &gt.lesion_t1, &s1);
            const double d2 = pproxy(p2, gt.img_t2, v, &gt.lesion_t2, &s2);
            scales = std::min({scales, s1, s2});
            return mean2(d1, d2);
        };
        m.pproxy_axial = view_pair(View::axial);
        m.pproxy_sagittal = view_pair(View::sagittal);
        m.pproxy_coronal = view_pair(View::coronal);
        m.pproxy_avg = (m.pproxy_axial + m.pproxy_sagittal + m.pproxy_coronal) / 3.0;
        m.pproxy_scales = scales;

        m.orig_pair_dist = pproxy_avg(gt.img_t1, gt.img_t2);
        m.inp_pair_dist = pproxy_avg(p1, p2);
        m.tfi = m.orig_pair_dist == 0.0 ? std::numeric_limits<double>::quiet_NaN()
                                        : m.inp_pair_dist / m.orig_pair_dist;

        const auto stats_path = pred_dir / (e.id + "_stats.json");
        if (std::filesystem::exists(stats_path)) {
            std::ifstream is(stats_path);
            nlohmann::json j;
            is >> j;
            if (j.contains("nfe")) m.nfe = j["nfe"].get<double>();
            if (j.contains("seconds")) m.seconds = j["seconds"].get<double>();
        }
        report.subjects.push_back(std::move(m));
    }

    auto collect = [&](auto getter) {
        std::vector<double> v;
        for (const auto& s : report.subjects) v.push_back(getter(s));
        return v;
    };
    const std::vector<std::pair<std::string, std::vector<double>>> columns = {
        {"nrmse_mask", collect([](const SubjectMetrics& s) { return s.nrmse_mask; })},
        {"psnr_mask", collect([](const SubjectMetrics& s) { return s.psnr_mask; })},
        {"ssim_mask", collect([](const SubjectMetrics& s) { return s.ssim_mask; })},
        {"nrmse_brain", collect([](const SubjectMetrics& s) { return s.nrmse_brain; })},
        {"psnr_brain", collect([](const SubjectMetrics& s) { return s.psnr_brain; })},
        {"ssim_brain", collect([](const SubjectMetrics& s) { return s.ssim_brain; })},
        {"pproxy_axial", collect([](const SubjectMetrics& s) { return s.pproxy_axial; })},
        {"pproxy_sagittal",
         collect([](const SubjectMetrics& s) { return s.pproxy_sagittal; })},
        {"pproxy_coronal", collect([](const SubjectMetrics& s) { return s.pproxy_coronal; })},
        {"pproxy_avg", collect([](const SubjectMetrics& s) { return s.pproxy_avg; })},
        {"tfi", collect([](const SubjectMetrics& s) { return s.tfi; })},
    };
    for (const auto& [name, values] : columns)
        report.aggregates[name] = aggregate_of(values);

    // Pearson correlation between original-pair and inpainted-pair distances.
    const std::vector<double> x = collect([](const SubjectMetrics& s) { return s.orig_pair_dist; });
    const std::vector<double> y = collect([](const SubjectMetrics& s) { return s.inp_pair_dist; });
    const double mx = mean_of(x), my = mean_of(y);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    report.pearson_r = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy)
                                            : std::numeric_limits<double>::quiet_NaN();
    return report;
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "id,nrmse_mask,psnr_mask,ssim_mask,nrmse_brain,psnr_brain,ssim_brain,"
          "pproxy_axial,pproxy_sagittal,pproxy_coronal,pproxy_avg,orig_pair_dist,"
          "inp_pair_dist,tfi,pproxy_scales,nfe,seconds\n";
    for (const auto& s : report.subjects) {
        os << s.id << ',' << fmt_double(s.nrmse_mask) << ',' << fmt_double(s.psnr_mask) << ','
           << fmt_double(s.ssim_mask) << ',' << fmt_double(s.nrmse_brain) << ','
           << fmt_double(s.psnr_brain) << ',' << fmt_double(s.ssim_brain) << ','
           << fmt_double(s.pproxy_axial) << ',' << fmt_double(s.pproxy_sagittal) << ','
           << fmt_double(s.pproxy_coronal) << ',' << fmt_double(s.pproxy_avg) << ','
           << fmt_double(s.orig_pair_dist) << ',' << fmt_double(s.inp_pair_dist) << ','
           << fmt_double(s.tfi) << ',' << s.pproxy_scales << ',' << fmt_double(s.nfe) << ','
           << fmt_double(s.seconds) << '\n';
    }
    if (!os) throw std::runtime_error("I/O failure writing " + path.string());
}

void write_report_json(const MetricReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["subjects"] = report.subjects.size();
    nlohmann::json agg;
    for (const auto& [name, a] : report.aggregates) {
        agg[name] = {{"mean", std::isfinite(a.mean) ? nlohmann::json(a.mean)
                                                    : nlohmann::json(fmt_double(a.mean))},
                     {"std", std::isfinite(a.stdev) ? nlohmann::json(a.stdev)
                                                    : nlohmann::json(fmt_double(a.stdev))}};
    }
    j["aggregates"] = std::move(agg);
    j["pearson_r"] = std::isfinite(report.pearson_r)
                         ? nlohmann::json(report.pearson_r)
                         : nlohmann::json(fmt_double(report.pearson_r));
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("I/O failure writing " + path.string());
}

} // namespace p3drad
