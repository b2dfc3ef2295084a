#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "p3drad/volume.hpp"

namespace p3drad {

// RMSE over the region divided by the intensity range of truth over
// range_region (the region itself when null; the brain mask in reports).
double nrmse(const Volume3D& pred, const Volume3D& truth, const Volume3D& region,
             const Volume3D* range_region = nullptr);

// 10 log10(1 / MSE) with data range fixed at 1.0; +infinity when MSE == 0.
double psnr(const Volume3D& pred, const Volume3D& truth, const Volume3D& region);

// Mean over axial slices intersecting the region of 2D SSIM (11x11 Gaussian
// window, sigma 1.5, stabilizers for data range 1.0), averaged within each
// slice's region bounding box.
double ssim_volume(const Volume3D& pred, const Volume3D& truth, const Volume3D& region);

enum class View { axial, sagittal, coronal };

std::string to_string(View v);

// Perceptual-proxy distance: mean over view-plane slices (those intersecting
// slice_mask when given) of 1 - MS-SSIM at up to 3 dyadic scales. Volumes too
// small for 3 scales fall back to the available scales; scales_used reports
// how many were usable.
double pproxy(const Volume3D& pred, const Volume3D& truth, View view,
              const Volume3D* slice_mask = nullptr, int* scales_used = nullptr);

// Mean of the three per-view distances.
double pproxy_avg(const Volume3D& a, const Volume3D& b, const Volume3D* slice_mask = nullptr);

// Temporal Fidelity Index: pproxy_avg(inpainted pair) / pproxy_avg(original
// pair). Identical original timepoints make the ratio undefined (NaN).
double tfi(const Volume3D& orig_t1, const Volume3D& orig_t2, const Volume3D& inp_t1,
           const Volume3D& inp_t2);

struct SubjectMetrics {
    std::string id;
    // masked-region metrics, averaged over both timepoints
    double nrmse_mask = 0, psnr_mask = 0, ssim_mask = 0;
    // whole-brain variants
    double nrmse_brain = 0, psnr_brain = 0, ssim_brain = 0;
    // perceptual proxy vs ground truth, averaged over timepoints
    double pproxy_axial = 0, pproxy_sagittal = 0, pproxy_coronal = 0, pproxy_avg = 0;
    // longitudinal consistency
    double orig_pair_dist = 0, inp_pair_dist = 0, tfi = 0;
    int pproxy_scales = 3;
    double nfe = -1, seconds = -1; // from sampler stats when present
};

struct Aggregate {
    double mean = 0, stdev = 0;
};

struct MetricReport {
    std::vector<SubjectMetrics> subjects;
    std::map<std::string, Aggregate> aggregates;
    double pearson_r = 0; // original-pair vs inpainted-pair distances
};

// Predictions are expected as <id>_t1_inpainted.vol / <id>_t2_inpainted.vol
// under pred_dir, optionally with <id>_stats.json. Missing files are listed
// in the thrown error.
MetricReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& pred_dir);

void write_report_csv(const MetricReport& report, const std::filesystem::path& path);
void write_report_json(const MetricReport& report, const std::filesystem::path& path);

} // namespace p3drad
