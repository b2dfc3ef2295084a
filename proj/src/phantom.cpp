#include "p3drad/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "p3drad/log.hpp"
#include "p3drad/rng.hpp"

namespace p3drad {

namespace {

// Tissue intensities for the concentric shells, in normalized [0, 1] units.
constexpr float kCsfIntensity = 0.30f;
constexpr float kGrayIntensity = 0.60f;
constexpr float kWhiteIntensity = 0.85f;

// Normalized-radius shell boundaries.
constexpr double kVentricleRadius = 0.22;
constexpr double kWhiteRadius = 0.60;
constexpr double kGrayRadius = 0.85;
constexpr double kCsfOuterRadius = 1.0;

// Smooth random field: trilinear upsampling of low-resolution (dims/8, at
// least 2 per axis) seeded Gaussian noise. Values roughly unit scale.
std::vector<double> smooth_field(Dims dims, std::uint64_t seed) {
    const int cd = std::max(2, dims.d / 8);
    const int ch = std::max(2, dims.h / 8);
    const int cw = std::max(2, dims.w / 8);
    SeededRng rng(seed);
    std::vector<double> coarse(std::size_t(cd) * ch * cw);
    for (double& v : coarse) v = rng.normal();

    auto cat = [&](int d, int h, int w) {
        return coarse[(std::size_t(d) * ch + h) * cw + w];
    };

    std::vector<double> out(dims.voxels());
    std::size_t i = 0;
    for (int d = 0; d < dims.d; ++d) {
        const double fd = dims.d > 1 ? double(d) / (dims.d - 1) * (cd - 1) : 0.0;
        const int d0 = std::min(int(fd), cd - 2);
        const double td = fd - d0;
        for (int h = 0; h < dims.h; ++h) {
            const double fh = dims.h > 1 ? double(h) / (dims.h - 1) * (ch - 1) : 0.0;
            const int h0 = std::min(int(fh), ch - 2);
            const double th = fh - h0;
            for (int w = 0; w < dims.w; ++w, ++i) {
                const double fw = dims.w > 1 ? double(w) / (dims.w - 1) * (cw - 1) : 0.0;
                const int w0 = std::min(int(fw), cw - 2);
                const double tw = fw - w0;
                double acc = 0.0;
                for (int dd = 0; dd < 2; ++dd)
                    for (int hh = 0; hh < 2; ++hh)
                        for (int ww = 0; ww < 2; ++ww) {
                            const double wgt = (dd ? td : 1 - td) * (hh ? th : 1 - th) *
                                               (ww ? tw : 1 - tw);
                            acc += wgt * cat(d0 + dd, h0 + hh, w0 + ww);
                        }
                out[i] = acc;
            }
        }
    }
    return out;
}

struct TissueSample {
    float intensity;
    bool csf;
    bool tissue;
};

// Radial tissue profile. rho is the (bump-perturbed) normalized radius after
// the atrophy deformation; texture adds mild intra-tissue variation.
TissueSample tissue_at(double rho, double texture) {
    TissueSample s{0.0f, false, false};
    if (rho > kCsfOuterRadius) return s;
    s.tissue = true;
    float base;
    if (rho <= kVentricleRadius) {
        base = kCsfIntensity;
        s.csf = true;
    } else if (rho <= kWhiteRadius) {
        base = kWhiteIntensity;
    } else if (rho <= kGrayRadius) {
        base = kGrayIntensity;
    } else {
        base = kCsfIntensity;
        s.csf = true;
    }
    double v = base + (s.csf ? 0.015 : 0.05) * texture;
    return {static_cast<float>(std::clamp(v, 0.0, 1.0)), s.csf, true};
}

// Weight of the atrophy deformation: full strength at the center, fading to
// zero at the brain edge so the outer contour stays put.
double atrophy_weight(double rho) {
    const double x = std::clamp(1.0 - rho, 0.0, 1.0);
    return x * x;
}

} // namespace

void PhantomConfig::validate() const {
    if (dims.d < 16 || dims.h < 16 || dims.w < 16)
        throw ValidationError("phantom dims must be at least 16x16x16, got " + to_string(dims));
    if (atrophy_factor < 0.0 || atrophy_factor > 0.05)
        throw ValidationError("atrophy_factor must lie in [0, 0.05]");
    if (bias_amplitude < 0.0 || bias_amplitude > 0.1)
        throw ValidationError("bias_amplitude must lie in [0, 0.1]");
    if (lesion_count_min < 0 || lesion_count_min > lesion_count_max)
        throw ValidationError("lesion count range is degenerate");
    if (lesion_radius_min < 1 || lesion_radius_min > lesion_radius_max)
        throw ValidationError("lesion radius range is degenerate");
}

LongitudinalSample generate_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    const Dims dims = cfg.dims;

    const std::vector<double> bump = smooth_field(dims, mix_seed(cfg.seed, 11));
    const std::vector<double> texture = smooth_field(dims, mix_seed(cfg.seed, 13));
    std::vector<double> bias;
    if (cfg.bias_amplitude > 0.0) bias = smooth_field(dims, mix_seed(cfg.seed, 17));

    LongitudinalSample s;
    s.seed = cfg.seed;
    s.img_t1 = Volume3D(dims);
    s.img_t2 = Volume3D(dims);
    s.lesion_t1 = Volume3D(dims, VolumeKind::mask);
    s.lesion_t2 = Volume3D(dims, VolumeKind::mask);
    s.csf_t1 = Volume3D(dims, VolumeKind::mask);
    s.csf_t2 = Volume3D(dims, VolumeKind::mask);
    s.brain_mask = Volume3D(dims, VolumeKind::mask);

    const double cd = (dims.d - 1) / 2.0, chh = (dims.h - 1) / 2.0, cw = (dims.w - 1) / 2.0;
    const double rd = 0.42 * dims.d, rh = 0.42 * dims.h, rw = 0.42 * dims.w;

    std::size_t i = 0;
    for (int d = 0; d < dims.d; ++d)
        for (int h = 0; h < dims.h; ++h)
            for (int w = 0; w < dims.w; ++w, ++i) {
                const double zd = (d - cd) / rd, zh = (h - chh) / rh, zw = (w - cw) / rw;
                const double rho0 = std::sqrt(zd * zd + zh * zh + zw * zw);
                const double rho = rho0 + 0.06 * bump[i];

                const TissueSample t1 = tissue_at(rho, texture[i]);
                s.img_t1.data[i] = t1.intensity;
                s.csf_t1.data[i] = t1.csf ? 1.0f : 0.0f;

                if (cfg.atrophy_factor == 0.0 && cfg.bias_amplitude == 0.0) {
                    s.img_t2.data[i] = t1.intensity;
                    s.csf_t2.data[i] = t1.csf ? 1.0f : 0.0f;
                    s.brain_mask.data[i] = t1.tissue ? 1.0f : 0.0f;
                    continue;
                }

                // Atrophy pulls tissue toward the center, expanding the CSF
                // spaces; the bias field perturbs intensities multiplicatively.
                const double rho2 = rho * (1.0 - cfg.atrophy_factor * atrophy_weight(rho));
                TissueSample t2 = tissue_at(rho2, texture[i]);
                if (cfg.bias_amplitude > 0.0 && t2.tissue) {
                    const double gain = 1.0 + cfg.bias_amplitude * bias[i];
                    t2.intensity = static_cast<float>(
                        std::clamp(double(t2.intensity) * gain, 0.0, 1.0));
                }
                s.img_t2.data[i] = t2.intensity;
                s.csf_t2.data[i] = t2.csf ? 1.0f : 0.0f;
                s.brain_mask.data[i] = (t1.tissue || t2.tissue) ? 1.0f : 0.0f;
            }

    return s;
}

TransplantOutcome transplant_lesions(const LongitudinalSample& sample,
                                     const PhantomConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (masked_region_indices(sample.lesion_t1).count != 0 ||
        masked_region_indices(sample.lesion_t2).count != 0)
        throw ValidationError("transplant_lesions: sample already carries lesion masks");

    TransplantOutcome out;
    out.sample = sample;
    const Dims dims = sample.dims();

    // Voxels eligible for lesion tissue: inside the brain, outside both CSF
    // priors at both timepoints.
    auto eligible = [&](std::size_t i) {
        return out.sample.brain_mask.data[i] != 0.0f && sample.csf_t1.data[i] == 0.0f &&
               sample.csf_t2.data[i] == 0.0f;
    };
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < dims.voxels(); ++i)
        if (eligible(i)) candidates.push_back(i);

    SeededRng rng(mix_seed(seed, 23));
    const int n_lesions = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
    out.requested = 2 * n_lesions;
    if (n_lesions == 0 || candidates.empty()) return out;

    auto carve = [&](Volume3D& mask, int d0, int h0, int w0, double ra, double rb,
                     double rc) -> int {
        int added = 0;
        const int dd = int(std::ceil(ra)), dh = int(std::ceil(rb)), dw = int(std::ceil(rc));
        for (int d = std::max(0, d0 - dd); d <= std::min(dims.d - 1, d0 + dd); ++d)
            for (int h = std::max(0, h0 - dh); h <= std::min(dims.h - 1, h0 + dh); ++h)
                for (int w = std::max(0, w0 - dw); w <= std::min(dims.w - 1, w0 + dw); ++w) {
                    const double q = std::pow((d - d0) / ra, 2) + std::pow((h - h0) / rb, 2) +
                                     std::pow((w - w0) / rc, 2);
                    if (q > 1.0) continue;
                    const std::size_t i = mask.index(d, h, w);
                    if (!eligible(i) || mask.data[i] != 0.0f) continue;
                    mask.data[i] = 1.0f;
                    ++added;
                }
        return added;
    };

    for (int lesion = 0; lesion < n_lesions; ++lesion) {
        // Which timepoints this lesion appears in: both half the time,
        // otherwise only one (new or resolving lesion).
        const double mode = rng.uniform();
        const bool in_t1 = mode < 0.75;
        const bool in_t2 = mode >= 0.25;

        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const std::size_t center = candidates[std::size_t(
                rng.uniform_int(0, int(candidates.size()) - 1))];
            const int d0 = int(center / (std::size_t(dims.h) * dims.w));
            const int rem = int(center % (std::size_t(dims.h) * dims.w));
            const int h0 = rem / dims.w, w0 = rem % dims.w;
            const double ra = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
            const double rb = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
            const double rc = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);

            // Probe on a scratch copy of t1's mask shape: the blob must keep
            // at least half of its ideal volume after clipping to eligible
            // tissue, otherwise try another center.
            Volume3D probe(dims, VolumeKind::mask);
            const int got = carve(probe, d0, h0, w0, ra, rb, rc);
            const double ideal = 4.0 / 3.0 * 3.14159265358979323846 * ra * rb * rc;
            if (got < std::max(2.0, 0.5 * ideal)) continue;

            // Small per-timepoint jitter so paired lesions overlap without
            // being identical.
            if (in_t1) {
                if (carve(out.sample.lesion_t1, d0, h0, w0, ra, rb, rc) > 0) ++out.placed_t1;
            }
            if (in_t2) {
                const int jd = rng.uniform_int(-1, 1), jh = rng.uniform_int(-1, 1),
                          jw = rng.uniform_int(-1, 1);
                const double scale = rng.uniform(0.85, 1.15);
                if (carve(out.sample.lesion_t2, std::clamp(d0 + jd, 0, dims.d - 1),
                          std::clamp(h0 + jh, 0, dims.h - 1),
                          std::clamp(w0 + jw, 0, dims.w - 1), std::max(1.0, ra * scale),
                          std::max(1.0, rb * scale), std::max(1.0, rc * scale)) > 0)
                    ++out.placed_t2;
            }
            placed = true;
        }
        if (!placed)
            log_warn("subject %s: lesion %d/%d could not be placed after 100 attempts",
                     sample.subject_id.c_str(), lesion + 1, n_lesions);
    }

    out.sample.validate();
    return out;
}

std::filesystem::path make_dataset(int n_subjects, const PhantomConfig& cfg,
                                   const std::filesystem::path& out_dir) {
    if (n_subjects < 1) throw ValidationError("make_dataset: n_subjects must be >= 1");
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.dims = cfg.dims;

    char idbuf[32];
    for (int i = 0; i < n_subjects; ++i) {
        PhantomConfig sub = cfg;
        sub.seed = cfg.seed + std::uint64_t(i);
        std::snprintf(idbuf, sizeof idbuf, "subj_%03d", i);
        const std::string id = idbuf;

        LongitudinalSample healthy = generate_phantom(sub);
        healthy.subject_id = id;
        TransplantOutcome outcome = transplant_lesions(healthy, sub, mix_seed(sub.seed, 31));
        LongitudinalSample& s = outcome.sample;
        s.subject_id = id;
        if (!outcome.complete())
            log_warn("%s: placed %d+%d of %d requested lesion instances", id.c_str(),
                     outcome.placed_t1, outcome.placed_t2, outcome.requested);

        const std::filesystem::path subj_dir = out_dir / id;
        std::filesystem::create_directories(subj_dir);

        ManifestEntry e;
        e.id = id;
        e.seed = sub.seed;
        auto store = [&](const Volume3D& v, const char* name, std::string& field) {
            field = id + "/" + name + ".vol";
            save_volume(v, out_dir / field);
        };
        store(s.img_t1, "img_t1", e.img_t1);
        store(s.img_t2, "img_t2", e.img_t2);
        store(s.lesion_t1, "lesion_t1", e.lesion_t1);
        store(s.lesion_t2, "lesion_t2", e.lesion_t2);
        store(s.csf_t1, "csf_t1", e.csf_t1);
        store(s.csf_t2, "csf_t2", e.csf_t2);
        store(s.brain_mask, "brain_mask", e.brain_mask);
        manifest.subjects.push_back(std::move(e));
    }

    const std::filesystem::path manifest_path = out_dir / "manifest.json";
    save_manifest(manifest, manifest_path);
    return manifest_path;
}

} // namespace p3drad
