#pragma once

#include <cstdint>
#include <filesystem>

#include "p3drad/volume.hpp"

namespace p3drad {

struct PhantomConfig {
    Dims dims = {32, 64, 64};
    std::uint64_t seed = 0;
    double atrophy_factor = 0.01;  // relative ventricle expansion t1 -> t2, [0, 0.05]
    double bias_amplitude = 0.02;  // multiplicative bias field strength on t2, [0, 0.1]
    int lesion_count_min = 2;
    int lesion_count_max = 5;
    int lesion_radius_min = 2; // voxels
    int lesion_radius_max = 4;

    void validate() const;
};

// Synthetic longitudinal head phantom: concentric tissue shells (background,
// CSF-like ring, gray-like shell, white-like core, central CSF ventricle)
// perturbed by a smooth seeded random field. Timepoint 2 differs by a radial
// deformation scaled by atrophy_factor plus a smooth multiplicative bias
// field. Lesion masks come back empty; transplant_lesions adds them.
LongitudinalSample generate_phantom(const PhantomConfig& cfg);

struct TransplantOutcome {
    LongitudinalSample sample;
    int requested = 0;
    int placed_t1 = 0;
    int placed_t2 = 0;
    bool complete() const { return placed_t1 + placed_t2 >= requested; }
};

// Adds ellipsoidal lesion blobs per timepoint, constrained to the brain mask
// and away from both CSF priors. Images stay untouched (the masks only mark
// where inpainting will occur). Placement uses rejection sampling bounded at
// 100 attempts per lesion; a shortfall is reported, not thrown.
TransplantOutcome transplant_lesions(const LongitudinalSample& sample,
                                     const PhantomConfig& cfg, std::uint64_t seed);

// Writes n_subjects samples (subject seeds = cfg.seed + index) plus a
// manifest; returns the manifest path.
std::filesystem::path make_dataset(int n_subjects, const PhantomConfig& cfg,
                                   const std::filesystem::path& out_dir);

} // namespace p3drad
