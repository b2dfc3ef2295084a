#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p3drad/network.hpp"
#include "p3drad/schedule.hpp"
#include "p3drad/volume.hpp"

namespace p3drad {

enum class SamplerMode { rad, cddpm };

std::string to_string(SamplerMode mode);

struct SamplerConfig {
    SamplerMode mode = SamplerMode::rad;
    int steps = 100;   // network evaluations
    double eta = -1.0; // stochasticity in [0, 1]; negative = mode default (rad 0, cddpm 1)
    std::uint64_t seed = 0;
    bool record_nfe = true;
    int window = 32; // slab length for inpaint_volume; 0 = always single pass
    int T = 1000;    // must match the training schedule
    double beta_start = 1e-4;
    double beta_end = 0.02;

    double resolved_eta() const;
    void validate() const;
};

struct SampleStats {
    SamplerMode mode = SamplerMode::rad;
    int steps = 0;
    int nfe = 0;
    double seconds = 0.0;
    std::size_t voxels_inpainted = 0;
};

struct InpaintResult {
    Volume3D t1, t2;
    SampleStats stats;
};

std::string stats_to_json(const SampleStats& s);

// Region-aware reverse process: starts at global_t = T/2 with a clean
// background and noise only inside each timepoint's mask, walks an
// evenly-spaced strictly decreasing grid down to 0, and never touches voxels
// whose tau is 0 at both ends of a transition. Background voxels are
// bit-identical to the input for any weights and any seed.
template <typename S>
InpaintResult rad_inpaint(Unet<S>& net, const LongitudinalSample& sample,
                          const SamplerConfig& cfg);

// Global-denoising baseline: starts from pure noise at t = T with uniform tau
// maps; after the final step the generated content is fused with the original
// image outside the mask.
template <typename S>
InpaintResult cddpm_inpaint(Unet<S>& net, const LongitudinalSample& sample,
                            const SamplerConfig& cfg);

// Single pass when D fits the window; otherwise overlapping axial slabs
// covering all mask voxels, blended by linear feathering along D restricted
// to mask voxels. Background stays a bit-exact copy.
template <typename S>
InpaintResult inpaint_volume(Unet<S>& net, const LongitudinalSample& sample,
                             const SamplerConfig& cfg);

// The per-slab seed rule used by inpaint_volume, exposed so slab runs can be
// reproduced independently.
inline std::uint64_t slab_seed(std::uint64_t base, int slab_start) {
    return mix_seed(base, 0x51abULL + std::uint64_t(slab_start));
}

// The subsampled global_t grid: `steps + 1` values from t_start down to 0,
// evenly spaced, endpoints included, strictly decreasing.
std::vector<int> sampling_grid(int t_start, int steps);

extern template InpaintResult rad_inpaint<float>(Unet<float>&, const LongitudinalSample&,
                                                 const SamplerConfig&);
extern template InpaintResult rad_inpaint<double>(Unet<double>&, const LongitudinalSample&,
                                                  const SamplerConfig&);
extern template InpaintResult cddpm_inpaint<float>(Unet<float>&, const LongitudinalSample&,
                                                   const SamplerConfig&);
extern template InpaintResult cddpm_inpaint<double>(Unet<double>&, const LongitudinalSample&,
                                                    const SamplerConfig&);
extern template InpaintResult inpaint_volume<float>(Unet<float>&, const LongitudinalSample&,
                                                    const SamplerConfig&);
extern template InpaintResult inpaint_volume<double>(Unet<double>&, const LongitudinalSample&,
                                                     const SamplerConfig&);

} // namespace p3drad
