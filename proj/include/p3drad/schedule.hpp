#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "p3drad/volume.hpp"

namespace p3drad {

// Per-step diffusion constants for t in [0, T]. alpha_bar[0] == 1 exactly so
// that timestep 0 is a true identity (alpha == 1, sigma == 0).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;      // beta[t], t in [1, T]; beta[0] unused (0)
    std::vector<double> alpha_bar; // cumulative product, index [0, T]
    std::vector<double> alpha;     // sqrt(alpha_bar)
    std::vector<double> sigma;     // sqrt(1 - alpha_bar)

    double snr(int t) const; // alpha_bar / (1 - alpha_bar), t in [1, T]
    void check_t(int t) const;
};

NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

enum class SnrWeightForm {
    velocity, // min(SNR, gamma) / (SNR + 1)
    epsilon,  // min(SNR, gamma) / SNR
};

double min_snr_weight_from_snr(double snr, double gamma,
                               SnrWeightForm form = SnrWeightForm::velocity);
double min_snr_weight(const NoiseSchedule& s, int t, double gamma,
                      SnrWeightForm form = SnrWeightForm::velocity);

// Per-voxel effective timestep tau(s) derived from a global step and a region
// mask. Takes at most two distinct values: tau_fg on mask voxels, tau_bg
// elsewhere. A null mask means a uniform map at tau_bg.
struct RegionTimestepMap {
    Dims dims;
    int global_t = 0;
    int tau_fg = 0;
    int tau_bg = 0;
    std::shared_ptr<const std::vector<std::uint8_t>> mask; // 1 = foreground

    int tau_at(std::size_t i) const {
        return (mask && (*mask)[i]) ? tau_fg : tau_bg;
    }
    bool is_uniform() const { return !mask || tau_fg == tau_bg; }

    static RegionTimestepMap uniform(Dims dims, int t);
};

// The clamped-linear two-phase map: mask voxels are noised over global_t in
// [1, T/2] (tau = min(2 t, T)), background over [T/2+1, T]
// (tau = max(0, 2 t - T)). At global_t = T/2 the mask is fully noised while
// the background is still clean, which is where inference starts.
RegionTimestepMap rad_region_map(const NoiseSchedule& s, int global_t, const Volume3D& mask);

// Scalar forms of the forward process and v-target, shared by the volume ops
// and by double-precision tests.
inline double q_sample_value(double alpha, double sigma, double x0, double eps) {
    return alpha * x0 + sigma * eps;
}
inline double v_target_value(double alpha, double sigma, double x0, double eps) {
    return alpha * eps - sigma * x0;
}
inline double recover_x0_value(double alpha, double sigma, double x_t, double v) {
    return alpha * x_t - sigma * v;
}
inline double recover_eps_value(double alpha, double sigma, double x_t, double v) {
    return sigma * x_t + alpha * v;
}

// Spatially-variant forward process: x_t(s) = alpha_tau(s) x0(s) +
// sigma_tau(s) eps(s). Voxels with tau(s) == 0 are copied from x0 bit-exactly.
Volume3D q_sample(const NoiseSchedule& s, const Volume3D& x0, const Volume3D& eps,
                  const RegionTimestepMap& tau);

// v(s) = alpha_tau(s) eps(s) - sigma_tau(s) x0(s). Voxels with tau(s) == 0
// carry no training signal and are flagged inactive.
struct VTarget {
    Volume3D v;
    std::vector<std::uint8_t> active; // 1 where tau > 0
    std::size_t active_count = 0;
};

VTarget v_target(const NoiseSchedule& s, const Volume3D& x0, const Volume3D& eps,
                 const RegionTimestepMap& tau);

} // namespace p3drad
