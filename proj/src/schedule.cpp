#include "p3drad/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace p3drad {

double NoiseSchedule::snr(int t) const {
    check_t(t);
    return alpha_bar[t] / (1.0 - alpha_bar[t]);
}

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T)
        throw ValidationError("timestep " + std::to_string(t) + " out of [1, " +
                              std::to_string(T) + "]");
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ValidationError("schedule needs T >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ValidationError("invalid beta range: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.assign(T + 1, 0.0);
    s.alpha_bar.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[t] = beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
    }
    s.alpha.resize(T + 1);
    s.sigma.resize(T + 1);
    for (int t = 0; t <= T; ++t) {
        s.alpha[t] = std::sqrt(s.alpha_bar[t]);
        s.sigma[t] = std::sqrt(1.0 - s.alpha_bar[t]);
    }
    return s;
}

double min_snr_weight_from_snr(double snr, double gamma, SnrWeightForm form) {
    if (!(gamma > 0.0)) throw ValidationError("min-SNR gamma must be positive");
    const double clamped = std::min(snr, gamma);
    return form == SnrWeightForm::velocity ? clamped / (snr + 1.0) : clamped / snr;
}

double min_snr_weight(const NoiseSchedule& s, int t, double gamma, SnrWeightForm form) {
    return min_snr_weight_from_snr(s.snr(t), gamma, form);
}

RegionTimestepMap RegionTimestepMap::uniform(Dims dims, int t) {
    RegionTimestepMap m;
    m.dims = dims;
    m.global_t = t;
    m.tau_fg = t;
    m.tau_bg = t;
    return m;
}

RegionTimestepMap rad_region_map(const NoiseSchedule& s, int global_t, const Volume3D& mask) {
    if (global_t < 0 || global_t > s.T)
        throw ValidationError("global_t " + std::to_string(global_t) + " out of [0, T]");
    if (!mask.is_binary()) throw ValidationError("rad_region_map: mask is not binary");

    RegionTimestepMap m;
    m.dims = mask.dims;
    m.global_t = global_t;
    m.tau_fg = std::min(2 * global_t, s.T);
    m.tau_bg = std::max(0, 2 * global_t - s.T);

    auto bits = std::make_shared<std::vector<std::uint8_t>>(mask.data.size());
    for (std::size_t i = 0; i < mask.data.size(); ++i)
        (*bits)[i] = mask.data[i] != 0.0f ? 1 : 0;
    m.mask = std::move(bits);
    return m;
}

namespace {

void check_shapes(const NoiseSchedule& s, const Volume3D& x0, const Volume3D& eps,
                  const RegionTimestepMap& tau) {
    if (!(x0.dims == eps.dims) || !(x0.dims == tau.dims))
        throw ValidationError("q_sample/v_target: shape mismatch");
    for (int t : {tau.tau_fg, tau.tau_bg})
        if (t < 0 || t > s.T)
            throw ValidationError("tau value " + std::to_string(t) + " out of [0, T]");
}

} // namespace

Volume3D q_sample(const NoiseSchedule& s, const Volume3D& x0, const Volume3D& eps,
                  const RegionTimestepMap& tau) {
    check_shapes(s, x0, eps, tau);
    Volume3D out(x0.dims);
    out.spacing = x0.spacing;
    const std::size_t n = x0.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const int t = tau.tau_at(i);
        if (t == 0) {
            out.data[i] = x0.data[i]; // clean voxels pass through untouched
        } else {
            out.data[i] = static_cast<float>(
                q_sample_value(s.alpha[t], s.sigma[t], x0.data[i], eps.data[i]));
        }
    }
    return out;
}

VTarget v_target(const NoiseSchedule& s, const Volume3D& x0, const Volume3D& eps,
                 const RegionTimestepMap& tau) {
    check_shapes(s, x0, eps, tau);
    VTarget out;
    out.v = Volume3D(x0.dims);
    out.active.assign(x0.data.size(), 0);
    const std::size_t n = x0.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const int t = tau.tau_at(i);
        if (t == 0) continue; // v degenerates to eps there; excluded from loss
        out.v.data[i] = static_cast<float>(
            v_target_value(s.alpha[t], s.sigma[t], x0.data[i], eps.data[i]));
        out.active[i] = 1;
        ++out.active_count;
    }
    return out;
}

} // namespace p3drad
