#include "p3drad/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "json.hpp"
#include "p3drad/rng.hpp"

namespace p3drad {

std::string to_string(SamplerMode mode) { return mode == SamplerMode::rad ? "rad" : "cddpm"; }

double SamplerConfig::resolved_eta() const {
    if (eta >= 0.0) return eta;
    return mode == SamplerMode::rad ? 0.0 : 1.0;
}

void SamplerConfig::validate() const {
    if (steps < 1) throw ValidationError("sampler steps must be >= 1");
    if (T < 2 || T % 2 != 0) throw ValidationError("sampler T must be even and >= 2");
    const int budget = mode == SamplerMode::rad ? T / 2 : T;
    if (steps > budget)
        throw ValidationError("steps " + std::to_string(steps) + " exceeds " +
                              to_string(mode) + " budget of " + std::to_string(budget));
    if (eta > 1.0) throw ValidationError("eta must lie in [0, 1]");
    if (window < 0) throw ValidationError("window must be >= 0");
}

std::string stats_to_json(const SampleStats& s) {
    nlohmann::json j;
    j["mode"] = to_string(s.mode);
    j["steps"] = s.steps;
    j["nfe"] = s.nfe;
    j["seconds"] = s.seconds;
    j["voxels_inpainted"] = s.voxels_inpainted;
    return j.dump(2);
}

std::vector<int> sampling_grid(int t_start, int steps) {
    if (steps > t_start) throw ValidationError("more sampler steps than timesteps available");
    std::vector<int> grid(std::size_t(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        grid[std::size_t(i)] =
            int(std::lround(double(t_start) * double(steps - i) / double(steps)));
    return grid;
}

namespace {

constexpr double kX0Clamp = 3.0;  // keeps garbage-weight runs finite
constexpr double kEpsClamp = 6.0;

struct TimepointCtx {
    const Volume3D* img;
    const Volume3D* mask;
    Volume3D x;
};

// One reverse transition tau -> tau_next at every voxel of one timepoint.
// Voxels clean at both ends are left untouched so the background stays
// bit-identical to the input.
template <typename S>
void reverse_update(const NoiseSchedule& sched, Volume3D& x, const Volume3D& vhat,
                    const RegionTimestepMap& tau, const RegionTimestepMap& tau_next,
                    double eta, SeededRng& rng) {
    const std::size_t n = x.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const int t = tau.tau_at(i);
        const int tn = tau_next.tau_at(i);
        if (t == 0 && tn == 0) continue;

        const double a = sched.alpha[t], sg = sched.sigma[t];
        const double xv = double(x.data[i]), vv = double(vhat.data[i]);
        const double x0 = std::clamp(a * xv - sg * vv, -kX0Clamp, kX0Clamp);
        const double eps = std::clamp(sg * xv + a * vv, -kEpsClamp, kEpsClamp);

        const double an = sched.alpha[tn], sn = sched.sigma[tn];
        double next;
        if (eta > 0.0 && t > 0 && tn > 0) {
            const double ab_t = sched.alpha_bar[t], ab_n = sched.alpha_bar[tn];
            const double sig_noise =
                eta * std::sqrt((1.0 - ab_n) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_n);
            const double dir = std::sqrt(std::max(0.0, sn * sn - sig_noise * sig_noise));
            next = an * x0 + dir * eps + sig_noise * rng.normal();
        } else {
            next = an * x0 + sn * eps;
        }
        x.data[i] = static_cast<float>(next);
    }
}

void check_finite_state(const Volume3D& x, int step_index) {
    for (float v : x.data)
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite sampler state at step " +
                                     std::to_string(step_index));
}

template <typename S>
InpaintResult run_reverse(Unet<S>& net, const LongitudinalSample& sample,
                          const SamplerConfig& cfg, bool region_aware) {
    const auto t0 = std::chrono::steady_clock::now();
    const NoiseSchedule sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    const double eta = cfg.resolved_eta();
    SeededRng rng(mix_seed(cfg.seed, region_aware ? 0xadULL : 0xcdULL));

    const RegionIndexSet r1 = masked_region_indices(sample.lesion_t1);
    const RegionIndexSet r2 = masked_region_indices(sample.lesion_t2);

    InpaintResult out;
    out.stats.mode = region_aware ? SamplerMode::rad : SamplerMode::cddpm;
    out.stats.steps = cfg.steps;
    out.stats.voxels_inpainted = r1.count + r2.count;
    if (r1.count == 0 && r2.count == 0) {
        out.t1 = sample.img_t1;
        out.t2 = sample.img_t2;
        out.stats.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

    Volume3D x1 = sample.img_t1, x2 = sample.img_t2;
    if (region_aware) {
        // Clean background, unit noise inside each timepoint's mask.
        for (std::size_t i : r1.indices) x1.data[i] = rng.normal_f();
        for (std::size_t i : r2.indices) x2.data[i] = rng.normal_f();
    } else {
        for (float& v : x1.data) v = rng.normal_f();
        for (float& v : x2.data) v = rng.normal_f();
    }

    const std::vector<int> grid = sampling_grid(region_aware ? cfg.T / 2 : cfg.T, cfg.steps);
    for (int i = 0; i + 1 < int(grid.size()); ++i) {
        const int t = grid[std::size_t(i)], tn = grid[std::size_t(i) + 1];
        RegionTimestepMap tau1, tau2, tau1n, tau2n;
        if (region_aware) {
            tau1 = rad_region_map(sched, t, sample.lesion_t1);
            tau2 = rad_region_map(sched, t, sample.lesion_t2);
            tau1n = rad_region_map(sched, tn, sample.lesion_t1);
            tau2n = rad_region_map(sched, tn, sample.lesion_t2);
        } else {
            tau1 = tau2 = RegionTimestepMap::uniform(sample.dims(), t);
            tau1n = tau2n = RegionTimestepMap::uniform(sample.dims(), tn);
        }

        const ConditionTensor cond = assemble_condition(sample, x1, x2);
        auto [v1, v2] = net.forward_volumes(cond, tau1, tau2);
        ++out.stats.nfe;

        reverse_update<S>(sched, x1, v1, tau1, tau1n, eta, rng);
        reverse_update<S>(sched, x2, v2, tau2, tau2n, eta, rng);
        check_finite_state(x1, i);
        check_finite_state(x2, i);
    }

    if (!region_aware) {
        // Fuse generated content with the original healthy tissue.
        for (std::size_t i = 0; i < x1.data.size(); ++i) {
            if (sample.lesion_t1.data[i] == 0.0f) x1.data[i] = sample.img_t1.data[i];
            if (sample.lesion_t2.data[i] == 0.0f) x2.data[i] = sample.img_t2.data[i];
        }
    }

    out.t1 = std::move(x1);
    out.t2 = std::move(x2);
    out.stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

} // namespace

template <typename S>
InpaintResult rad_inpaint(Unet<S>& net, const LongitudinalSample& sample,
                          const SamplerConfig& cfg) {
    SamplerConfig c = cfg;
    c.mode = SamplerMode::rad;
    c.validate();
    return run_reverse(net, sample, c, /*region_aware=*/true);
}

template <typename S>
InpaintResult cddpm_inpaint(Unet<S>& net, const LongitudinalSample& sample,
                            const SamplerConfig& cfg) {
    SamplerConfig c = cfg;
    c.mode = SamplerMode::cddpm;
    c.validate();
    return run_reverse(net, sample, c, /*region_aware=*/false);
}

namespace {

LongitudinalSample crop_sample_axial(const LongitudinalSample& s, int start, int len) {
    auto crop = [&](const Volume3D& v) {
        Volume3D out({len, v.dims.h, v.dims.w}, v.kind);
        out.spacing = v.spacing;
        const std::size_t plane = std::size_t(v.dims.h) * v.dims.w;
        std::copy(v.data.begin() + std::ptrdiff_t(std::size_t(start) * plane),
                  v.data.begin() + std::ptrdiff_t(std::size_t(start + len) * plane),
                  out.data.begin());
        return out;
    };
    LongitudinalSample out;
    out.subject_id = s.subject_id;
    out.seed = s.seed;
    out.img_t1 = crop(s.img_t1);
    out.img_t2 = crop(s.img_t2);
    out.lesion_t1 = crop(s.lesion_t1);
    out.lesion_t2 = crop(s.lesion_t2);
    out.csf_t1 = crop(s.csf_t1);
    out.csf_t2 = crop(s.csf_t2);
    out.brain_mask = crop(s.brain_mask);
    return out;
}

} // namespace

template <typename S>
InpaintResult inpaint_volume(Unet<S>& net, const LongitudinalSample& sample,
                             const SamplerConfig& cfg) {
    cfg.validate();
    const int D = sample.dims().d;
    auto single = [&](const LongitudinalSample& s, const SamplerConfig& c) {
        return c.mode == SamplerMode::rad ? rad_inpaint(net, s, c) : cddpm_inpaint(net, s, c);
    };
    if (cfg.window == 0 || D <= cfg.window) return single(sample, cfg);

    const int window = cfg.window;
    const int overlap = std::max(1, window / 4);

    // Axial slices that contain mask voxels at either timepoint.
    std::vector<int> masked_d;
    {
        const std::size_t plane = std::size_t(sample.dims().h) * sample.dims().w;
        for (int d = 0; d < D; ++d) {
            const std::size_t lo = std::size_t(d) * plane;
            bool any = false;
            for (std::size_t i = lo; i < lo + plane && !any; ++i)
                any = sample.lesion_t1.data[i] != 0.0f || sample.lesion_t2.data[i] != 0.0f;
            if (any) masked_d.push_back(d);
        }
    }

    InpaintResult out;
    out.stats.mode = cfg.mode;
    out.stats.steps = cfg.steps;
    out.t1 = sample.img_t1;
    out.t2 = sample.img_t2;
    out.stats.voxels_inpainted = masked_region_indices(sample.lesion_t1).count +
                                 masked_region_indices(sample.lesion_t2).count;
    const auto t0 = std::chrono::steady_clock::now();
    if (masked_d.empty()) {
        out.stats.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

    // Greedy slab cover of the masked slices; adjacent slabs keep `overlap`
    // slices in common for feathering.
    std::vector<int> starts;
    int covered_until = -1;
    for (int s : masked_d) {
        if (s <= covered_until) continue;
        int start = std::min(s, D - window);
        if (!starts.empty() && start < starts.back() + window)
            start = std::min(std::max(start, starts.back() + window - overlap), D - window);
        starts.push_back(start);
        covered_until = start + window - 1;
    }

    // Feathered accumulation (double) at mask voxels only; voxels touched by
    // exactly one slab are copied bit-exactly from that slab's result.
    const std::size_t nvox = sample.dims().voxels();
    std::vector<double> acc1(nvox, 0.0), accw1(nvox, 0.0), acc2(nvox, 0.0), accw2(nvox, 0.0);
    std::vector<std::uint8_t> nhits1(nvox, 0), nhits2(nvox, 0);
    std::vector<float> last1(nvox, 0.0f), last2(nvox, 0.0f);

    for (std::size_t k = 0; k < starts.size(); ++k) {
        const int start = starts[k];
        const LongitudinalSample slab = crop_sample_axial(sample, start, window);
        SamplerConfig slab_cfg = cfg;
        slab_cfg.seed = slab_seed(cfg.seed, start);
        const InpaintResult r = single(slab, slab_cfg);
        out.stats.nfe += r.stats.nfe;

        const std::size_t plane = std::size_t(sample.dims().h) * sample.dims().w;
        for (int dl = 0; dl < window; ++dl) {
            const double wgt =
                double(std::min({dl + 1, window - dl, overlap + 1})) / double(overlap + 1);
            const std::size_t src = std::size_t(dl) * plane;
            const std::size_t dst = std::size_t(start + dl) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                if (slab.lesion_t1.data[src + j] != 0.0f) {
                    acc1[dst + j] += wgt * double(r.t1.data[src + j]);
                    accw1[dst + j] += wgt;
                    last1[dst + j] = r.t1.data[src + j];
                    ++nhits1[dst + j];
                }
                if (slab.lesion_t2.data[src + j] != 0.0f) {
                    acc2[dst + j] += wgt * double(r.t2.data[src + j]);
                    accw2[dst + j] += wgt;
                    last2[dst + j] = r.t2.data[src + j];
                    ++nhits2[dst + j];
                }
            }
        }
    }

    for (std::size_t i = 0; i < nvox; ++i) {
        if (nhits1[i] == 1) out.t1.data[i] = last1[i];
        else if (nhits1[i] > 1) out.t1.data[i] = float(acc1[i] / accw1[i]);
        if (nhits2[i] == 1) out.t2.data[i] = last2[i];
        else if (nhits2[i] > 1) out.t2.data[i] = float(acc2[i] / accw2[i]);
    }
    out.stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

template InpaintResult rad_inpaint<float>(Unet<float>&, const LongitudinalSample&,
                                          const SamplerConfig&);
template InpaintResult rad_inpaint<double>(Unet<double>&, const LongitudinalSample&,
                                           const SamplerConfig&);
template InpaintResult cddpm_inpaint<float>(Unet<float>&, const LongitudinalSample&,
                                            const SamplerConfig&);
template InpaintResult cddpm_inpaint<double>(Unet<double>&, const LongitudinalSample&,
                                             const SamplerConfig&);
template InpaintResult inpaint_volume<float>(Unet<float>&, const LongitudinalSample&,
                                             const SamplerConfig&);
template InpaintResult inpaint_volume<double>(Unet<double>&, const LongitudinalSample&,
                                              const SamplerConfig&);

} // namespace p3drad
