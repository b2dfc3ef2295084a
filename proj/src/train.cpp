#include "p3drad/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "p3drad/log.hpp"

namespace p3drad {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (window < 1) throw ValidationError("window must be >= 1");
    if (!(gamma > 0.0)) throw ValidationError("gamma must be positive");
    if (T < 2 || T % 2 != 0) throw ValidationError("T must be even and >= 2");
    if (ema_decay < 0.0 || ema_decay >= 1.0)
        throw ValidationError("ema_decay must lie in [0, 1)");
    if (max_steps < 0) throw ValidationError("max_steps must be >= 0");
}

template <typename S>
void Adam<S>::step(std::vector<Param<S>*>& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->size(), 0.0);
            v_[i].assign(params[i]->size(), 0.0);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param<S>& p = *params[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = double(p.grad[j]);
            m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
            v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p.value[j] = S(double(p.value[j]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

namespace {

Volume3D crop_axial(const Volume3D& v, int start, int window) {
    Volume3D out({window, v.dims.h, v.dims.w}, v.kind);
    out.spacing = v.spacing;
    const std::size_t plane = std::size_t(v.dims.h) * v.dims.w;
    std::copy(v.data.begin() + std::ptrdiff_t(std::size_t(start) * plane),
              v.data.begin() + std::ptrdiff_t(std::size_t(start + window) * plane),
              out.data.begin());
    return out;
}

bool slab_has_lesion(const LongitudinalSample& s, int start, int window) {
    const std::size_t plane = std::size_t(s.dims().h) * s.dims().w;
    const std::size_t lo = std::size_t(start) * plane, hi = std::size_t(start + window) * plane;
    for (std::size_t i = lo; i < hi; ++i)
        if (s.lesion_t1.data[i] != 0.0f || s.lesion_t2.data[i] != 0.0f) return true;
    return false;
}

} // namespace

LongitudinalSample sample_training_window(const LongitudinalSample& sample, int window,
                                          SeededRng& rng) {
    const int D = sample.dims().d;
    if (window > D) throw ValidationError("training window exceeds volume depth");
    if (window == D) return sample;

    int start = 0;
    for (int attempt = 0; attempt < D; ++attempt) {
        start = rng.uniform_int(0, D - window);
        if (slab_has_lesion(sample, start, window)) break;
    }

    LongitudinalSample out;
    out.subject_id = sample.subject_id;
    out.seed = sample.seed;
    out.img_t1 = crop_axial(sample.img_t1, start, window);
    out.img_t2 = crop_axial(sample.img_t2, start, window);
    out.lesion_t1 = crop_axial(sample.lesion_t1, start, window);
    out.lesion_t2 = crop_axial(sample.lesion_t2, start, window);
    out.csf_t1 = crop_axial(sample.csf_t1, start, window);
    out.csf_t2 = crop_axial(sample.csf_t2, start, window);
    out.brain_mask = crop_axial(sample.brain_mask, start, window);
    return out;
}

namespace {

Volume3D draw_noise(Dims dims, SeededRng& rng) {
    Volume3D eps(dims);
    for (float& v : eps.data) v = rng.normal_f();
    return eps;
}

template <typename S>
Tensor4<S> tensor_from_condition(const ConditionTensor& ct) {
    Tensor4<S> t(ConditionTensor::kChannels, ct.dims.d, ct.dims.h, ct.dims.w);
    for (int c = 0; c < ConditionTensor::kChannels; ++c) {
        const auto& src = ct.channels[std::size_t(c)].data;
        S* dst = t.chan(c);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = S(src[i]);
    }
    return t;
}

} // namespace

template <typename S>
StepResult training_step(Unet<S>& net, Adam<S>& opt, std::span<const LongitudinalSample> batch,
                         const NoiseSchedule& schedule, const TrainConfig& cfg, SeededRng& rng) {
    net.zero_grad();
    StepResult result;
    double loss_sum = 0.0;
    int used = 0;

    for (const LongitudinalSample& sample : batch) {
        const int t_max = cfg.phase_mode == PhaseMode::phase1_only ? cfg.T / 2 : cfg.T;
        const int global_t = rng.uniform_int(1, t_max);
        const RegionTimestepMap tau1 = rad_region_map(schedule, global_t, sample.lesion_t1);
        const RegionTimestepMap tau2 = rad_region_map(schedule, global_t, sample.lesion_t2);

        const Volume3D eps1 = draw_noise(sample.dims(), rng);
        const Volume3D eps2 = draw_noise(sample.dims(), rng);
        const Volume3D z1 = q_sample(schedule, sample.img_t1, eps1, tau1);
        const Volume3D z2 = q_sample(schedule, sample.img_t2, eps2, tau2);
        const VTarget vt1 = v_target(schedule, sample.img_t1, eps1, tau1);
        const VTarget vt2 = v_target(schedule, sample.img_t2, eps2, tau2);

        const std::size_t active = vt1.active_count + vt2.active_count;
        if (active == 0) continue;
        result.active_voxels += active;

        const ConditionTensor cond = assemble_condition(sample, z1, z2);
        const Tensor4<S> x = tensor_from_condition<S>(cond);
        const Tensor4<S>& out = net.forward(x, tau1, tau2);

        // Per-voxel Min-SNR weights; tau is two-valued per map, so only two
        // weights exist per timepoint.
        auto weight_for = [&](const RegionTimestepMap& tau, bool fg) {
            const int t = fg ? tau.tau_fg : tau.tau_bg;
            return t > 0 ? min_snr_weight(schedule, t, cfg.gamma, cfg.weight_form) : 0.0;
        };
        const double w_fg1 = weight_for(tau1, true), w_bg1 = weight_for(tau1, false);
        const double w_fg2 = weight_for(tau2, true), w_bg2 = weight_for(tau2, false);

        Tensor4<S> grad(out.c, out.d, out.h, out.w);
        const std::size_t n = out.channel_size();
        double loss = 0.0;
        const double norm = 1.0 / double(active);
        for (int tp = 0; tp < 2; ++tp) {
            const VTarget& vt = tp == 0 ? vt1 : vt2;
            const RegionTimestepMap& tau = tp == 0 ? tau1 : tau2;
            const double w_fg = tp == 0 ? w_fg1 : w_fg2;
            const double w_bg = tp == 0 ? w_bg1 : w_bg2;
            const S* pred = out.chan(tp);
            S* g = grad.chan(tp);
            for (std::size_t i = 0; i < n; ++i) {
                if (!vt.active[i]) continue;
                const bool fg = tau.mask && (*tau.mask)[i];
                const double w = fg ? w_fg : w_bg;
                const double diff = double(pred[i]) - double(vt.v.data[i]);
                loss += w * diff * diff * norm;
                g[i] = S(2.0 * w * diff * norm);
            }
        }
        if (!std::isfinite(loss))
            throw std::runtime_error("non-finite training loss at step " +
                                     std::to_string(net.step) + " (subject " +
                                     sample.subject_id + ")");
        net.backward(grad);
        loss_sum += loss;
        ++used;
    }

    if (used == 0) return result; // nothing to learn from; no update

    if (used > 1) {
        const S scale = S(1.0 / double(used));
        for (Param<S>* p : net.params())
            for (S& g : p->grad) g *= scale;
    }
    opt.step(net.params());
    ++net.step;
    result.loss = loss_sum / double(used);
    return result;
}

std::filesystem::path ema_checkpoint_path(const std::filesystem::path& checkpoint_dir) {
    return checkpoint_dir / "final_ema.p3dckpt";
}

template <typename S>
std::filesystem::path train(const DatasetManifest& manifest, const NetworkConfig& net_cfg,
                            const TrainConfig& cfg, const std::filesystem::path& checkpoint_dir,
                            const std::filesystem::path& resume_from) {
    cfg.validate();
    net_cfg.validate();
    std::filesystem::create_directories(checkpoint_dir);
    if (manifest.subjects.empty()) throw ValidationError("training manifest has no subjects");

    std::vector<LongitudinalSample> samples;
    samples.reserve(manifest.subjects.size());
    for (const auto& e : manifest.subjects) samples.push_back(load_sample(manifest, e));
    for (const auto& s : samples)
        if (cfg.window > s.dims().d)
            throw ValidationError("window " + std::to_string(cfg.window) +
                                  " exceeds volume depth " + std::to_string(s.dims().d));

    const NoiseSchedule schedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

    std::unique_ptr<Unet<S>> net;
    if (!resume_from.empty()) {
        net = std::make_unique<Unet<S>>(load_checkpoint(resume_from));
        log_info("resumed from %s at step %llu", resume_from.string().c_str(),
                 static_cast<unsigned long long>(net->step));
    } else {
        net = std::make_unique<Unet<S>>(net_cfg, mix_seed(cfg.seed, 1));
    }

    Adam<S> opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    // EMA shadow in double precision; only the final snapshot is persisted.
    ModelWeights ema;
    const bool use_ema = cfg.ema_decay > 0.0;
    if (use_ema) ema = net->snapshot();

    const int n = int(samples.size());
    const std::uint64_t steps_per_epoch =
        std::uint64_t((n + cfg.batch_size - 1) / cfg.batch_size);
    std::uint64_t total_steps = cfg.max_steps > 0
                                    ? std::uint64_t(cfg.max_steps)
                                    : std::uint64_t(cfg.epochs) * steps_per_epoch;

    const std::filesystem::path log_path = checkpoint_dir / "train_log.csv";
    std::ofstream log(log_path, net->step > 0 ? std::ios::app : std::ios::trunc);
    if (net->step == 0) log << "step,epoch,loss,active_voxels,seconds\n";

    std::vector<int> order(std::size_t(n));
    std::uint64_t order_epoch = std::uint64_t(-1);
    std::vector<LongitudinalSample> batch;

    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t step = net->step; step < total_steps; ++step) {
        const std::uint64_t epoch = step / steps_per_epoch;
        const std::uint64_t pos = step % steps_per_epoch;

        if (epoch != order_epoch) {
            for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
            SeededRng shuffle_rng(mix_seed(cfg.seed, 0x45u + epoch));
            for (int i = n - 1; i > 0; --i)
                std::swap(order[std::size_t(i)],
                          order[std::size_t(shuffle_rng.uniform_int(0, i))]);
            order_epoch = epoch;
        }

        SeededRng step_rng(mix_seed(cfg.seed, 0x57e9000000ULL + step));
        batch.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t idx = pos * std::uint64_t(cfg.batch_size) + std::uint64_t(b);
            if (idx >= std::uint64_t(n)) break;
            batch.push_back(sample_training_window(
                samples[std::size_t(order[std::size_t(idx)])], cfg.window, step_rng));
        }

        const StepResult res = training_step(*net, opt, batch, schedule, cfg, step_rng);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << step << ',' << epoch << ','
            << (res.loss ? std::to_string(*res.loss) : std::string("nan")) << ','
            << res.active_voxels << ',' << seconds << '\n';

        if (use_ema && res.loss) {
            const ModelWeights snap = net->snapshot();
            for (std::size_t i = 0; i < ema.params.size(); ++i)
                for (std::size_t j = 0; j < ema.params[i].data.size(); ++j)
                    ema.params[i].data[j] = cfg.ema_decay * ema.params[i].data[j] +
                                            (1.0 - cfg.ema_decay) * snap.params[i].data[j];
        }

        if (cfg.checkpoint_every > 0 && net->step > 0 &&
            net->step % std::uint64_t(cfg.checkpoint_every) == 0)
            save_checkpoint(net->snapshot(),
                            checkpoint_dir /
                                ("ckpt_step" + std::to_string(net->step) + ".p3dckpt"));
        if ((step + 1) % 100 == 0 && res.loss)
            log_info("step %llu/%llu loss %.6f", static_cast<unsigned long long>(step + 1),
                     static_cast<unsigned long long>(total_steps), *res.loss);
    }
    log.flush();

    const std::filesystem::path final_path = checkpoint_dir / "final.p3dckpt";
    save_checkpoint(net->snapshot(), final_path);
    if (use_ema) {
        ema.step = net->step;
        save_checkpoint(ema, ema_checkpoint_path(checkpoint_dir));
    }
    return final_path;
}

template class Adam<float>;
template class Adam<double>;
template StepResult training_step<float>(Unet<float>&, Adam<float>&,
                                         std::span<const LongitudinalSample>,
                                         const NoiseSchedule&, const TrainConfig&, SeededRng&);
template StepResult training_step<double>(Unet<double>&, Adam<double>&,
                                          std::span<const LongitudinalSample>,
                                          const NoiseSchedule&, const TrainConfig&, SeededRng&);
template std::filesystem::path train<float>(const DatasetManifest&, const NetworkConfig&,
                                            const TrainConfig&, const std::filesystem::path&,
                                            const std::filesystem::path&);
template std::filesystem::path train<double>(const DatasetManifest&, const NetworkConfig&,
                                             const TrainConfig&, const std::filesystem::path&,
                                             const std::filesystem::path&);

} // namespace p3drad
