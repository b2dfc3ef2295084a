#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "p3drad/network.hpp"
#include "p3drad/rng.hpp"
#include "p3drad/schedule.hpp"
#include "p3drad/volume.hpp"

namespace p3drad {

enum class PhaseMode { both, phase1_only };

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 1;
    int batch_size = 2;
    int window = 32;
    double gamma = 5.0;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    PhaseMode phase_mode = PhaseMode::both;
    SnrWeightForm weight_form = SnrWeightForm::velocity;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double ema_decay = 0.0; // 0 disables the shadow average
    int checkpoint_every = 500;
    int max_steps = 0; // 0 = run epochs to completion
    bool reference_mode = true;

    void validate() const;
};

// Adam with double-precision moment state, independent of the model scalar.
template <typename S>
class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(std::vector<Param<S>*>& params);

private:
    double lr_, b1_, b2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Contiguous axial slab of `window` slices whose union of lesion masks is
// non-empty (up to D retries, any slab as fallback). All seven volumes are
// cropped consistently.
LongitudinalSample sample_training_window(const LongitudinalSample& sample, int window,
                                          SeededRng& rng);

// One optimizer update over a batch of windowed samples. Returns the batch
// loss, or nothing when every sample had zero active voxels (step skipped).
struct StepResult {
    std::optional<double> loss;
    std::size_t active_voxels = 0;
};

template <typename S>
StepResult training_step(Unet<S>& net, Adam<S>& opt, std::span<const LongitudinalSample> batch,
                         const NoiseSchedule& schedule, const TrainConfig& cfg, SeededRng& rng);

// Full training loop: seeded shuffling, windowing, periodic checkpoints, and
// a CSV log (step, epoch, loss, active_voxels, seconds). Deterministic given
// (manifest, configs, seed); per-step RNG streams are derived from the step
// index so resuming from a checkpoint replays the identical schedule.
template <typename S>
std::filesystem::path train(const DatasetManifest& manifest, const NetworkConfig& net_cfg,
                            const TrainConfig& cfg, const std::filesystem::path& checkpoint_dir,
                            const std::filesystem::path& resume_from = {});

// EMA shadow checkpoint path written alongside the final checkpoint when
// ema_decay > 0.
std::filesystem::path ema_checkpoint_path(const std::filesystem::path& checkpoint_dir);

extern template class Adam<float>;
extern template class Adam<double>;
extern template StepResult training_step<float>(Unet<float>&, Adam<float>&,
                                                std::span<const LongitudinalSample>,
                                                const NoiseSchedule&, const TrainConfig&,
                                                SeededRng&);
extern template StepResult training_step<double>(Unet<double>&, Adam<double>&,
                                                 std::span<const LongitudinalSample>,
                                                 const NoiseSchedule&, const TrainConfig&,
                                                 SeededRng&);
extern template std::filesystem::path train<float>(const DatasetManifest&, const NetworkConfig&,
                                                   const TrainConfig&,
                                                   const std::filesystem::path&,
                                                   const std::filesystem::path&);
extern template std::filesystem::path train<double>(const DatasetManifest&,
                                                    const NetworkConfig&, const TrainConfig&,
                                                    const std::filesystem::path&,
                                                    const std::filesystem::path&);

} // namespace p3drad
