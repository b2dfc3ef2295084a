#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "p3drad/layers.hpp"
#include "p3drad/schedule.hpp"
#include "p3drad/tensor.hpp"

namespace p3drad {

enum class Precision { single_prec, double_prec };

struct NetworkConfig {
    int in_channels = 8;  // fixed by the conditioning design
    int out_channels = 2; // one predicted v-field per timepoint
    int base_channels = 32;
    int levels = 3;            // (H, W) halve per level; D is never downsampled
    int blocks_per_level = 2;
    int conv1d_kernel = 3;
    int embed_dim = 128;
    Precision precision = Precision::single_prec;

    void validate() const;
    void validate_input(Dims dims) const;
    bool operator==(const NetworkConfig&) const = default;
};

// Joint region decomposition of a (tau1, tau2) map pair. Each map is at most
// two-valued, so voxels fall into at most four joint regions,
// id = fg1 * 2 + fg2.
struct RegionPalette {
    static constexpr int kRegions = 4;
    Dims dims;
    std::array<std::pair<int, int>, kRegions> taus; // (tau1, tau2) per region id
    std::vector<std::uint8_t> ids;                  // per voxel

    static RegionPalette build(const RegionTimestepMap& tau1, const RegionTimestepMap& tau2);
};

// Sinusoidal timestep encoding followed by a learned 2-layer projection.
// Shared by both timepoints' maps.
template <typename S>
class TimeEmbed {
public:
    TimeEmbed() = default;
    TimeEmbed(std::string name, int dim, SeededRng& rng);

    struct Cache {
        std::vector<S> sinusoid, hidden_pre, hidden;
        bool valid = false;
    };

    std::vector<S> forward(double tau, Cache& cache);
    void backward(const Cache& cache, const std::vector<S>& grad_out);

    // Embedding field over (embed_dim, D, H, W). tau takes at most two
    // distinct values, so two vectors are computed and broadcast.
    Tensor4<S> field(const RegionTimestepMap& tau);

    static std::vector<S> sinusoid(double tau, int dim);

    Linear<S> l1, l2;
    int dim = 0;
};

// Per-voxel, per-channel affine modulation gamma(t(s)) * h(s) + beta(t(s)),
// with gamma parameterized as 1 + dgamma and the projection zero-initialized
// so a fresh block is an identity modulation.
template <typename S>
class FilmLayer {
public:
    FilmLayer() = default;
    FilmLayer(std::string name, int emb_dim, int channels, SeededRng& rng);

    // Palette fast path: region_emb holds one combined embedding per joint
    // region; ids give each voxel's region at this feature map's resolution.
    Tensor4<S> forward(const Tensor4<S>& h,
                       const std::array<std::vector<S>, RegionPalette::kRegions>& region_emb,
                       const std::vector<std::uint8_t>& ids);
    // Returns grad wrt h and accumulates projection-parameter grads plus
    // per-region embedding grads into emb_grad.
    Tensor4<S> backward(const Tensor4<S>& grad_out,
                        std::array<std::vector<S>, RegionPalette::kRegions>& emb_grad);

    // Reference path used by tests: a full embedding field, projected per
    // voxel. No caching, forward only.
    Tensor4<S> apply_field(const Tensor4<S>& h, const Tensor4<S>& emb_field) const;

    Linear<S> proj; // emb_dim -> 2 * channels, zero-initialized
    int channels = 0;

private:
    Tensor4<S> h_;
    std::array<std::vector<S>, RegionPalette::kRegions> region_emb_;
    std::array<std::vector<S>, RegionPalette::kRegions> film_vec_; // (dgamma, beta) per region
    const std::vector<std::uint8_t>* ids_ = nullptr;
};

// (2+1)D factorized convolution: k x k in-plane convolution per axial slice,
// then a kernel-k1d convolution along D at every (channel, H, W) location.
template <typename S>
struct P3dConv {
    P3dConv() = default;
    P3dConv(std::string name, int in_ch, int out_ch, int k2d, int k1d, SeededRng& rng);

    Tensor4<S> forward(const Tensor4<S>& x);
    Tensor4<S> backward(const Tensor4<S>& grad_out);

    Conv2d<S> conv2d;
    Conv1d<S> conv1d;
};

template <typename S>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(std::string name, int in_ch, int out_ch, int emb_dim, int k1d, SeededRng& rng);

    Tensor4<S> forward(const Tensor4<S>& x,
                       const std::array<std::vector<S>, RegionPalette::kRegions>& region_emb,
                       const std::vector<std::uint8_t>& ids);
    Tensor4<S> backward(const Tensor4<S>& grad_out,
                        std::array<std::vector<S>, RegionPalette::kRegions>& emb_grad);

    std::string name;
    GroupNorm<S> gn;
    SiLU<S> act1, act2;
    P3dConv<S> conv1, conv2;
    FilmLayer<S> film;
    Conv2d<S> skip; // 1x1, only when in_ch != out_ch
    bool has_skip = false;
};

// Snapshot of all learnable state, independent of the compute scalar type.
// float <-> double conversions are exact for float-trained nets, so round
// trips are bit-identical.
struct ModelWeights {
    NetworkConfig config;
    std::uint64_t step = 0;
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
    };
    std::vector<Entry> params;
};

// Checkpoint container: magic "P3DCKPT1", 4-byte big-endian header length,
// JSON header (config, step, dtype, parameter manifest), raw parameter
// payloads in manifest order.
void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);

// The pseudo-3D conditional U-Net. One forward/backward pass in flight at a
// time; weights are safe to share across threads only for inference.
template <typename S>
class Unet {
public:
    Unet(const NetworkConfig& cfg, std::uint64_t init_seed);
    explicit Unet(const ModelWeights& weights);

    // x: (in_channels, D, H, W). Returns (out_channels, D, H, W).
    const Tensor4<S>& forward(const Tensor4<S>& x, const RegionTimestepMap& tau1,
                              const RegionTimestepMap& tau2);
    void backward(const Tensor4<S>& grad_out);
    void zero_grad();

    // Volume facade: assembles the tensor, runs forward, splits the two
    // predicted v-fields.
    std::pair<Volume3D, Volume3D> forward_volumes(const ConditionTensor& x,
                                                  const RegionTimestepMap& tau1,
                                                  const RegionTimestepMap& tau2);

    ModelWeights snapshot() const;
    void restore(const ModelWeights& w);

    std::vector<Param<S>*>& params() { return params_; }
    const NetworkConfig& config() const { return cfg_; }
    std::uint64_t step = 0;

    TimeEmbed<S>& time_embed() { return temb_; }

private:
    void build(std::uint64_t init_seed);
    void register_params();
    void check_finite(const Tensor4<S>& t, const std::string& where) const;

    NetworkConfig cfg_;
    std::vector<int> ch_; // channels per level

    Conv2d<S> stem_;
    std::vector<std::vector<ResBlock<S>>> enc_; // [level][block]
    ResBlock<S> mid1_, mid2_;
    std::vector<std::vector<ResBlock<S>>> dec_; // [level][block], level 0 = finest
    GroupNorm<S> out_gn_;
    SiLU<S> out_act_;
    Conv2d<S> out_conv_;
    TimeEmbed<S> temb_;

    std::vector<Param<S>*> params_;

    // forward caches
    Tensor4<S> out_;
    RegionPalette palette_;
    std::vector<std::vector<std::uint8_t>> level_ids_;
    std::array<typename TimeEmbed<S>::Cache, 2> temb_cache1_, temb_cache2_; // [bg, fg]
    std::array<std::vector<S>, 2> map1_emb_, map2_emb_;
    std::array<std::vector<S>, RegionPalette::kRegions> region_emb_;
    std::vector<std::array<int, 2>> pool_shapes_; // (H, W) before each downsample
    std::vector<int> dec_concat_small_;           // channels entering each concat
    Dims in_dims_;
};

extern template class TimeEmbed<float>;
extern template class TimeEmbed<double>;
extern template class FilmLayer<float>;
extern template class FilmLayer<double>;
extern template struct P3dConv<float>;
extern template struct P3dConv<double>;
extern template class ResBlock<float>;
extern template class ResBlock<double>;
extern template class Unet<float>;
extern template class Unet<double>;

} // namespace p3drad
