#pragma once

#include <vector>

#include "p3drad/rng.hpp"
#include "p3drad/tensor.hpp"

namespace p3drad {

// Building blocks of the pseudo-3D U-Net. Each layer owns its parameters and
// the activations it needs for the backward pass; forward must precede
// backward, and one pass is in flight at a time.

template <typename S>
class Conv2d {
public:
    // k x k convolution over (H, W), applied independently per axial slice,
    // zero ("same") padding, odd k. stride is always 1.
    Conv2d() = default;
    Conv2d(std::string name, int in_ch, int out_ch, int k, SeededRng& rng, bool zero_init = false);

    Tensor4<S> forward(const Tensor4<S>& x);
    Tensor4<S> backward(const Tensor4<S>& grad_out);

    Param<S> weight; // (out, in, k, k)
    Param<S> bias;   // (out)
    int in_ch = 0, out_ch = 0, k = 1;

private:
    Tensor4<S> x_;
};

template <typename S>
class Conv1d {
public:
    // Kernel-k convolution along D per (H, W, channel) location, zero padding.
    Conv1d() = default;
    Conv1d(std::string name, int in_ch, int out_ch, int k, SeededRng& rng);

    Tensor4<S> forward(const Tensor4<S>& x);
    Tensor4<S> backward(const Tensor4<S>& grad_out);

    Param<S> weight; // (out, in, k)
    Param<S> bias;   // (out)
    int in_ch = 0, out_ch = 0, k = 1;

private:
    Tensor4<S> x_;
};

template <typename S>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(std::string name, int channels, int max_groups = 8);

    Tensor4<S> forward(const Tensor4<S>& x);
    Tensor4<S> backward(const Tensor4<S>& grad_out);

    Param<S> gain; // (channels)
    Param<S> bias; // (channels)
    int channels = 0, groups = 1;
    static constexpr double kEps = 1e-5;

private:
    Tensor4<S> xhat_;
    std::vector<double> inv_std_;
};

template <typename S>
class SiLU {
public:
    Tensor4<S> forward(const Tensor4<S>& x);
    Tensor4<S> backward(const Tensor4<S>& grad_out);

private:
    Tensor4<S> x_;
};

template <typename S>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in_dim, int out_dim, SeededRng& rng, bool zero_init = false);

    std::vector<S> forward(const std::vector<S>& x);
    // Accumulates parameter grads; returns grad w.r.t. the input. The cached
    // input must match the one used in the corresponding forward call.
    std::vector<S> backward(const std::vector<S>& x, const std::vector<S>& grad_out);

    Param<S> weight; // (out, in)
    Param<S> bias;   // (out)
    int in_dim = 0, out_dim = 0;
};

// Downsample (H, W) by 2 with 2x2 mean pooling; D is preserved.
template <typename S>
Tensor4<S> avgpool2_forward(const Tensor4<S>& x);
template <typename S>
Tensor4<S> avgpool2_backward(const Tensor4<S>& grad_out, int in_h, int in_w);

// Nearest-neighbour 2x upsample of (H, W).
template <typename S>
Tensor4<S> upsample2_forward(const Tensor4<S>& x);
template <typename S>
Tensor4<S> upsample2_backward(const Tensor4<S>& grad_out);

template <typename S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b);
template <typename S>
void split_channels(const Tensor4<S>& g, int c_a, Tensor4<S>& ga, Tensor4<S>& gb);

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class Conv1d<float>;
extern template class Conv1d<double>;
extern template class GroupNorm<float>;
extern template class GroupNorm<double>;
extern template class SiLU<float>;
extern template class SiLU<double>;
extern template class Linear<float>;
extern template class Linear<double>;

} // namespace p3drad
