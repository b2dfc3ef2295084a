#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "p3drad/volume.hpp"

namespace p3drad {

// Dense (C, D, H, W) activation tensor, w contiguous.
template <typename S>
struct Tensor4 {
    int c = 0, d = 0, h = 0, w = 0;
    std::vector<S> v;

    Tensor4() = default;
    Tensor4(int c_, int d_, int h_, int w_)
        : c(c_), d(d_), h(h_), w(w_), v(std::size_t(c_) * d_ * h_ * w_, S(0)) {}

    std::size_t size() const { return v.size(); }
    std::size_t plane() const { return std::size_t(h) * w; }      // one (H,W) slice
    std::size_t channel_size() const { return std::size_t(d) * h * w; }

    S* chan(int ci) { return v.data() + std::size_t(ci) * channel_size(); }
    const S* chan(int ci) const { return v.data() + std::size_t(ci) * channel_size(); }
    S* slice(int ci, int di) { return chan(ci) + std::size_t(di) * plane(); }
    const S* slice(int ci, int di) const { return chan(ci) + std::size_t(di) * plane(); }

    S& at(int ci, int di, int hi, int wi) {
        return v[((std::size_t(ci) * d + di) * h + hi) * w + wi];
    }
    S at(int ci, int di, int hi, int wi) const {
        return v[((std::size_t(ci) * d + di) * h + hi) * w + wi];
    }

    bool same_shape(const Tensor4& o) const {
        return c == o.c && d == o.d && h == o.h && w == o.w;
    }
    void fill(S value) { std::fill(v.begin(), v.end(), value); }

    bool all_finite() const {
        for (S x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }
};

template <typename S>
Tensor4<S> tensor_from_volume(const Volume3D& vol) {
    Tensor4<S> t(1, vol.dims.d, vol.dims.h, vol.dims.w);
    for (std::size_t i = 0; i < vol.data.size(); ++i) t.v[i] = S(vol.data[i]);
    return t;
}

template <typename S>
Volume3D volume_from_channel(const Tensor4<S>& t, int ci) {
    Volume3D vol({t.d, t.h, t.w});
    const S* src = t.chan(ci);
    for (std::size_t i = 0; i < vol.data.size(); ++i)
        vol.data[i] = static_cast<float>(src[i]);
    return vol;
}

// Named parameter blob with its gradient accumulator.
template <typename S>
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<S> value;
    std::vector<S> grad;

    void init(std::string n, std::vector<int> shp) {
        name = std::move(n);
        shape = std::move(shp);
        std::size_t sz = 1;
        for (int s : shape) sz *= std::size_t(s);
        value.assign(sz, S(0));
        grad.assign(sz, S(0));
    }
    std::size_t size() const { return value.size(); }
};

} // namespace p3drad
