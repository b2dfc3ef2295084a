#include "p3drad/layers.hpp"

#include <cmath>

namespace p3drad {

namespace {

template <typename S>
void uniform_init(Param<S>& p, double bound, SeededRng& rng) {
    for (S& v : p.value) v = S(rng.uniform(-bound, bound));
}

void check_odd(int k) {
    if (k < 1 || k % 2 == 0) throw ValidationError("conv kernel size must be odd and >= 1");
}

} // namespace

// ---------------------------------------------------------------- Conv2d

template <typename S>
Conv2d<S>::Conv2d(std::string name, int in_ch_, int out_ch_, int k_, SeededRng& rng,
                  bool zero_init)
    : in_ch(in_ch_), out_ch(out_ch_), k(k_) {
    check_odd(k);
    weight.init(name + ".weight", {out_ch, in_ch, k, k});
    bias.init(name + ".bias", {out_ch});
    if (!zero_init) {
        const double bound = 1.0 / std::sqrt(double(in_ch) * k * k);
        uniform_init(weight, bound, rng);
        uniform_init(bias, bound, rng);
    }
}

template <typename S>
Tensor4<S> Conv2d<S>::forward(const Tensor4<S>& x) {
    if (x.c != in_ch) throw ValidationError("Conv2d: channel mismatch");
    x_ = x;
    const int D = x.d, H = x.h, W = x.w, p = k / 2;
    Tensor4<S> out(out_ch, D, H, W);

    for (int co = 0; co < out_ch; ++co) {
        const S b = bias.value[std::size_t(co)];
        S* ochan = out.chan(co);
        for (std::size_t i = 0, n = out.channel_size(); i < n; ++i) ochan[i] = b;
        for (int d = 0; d < D; ++d) {
            S* oslice = out.slice(co, d);
            for (int ci = 0; ci < in_ch; ++ci) {
                const S* islice = x.slice(ci, d);
                const S* wbase = weight.value.data() + ((std::size_t(co) * in_ch + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int y = 0; y < H; ++y) {
                        const int yy = y + ky - p;
                        if (yy < 0 || yy >= H) continue;
                        S* orow = oslice + std::size_t(y) * W;
                        const S* irow = islice + std::size_t(yy) * W;
                        for (int kx = 0; kx < k; ++kx) {
                            const S wv = wbase[ky * k + kx];
                            const int off = kx - p;
                            const int xlo = std::max(0, -off);
                            const int xhi = std::min(W, W - off);
                            const S* src = irow + off;
                            for (int x2 = xlo; x2 < xhi; ++x2) orow[x2] += wv * src[x2];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor4<S> Conv2d<S>::backward(const Tensor4<S>& grad_out) {
    const Tensor4<S>& x = x_;
    const int D = x.d, H = x.h, W = x.w, p = k / 2;
    Tensor4<S> gin(in_ch, D, H, W);

    for (int co = 0; co < out_ch; ++co) {
        double gb = 0.0;
        const S* gchan = grad_out.chan(co);
        for (std::size_t i = 0, n = grad_out.channel_size(); i < n; ++i) gb += double(gchan[i]);
        bias.grad[std::size_t(co)] += S(gb);

        for (int d = 0; d < D; ++d) {
            const S* gslice = grad_out.slice(co, d);
            for (int ci = 0; ci < in_ch; ++ci) {
                S* gislice = gin.slice(ci, d);
                const S* islice = x.slice(ci, d);
                const std::size_t wofs = ((std::size_t(co) * in_ch + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int y = 0; y < H; ++y) {
                        const int yy = y + ky - p;
                        if (yy < 0 || yy >= H) continue;
                        const S* grow = gslice + std::size_t(y) * W;
                        const S* irow = islice + std::size_t(yy) * W;
                        S* girow = gislice + std::size_t(yy) * W;
                        for (int kx = 0; kx < k; ++kx) {
                            const int off = kx - p;
                            const int xlo = std::max(0, -off);
                            const int xhi = std::min(W, W - off);
                            const S wv = weight.value[wofs + ky * k + kx];
                            double gw = 0.0;
                            for (int x2 = xlo; x2 < xhi; ++x2) {
                                girow[x2 + off] += wv * grow[x2];
                                gw += double(grow[x2]) * double(irow[x2 + off]);
                            }
                            weight.grad[wofs + ky * k + kx] += S(gw);
                        }
                    }
                }
            }
        }
    }
    return gin;
}

// ---------------------------------------------------------------- Conv1d

template <typename S>
Conv1d<S>::Conv1d(std::string name, int in_ch_, int out_ch_, int k_, SeededRng& rng)
    : in_ch(in_ch_), out_ch(out_ch_), k(k_) {
    check_odd(k);
    weight.init(name + ".weight", {out_ch, in_ch, k});
    bias.init(name + ".bias", {out_ch});
    const double bound = 1.0 / std::sqrt(double(in_ch) * k);
    uniform_init(weight, bound, rng);
    uniform_init(bias, bound, rng);
}

template <typename S>
Tensor4<S> Conv1d<S>::forward(const Tensor4<S>& x) {
    if (x.c != in_ch) throw ValidationError("Conv1d: channel mismatch");
    x_ = x;
    const int D = x.d, p = k / 2;
    const std::size_t plane = x.plane();
    Tensor4<S> out(out_ch, D, x.h, x.w);

    for (int co = 0; co < out_ch; ++co) {
        const S b = bias.value[std::size_t(co)];
        S* ochan = out.chan(co);
        for (std::size_t i = 0, n = out.channel_size(); i < n; ++i) ochan[i] = b;
        for (int d = 0; d < D; ++d) {
            S* oplane = out.slice(co, d);
            for (int ci = 0; ci < in_ch; ++ci) {
                const S* wrow = weight.value.data() + (std::size_t(co) * in_ch + ci) * k;
                for (int kd = 0; kd < k; ++kd) {
                    const int dd = d + kd - p;
                    if (dd < 0 || dd >= D) continue;
                    const S wv = wrow[kd];
                    const S* iplane = x.slice(ci, dd);
                    for (std::size_t j = 0; j < plane; ++j) oplane[j] += wv * iplane[j];
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor4<S> Conv1d<S>::backward(const Tensor4<S>& grad_out) {
    const Tensor4<S>& x = x_;
    const int D = x.d, p = k / 2;
    const std::size_t plane = x.plane();
    Tensor4<S> gin(in_ch, D, x.h, x.w);

    for (int co = 0; co < out_ch; ++co) {
        double gb = 0.0;
        const S* gchan = grad_out.chan(co);
        for (std::size_t i = 0, n = grad_out.channel_size(); i < n; ++i) gb += double(gchan[i]);
        bias.grad[std::size_t(co)] += S(gb);

        for (int d = 0; d < D; ++d) {
            const S* gplane = grad_out.slice(co, d);
            for (int ci = 0; ci < in_ch; ++ci) {
                const std::size_t wofs = (std::size_t(co) * in_ch + ci) * k;
                for (int kd = 0; kd < k; ++kd) {
                    const int dd = d + kd - p;
                    if (dd < 0 || dd >= D) continue;
                    const S wv = weight.value[wofs + kd];
                    S* giplane = gin.slice(ci, dd);
                    const S* iplane = x.slice(ci, dd);
                    double gw = 0.0;
                    for (std::size_t j = 0; j < plane; ++j) {
                        giplane[j] += wv * gplane[j];
                        gw += double(gplane[j]) * double(iplane[j]);
                    }
                    weight.grad[wofs + kd] += S(gw);
                }
            }
        }
    }
    return gin;
}

// ------------------------------------------------------------- GroupNorm

template <typename S>
GroupNorm<S>::GroupNorm(std::string name, int channels_, int max_groups) : channels(channels_) {
    groups = std::min(max_groups, channels);
    while (channels % groups != 0) --groups;
    gain.init(name + ".gain", {channels});
    bias.init(name + ".bias", {channels});
    for (S& v : gain.value) v = S(1);
}

template <typename S>
Tensor4<S> GroupNorm<S>::forward(const Tensor4<S>& x) {
    if (x.c != channels) throw ValidationError("GroupNorm: channel mismatch");
    const int cpg = channels / groups;
    const std::size_t csz = x.channel_size();
    xhat_ = Tensor4<S>(x.c, x.d, x.h, x.w);
    inv_std_.assign(std::size_t(groups), 0.0);
    Tensor4<S> out(x.c, x.d, x.h, x.w);

    for (int g = 0; g < groups; ++g) {
        const std::size_t base = std::size_t(g) * cpg * csz;
        const std::size_t n = std::size_t(cpg) * csz;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += double(x.v[base + i]);
        mean /= double(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dv = double(x.v[base + i]) - mean;
            var += dv * dv;
        }
        var /= double(n);
        const double inv_std = 1.0 / std::sqrt(var + kEps);
        inv_std_[std::size_t(g)] = inv_std;

        for (int c = 0; c < cpg; ++c) {
            const int ch = g * cpg + c;
            const double gc = double(gain.value[std::size_t(ch)]);
            const double bc = double(bias.value[std::size_t(ch)]);
            const std::size_t cbase = std::size_t(ch) * csz;
            for (std::size_t i = 0; i < csz; ++i) {
                const double xh = (double(x.v[cbase + i]) - mean) * inv_std;
                xhat_.v[cbase + i] = S(xh);
                out.v[cbase + i] = S(xh * gc + bc);
            }
        }
    }
    return out;
}

template <typename S>
Tensor4<S> GroupNorm<S>::backward(const Tensor4<S>& grad_out) {
    const int cpg = channels / groups;
    const std::size_t csz = xhat_.channel_size();
    Tensor4<S> gin(xhat_.c, xhat_.d, xhat_.h, xhat_.w);

    for (int g = 0; g < groups; ++g) {
        const std::size_t n = std::size_t(cpg) * csz;
        double sum_gxhat = 0.0, sum_gxhat_xhat = 0.0;

        for (int c = 0; c < cpg; ++c) {
            const int ch = g * cpg + c;
            const double gc = double(gain.value[std::size_t(ch)]);
            const std::size_t cbase = std::size_t(ch) * csz;
            double ggain = 0.0, gbias = 0.0;
            for (std::size_t i = 0; i < csz; ++i) {
                const double go = double(grad_out.v[cbase + i]);
                const double xh = double(xhat_.v[cbase + i]);
                ggain += go * xh;
                gbias += go;
                const double gxh = go * gc;
                sum_gxhat += gxh;
                sum_gxhat_xhat += gxh * xh;
            }
            gain.grad[std::size_t(ch)] += S(ggain);
            bias.grad[std::size_t(ch)] += S(gbias);
        }

        const double mean_gxhat = sum_gxhat / double(n);
        const double mean_gxhat_xhat = sum_gxhat_xhat / double(n);
        const double inv_std = inv_std_[std::size_t(g)];

        for (int c = 0; c < cpg; ++c) {
            const int ch = g * cpg + c;
            const double gc = double(gain.value[std::size_t(ch)]);
            const std::size_t cbase = std::size_t(ch) * csz;
            for (std::size_t i = 0; i < csz; ++i) {
                const double gxh = double(grad_out.v[cbase + i]) * gc;
                const double xh = double(xhat_.v[cbase + i]);
                gin.v[cbase + i] =
                    S(inv_std * (gxh - mean_gxhat - xh * mean_gxhat_xhat));
            }
        }
    }
    return gin;
}

// ------------------------------------------------------------------ SiLU

template <typename S>
Tensor4<S> SiLU<S>::forward(const Tensor4<S>& x) {
    x_ = x;
    Tensor4<S> out(x.c, x.d, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xv = double(x.v[i]);
        out.v[i] = S(xv / (1.0 + std::exp(-xv)));
    }
    return out;
}

template <typename S>
Tensor4<S> SiLU<S>::backward(const Tensor4<S>& grad_out) {
    Tensor4<S> gin(x_.c, x_.d, x_.h, x_.w);
    for (std::size_t i = 0; i < x_.size(); ++i) {
        const double xv = double(x_.v[i]);
        const double sig = 1.0 / (1.0 + std::exp(-xv));
        gin.v[i] = S(double(grad_out.v[i]) * sig * (1.0 + xv * (1.0 - sig)));
    }
    return gin;
}

// ---------------------------------------------------------------- Linear

template <typename S>
Linear<S>::Linear(std::string name, int in_dim_, int out_dim_, SeededRng& rng, bool zero_init)
    : in_dim(in_dim_), out_dim(out_dim_) {
    weight.init(name + ".weight", {out_dim, in_dim});
    bias.init(name + ".bias", {out_dim});
    if (!zero_init) {
        const double bound = 1.0 / std::sqrt(double(in_dim));
        uniform_init(weight, bound, rng);
        uniform_init(bias, bound, rng);
    }
}

template <typename S>
std::vector<S> Linear<S>::forward(const std::vector<S>& x) {
    if (int(x.size()) != in_dim) throw ValidationError("Linear: input size mismatch");
    std::vector<S> out(std::size_t(out_dim));
    for (int o = 0; o < out_dim; ++o) {
        const S* wrow = weight.value.data() + std::size_t(o) * in_dim;
        double acc = double(bias.value[std::size_t(o)]);
        for (int i = 0; i < in_dim; ++i) acc += double(wrow[i]) * double(x[std::size_t(i)]);
        out[std::size_t(o)] = S(acc);
    }
    return out;
}

template <typename S>
std::vector<S> Linear<S>::backward(const std::vector<S>& x, const std::vector<S>& grad_out) {
    std::vector<S> gin(std::size_t(in_dim), S(0));
    for (int o = 0; o < out_dim; ++o) {
        const double go = double(grad_out[std::size_t(o)]);
        bias.grad[std::size_t(o)] += S(go);
        S* gwrow = weight.grad.data() + std::size_t(o) * in_dim;
        const S* wrow = weight.value.data() + std::size_t(o) * in_dim;
        for (int i = 0; i < in_dim; ++i) {
            gwrow[i] += S(go * double(x[std::size_t(i)]));
            gin[std::size_t(i)] += S(go * double(wrow[i]));
        }
    }
    return gin;
}

// ------------------------------------------------------- pooling / resize

template <typename S>
Tensor4<S> avgpool2_forward(const Tensor4<S>& x) {
    if (x.h % 2 != 0 || x.w % 2 != 0)
        throw ValidationError("avgpool2: H and W must be even");
    Tensor4<S> out(x.c, x.d, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c)
        for (int d = 0; d < x.d; ++d) {
            const S* in = x.slice(c, d);
            S* o = out.slice(c, d);
            for (int y = 0; y < out.h; ++y)
                for (int xx = 0; xx < out.w; ++xx) {
                    const S* r0 = in + std::size_t(2 * y) * x.w + 2 * xx;
                    const S* r1 = r0 + x.w;
                    o[std::size_t(y) * out.w + xx] =
                        S(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
                }
        }
    return out;
}

template <typename S>
Tensor4<S> avgpool2_backward(const Tensor4<S>& grad_out, int in_h, int in_w) {
    Tensor4<S> gin(grad_out.c, grad_out.d, in_h, in_w);
    for (int c = 0; c < grad_out.c; ++c)
        for (int d = 0; d < grad_out.d; ++d) {
            const S* g = grad_out.slice(c, d);
            S* gi = gin.slice(c, d);
            for (int y = 0; y < grad_out.h; ++y)
                for (int xx = 0; xx < grad_out.w; ++xx) {
                    const S gv = S(0.25) * g[std::size_t(y) * grad_out.w + xx];
                    S* r0 = gi + std::size_t(2 * y) * in_w + 2 * xx;
                    S* r1 = r0 + in_w;
                    r0[0] += gv;
                    r0[1] += gv;
                    r1[0] += gv;
                    r1[1] += gv;
                }
        }
    return gin;
}

template <typename S>
Tensor4<S> upsample2_forward(const Tensor4<S>& x) {
    Tensor4<S> out(x.c, x.d, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c)
        for (int d = 0; d < x.d; ++d) {
            const S* in = x.slice(c, d);
            S* o = out.slice(c, d);
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) {
                    const S v = in[std::size_t(y) * x.w + xx];
                    S* r0 = o + std::size_t(2 * y) * out.w + 2 * xx;
                    S* r1 = r0 + out.w;
                    r0[0] = v;
                    r0[1] = v;
                    r1[0] = v;
                    r1[1] = v;
                }
        }
    return out;
}

template <typename S>
Tensor4<S> upsample2_backward(const Tensor4<S>& grad_out) {
    if (grad_out.h % 2 != 0 || grad_out.w % 2 != 0)
        throw ValidationError("upsample2_backward: odd grad shape");
    Tensor4<S> gin(grad_out.c, grad_out.d, grad_out.h / 2, grad_out.w / 2);
    for (int c = 0; c < grad_out.c; ++c)
        for (int d = 0; d < grad_out.d; ++d) {
            const S* g = grad_out.slice(c, d);
            S* gi = gin.slice(c, d);
            for (int y = 0; y < gin.h; ++y)
                for (int xx = 0; xx < gin.w; ++xx) {
                    const S* r0 = g + std::size_t(2 * y) * grad_out.w + 2 * xx;
                    const S* r1 = r0 + grad_out.w;
                    gi[std::size_t(y) * gin.w + xx] = r0[0] + r0[1] + r1[0] + r1[1];
                }
        }
    return gin;
}

template <typename S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b) {
    if (a.d != b.d || a.h != b.h || a.w != b.w)
        throw ValidationError("concat_channels: spatial shape mismatch");
    Tensor4<S> out(a.c + b.c, a.d, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + std::ptrdiff_t(a.v.size()));
    return out;
}

template <typename S>
void split_channels(const Tensor4<S>& g, int c_a, Tensor4<S>& ga, Tensor4<S>& gb) {
    ga = Tensor4<S>(c_a, g.d, g.h, g.w);
    gb = Tensor4<S>(g.c - c_a, g.d, g.h, g.w);
    std::copy(g.v.begin(), g.v.begin() + std::ptrdiff_t(ga.v.size()), ga.v.begin());
    std::copy(g.v.begin() + std::ptrdiff_t(ga.v.size()), g.v.end(), gb.v.begin());
}

template class Conv2d<float>;
template class Conv2d<double>;
template class Conv1d<float>;
template class Conv1d<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class SiLU<float>;
template class SiLU<double>;
template class Linear<float>;
template class Linear<double>;

template Tensor4<float> avgpool2_forward(const Tensor4<float>&);
template Tensor4<double> avgpool2_forward(const Tensor4<double>&);
template Tensor4<float> avgpool2_backward(const Tensor4<float>&, int, int);
template Tensor4<double> avgpool2_backward(const Tensor4<double>&, int, int);
template Tensor4<float> upsample2_forward(const Tensor4<float>&);
template Tensor4<double> upsample2_forward(const Tensor4<double>&);
template Tensor4<float> upsample2_backward(const Tensor4<float>&);
template Tensor4<double> upsample2_backward(const Tensor4<double>&);
template Tensor4<float> concat_channels(const Tensor4<float>&, const Tensor4<float>&);
template Tensor4<double> concat_channels(const Tensor4<double>&, const Tensor4<double>&);
template void split_channels(const Tensor4<float>&, int, Tensor4<float>&, Tensor4<float>&);
template void split_channels(const Tensor4<double>&, int, Tensor4<double>&, Tensor4<double>&);

} // namespace p3drad
