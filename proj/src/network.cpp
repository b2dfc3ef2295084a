#include "p3drad/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace p3drad {

using nlohmann::json;

// ---------------------------------------------------------- NetworkConfig

void NetworkConfig::validate() const {
    if (in_channels != 8) throw ValidationError("in_channels is fixed at 8");
    if (out_channels != 2) throw ValidationError("out_channels is fixed at 2");
    if (base_channels < 1) throw ValidationError("base_channels must be >= 1");
    if (levels < 1) throw ValidationError("levels must be >= 1");
    if (blocks_per_level < 1) throw ValidationError("blocks_per_level must be >= 1");
    if (conv1d_kernel < 1 || conv1d_kernel % 2 == 0)
        throw ValidationError("conv1d_kernel must be odd and >= 1");
    if (embed_dim < 2 || embed_dim % 2 != 0)
        throw ValidationError("embed_dim must be even and >= 2");
}

void NetworkConfig::validate_input(Dims dims) const {
    const int factor = 1 << (levels - 1);
    if (dims.h % factor != 0 || dims.w % factor != 0)
        throw ValidationError("H and W must be divisible by 2^(levels-1) = " +
                              std::to_string(factor) + ", got " + to_string(dims));
    if (dims.h / factor < 2 || dims.w / factor < 2)
        throw ValidationError("volume too small for " + std::to_string(levels) + " levels");
}

namespace {

json config_to_json(const NetworkConfig& c) {
    return json{{"in_channels", c.in_channels},
                {"out_channels", c.out_channels},
                {"base_channels", c.base_channels},
                {"levels", c.levels},
                {"blocks_per_level", c.blocks_per_level},
                {"conv1d_kernel", c.conv1d_kernel},
                {"embed_dim", c.embed_dim},
                {"precision", c.precision == Precision::double_prec ? "double" : "single"}};
}

NetworkConfig config_from_json(const json& j) {
    NetworkConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.levels = j.at("levels").get<int>();
    c.blocks_per_level = j.at("blocks_per_level").get<int>();
    c.conv1d_kernel = j.at("conv1d_kernel").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    const std::string prec = j.at("precision").get<std::string>();
    if (prec == "single") c.precision = Precision::single_prec;
    else if (prec == "double") c.precision = Precision::double_prec;
    else throw ValidationError("unknown precision tag: " + prec);
    return c;
}

double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }
double silu_grad_scalar(double x) {
    const double sig = 1.0 / (1.0 + std::exp(-x));
    return sig * (1.0 + x * (1.0 - sig));
}

} // namespace

// ---------------------------------------------------------- RegionPalette

RegionPalette RegionPalette::build(const RegionTimestepMap& tau1,
                                   const RegionTimestepMap& tau2) {
    if (!(tau1.dims == tau2.dims))
        throw ValidationError("timestep maps disagree on dims");
    RegionPalette pal;
    pal.dims = tau1.dims;
    for (int r = 0; r < kRegions; ++r) {
        const bool fg1 = (r >> 1) & 1, fg2 = r & 1;
        pal.taus[std::size_t(r)] = {fg1 ? tau1.tau_fg : tau1.tau_bg,
                                    fg2 ? tau2.tau_fg : tau2.tau_bg};
    }
    const std::size_t n = pal.dims.voxels();
    pal.ids.resize(n);
    const std::vector<std::uint8_t>* m1 = tau1.mask ? tau1.mask.get() : nullptr;
    const std::vector<std::uint8_t>* m2 = tau2.mask ? tau2.mask.get() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t b1 = m1 ? (*m1)[i] : 0;
        const std::uint8_t b2 = m2 ? (*m2)[i] : 0;
        pal.ids[i] = std::uint8_t(b1 * 2 + b2);
    }
    return pal;
}

// -------------------------------------------------------------- TimeEmbed

template <typename S>
TimeEmbed<S>::TimeEmbed(std::string name, int dim_, SeededRng& rng) : dim(dim_) {
    l1 = Linear<S>(name + ".l1", dim, dim, rng);
    l2 = Linear<S>(name + ".l2", dim, dim, rng);
}

template <typename S>
std::vector<S> TimeEmbed<S>::sinusoid(double tau, int dim) {
    const int half = dim / 2;
    std::vector<S> out(std::size_t(dim));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        const double arg = tau * freq;
        out[std::size_t(i)] = S(std::cos(arg));
        out[std::size_t(half + i)] = S(std::sin(arg));
    }
    return out;
}

template <typename S>
std::vector<S> TimeEmbed<S>::forward(double tau, Cache& cache) {
    cache.sinusoid = sinusoid(tau, dim);
    cache.hidden_pre = l1.forward(cache.sinusoid);
    cache.hidden.resize(cache.hidden_pre.size());
    for (std::size_t i = 0; i < cache.hidden.size(); ++i)
        cache.hidden[i] = S(silu_scalar(double(cache.hidden_pre[i])));
    cache.valid = true;
    return l2.forward(cache.hidden);
}

template <typename S>
void TimeEmbed<S>::backward(const Cache& cache, const std::vector<S>& grad_out) {
    if (!cache.valid) throw std::logic_error("TimeEmbed::backward without forward");
    std::vector<S> gh = l2.backward(cache.hidden, grad_out);
    for (std::size_t i = 0; i < gh.size(); ++i)
        gh[i] = S(double(gh[i]) * silu_grad_scalar(double(cache.hidden_pre[i])));
    l1.backward(cache.sinusoid, gh);
}

template <typename S>
Tensor4<S> TimeEmbed<S>::field(const RegionTimestepMap& tau) {
    Cache scratch;
    const std::vector<S> bg = forward(double(tau.tau_bg), scratch);
    const std::vector<S> fg = tau.is_uniform() ? bg : forward(double(tau.tau_fg), scratch);

    Tensor4<S> out(dim, tau.dims.d, tau.dims.h, tau.dims.w);
    const std::size_t n = tau.dims.voxels();
    for (int e = 0; e < dim; ++e) {
        S* chan = out.chan(e);
        const S bgv = bg[std::size_t(e)], fgv = fg[std::size_t(e)];
        for (std::size_t i = 0; i < n; ++i)
            chan[i] = (tau.mask && (*tau.mask)[i]) ? fgv : bgv;
    }
    return out;
}

// -------------------------------------------------------------- FilmLayer

template <typename S>
FilmLayer<S>::FilmLayer(std::string name, int emb_dim, int channels_, SeededRng& rng)
    : channels(channels_) {
    proj = Linear<S>(name + ".proj", emb_dim, 2 * channels, rng, /*zero_init=*/true);
}

template <typename S>
Tensor4<S> FilmLayer<S>::forward(
    const Tensor4<S>& h, const std::array<std::vector<S>, RegionPalette::kRegions>& region_emb,
    const std::vector<std::uint8_t>& ids) {
    if (ids.size() != h.channel_size())
        throw ValidationError("FilmLayer: region-id field does not match feature map");
    h_ = h;
    region_emb_ = region_emb;
    ids_ = &ids;
    for (int r = 0; r < RegionPalette::kRegions; ++r)
        film_vec_[std::size_t(r)] = proj.forward(region_emb[std::size_t(r)]);

    Tensor4<S> out(h.c, h.d, h.h, h.w);
    const std::size_t n = h.channel_size();
    for (int c = 0; c < h.c; ++c) {
        const S* hc = h.chan(c);
        S* oc = out.chan(c);
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<S>& fv = film_vec_[ids[i]];
            oc[i] = hc[i] * (S(1) + fv[std::size_t(c)]) + fv[std::size_t(channels + c)];
        }
    }
    return out;
}

template <typename S>
Tensor4<S> FilmLayer<S>::backward(
    const Tensor4<S>& grad_out, std::array<std::vector<S>, RegionPalette::kRegions>& emb_grad) {
    const std::vector<std::uint8_t>& ids = *ids_;
    const std::size_t n = h_.channel_size();
    Tensor4<S> gh(h_.c, h_.d, h_.h, h_.w);

    std::array<std::vector<double>, RegionPalette::kRegions> gfilm;
    for (auto& v : gfilm) v.assign(std::size_t(2 * channels), 0.0);

    for (int c = 0; c < h_.c; ++c) {
        const S* hc = h_.chan(c);
        const S* gc = grad_out.chan(c);
        S* ghc = gh.chan(c);
        for (std::size_t i = 0; i < n; ++i) {
            const int r = ids[i];
            const std::vector<S>& fv = film_vec_[std::size_t(r)];
            ghc[i] = gc[i] * (S(1) + fv[std::size_t(c)]);
            gfilm[std::size_t(r)][std::size_t(c)] += double(gc[i]) * double(hc[i]);
            gfilm[std::size_t(r)][std::size_t(channels + c)] += double(gc[i]);
        }
    }

    for (int r = 0; r < RegionPalette::kRegions; ++r) {
        std::vector<S> gf(std::size_t(2 * channels));
        for (std::size_t i = 0; i < gf.size(); ++i) gf[i] = S(gfilm[std::size_t(r)][i]);
        const std::vector<S> ge = proj.backward(region_emb_[std::size_t(r)], gf);
        std::vector<S>& acc = emb_grad[std::size_t(r)];
        if (acc.empty()) acc.assign(ge.size(), S(0));
        for (std::size_t i = 0; i < ge.size(); ++i) acc[i] += ge[i];
    }
    return gh;
}

template <typename S>
Tensor4<S> FilmLayer<S>::apply_field(const Tensor4<S>& h, const Tensor4<S>& emb_field) const {
    if (emb_field.d != h.d || emb_field.h != h.h || emb_field.w != h.w)
        throw ValidationError("FilmLayer: embedding field shape mismatch");
    Tensor4<S> out(h.c, h.d, h.h, h.w);
    const std::size_t n = h.channel_size();
    std::vector<S> emb(std::size_t(emb_field.c));
    for (std::size_t i = 0; i < n; ++i) {
        for (int e = 0; e < emb_field.c; ++e) emb[std::size_t(e)] = emb_field.chan(e)[i];
        const std::vector<S> fv = proj.forward(emb);
        for (int c = 0; c < h.c; ++c)
            out.chan(c)[i] =
                h.chan(c)[i] * (S(1) + fv[std::size_t(c)]) + fv[std::size_t(channels + c)];
    }
    return out;
}

// ---------------------------------------------------------------- P3dConv

template <typename S>
P3dConv<S>::P3dConv(std::string name, int in_ch, int out_ch, int k2d, int k1d, SeededRng& rng) {
    conv2d = Conv2d<S>(name + ".c2d", in_ch, out_ch, k2d, rng);
    conv1d = Conv1d<S>(name + ".c1d", out_ch, out_ch, k1d, rng);
}

template <typename S>
Tensor4<S> P3dConv<S>::forward(const Tensor4<S>& x) {
    return conv1d.forward(conv2d.forward(x));
}

template <typename S>
Tensor4<S> P3dConv<S>::backward(const Tensor4<S>& grad_out) {
    return conv2d.backward(conv1d.backward(grad_out));
}

// ---------------------------------------------------------------- ResBlock

template <typename S>
ResBlock<S>::ResBlock(std::string name_, int in_ch, int out_ch, int emb_dim, int k1d,
                      SeededRng& rng)
    : name(std::move(name_)) {
    gn = GroupNorm<S>(name + ".gn", in_ch);
    conv1 = P3dConv<S>(name + ".conv1", in_ch, out_ch, 3, k1d, rng);
    film = FilmLayer<S>(name + ".film", emb_dim, out_ch, rng);
    conv2 = P3dConv<S>(name + ".conv2", out_ch, out_ch, 3, k1d, rng);
    has_skip = in_ch != out_ch;
    if (has_skip) skip = Conv2d<S>(name + ".skip", in_ch, out_ch, 1, rng);
}

template <typename S>
Tensor4<S> ResBlock<S>::forward(
    const Tensor4<S>& x, const std::array<std::vector<S>, RegionPalette::kRegions>& region_emb,
    const std::vector<std::uint8_t>& ids) {
    Tensor4<S> h = gn.forward(x);
    h = act1.forward(h);
    h = conv1.forward(h);
    h = film.forward(h, region_emb, ids);
    h = act2.forward(h);
    h = conv2.forward(h);
    const Tensor4<S> s = has_skip ? skip.forward(x) : x;
    for (std::size_t i = 0; i < h.size(); ++i) h.v[i] += s.v[i];
    return h;
}

template <typename S>
Tensor4<S> ResBlock<S>::backward(
    const Tensor4<S>& grad_out, std::array<std::vector<S>, RegionPalette::kRegions>& emb_grad) {
    Tensor4<S> g = conv2.backward(grad_out);
    g = act2.backward(g);
    g = film.backward(g, emb_grad);
    g = conv1.backward(g);
    g = act1.backward(g);
    g = gn.backward(g);
    const Tensor4<S> gs = has_skip ? skip.backward(grad_out) : grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gs.v[i];
    return g;
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kCkptMagic[8] = {'P', '3', 'D', 'C', 'K', 'P', 'T', '1'};

void write_u32_be(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_be(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

} // namespace

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path) {
    w.config.validate();
    const bool f64 = w.config.precision == Precision::double_prec;

    json header;
    header["config"] = config_to_json(w.config);
    header["step"] = w.step;
    header["dtype"] = f64 ? "f64" : "f32";
    json params = json::array();
    for (const auto& p : w.params)
        params.push_back(json{{"name", p.name}, {"shape", p.shape}, {"count", p.data.size()}});
    header["params"] = std::move(params);
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(kCkptMagic, 8);
    write_u32_be(os, std::uint32_t(text.size()));
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& p : w.params) {
        if (f64) {
            os.write(reinterpret_cast<const char*>(p.data.data()),
                     std::streamsize(p.data.size() * sizeof(double)));
        } else {
            std::vector<float> buf(p.data.size());
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = float(p.data[i]);
            os.write(reinterpret_cast<const char*>(buf.data()),
                     std::streamsize(buf.size() * sizeof(float)));
        }
    }
    os.flush();
    if (!os) throw std::runtime_error("I/O failure writing " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw ValidationError("bad magic in checkpoint: " + path.string());
    const std::uint32_t len = read_u32_be(is);
    if (!is || len == 0 || len > (1u << 24))
        throw ValidationError("bad header length in checkpoint: " + path.string());
    std::string text(len, '\0');
    is.read(text.data(), len);
    if (!is) throw ValidationError("truncated checkpoint header: " + path.string());

    ModelWeights w;
    bool f64 = false;
    try {
        const json header = json::parse(text);
        w.config = config_from_json(header.at("config"));
        w.step = header.at("step").get<std::uint64_t>();
        const std::string dtype = header.at("dtype").get<std::string>();
        if (dtype == "f64") f64 = true;
        else if (dtype != "f32") throw ValidationError("unknown checkpoint dtype " + dtype);
        for (const auto& jp : header.at("params")) {
            ModelWeights::Entry e;
            e.name = jp.at("name").get<std::string>();
            e.shape = jp.at("shape").get<std::vector<int>>();
            e.data.resize(jp.at("count").get<std::size_t>());
            w.params.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ValidationError("malformed checkpoint header in " + path.string() + ": " +
                              e.what());
    }

    for (auto& p : w.params) {
        if (f64) {
            is.read(reinterpret_cast<char*>(p.data.data()),
                    std::streamsize(p.data.size() * sizeof(double)));
            if (std::size_t(is.gcount()) != p.data.size() * sizeof(double))
                throw ValidationError("truncated checkpoint payload: " + path.string());
        } else {
            std::vector<float> buf(p.data.size());
            is.read(reinterpret_cast<char*>(buf.data()),
                    std::streamsize(buf.size() * sizeof(float)));
            if (std::size_t(is.gcount()) != buf.size() * sizeof(float))
                throw ValidationError("truncated checkpoint payload: " + path.string());
            for (std::size_t i = 0; i < buf.size(); ++i) p.data[i] = double(buf[i]);
        }
        for (double v : p.data)
            if (!std::isfinite(v))
                throw ValidationError("non-finite parameter in checkpoint: " + p.name);
    }
    is.peek();
    if (!is.eof()) throw ValidationError("trailing bytes in checkpoint: " + path.string());
    return w;
}

// -------------------------------------------------------------------- Unet

template <typename S>
Unet<S>::Unet(const NetworkConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    if constexpr (std::is_same_v<S, float>) {
        if (cfg_.precision != Precision::single_prec)
            throw ValidationError("config precision disagrees with scalar type float");
    } else {
        if (cfg_.precision != Precision::double_prec)
            throw ValidationError("config precision disagrees with scalar type double");
    }
    build(init_seed);
}

template <typename S>
Unet<S>::Unet(const ModelWeights& weights) : Unet(weights.config, 0) {
    restore(weights);
}

template <typename S>
void Unet<S>::build(std::uint64_t init_seed) {
    SeededRng rng(init_seed);
    const int L = cfg_.levels, B = cfg_.blocks_per_level, E = 2 * cfg_.embed_dim;
    ch_.resize(std::size_t(L));
    for (int l = 0; l < L; ++l) ch_[std::size_t(l)] = cfg_.base_channels << l;

    stem_ = Conv2d<S>("stem", cfg_.in_channels, ch_[0], 3, rng);

    enc_.resize(std::size_t(L));
    for (int l = 0; l < L; ++l)
        for (int b = 0; b < B; ++b) {
            const int in = b == 0 ? (l == 0 ? ch_[0] : ch_[std::size_t(l - 1)])
                                  : ch_[std::size_t(l)];
            enc_[std::size_t(l)].emplace_back("enc" + std::to_string(l) + ".b" +
                                                  std::to_string(b),
                                              in, ch_[std::size_t(l)], E, cfg_.conv1d_kernel,
                                              rng);
        }

    mid1_ = ResBlock<S>("mid1", ch_.back(), ch_.back(), E, cfg_.conv1d_kernel, rng);
    mid2_ = ResBlock<S>("mid2", ch_.back(), ch_.back(), E, cfg_.conv1d_kernel, rng);

    dec_.resize(std::size_t(L));
    for (int l = L - 1; l >= 0; --l) {
        const int entering = l == L - 1 ? ch_.back() : ch_[std::size_t(l + 1)];
        for (int b = 0; b < B; ++b) {
            const int in = b == 0 ? entering + ch_[std::size_t(l)] : ch_[std::size_t(l)];
            dec_[std::size_t(l)].emplace_back("dec" + std::to_string(l) + ".b" +
                                                  std::to_string(b),
                                              in, ch_[std::size_t(l)], E, cfg_.conv1d_kernel,
                                              rng);
        }
    }

    out_gn_ = GroupNorm<S>("out.gn", ch_[0]);
    out_conv_ = Conv2d<S>("out.conv", ch_[0], cfg_.out_channels, 3, rng, /*zero_init=*/true);
    temb_ = TimeEmbed<S>("temb", cfg_.embed_dim, rng);

    register_params();
}

template <typename S>
void Unet<S>::register_params() {
    params_.clear();
    auto add_block = [&](ResBlock<S>& blk) {
        params_.push_back(&blk.gn.gain);
        params_.push_back(&blk.gn.bias);
        params_.push_back(&blk.conv1.conv2d.weight);
        params_.push_back(&blk.conv1.conv2d.bias);
        params_.push_back(&blk.conv1.conv1d.weight);
        params_.push_back(&blk.conv1.conv1d.bias);
        params_.push_back(&blk.film.proj.weight);
        params_.push_back(&blk.film.proj.bias);
        params_.push_back(&blk.conv2.conv2d.weight);
        params_.push_back(&blk.conv2.conv2d.bias);
        params_.push_back(&blk.conv2.conv1d.weight);
        params_.push_back(&blk.conv2.conv1d.bias);
        if (blk.has_skip) {
            params_.push_back(&blk.skip.weight);
            params_.push_back(&blk.skip.bias);
        }
    };
    params_.push_back(&stem_.weight);
    params_.push_back(&stem_.bias);
    for (auto& level : enc_)
        for (auto& blk : level) add_block(blk);
    add_block(mid1_);
    add_block(mid2_);
    for (auto& level : dec_)
        for (auto& blk : level) add_block(blk);
    params_.push_back(&out_gn_.gain);
    params_.push_back(&out_gn_.bias);
    params_.push_back(&out_conv_.weight);
    params_.push_back(&out_conv_.bias);
    params_.push_back(&temb_.l1.weight);
    params_.push_back(&temb_.l1.bias);
    params_.push_back(&temb_.l2.weight);
    params_.push_back(&temb_.l2.bias);
}

template <typename S>
void Unet<S>::check_finite(const Tensor4<S>& t, const std::string& where) const {
    if (!t.all_finite())
        throw std::runtime_error("non-finite activation after " + where);
}

template <typename S>
const Tensor4<S>& Unet<S>::forward(const Tensor4<S>& x, const RegionTimestepMap& tau1,
                                   const RegionTimestepMap& tau2) {
    if (x.c != cfg_.in_channels) throw ValidationError("forward: expected 8 input channels");
    in_dims_ = {x.d, x.h, x.w};
    cfg_.validate_input(in_dims_);
    if (!(tau1.dims == in_dims_) || !(tau2.dims == in_dims_))
        throw ValidationError("forward: timestep map dims do not match input");

    const int L = cfg_.levels;

    // Embeddings: two applications per map (background / foreground values),
    // concatenated per joint region.
    palette_ = RegionPalette::build(tau1, tau2);
    map1_emb_[0] = temb_.forward(double(tau1.tau_bg), temb_cache1_[0]);
    map1_emb_[1] = temb_.forward(double(tau1.tau_fg), temb_cache1_[1]);
    map2_emb_[0] = temb_.forward(double(tau2.tau_bg), temb_cache2_[0]);
    map2_emb_[1] = temb_.forward(double(tau2.tau_fg), temb_cache2_[1]);
    for (int r = 0; r < RegionPalette::kRegions; ++r) {
        const std::vector<S>& e1 = map1_emb_[std::size_t((r >> 1) & 1)];
        const std::vector<S>& e2 = map2_emb_[std::size_t(r & 1)];
        std::vector<S>& dst = region_emb_[std::size_t(r)];
        dst.resize(e1.size() + e2.size());
        std::copy(e1.begin(), e1.end(), dst.begin());
        std::copy(e2.begin(), e2.end(), dst.begin() + std::ptrdiff_t(e1.size()));
    }

    // Region ids per resolution level (2x nearest decimation of (H, W)).
    level_ids_.assign(std::size_t(L), {});
    level_ids_[0] = palette_.ids;
    {
        int lh = x.h, lw = x.w;
        for (int l = 1; l < L; ++l) {
            const std::vector<std::uint8_t>& prev = level_ids_[std::size_t(l - 1)];
            const int nh = lh / 2, nw = lw / 2;
            std::vector<std::uint8_t> cur(std::size_t(x.d) * nh * nw);
            for (int d = 0; d < x.d; ++d)
                for (int y = 0; y < nh; ++y)
                    for (int xx = 0; xx < nw; ++xx)
                        cur[(std::size_t(d) * nh + y) * nw + xx] =
                            prev[(std::size_t(d) * lh + 2 * y) * lw + 2 * xx];
            level_ids_[std::size_t(l)] = std::move(cur);
            lh = nh;
            lw = nw;
        }
    }

    Tensor4<S> h = stem_.forward(x);
    check_finite(h, "stem");

    std::vector<Tensor4<S>> skips(std::size_t(L));
    pool_shapes_.assign(std::size_t(L), {0, 0});
    for (int l = 0; l < L; ++l) {
        for (auto& blk : enc_[std::size_t(l)]) {
            h = blk.forward(h, region_emb_, level_ids_[std::size_t(l)]);
            check_finite(h, blk.name);
        }
        skips[std::size_t(l)] = h;
        if (l < L - 1) {
            pool_shapes_[std::size_t(l)] = {h.h, h.w};
            h = avgpool2_forward(h);
        }
    }

    h = mid1_.forward(h, region_emb_, level_ids_.back());
    check_finite(h, "mid1");
    h = mid2_.forward(h, region_emb_, level_ids_.back());
    check_finite(h, "mid2");

    dec_concat_small_.assign(std::size_t(L), 0);
    for (int l = L - 1; l >= 0; --l) {
        dec_concat_small_[std::size_t(l)] = h.c;
        h = concat_channels(h, skips[std::size_t(l)]);
        for (auto& blk : dec_[std::size_t(l)]) {
            h = blk.forward(h, region_emb_, level_ids_[std::size_t(l)]);
            check_finite(h, blk.name);
        }
        if (l > 0) h = upsample2_forward(h);
    }

    h = out_gn_.forward(h);
    h = out_act_.forward(h);
    out_ = out_conv_.forward(h);
    check_finite(out_, "out.conv");
    return out_;
}

template <typename S>
void Unet<S>::backward(const Tensor4<S>& grad_out) {
    const int L = cfg_.levels;
    std::array<std::vector<S>, RegionPalette::kRegions> emb_grad;

    Tensor4<S> g = out_conv_.backward(grad_out);
    g = out_act_.backward(g);
    g = out_gn_.backward(g);

    std::vector<Tensor4<S>> skip_grads(std::size_t(L));
    for (int l = 0; l < L; ++l) {
        if (l > 0) g = upsample2_backward(g);
        for (int b = int(dec_[std::size_t(l)].size()) - 1; b >= 0; --b)
            g = dec_[std::size_t(l)][std::size_t(b)].backward(g, emb_grad);
        Tensor4<S> g_small, g_skip;
        split_channels(g, dec_concat_small_[std::size_t(l)], g_small, g_skip);
        skip_grads[std::size_t(l)] = std::move(g_skip);
        g = std::move(g_small);
    }

    g = mid2_.backward(g, emb_grad);
    g = mid1_.backward(g, emb_grad);

    for (int l = L - 1; l >= 0; --l) {
        if (l < L - 1)
            g = avgpool2_backward(g, pool_shapes_[std::size_t(l)][0],
                                  pool_shapes_[std::size_t(l)][1]);
        const Tensor4<S>& gs = skip_grads[std::size_t(l)];
        for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gs.v[i];
        for (int b = int(enc_[std::size_t(l)].size()) - 1; b >= 0; --b)
            g = enc_[std::size_t(l)][std::size_t(b)].backward(g, emb_grad);
    }
    stem_.backward(g);

    // Route the accumulated joint-region embedding gradients back through the
    // shared timestep MLP, one application per (map, value) pair.
    const int E = cfg_.embed_dim;
    std::array<std::vector<S>, 2> g_map1, g_map2;
    for (auto& v : g_map1) v.assign(std::size_t(E), S(0));
    for (auto& v : g_map2) v.assign(std::size_t(E), S(0));
    for (int r = 0; r < RegionPalette::kRegions; ++r) {
        const std::vector<S>& ge = emb_grad[std::size_t(r)];
        if (ge.empty()) continue;
        const std::size_t b1 = std::size_t((r >> 1) & 1), b2 = std::size_t(r & 1);
        for (int i = 0; i < E; ++i) {
            g_map1[b1][std::size_t(i)] += ge[std::size_t(i)];
            g_map2[b2][std::size_t(i)] += ge[std::size_t(E + i)];
        }
    }
    temb_.backward(temb_cache1_[0], g_map1[0]);
    temb_.backward(temb_cache1_[1], g_map1[1]);
    temb_.backward(temb_cache2_[0], g_map2[0]);
    temb_.backward(temb_cache2_[1], g_map2[1]);
}

template <typename S>
void Unet<S>::zero_grad() {
    for (Param<S>* p : params_) std::fill(p->grad.begin(), p->grad.end(), S(0));
}

template <typename S>
std::pair<Volume3D, Volume3D> Unet<S>::forward_volumes(const ConditionTensor& x,
                                                       const RegionTimestepMap& tau1,
                                                       const RegionTimestepMap& tau2) {
    Tensor4<S> t(ConditionTensor::kChannels, x.dims.d, x.dims.h, x.dims.w);
    for (int c = 0; c < ConditionTensor::kChannels; ++c) {
        if (!(x.channels[std::size_t(c)].dims == x.dims))
            throw ValidationError("condition tensor channel dims mismatch");
        const auto& src = x.channels[std::size_t(c)].data;
        S* dst = t.chan(c);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = S(src[i]);
    }
    const Tensor4<S>& out = forward(t, tau1, tau2);
    return {volume_from_channel(out, 0), volume_from_channel(out, 1)};
}

template <typename S>
ModelWeights Unet<S>::snapshot() const {
    ModelWeights w;
    w.config = cfg_;
    w.step = step;
    for (const Param<S>* p : params_) {
        ModelWeights::Entry e;
        e.name = p->name;
        e.shape = p->shape;
        e.data.assign(p->value.begin(), p->value.end());
        w.params.push_back(std::move(e));
    }
    return w;
}

template <typename S>
void Unet<S>::restore(const ModelWeights& w) {
    if (!(w.config == cfg_))
        throw ValidationError("checkpoint config conflicts with model config");
    if (w.params.size() != params_.size())
        throw ValidationError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param<S>* p = params_[i];
        const ModelWeights::Entry& e = w.params[i];
        if (e.name != p->name || e.shape != p->shape || e.data.size() != p->value.size())
            throw ValidationError("checkpoint parameter '" + e.name +
                                  "' conflicts with model layout");
        for (std::size_t j = 0; j < e.data.size(); ++j) p->value[j] = S(e.data[j]);
    }
    step = w.step;
}

template class TimeEmbed<float>;
template class TimeEmbed<double>;
template class FilmLayer<float>;
template class FilmLayer<double>;
template struct P3dConv<float>;
template struct P3dConv<double>;
template class ResBlock<float>;
template class ResBlock<double>;
template class Unet<float>;
template class Unet<double>;

} // namespace p3drad
