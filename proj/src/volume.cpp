#include "p3drad/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace p3drad {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', '3', 'D', 'V', 'O', 'L', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "payload codec assumes a little-endian host");

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

std::string to_string(const Dims& dims) {
    return std::to_string(dims.d) + "x" + std::to_string(dims.h) + "x" +
           std::to_string(dims.w);
}

bool Volume3D::is_binary() const {
    for (float v : data)
        if (v != 0.0f && v != 1.0f) return false;
    return true;
}

void Volume3D::validate() const {
    if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0)
        throw ValidationError("volume dims must be positive, got " + to_string(dims));
    if (data.size() != dims.voxels())
        throw ValidationError("volume payload size " + std::to_string(data.size()) +
                              " does not match dims " + to_string(dims));
    for (float v : data)
        if (!std::isfinite(v))
            throw ValidationError("volume contains non-finite values");
    if (kind == VolumeKind::mask && !is_binary())
        throw ValidationError("mask volume contains values outside {0, 1}");
}

Volume3D load_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open volume file: " + path.string());

    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw ValidationError("bad magic in volume file: " + path.string());

    const std::uint32_t header_len = read_u32_be(is);
    if (!is || header_len == 0 || header_len > (1u << 20))
        throw ValidationError("bad header length in volume file: " + path.string());

    std::string header_text(header_len, '\0');
    is.read(header_text.data(), header_len);
    if (!is) throw ValidationError("truncated header in volume file: " + path.string());

    Volume3D v;
    try {
        const json header = json::parse(header_text);
        const auto& jd = header.at("dims");
        v.dims = {jd.at(0).get<int>(), jd.at(1).get<int>(), jd.at(2).get<int>()};
        const auto& js = header.at("spacing");
        v.spacing = {js.at(0).get<double>(), js.at(1).get<double>(), js.at(2).get<double>()};
        if (header.at("dtype").get<std::string>() != "f32")
            throw ValidationError("unsupported dtype in " + path.string());
        const std::string kind = header.at("kind").get<std::string>();
        if (kind == "image") v.kind = VolumeKind::image;
        else if (kind == "mask") v.kind = VolumeKind::mask;
        else throw ValidationError("unknown volume kind '" + kind + "' in " + path.string());
    } catch (const json::exception& e) {
        throw ValidationError("malformed volume header in " + path.string() + ": " + e.what());
    }
    if (v.dims.d <= 0 || v.dims.h <= 0 || v.dims.w <= 0)
        throw ValidationError("non-positive dims in volume header: " + path.string());

    const std::size_t n = v.dims.voxels();
    v.data.resize(n);
    is.read(reinterpret_cast<char*>(v.data.data()), std::streamsize(n * sizeof(float)));
    if (std::size_t(is.gcount()) != n * sizeof(float))
        throw ValidationError("payload size mismatch in " + path.string() + ": expected " +
                              std::to_string(n) + " float32 values");
    is.peek();
    if (!is.eof())
        throw ValidationError("trailing bytes after payload in " + path.string());

    v.validate();
    return v;
}

void save_volume(const Volume3D& v, const std::filesystem::path& path) {
    v.validate();

    json header;
    header["dims"] = {v.dims.d, v.dims.h, v.dims.w};
    header["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    header["dtype"] = "f32";
    header["kind"] = (v.kind == VolumeKind::mask) ? "mask" : "image";
    const std::string header_text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(kMagic, 8);
    write_u32_be(os, static_cast<std::uint32_t>(header_text.size()));
    os.write(header_text.data(), std::streamsize(header_text.size()));
    os.write(reinterpret_cast<const char*>(v.data.data()),
             std::streamsize(v.data.size() * sizeof(float)));
    os.flush();
    if (!os) throw std::runtime_error("I/O failure writing " + path.string());
}

void LongitudinalSample::validate() const {
    const Dims dm = img_t1.dims;
    const Volume3D* vols[] = {&img_t1, &img_t2, &lesion_t1, &lesion_t2,
                              &csf_t1, &csf_t2, &brain_mask};
    for (const Volume3D* v : vols) {
        if (!(v->dims == dm))
            throw ValidationError("sample volumes disagree on dims: " + to_string(v->dims) +
                                  " vs " + to_string(dm));
        v->validate();
    }
    for (const Volume3D* m : {&lesion_t1, &lesion_t2, &csf_t1, &csf_t2, &brain_mask})
        if (!m->is_binary())
            throw ValidationError("sample mask is not binary");
    const std::size_t n = dm.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        if (lesion_t1.data[i] != 0.0f || lesion_t2.data[i] != 0.0f) {
            if (brain_mask.data[i] == 0.0f)
                throw ValidationError("lesion voxel outside brain mask");
            if (csf_t1.data[i] != 0.0f || csf_t2.data[i] != 0.0f)
                throw ValidationError("lesion voxel overlaps CSF prior");
        }
    }
}

const std::array<const char*, ConditionTensor::kChannels> ConditionTensor::channel_names = {
    "csf1", "csf2", "m1", "m2", "im1", "im2", "z1", "z2"};

const Volume3D& ConditionTensor::channel(const std::string& name) const {
    for (int i = 0; i < kChannels; ++i)
        if (name == channel_names[i]) return channels[i];
    throw ValidationError("unknown condition channel: " + name);
}

ConditionTensor assemble_condition(const LongitudinalSample& sample,
                                   const Volume3D& x_t1, const Volume3D& x_t2) {
    const Dims dm = sample.dims();
    if (!(x_t1.dims == dm) || !(x_t2.dims == dm))
        throw ValidationError("diffusion-state dims do not match sample dims");

    ConditionTensor ct;
    ct.dims = dm;
    ct.channels[0] = sample.csf_t1;
    ct.channels[1] = sample.csf_t2;
    ct.channels[2] = sample.lesion_t1;
    ct.channels[3] = sample.lesion_t2;

    const std::size_t n = dm.voxels();
    Volume3D im1(dm), im2(dm);
    for (std::size_t i = 0; i < n; ++i) {
        im1.data[i] = sample.img_t1.data[i] * (1.0f - sample.lesion_t1.data[i]);
        im2.data[i] = sample.img_t2.data[i] * (1.0f - sample.lesion_t2.data[i]);
    }
    ct.channels[4] = std::move(im1);
    ct.channels[5] = std::move(im2);
    ct.channels[6] = x_t1;
    ct.channels[7] = x_t2;
    return ct;
}

RegionIndexSet masked_region_indices(const Volume3D& mask) {
    if (!mask.is_binary()) throw ValidationError("masked_region_indices: input is not binary");

    RegionIndexSet out;
    out.bbox_min = {mask.dims.d, mask.dims.h, mask.dims.w};
    out.bbox_max = {-1, -1, -1};
    std::size_t i = 0;
    for (int d = 0; d < mask.dims.d; ++d)
        for (int h = 0; h < mask.dims.h; ++h)
            for (int w = 0; w < mask.dims.w; ++w, ++i) {
                if (mask.data[i] == 0.0f) continue;
                out.indices.push_back(i);
                out.bbox_min = {std::min(out.bbox_min[0], d), std::min(out.bbox_min[1], h),
                                std::min(out.bbox_min[2], w)};
                out.bbox_max = {std::max(out.bbox_max[0], d), std::max(out.bbox_max[1], h),
                                std::max(out.bbox_max[2], w)};
            }
    out.count = out.indices.size();
    if (out.count == 0) out.bbox_min = {0, 0, 0};
    return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open manifest: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.root = path.parent_path();
    try {
        if (j.at("format").get<std::string>() != "p3d-dataset-v1")
            throw ValidationError("unsupported manifest format in " + path.string());
        const auto& jd = j.at("dims");
        m.dims = {jd.at(0).get<int>(), jd.at(1).get<int>(), jd.at(2).get<int>()};
        for (const auto& js : j.at("subjects")) {
            ManifestEntry e;
            e.id = js.at("id").get<std::string>();
            e.seed = js.at("seed").get<std::uint64_t>();
            e.img_t1 = js.at("img_t1").get<std::string>();
            e.img_t2 = js.at("img_t2").get<std::string>();
            e.lesion_t1 = js.at("lesion_t1").get<std::string>();
            e.lesion_t2 = js.at("lesion_t2").get<std::string>();
            e.csf_t1 = js.at("csf_t1").get<std::string>();
            e.csf_t2 = js.at("csf_t2").get<std::string>();
            e.brain_mask = js.at("brain_mask").get<std::string>();
            m.subjects.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    json j;
    j["format"] = "p3d-dataset-v1";
    j["dims"] = {m.dims.d, m.dims.h, m.dims.w};
    j["subjects"] = json::array();
    for (const auto& e : m.subjects) {
        json js;
        js["id"] = e.id;
        js["seed"] = e.seed;
        js["img_t1"] = e.img_t1;
        js["img_t2"] = e.img_t2;
        js["lesion_t1"] = e.lesion_t1;
        js["lesion_t2"] = e.lesion_t2;
        js["csf_t1"] = e.csf_t1;
        js["csf_t2"] = e.csf_t2;
        js["brain_mask"] = e.brain_mask;
        j["subjects"].push_back(std::move(js));
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("I/O failure writing " + path.string());
}

LongitudinalSample load_sample(const DatasetManifest& m, const ManifestEntry& entry) {
    LongitudinalSample s;
    s.subject_id = entry.id;
    s.seed = entry.seed;
    s.img_t1 = load_volume(m.root / entry.img_t1);
    s.img_t2 = load_volume(m.root / entry.img_t2);
    s.lesion_t1 = load_volume(m.root / entry.lesion_t1);
    s.lesion_t2 = load_volume(m.root / entry.lesion_t2);
    s.csf_t1 = load_volume(m.root / entry.csf_t1);
    s.csf_t2 = load_volume(m.root / entry.csf_t2);
    s.brain_mask = load_volume(m.root / entry.brain_mask);
    s.validate();
    return s;
}

} // namespace p3drad
