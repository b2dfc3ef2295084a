#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3drad {

// Raised when inputs violate a documented precondition (bad flags, malformed
// files, shape mismatches). Maps to CLI exit code 1.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Dims {
    int d = 0, h = 0, w = 0;
    std::size_t voxels() const { return std::size_t(d) * h * w; }
    bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& dims);

enum class VolumeKind { image, mask };

// Dense scalar field over a D x H x W grid, stored [d][h][w] with w
// contiguous. Spacing is metadata only. The universal carrier of images and
// masks; masks hold exactly 0.0f / 1.0f.
struct Volume3D {
    Dims dims;
    std::array<double, 3> spacing = {1.0, 1.0, 1.0};
    VolumeKind kind = VolumeKind::image;
    std::vector<float> data;

    Volume3D() = default;
    Volume3D(Dims dm, VolumeKind k = VolumeKind::image, float fill = 0.0f)
        : dims(dm), kind(k), data(dm.voxels(), fill) {}

    std::size_t index(int d, int h, int w) const {
        return (std::size_t(d) * dims.h + h) * dims.w + w;
    }
    float& at(int d, int h, int w) { return data[index(d, h, w)]; }
    float at(int d, int h, int w) const { return data[index(d, h, w)]; }

    bool is_binary() const;
    // Checks payload size, finiteness, and the {0,1} contract for masks.
    void validate() const;
};

// Container format: 8-byte magic "P3DVOL01", 4-byte big-endian header length,
// UTF-8 JSON header {dims, spacing, dtype, kind}, raw float32 little-endian
// payload in [d][h][w] order.
Volume3D load_volume(const std::filesystem::path& path);
void save_volume(const Volume3D& v, const std::filesystem::path& path);

// Paired timepoints with per-timepoint lesion masks, CSF priors, a shared
// brain mask, and the healthy ground-truth images.
struct LongitudinalSample {
    Volume3D img_t1, img_t2;
    Volume3D lesion_t1, lesion_t2;
    Volume3D csf_t1, csf_t2;
    Volume3D brain_mask;
    std::string subject_id;
    std::uint64_t seed = 0;

    Dims dims() const { return img_t1.dims; }
    // All volumes share dims; lesions inside brain, disjoint from CSF.
    void validate() const;
};

// The 8-channel conditioning tensor in the fixed public order
// [csf1, csf2, m1, m2, im1, im2, z1, z2].
struct ConditionTensor {
    static constexpr int kChannels = 8;
    static const std::array<const char*, kChannels> channel_names;

    Dims dims;
    std::array<Volume3D, kChannels> channels;

    const Volume3D& channel(const std::string& name) const;
};

// Builds the conditioning tensor; im channels are recomputed as
// img * (1 - mask) so the masked-image contract always holds.
ConditionTensor assemble_condition(const LongitudinalSample& sample,
                                   const Volume3D& x_t1, const Volume3D& x_t2);

// Sorted linear indices of mask==1 voxels plus bounding box and count.
struct RegionIndexSet {
    std::vector<std::size_t> indices;
    std::size_t count = 0;
    std::array<int, 3> bbox_min = {0, 0, 0};
    std::array<int, 3> bbox_max = {-1, -1, -1}; // max < min means empty
    bool empty() const { return count == 0; }
};

RegionIndexSet masked_region_indices(const Volume3D& mask);

// Dataset manifest: JSON file listing the seven volumes per subject.
struct ManifestEntry {
    std::string id;
    std::uint64_t seed = 0;
    std::string img_t1, img_t2, lesion_t1, lesion_t2, csf_t1, csf_t2, brain_mask;
};

struct DatasetManifest {
    std::filesystem::path root; // directory the relative paths resolve against
    Dims dims;
    std::vector<ManifestEntry> subjects;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
LongitudinalSample load_sample(const DatasetManifest& m, const ManifestEntry& entry);

} // namespace p3drad
