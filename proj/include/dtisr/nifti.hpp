#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dtisr/core.hpp"
#include "dtisr/volume.hpp"

namespace dtisr {

// Single-file, uncompressed NIfTI-1 (.nii). Supported read datatypes are
// int16, float32 and float64; the writer always emits float32. Byte order is
// auto-detected from sizeof_hdr. NIfTI-2, gzip streams and .hdr/.img pairs
// are out of scope.
namespace nifti {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

namespace detail {

inline std::uint16_t swap16(std::uint16_t v) { return std::uint16_t((v >> 8) | (v << 8)); }
inline std::uint32_t swap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0x0000ff00u) | ((v << 8) & 0x00ff0000u) | (v << 24);
}

struct Cursor {
    const unsigned char* bytes;
    bool swapped;

    std::int16_t i16(int off) const {
        std::uint16_t v;
        std::memcpy(&v, bytes + off, 2);
        if (swapped) v = swap16(v);
        std::int16_t out;
        std::memcpy(&out, &v, 2);
        return out;
    }
    std::int32_t i32(int off) const {
        std::uint32_t v;
        std::memcpy(&v, bytes + off, 4);
        if (swapped) v = swap32(v);
        std::int32_t out;
        std::memcpy(&out, &v, 4);
        return out;
    }
    float f32(int off) const {
        std::uint32_t v;
        std::memcpy(&v, bytes + off, 4);
        if (swapped) v = swap32(v);
        float out;
        std::memcpy(&out, &v, 4);
        return out;
    }
};

struct Writer {
    std::vector<unsigned char> bytes = std::vector<unsigned char>(kHeaderSize, 0);

    void put_i16(int off, std::int16_t v) { std::memcpy(bytes.data() + off, &v, 2); }
    void put_i32(int off, std::int32_t v) { std::memcpy(bytes.data() + off, &v, 4); }
    void put_f32(int off, float v) { std::memcpy(bytes.data() + off, &v, 4); }
    void put_str(int off, const std::string& s, int maxlen) {
        const int n = std::min<int>(int(s.size()), maxlen - 1);
        std::memcpy(bytes.data() + off, s.data(), std::size_t(n));
    }
};

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

}  // namespace detail

struct ReadResult {
    Volume volume;
    std::string descrip;
};

inline ReadResult read_detailed(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open NIfTI file: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() < std::size_t(kHeaderSize))
        throw CorruptionError("truncated NIfTI header: " + path);

    detail::Cursor hdr{raw.data(), false};
    std::int32_t sh = hdr.i32(0);
    if (sh != kHeaderSize) {
        hdr.swapped = true;
        sh = hdr.i32(0);
        if (sh != kHeaderSize) throw FormatError("not a NIfTI-1 file (bad sizeof_hdr): " + path);
    }
    if (!detail::host_is_little_endian()) hdr.swapped = !hdr.swapped;

    char magic[4];
    std::memcpy(magic, raw.data() + 344, 4);
    if (std::memcmp(magic, "ni1", 4) == 0)
        throw UnsupportedError("two-file NIfTI (.hdr/.img) is not supported: " + path);
    if (std::memcmp(magic, "n+1", 4) != 0)
        throw FormatError("bad NIfTI magic: " + path);

    const std::int16_t ndim = hdr.i16(40);
    if (ndim != 3 && ndim != 4)
        throw UnsupportedError("only 3D/4D NIfTI volumes are supported (dim[0]=" +
                               std::to_string(ndim) + "): " + path);
    std::array<int, 3> dims{};
    for (int a = 0; a < 3; ++a) {
        dims[std::size_t(a)] = hdr.i16(40 + 2 * (a + 1));
        if (dims[std::size_t(a)] < 1) throw FormatError("non-positive dimension in NIfTI header: " + path);
    }
    int channels = 1;
    if (ndim == 4) channels = std::max<int>(1, hdr.i16(48));

    const std::int16_t datatype = hdr.i16(70);
    if (datatype != kDtInt16 && datatype != kDtFloat32 && datatype != kDtFloat64)
        throw UnsupportedError("unsupported NIfTI datatype " + std::to_string(datatype) + ": " + path);
    const int bytes_per = datatype == kDtInt16 ? 2 : datatype == kDtFloat32 ? 4 : 8;

    const std::size_t nvalues =
        std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]) * std::size_t(channels);
    const auto vox_offset = std::size_t(hdr.f32(108));
    if (vox_offset < std::size_t(kHeaderSize)) throw FormatError("bad vox_offset: " + path);
    if (raw.size() < vox_offset + nvalues * std::size_t(bytes_per))
        throw CorruptionError("truncated NIfTI data payload: " + path);

    float slope = hdr.f32(112);
    float inter = hdr.f32(116);
    if (slope == 0.0f) {  // slope 0 means "no scaling" by convention
        slope = 1.0f;
        inter = 0.0f;
    }
    const bool apply_scale = !(slope == 1.0f && inter == 0.0f);

    VolumeGrid grid;
    grid.dims = dims;
    for (int a = 0; a < 3; ++a) {
        const float pd = hdr.f32(76 + 4 * (a + 1));
        grid.voxel_size[std::size_t(a)] = pd > 0.0f ? double(pd) : 1.0;
    }

    const std::int16_t qform_code = hdr.i16(252);
    const std::int16_t sform_code = hdr.i16(254);
    if (sform_code > 0) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                grid.affine[std::size_t(r)][std::size_t(c)] = double(hdr.f32(280 + 16 * r + 4 * c));
        grid.affine[3] = {0, 0, 0, 1};
    } else if (qform_code > 0) {
        const double b = hdr.f32(256), c = hdr.f32(260), d = hdr.f32(264);
        double a = 1.0 - (b * b + c * c + d * d);
        a = a < 0.0 ? 0.0 : std::sqrt(a);
        const double qfac = hdr.f32(76) < 0.0f ? -1.0 : 1.0;
        const Mat3 r{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                      {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                      {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c}}};
        for (int row = 0; row < 3; ++row) {
            grid.affine[std::size_t(row)][0] = r[std::size_t(row)][0] * grid.voxel_size[0];
            grid.affine[std::size_t(row)][1] = r[std::size_t(row)][1] * grid.voxel_size[1];
            grid.affine[std::size_t(row)][2] = r[std::size_t(row)][2] * grid.voxel_size[2] * qfac;
        }
        grid.affine[0][3] = hdr.f32(268);
        grid.affine[1][3] = hdr.f32(272);
        grid.affine[2][3] = hdr.f32(276);
        grid.affine[3] = {0, 0, 0, 1};
    } else {
        grid.affine = {{{grid.voxel_size[0], 0, 0, 0},
                        {0, grid.voxel_size[1], 0, 0},
                        {0, 0, grid.voxel_size[2], 0},
                        {0, 0, 0, 1}}};
    }

    Volume vol(grid, channels);
    const unsigned char* p = raw.data() + vox_offset;
    for (std::size_t i = 0; i < nvalues; ++i) {
        double v = 0.0;
        if (datatype == kDtInt16) {
            std::uint16_t u;
            std::memcpy(&u, p + 2 * i, 2);
            if (hdr.swapped) u = detail::swap16(u);
            std::int16_t s;
            std::memcpy(&s, &u, 2);
            v = double(s);
        } else if (datatype == kDtFloat32) {
            std::uint32_t u;
            std::memcpy(&u, p + 4 * i, 4);
            if (hdr.swapped) u = detail::swap32(u);
            float s;
            std::memcpy(&s, &u, 4);
            v = double(s);
        } else {
            std::uint64_t u;
            std::memcpy(&u, p + 8 * i, 8);
            if (hdr.swapped) {
                const std::uint64_t lo = detail::swap32(std::uint32_t(u >> 32));
                const std::uint64_t hi = std::uint64_t(detail::swap32(std::uint32_t(u & 0xffffffffu))) << 32;
                u = hi | lo;
            }
            double s;
            std::memcpy(&s, &u, 8);
            v = s;
        }
        if (apply_scale) v = v * double(slope) + double(inter);
        vol.data[i] = v;
    }

    ReadResult out;
    out.volume = std::move(vol);
    char descrip[81] = {0};
    std::memcpy(descrip, raw.data() + 148, 80);
    out.descrip = descrip;
    return out;
}

inline void write(const Volume& volume, const std::string& path, const std::string& descrip = "") {
    volume.validate();
    detail::Writer h;
    h.put_i32(0, kHeaderSize);
    const bool four_d = volume.channels > 1;
    h.put_i16(40, four_d ? 4 : 3);
    for (int a = 0; a < 3; ++a) h.put_i16(40 + 2 * (a + 1), std::int16_t(volume.grid.dims[std::size_t(a)]));
    h.put_i16(48, std::int16_t(four_d ? volume.channels : 1));
    for (int a = 5; a <= 7; ++a) h.put_i16(40 + 2 * a, 1);
    h.put_i16(70, kDtFloat32);
    h.put_i16(72, 32);
    h.put_f32(76, 1.0f);  // qfac
    for (int a = 0; a < 3; ++a) h.put_f32(76 + 4 * (a + 1), float(volume.grid.voxel_size[std::size_t(a)]));
    h.put_f32(92, 1.0f);
    h.put_f32(108, float(kVoxOffset));
    h.put_f32(112, 1.0f);  // scl_slope
    h.put_f32(116, 0.0f);  // scl_inter
    h.bytes[123] = 2;      // xyzt_units: millimetres
    h.put_str(148, descrip, 80);
    h.put_i16(252, 0);  // qform unused
    h.put_i16(254, 1);  // sform: scanner anatomical
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            h.put_f32(280 + 16 * r + 4 * c, float(volume.grid.affine[std::size_t(r)][std::size_t(c)]));
    std::memcpy(h.bytes.data() + 344, "n+1", 4);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    if (!detail::host_is_little_endian())
        throw UnsupportedError("NIfTI writer requires a little-endian host");
    f.write(reinterpret_cast<const char*>(h.bytes.data()), kHeaderSize);
    const std::uint32_t no_extension = 0;
    f.write(reinterpret_cast<const char*>(&no_extension), 4);
    std::vector<float> payload(volume.data.size());
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(volume.data[i]);
    f.write(reinterpret_cast<const char*>(payload.data()),
            std::streamsize(payload.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace nifti

inline Volume read_nifti(const std::string& path) { return nifti::read_detailed(path).volume; }

inline void write_nifti(const Volume& volume, const std::string& path, const std::string& descrip = "") {
    nifti::write(volume, path, descrip);
}

}  // namespace dtisr
