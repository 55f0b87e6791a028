#include "digest/nifti.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace digest {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_INT32 = 8;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr std::int16_t DT_FLOAT64 = 64;
constexpr std::int16_t DT_UINT16 = 512;

class GzFile {
public:
    GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {
        if (!f_) throw std::runtime_error("cannot open " + path);
    }
    ~GzFile() {
        if (f_) gzclose(f_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    void write(const void* buf, std::size_t n, const std::string& path) {
        if (gzwrite(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
            throw std::runtime_error("write failed: " + path);
    }
    void read(void* buf, std::size_t n, const std::string& path) {
        if (gzread(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
            throw std::runtime_error("truncated volume file: " + path);
    }

private:
    gzFile f_;
};

}  // namespace

void write_nifti(const std::string& path, const Tensor& volume,
                 const std::array<float, 3>& spacing) {
    if (volume.ndim() != 3)
        throw std::invalid_argument("write_nifti: expected [D,H,W], got " + volume.shape_str());
    const int d = volume.dim(0), h = volume.dim(1), w = volume.dim(2);

    Nifti1Header hdr{};
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = 3;
    hdr.dim[1] = static_cast<std::int16_t>(w);
    hdr.dim[2] = static_cast<std::int16_t>(h);
    hdr.dim[3] = static_cast<std::int16_t>(d);
    hdr.dim[4] = hdr.dim[5] = hdr.dim[6] = hdr.dim[7] = 1;
    hdr.datatype = DT_FLOAT32;
    hdr.bitpix = 32;
    hdr.pixdim[0] = 1.0f;
    hdr.pixdim[1] = spacing[2];
    hdr.pixdim[2] = spacing[1];
    hdr.pixdim[3] = spacing[0];
    hdr.vox_offset = 352.0f;
    hdr.scl_slope = 1.0f;
    hdr.scl_inter = 0.0f;
    hdr.xyzt_units = 2;  // NIFTI_UNITS_MM
    hdr.sform_code = 1;
    hdr.srow_x[0] = spacing[2];
    hdr.srow_y[1] = spacing[1];
    hdr.srow_z[2] = spacing[0];
    std::memcpy(hdr.magic, "n+1", 4);

    GzFile gz(path, "wb");
    gz.write(&hdr, sizeof(hdr), path);
    const char ext[4] = {0, 0, 0, 0};
    gz.write(ext, 4, path);
    gz.write(volume.data(), volume.numel() * sizeof(float), path);
}

Tensor read_nifti(const std::string& path, std::array<float, 3>* spacing) {
    GzFile gz(path, "rb");
    Nifti1Header hdr{};
    gz.read(&hdr, sizeof(hdr), path);
    if (hdr.sizeof_hdr != 348 ||
        (std::memcmp(hdr.magic, "n+1", 4) != 0 && std::memcmp(hdr.magic, "ni1", 4) != 0))
        throw std::runtime_error("not a NIfTI-1 file: " + path);
    if (hdr.dim[0] < 3) throw std::runtime_error("expected a 3D volume: " + path);
    for (int i = hdr.dim[0]; i > 3; --i)
        if (hdr.dim[i] > 1) throw std::runtime_error("expected a 3D volume: " + path);

    const int w = hdr.dim[1], h = hdr.dim[2], d = hdr.dim[3];
    const std::size_t n = static_cast<std::size_t>(w) * h * d;

    // Skip past any header extensions.
    const std::size_t offset = static_cast<std::size_t>(hdr.vox_offset);
    if (offset < sizeof(hdr)) throw std::runtime_error("bad vox_offset in " + path);
    std::vector<char> skip(offset - sizeof(hdr));
    if (!skip.empty()) gz.read(skip.data(), skip.size(), path);

    Tensor out({d, h, w});
    auto load = [&](auto sample) {
        using T = decltype(sample);
        std::vector<T> raw(n);
        gz.read(raw.data(), n * sizeof(T), path);
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(raw[i]);
    };
    switch (hdr.datatype) {
        case DT_UINT8: load(std::uint8_t{}); break;
        case DT_INT16: load(std::int16_t{}); break;
        case DT_UINT16: load(std::uint16_t{}); break;
        case DT_INT32: load(std::int32_t{}); break;
        case DT_FLOAT32: load(float{}); break;
        case DT_FLOAT64: load(double{}); break;
        default:
            throw std::runtime_error("unsupported NIfTI datatype " +
                                     std::to_string(hdr.datatype) + " in " + path);
    }
    if (hdr.scl_slope != 0.0f && (hdr.scl_slope != 1.0f || hdr.scl_inter != 0.0f))
        for (auto& v : out.vec()) v = v * hdr.scl_slope + hdr.scl_inter;
    if (spacing) *spacing = {hdr.pixdim[3], hdr.pixdim[2], hdr.pixdim[1]};
    return out;
}

}  // namespace digest
