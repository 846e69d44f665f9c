#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <zlib.h>

#include "dcnseg/volume.hpp"

namespace dcnseg {
namespace detail {

// NIfTI-1 header, 348 bytes. Only the fields this project uses are set;
// the rest stay zero. Little-endian files only.
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

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path, const char* mode) {
    f = gzopen(path.c_str(), mode);
    if (!f) throw IoError("cannot open " + path);
  }
  ~GzFile() {
    if (f) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
};

inline void gz_write_all(gzFile f, const void* buf, size_t n, const std::string& path) {
  const char* p = static_cast<const char*>(buf);
  while (n > 0) {
    unsigned chunk = n > (1u << 30) ? (1u << 30) : unsigned(n);
    int w = gzwrite(f, p, chunk);
    if (w <= 0) throw IoError("write failed: " + path);
    p += w;
    n -= size_t(w);
  }
}

inline void gz_read_all(gzFile f, void* buf, size_t n, const std::string& path) {
  char* p = static_cast<char*>(buf);
  while (n > 0) {
    unsigned chunk = n > (1u << 30) ? (1u << 30) : unsigned(n);
    int r = gzread(f, p, chunk);
    if (r <= 0) throw IoError("truncated NIfTI file: " + path);
    p += r;
    n -= size_t(r);
  }
}

inline Nifti1Header make_header(Vec3i shape, int nt, double spacing, std::int16_t dtype,
                                std::int16_t bitpix) {
  Nifti1Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = nt > 1 ? 4 : 3;
  h.dim[1] = std::int16_t(shape.x);
  h.dim[2] = std::int16_t(shape.y);
  h.dim[3] = std::int16_t(shape.z);
  h.dim[4] = std::int16_t(nt > 1 ? nt : 1);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  h.datatype = dtype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.f;
  h.pixdim[1] = h.pixdim[2] = h.pixdim[3] = float(spacing);
  h.pixdim[4] = 1.f;
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.xyzt_units = 2;  // mm
  std::strncpy(h.descrip, "dcnseg", sizeof(h.descrip) - 1);
  h.sform_code = 1;
  h.srow_x[0] = float(spacing);
  h.srow_y[1] = float(spacing);
  h.srow_z[2] = float(spacing);
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

inline void write_blob(const std::string& path, const Nifti1Header& h, const void* data,
                       size_t bytes) {
  GzFile gz(path, "wb");
  gz_write_all(gz.f, &h, sizeof(h), path);
  const char ext[4] = {0, 0, 0, 0};
  gz_write_all(gz.f, ext, 4, path);
  gz_write_all(gz.f, data, bytes, path);
}

}  // namespace detail

inline void write_nifti(const std::string& path, const Volume3D& v) {
  auto h = detail::make_header(v.shape, 1, v.spacing_mm, detail::kDtFloat32, 32);
  detail::write_blob(path, h, v.data.data(), v.data.size() * sizeof(float));
}

inline void write_nifti(const std::string& path, const LabelMap& m) {
  auto h = detail::make_header(m.shape, 1, m.spacing_mm, detail::kDtUint8, 8);
  detail::write_blob(path, h, m.data.data(), m.data.size());
}

/// 4D stack of equally shaped channels; used by the feature-dump debug path.
inline void write_nifti_stack(const std::string& path, const std::vector<Volume3D>& channels) {
  if (channels.empty()) throw IoError("empty channel stack: " + path);
  const Vec3i s = channels[0].shape;
  auto h = detail::make_header(s, int(channels.size()), channels[0].spacing_mm,
                               detail::kDtFloat32, 32);
  std::vector<float> buf;
  buf.reserve(size_t(s.count()) * channels.size());
  for (const auto& c : channels) {
    if (c.shape != s) throw IoError("inconsistent channel shapes: " + path);
    buf.insert(buf.end(), c.data.begin(), c.data.end());
  }
  detail::write_blob(path, h, buf.data(), buf.size() * sizeof(float));
}

namespace detail {

inline Nifti1Header read_header(gzFile f, const std::string& path) {
  Nifti1Header h;
  gz_read_all(f, &h, sizeof(h), path);
  if (h.sizeof_hdr != 348) throw IoError("not a little-endian NIfTI-1 file: " + path);
  if (std::memcmp(h.magic, "n+1", 3) != 0) throw IoError("unsupported NIfTI magic: " + path);
  if (h.dim[0] != 3 && !(h.dim[0] == 4 && h.dim[4] == 1))
    throw IoError("only 3D NIfTI volumes are supported: " + path);
  long skip = long(h.vox_offset) - long(sizeof(h));
  if (skip < 0) throw IoError("bad vox_offset: " + path);
  std::vector<char> pad(static_cast<size_t>(skip));
  if (skip > 0) gz_read_all(f, pad.data(), size_t(skip), path);
  return h;
}

template <class Src, class Dst>
void convert_voxels(gzFile f, std::int64_t n, Dst* out, const std::string& path, float slope,
                    float inter) {
  std::vector<Src> raw;
  raw.resize(size_t(n));
  gz_read_all(f, raw.data(), size_t(n) * sizeof(Src), path);
  for (std::int64_t i = 0; i < n; ++i)
    out[size_t(i)] = Dst(double(raw[size_t(i)]) * slope + inter);
}

}  // namespace detail

inline Volume3D read_nifti_volume(const std::string& path) {
  detail::GzFile gz(path, "rb");
  auto h = detail::read_header(gz.f, path);
  Volume3D v({h.dim[1], h.dim[2], h.dim[3]}, double(h.pixdim[1]));
  const float slope = h.scl_slope == 0.f ? 1.f : h.scl_slope;
  const std::int64_t n = v.voxels();
  switch (h.datatype) {
    case detail::kDtFloat32:
      detail::convert_voxels<float>(gz.f, n, v.data.data(), path, slope, h.scl_inter);
      break;
    case detail::kDtFloat64:
      detail::convert_voxels<double>(gz.f, n, v.data.data(), path, slope, h.scl_inter);
      break;
    case detail::kDtInt16:
      detail::convert_voxels<std::int16_t>(gz.f, n, v.data.data(), path, slope, h.scl_inter);
      break;
    case detail::kDtUint8:
      detail::convert_voxels<std::uint8_t>(gz.f, n, v.data.data(), path, slope, h.scl_inter);
      break;
    default:
      throw IoError("unsupported NIfTI datatype " + std::to_string(h.datatype) + ": " + path);
  }
  return v;
}

inline LabelMap read_nifti_labels(const std::string& path) {
  detail::GzFile gz(path, "rb");
  auto h = detail::read_header(gz.f, path);
  LabelMap m({h.dim[1], h.dim[2], h.dim[3]}, double(h.pixdim[1]));
  const std::int64_t n = m.voxels();
  switch (h.datatype) {
    case detail::kDtUint8:
      detail::gz_read_all(gz.f, m.data.data(), size_t(n), path);
      break;
    case detail::kDtInt16: {
      std::vector<std::int16_t> raw(static_cast<size_t>(n));
      detail::gz_read_all(gz.f, raw.data(), size_t(n) * 2, path);
      for (std::int64_t i = 0; i < n; ++i) m.data[size_t(i)] = std::uint8_t(raw[size_t(i)]);
      break;
    }
    case detail::kDtFloat32: {
      std::vector<float> raw(static_cast<size_t>(n));
      detail::gz_read_all(gz.f, raw.data(), size_t(n) * 4, path);
      for (std::int64_t i = 0; i < n; ++i)
        m.data[size_t(i)] = std::uint8_t(raw[size_t(i)] + 0.5f);
      break;
    }
    default:
      throw IoError("unsupported label datatype " + std::to_string(h.datatype) + ": " + path);
  }
  return m;
}

}  // namespace dcnseg
