#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// Strict subset of NIfTI-1 single-file (.nii / .nii.gz):
//   datatype 2 (uint8) and 16 (float32) only, 348-byte header, data at
//   vox_offset. The reader accepts either endianness; the writer always
//   emits little-endian.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;   // must be 348
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
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must pack to 348 bytes");
static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");

constexpr std::int16_t kNiftiTypeUint8 = 2;
constexpr std::int16_t kNiftiTypeFloat32 = 16;

namespace detail {

template <class T>
void byte_swap(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

inline void swap_header(Nifti1Header& h) {
  byte_swap(h.sizeof_hdr);
  byte_swap(h.extents);
  byte_swap(h.session_error);
  for (auto& d : h.dim) byte_swap(d);
  byte_swap(h.intent_p1);
  byte_swap(h.intent_p2);
  byte_swap(h.intent_p3);
  byte_swap(h.intent_code);
  byte_swap(h.datatype);
  byte_swap(h.bitpix);
  byte_swap(h.slice_start);
  for (auto& p : h.pixdim) byte_swap(p);
  byte_swap(h.vox_offset);
  byte_swap(h.scl_slope);
  byte_swap(h.scl_inter);
  byte_swap(h.slice_end);
  byte_swap(h.cal_max);
  byte_swap(h.cal_min);
  byte_swap(h.slice_duration);
  byte_swap(h.toffset);
  byte_swap(h.glmax);
  byte_swap(h.glmin);
  byte_swap(h.qform_code);
  byte_swap(h.sform_code);
  byte_swap(h.quatern_b);
  byte_swap(h.quatern_c);
  byte_swap(h.quatern_d);
  byte_swap(h.qoffset_x);
  byte_swap(h.qoffset_y);
  byte_swap(h.qoffset_z);
  for (auto& v : h.srow_x) byte_swap(v);
  for (auto& v : h.srow_y) byte_swap(v);
  for (auto& v : h.srow_z) byte_swap(v);
}

class GzReader {
 public:
  explicit GzReader(const std::string& path) : f_(gzopen(path.c_str(), "rb")) {
    if (!f_) throw missing_artifact("cannot open file: " + path);
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  // Reads exactly n bytes or throws.
  void read(void* dst, std::size_t n, const char* what) {
    const int got = gzread(f_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n)
      throw io_error(std::string("truncated file while reading ") + what);
  }

  void skip(std::size_t n) {
    char buf[4096];
    while (n > 0) {
      const std::size_t chunk = std::min(n, sizeof(buf));
      read(buf, chunk, "padding before data section");
      n -= chunk;
    }
  }

 private:
  gzFile f_;
};

inline bool has_gz_suffix(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

}  // namespace detail

// A parsed volume plus the raw header it came from (kept so orientation
// fields can be copied onto derived outputs).
struct NiftiVolume {
  Volume volume;
  Nifti1Header header;
};

inline NiftiVolume read_volume_full(const std::string& path) {
  detail::GzReader in(path);
  Nifti1Header h{};
  in.read(&h, sizeof(h), "header");

  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    detail::swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw io_error("bad sizeof_hdr (expected 348): " + path);
  }
  if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1' && h.magic[3] == '\0'))
    throw io_error("bad magic (expected \"n+1\"): " + path);
  if (h.dim[0] < 1 || h.dim[0] > 7) throw io_error("bad dim[0]: " + path);
  Index3 dims{};
  for (int a = 0; a < 3; ++a) {
    const std::int16_t d = (a < h.dim[0]) ? h.dim[a + 1] : 1;
    if (d < 1) throw io_error("bad dim[" + std::to_string(a + 1) + "]: " + path);
    dims[a] = d;
  }
  for (int a = 4; a <= h.dim[0]; ++a)
    if (h.dim[a] > 1) throw io_error("bad dim: more than 3 non-trivial dimensions: " + path);
  if (h.datatype != kNiftiTypeUint8 && h.datatype != kNiftiTypeFloat32)
    throw io_error("unsupported datatype " + std::to_string(h.datatype) + ": " + path);
  const int expected_bitpix = (h.datatype == kNiftiTypeUint8) ? 8 : 32;
  if (h.bitpix != expected_bitpix) throw io_error("bad bitpix (does not match datatype): " + path);
  if (h.vox_offset < 348.0f) throw io_error("bad vox_offset (< 348): " + path);

  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    const double p = std::abs(static_cast<double>(h.pixdim[a + 1]));
    if (p == 0.0) {
      std::fprintf(stderr, "warning: %s: pixdim[%d] is zero, coercing spacing to 1.0\n", path.c_str(), a + 1);
      spacing[a] = 1.0;
    } else {
      spacing[a] = p;
    }
  }

  const double slope = (h.scl_slope == 0.0f) ? 1.0 : static_cast<double>(h.scl_slope);
  const double inter = (h.scl_slope == 0.0f) ? 0.0 : static_cast<double>(h.scl_inter);

  in.skip(static_cast<std::size_t>(h.vox_offset) - sizeof(Nifti1Header));

  const std::size_t n = voxel_count(dims);
  std::vector<double> values(n);
  if (h.datatype == kNiftiTypeUint8) {
    std::vector<std::uint8_t> raw(n);
    in.read(raw.data(), n, "data section");
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<double>(raw[i]) * slope + inter;
  } else {
    std::vector<float> raw(n);
    in.read(raw.data(), n * sizeof(float), "data section");
    if (swapped)
      for (auto& f : raw) detail::byte_swap(f);
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<double>(raw[i]) * slope + inter;
  }
  return NiftiVolume{Volume(dims, spacing, std::move(values)), h};
}

inline Volume read_volume(const std::string& path) { return read_volume_full(path).volume; }

// Reads a file that must contain a binary mask ({0,1} after rescale).
inline LabelMask read_mask(const std::string& path) {
  const Volume v = read_volume(path);
  std::vector<std::uint8_t> bits(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (v.data[i] == 0.0)
      bits[i] = 0;
    else if (v.data[i] == 1.0)
      bits[i] = 1;
    else
      throw io_error("mask file contains values other than 0/1: " + path);
  }
  return LabelMask(v.dims, v.spacing, std::move(bits));
}

namespace detail {

inline Nifti1Header make_header(const Index3& dims, const Spacing3& spacing, std::int16_t datatype,
                                const Nifti1Header* reference) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(dims[a]);
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = datatype;
  h.bitpix = (datatype == kNiftiTypeUint8) ? 8 : 32;
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(spacing[a]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  if (reference) {
    // Orientation is passed through untouched; the method itself is
    // orientation-agnostic.
    h.qform_code = reference->qform_code;
    h.sform_code = reference->sform_code;
    h.quatern_b = reference->quatern_b;
    h.quatern_c = reference->quatern_c;
    h.quatern_d = reference->quatern_d;
    h.qoffset_x = reference->qoffset_x;
    h.qoffset_y = reference->qoffset_y;
    h.qoffset_z = reference->qoffset_z;
    std::memcpy(h.srow_x, reference->srow_x, sizeof(h.srow_x));
    std::memcpy(h.srow_y, reference->srow_y, sizeof(h.srow_y));
    std::memcpy(h.srow_z, reference->srow_z, sizeof(h.srow_z));
  }
  h.magic[0] = 'n';
  h.magic[1] = '+';
  h.magic[2] = '1';
  h.magic[3] = '\0';
  return h;
}

inline void write_nifti_bytes(const std::string& path, const Nifti1Header& h, const void* payload,
                              std::size_t payload_bytes) {
  const char pad[4] = {0, 0, 0, 0};
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open for writing: " + path);
    bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h));
    ok = ok && gzwrite(f, pad, sizeof(pad)) == static_cast<int>(sizeof(pad));
    ok = ok && gzwrite(f, payload, static_cast<unsigned>(payload_bytes)) == static_cast<int>(payload_bytes);
    const bool closed = gzclose(f) == Z_OK;
    if (!ok || !closed) throw io_error("write failed: " + path);
  } else {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open for writing: " + path);
    bool ok = std::fwrite(&h, 1, sizeof(h), f) == sizeof(h);
    ok = ok && std::fwrite(pad, 1, sizeof(pad), f) == sizeof(pad);
    ok = ok && std::fwrite(payload, 1, payload_bytes, f) == payload_bytes;
    const bool closed = std::fclose(f) == 0;
    if (!ok || !closed) throw io_error("write failed: " + path);
  }
}

}  // namespace detail

// Writes intensities/probabilities as float32 (datatype 16).
inline void write_volume(const Volume& v, const std::string& path, const Nifti1Header* reference = nullptr) {
  const Nifti1Header h = detail::make_header(v.dims, v.spacing, kNiftiTypeFloat32, reference);
  std::vector<float> raw(v.data.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(v.data[i]);
  detail::write_nifti_bytes(path, h, raw.data(), raw.size() * sizeof(float));
}

// Writes a binary mask as uint8 (datatype 2).
inline void write_mask(const LabelMask& m, const std::string& path, const Nifti1Header* reference = nullptr) {
  const Nifti1Header h = detail::make_header(m.dims, m.spacing, kNiftiTypeUint8, reference);
  detail::write_nifti_bytes(path, h, m.data.data(), m.data.size());
}

}  // namespace imbseg
