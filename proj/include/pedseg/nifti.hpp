#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer. Only
// scalar 3D images are supported; that is all the pipeline exchanges.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"

namespace pedseg::nifti {

enum class DataType : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
  Int8 = 256,
  UInt16 = 512,
  UInt32 = 768,
};

struct Header {
  Shape3 shape;
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();
  DataType datatype = DataType::Float32;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
};

namespace detail {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

inline int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::UInt8:
    case DataType::Int8: return 1;
    case DataType::Int16:
    case DataType::UInt16: return 2;
    case DataType::Int32:
    case DataType::UInt32:
    case DataType::Float32: return 4;
    case DataType::Float64: return 8;
  }
  return 0;
}

template <class T>
constexpr DataType datatype_of() {
  if constexpr (std::is_same_v<T, std::uint8_t>) return DataType::UInt8;
  else if constexpr (std::is_same_v<T, std::int8_t>) return DataType::Int8;
  else if constexpr (std::is_same_v<T, std::int16_t>) return DataType::Int16;
  else if constexpr (std::is_same_v<T, std::uint16_t>) return DataType::UInt16;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DataType::Int32;
  else if constexpr (std::is_same_v<T, std::uint32_t>) return DataType::UInt32;
  else if constexpr (std::is_same_v<T, float>) return DataType::Float32;
  else if constexpr (std::is_same_v<T, double>) return DataType::Float64;
  else static_assert(sizeof(T) == 0, "unsupported voxel type");
}

template <class T>
T get(const std::vector<unsigned char>& buf, std::size_t off, bool swap) {
  T v;
  unsigned char tmp[sizeof(T)];
  std::memcpy(tmp, buf.data() + off, sizeof(T));
  if (swap) std::reverse(tmp, tmp + sizeof(T));
  std::memcpy(&v, tmp, sizeof(T));
  return v;
}

template <class T>
void put(std::vector<unsigned char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

inline bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

class GzFile {
 public:
  GzFile(const std::filesystem::path& path, const char* mode) : f_(gzopen(path.string().c_str(), mode)) {}
  ~GzFile() {
    if (f_) gzclose(f_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
  explicit operator bool() const { return f_ != nullptr; }
  gzFile get() const { return f_; }
  int close() {
    int rc = gzclose(f_);
    f_ = nullptr;
    return rc;
  }

 private:
  gzFile f_;
};

inline void read_exact(gzFile f, void* dst, std::size_t n, const std::string& path) {
  auto* out = static_cast<unsigned char*>(dst);
  while (n > 0) {
    unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
    int got = gzread(f, out, chunk);
    if (got <= 0) throw Error(ErrorCode::CorruptFile, "truncated volume file " + path);
    out += got;
    n -= static_cast<std::size_t>(got);
  }
}

// Standard quaternion-to-matrix conversion for qform_code > 0.
inline Affine qform_affine(float b, float c, float d, float qx, float qy, float qz, const float* pixdim) {
  double a = 1.0 - (double(b) * b + double(c) * c + double(d) * d);
  if (a < 1e-7) {
    a = 1.0 / std::sqrt(double(b) * b + double(c) * c + double(d) * d);
    b = static_cast<float>(b * a);
    c = static_cast<float>(c * a);
    d = static_cast<float>(d * a);
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  double xd = pixdim[1] > 0 ? pixdim[1] : 1.0;
  double yd = pixdim[2] > 0 ? pixdim[2] : 1.0;
  double zd = pixdim[3] > 0 ? pixdim[3] : 1.0;
  double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
  zd *= qfac;
  Affine r{};
  r[0] = {(a * a + b * b - c * c - d * d) * xd, 2.0 * (b * c - a * d) * yd, 2.0 * (b * d + a * c) * zd, qx};
  r[1] = {2.0 * (b * c + a * d) * xd, (a * a + c * c - b * b - d * d) * yd, 2.0 * (c * d - a * b) * zd, qy};
  r[2] = {2.0 * (b * d - a * c) * xd, 2.0 * (c * d + a * b) * yd, (a * a + d * d - c * c - b * b) * zd, qz};
  r[3] = {0.0, 0.0, 0.0, 1.0};
  return r;
}

template <class Src, class Dst>
void convert(const unsigned char* raw, std::size_t n, bool swap, std::vector<Dst>& out) {
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char tmp[sizeof(Src)];
    std::memcpy(tmp, raw + i * sizeof(Src), sizeof(Src));
    if (swap) std::reverse(tmp, tmp + sizeof(Src));
    Src v;
    std::memcpy(&v, tmp, sizeof(Src));
    out[i] = static_cast<Dst>(v);
  }
}

}  // namespace detail

/// Reads a header and the voxel payload converted to T. Scaling
/// (scl_slope/scl_inter) is applied when the slope is nonzero and not 1.
template <class T>
Grid<T> read(const std::filesystem::path& path, Header* header_out = nullptr) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
  detail::GzFile f(path, "rb");
  if (!f) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());

  std::vector<unsigned char> hdr(detail::kHeaderSize);
  detail::read_exact(f.get(), hdr.data(), hdr.size(), path.string());
  bool swap = false;
  if (detail::get<std::int32_t>(hdr, 0, false) != 348) {
    if (detail::get<std::int32_t>(hdr, 0, true) != 348)
      throw Error(ErrorCode::CorruptFile, "not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0)
    throw Error(ErrorCode::CorruptFile, "only single-file NIfTI-1 is supported: " + path.string());

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = detail::get<std::int16_t>(hdr, 40 + 2 * i, swap);
  if (dim[0] < 3 || dim[0] > 7) throw Error(ErrorCode::CorruptFile, "bad dimensionality in " + path.string());
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw Error(ErrorCode::ShapeMismatch, "expected a 3D scalar image: " + path.string());

  Header h;
  h.shape = {dim[1], dim[2], dim[3]};
  if (h.shape.nx <= 0 || h.shape.ny <= 0 || h.shape.nz <= 0)
    throw Error(ErrorCode::CorruptFile, "non-positive extent in " + path.string());
  h.datatype = static_cast<DataType>(detail::get<std::int16_t>(hdr, 70, swap));
  if (detail::bytes_per_voxel(h.datatype) == 0)
    throw Error(ErrorCode::CorruptFile, "unsupported datatype in " + path.string());

  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = detail::get<float>(hdr, 76 + 4 * i, swap);
  for (int i = 0; i < 3; ++i) h.spacing[i] = pixdim[i + 1] > 0 ? pixdim[i + 1] : 1.0;
  float vox_offset = detail::get<float>(hdr, 108, swap);
  h.scl_slope = detail::get<float>(hdr, 112, swap);
  h.scl_inter = detail::get<float>(hdr, 116, swap);

  auto qform_code = detail::get<std::int16_t>(hdr, 252, swap);
  auto sform_code = detail::get<std::int16_t>(hdr, 254, swap);
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) h.affine[r][c] = detail::get<float>(hdr, 280 + 16 * r + 4 * c, swap);
    h.affine[3] = {0.0, 0.0, 0.0, 1.0};
  } else if (qform_code > 0) {
    float q[6];
    for (int i = 0; i < 6; ++i) q[i] = detail::get<float>(hdr, 256 + 4 * i, swap);
    h.affine = detail::qform_affine(q[0], q[1], q[2], q[3], q[4], q[5], pixdim);
  } else {
    h.affine = identity_affine(h.spacing);
  }

  std::size_t skip = vox_offset > detail::kHeaderSize ? static_cast<std::size_t>(vox_offset) - detail::kHeaderSize : 4;
  std::vector<unsigned char> pad(skip);
  detail::read_exact(f.get(), pad.data(), skip, path.string());

  const std::size_t n = h.shape.voxels();
  std::vector<unsigned char> raw(n * detail::bytes_per_voxel(h.datatype));
  detail::read_exact(f.get(), raw.data(), raw.size(), path.string());

  std::vector<T> out;
  switch (h.datatype) {
    case DataType::UInt8: detail::convert<std::uint8_t>(raw.data(), n, swap, out); break;
    case DataType::Int8: detail::convert<std::int8_t>(raw.data(), n, swap, out); break;
    case DataType::Int16: detail::convert<std::int16_t>(raw.data(), n, swap, out); break;
    case DataType::UInt16: detail::convert<std::uint16_t>(raw.data(), n, swap, out); break;
    case DataType::Int32: detail::convert<std::int32_t>(raw.data(), n, swap, out); break;
    case DataType::UInt32: detail::convert<std::uint32_t>(raw.data(), n, swap, out); break;
    case DataType::Float32: detail::convert<float>(raw.data(), n, swap, out); break;
    case DataType::Float64: detail::convert<double>(raw.data(), n, swap, out); break;
  }
  if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    for (auto& v : out) v = static_cast<T>(static_cast<double>(v) * h.scl_slope + h.scl_inter);
  }
  if (header_out) *header_out = h;
  return Grid<T>(h.shape, std::move(out));
}

inline Header read_header(const std::filesystem::path& path) {
  Header h;
  // Payload is tiny for the volumes we handle; decoding it keeps one code path.
  (void)read<float>(path, &h);
  return h;
}

/// Writes T voxels with the given geometry. A ".gz" suffix selects gzip
/// compression. The gzip stream carries no timestamp, so identical inputs
/// produce identical bytes.
template <class T>
void write(const std::filesystem::path& path, const Grid<T>& grid, const Spacing& spacing, const Affine& affine) {
  std::vector<unsigned char> hdr(detail::kVoxOffset, 0);
  detail::put<std::int32_t>(hdr, 0, 348);
  hdr[38] = 'r';  // regular
  const Shape3& s = grid.shape();
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(s.nx), static_cast<std::int16_t>(s.ny),
                               static_cast<std::int16_t>(s.nz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) detail::put<std::int16_t>(hdr, 40 + 2 * i, dim[i]);
  constexpr DataType dt = detail::datatype_of<T>();
  detail::put<std::int16_t>(hdr, 70, static_cast<std::int16_t>(dt));
  detail::put<std::int16_t>(hdr, 72, static_cast<std::int16_t>(8 * sizeof(T)));
  const float pixdim[8] = {1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                           static_cast<float>(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) detail::put<float>(hdr, 76 + 4 * i, pixdim[i]);
  detail::put<float>(hdr, 108, static_cast<float>(detail::kVoxOffset));
  detail::put<float>(hdr, 112, 1.0f);
  detail::put<float>(hdr, 116, 0.0f);
  hdr[123] = 2;  // xyzt_units: mm
  detail::put<std::int16_t>(hdr, 252, 0);
  detail::put<std::int16_t>(hdr, 254, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) detail::put<float>(hdr, 280 + 16 * r + 4 * c, static_cast<float>(affine[r][c]));
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool gz = detail::is_gz(path);
  detail::GzFile f(path, gz ? "wb6" : "wbT");
  if (!f) throw Error(ErrorCode::MissingFile, "cannot create " + path.string());
  auto write_all = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    while (n > 0) {
      unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      int put = gzwrite(f.get(), p, chunk);
      if (put <= 0) throw Error(ErrorCode::CorruptFile, "write failed for " + path.string());
      p += put;
      n -= static_cast<std::size_t>(put);
    }
  };
  write_all(hdr.data(), hdr.size());
  write_all(grid.values().data(), grid.size() * sizeof(T));
  if (f.close() != Z_OK) throw Error(ErrorCode::CorruptFile, "close failed for " + path.string());
}

}  // namespace pedseg::nifti
