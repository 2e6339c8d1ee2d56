#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rvox/error.hpp"
#include "rvox/volume.hpp"

namespace rvox {

namespace {

// Byte offsets per the public NIfTI-1 header layout (348-byte header).
constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kOffSizeofHdr = 0;    // int32
constexpr std::size_t kOffDim = 40;         // int16[8]
constexpr std::size_t kOffDatatype = 70;    // int16
constexpr std::size_t kOffBitpix = 72;      // int16
constexpr std::size_t kOffPixdim = 76;      // float[8]
constexpr std::size_t kOffVoxOffset = 108;  // float
constexpr std::size_t kOffSclSlope = 112;   // float
constexpr std::size_t kOffSclInter = 116;   // float
constexpr std::size_t kOffMagic = 344;      // char[4]

enum DtypeCode : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;  // host is little-endian (checked below)
}

int dtype_bytes(std::int16_t code) {
  switch (code) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

float decode_voxel(const char* p, std::int16_t code) {
  switch (code) {
    case kUint8: {
      std::uint8_t v;
      std::memcpy(&v, p, 1);
      return float(v);
    }
    case kInt16: {
      std::int16_t v;
      std::memcpy(&v, p, 2);
      return float(v);
    }
    case kInt32: {
      std::int32_t v;
      std::memcpy(&v, p, 4);
      return float(v);
    }
    case kFloat32: {
      float v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case kFloat64: {
      double v;
      std::memcpy(&v, p, 8);
      return float(v);
    }
    default: return 0.f;
  }
}

}  // namespace

Volume load_nifti1(const std::string& path, std::array<double, 3>* spacing_out) {
  static_assert(std::endian::native == std::endian::little,
                "reader assumes a little-endian host");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::size_t file_size = std::size_t(in.tellg());
  in.seekg(0, std::ios::beg);
  if (file_size < kHeaderSize)
    throw DomainError("not NIfTI-1: " + path + " is smaller than the header");
  std::vector<char> buf(file_size);
  in.read(buf.data(), std::streamsize(file_size));
  if (!in) throw IoError("cannot read " + path);

  char magic[4];
  std::memcpy(magic, buf.data() + kOffMagic, 4);
  if (std::memcmp(magic, "n+1\0", 4) != 0)
    throw DomainError("not NIfTI-1: bad magic in " + path);
  if (read_le<std::int32_t>(buf, kOffSizeofHdr) != 348)
    throw DomainError("corrupt file: sizeof_hdr != 348 in " + path +
                      " (byte-swapped files are not supported)");

  std::int16_t dim[8];
  std::memcpy(dim, buf.data() + kOffDim, sizeof(dim));
  if (dim[0] != 3 && dim[0] != 4)
    throw DomainError("corrupt file: dim[0] = " + std::to_string(dim[0]) +
                      ", expected 3 or 4");
  const int w = dim[1], h = dim[2], l = dim[3];
  const int c = dim[0] == 4 ? dim[4] : 1;
  if (w < 1 || h < 1 || l < 1 || c < 1)
    throw DomainError("corrupt file: non-positive dim in " + path);

  const std::int16_t datatype = read_le<std::int16_t>(buf, kOffDatatype);
  const int vbytes = dtype_bytes(datatype);
  if (vbytes == 0)
    throw DomainError("unsupported dtype: datatype code " +
                      std::to_string(datatype));
  const std::int16_t bitpix = read_le<std::int16_t>(buf, kOffBitpix);
  if (bitpix != vbytes * 8)
    throw DomainError("corrupt file: bitpix " + std::to_string(bitpix) +
                      " does not match datatype");

  const float vox_offset_f = read_le<float>(buf, kOffVoxOffset);
  if (!(vox_offset_f >= float(kHeaderSize)))
    throw DomainError("corrupt file: vox_offset " +
                      std::to_string(vox_offset_f));
  const std::size_t vox_offset = std::size_t(vox_offset_f);

  const std::size_t nvox = std::size_t(w) * h * l * c;
  if (vox_offset + nvox * vbytes > file_size)
    throw DomainError("corrupt file: truncated payload in " + path);

  const float slope = read_le<float>(buf, kOffSclSlope);
  const float inter = read_le<float>(buf, kOffSclInter);
  const bool scale = slope != 0.f;

  // NIfTI stores x fastest, then y, z, t; with t mapped to channels this is
  // exactly the Volume layout, so voxels decode in file order.
  Volume v(w, h, l, c);
  const char* p = buf.data() + vox_offset;
  for (std::size_t i = 0; i < nvox; ++i, p += vbytes) {
    float x = decode_voxel(p, datatype);
    if (scale) x = x * slope + inter;
    v.data[i] = x;
  }
  for (float x : v.data)
    if (!std::isfinite(x))
      throw DomainError("invalid data: non-finite voxel in " + path);

  if (spacing_out) {
    float pixdim[8];
    std::memcpy(pixdim, buf.data() + kOffPixdim, sizeof(pixdim));
    *spacing_out = {double(pixdim[1]), double(pixdim[2]), double(pixdim[3])};
  }

  return v;
}

}  // namespace rvox
