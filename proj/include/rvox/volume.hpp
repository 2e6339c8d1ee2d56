#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rvox {

// Multi-channel 3D voxel block with a fixed flat layout, x fastest:
//   index = ((c*L + z)*H + y)*W + x
// Values are float32; every public operation returns a fresh volume and
// leaves its input untouched.
struct Volume {
  int w = 0, h = 0, l = 0, c = 0;
  std::vector<float> data;

  Volume() = default;
  Volume(int w_, int h_, int l_, int c_ = 1, float fill = 0.f)
      : w(w_), h(h_), l(l_), c(c_),
        data(std::size_t(w_) * h_ * l_ * c_, fill) {}

  std::size_t voxels_per_channel() const { return std::size_t(w) * h * l; }
  std::size_t size() const { return voxels_per_channel() * std::size_t(c); }

  std::size_t index(int x, int y, int z, int chan = 0) const {
    return ((std::size_t(chan) * l + z) * h + y) * w + x;
  }
  float& at(int x, int y, int z, int chan = 0) {
    return data[index(x, y, z, chan)];
  }
  float at(int x, int y, int z, int chan = 0) const {
    return data[index(x, y, z, chan)];
  }

  std::array<int, 3> dims() const { return {w, h, l}; }

  bool operator==(const Volume&) const = default;
};

// Sidecar header for the raw on-disk format: <name>.json + <name>.f32.
struct VolumeHeader {
  std::array<int, 3> dims{0, 0, 0};
  int channels = 1;
  std::string dtype = "float32-le";
  std::string layout = "((c*L+z)*H+y)*W+x";
  std::optional<std::array<double, 3>> spacing;  // voxel size, mm
};

enum class NormalizeMode { MinMax01, ZScore };

VolumeHeader header_for(const Volume& v, std::optional<std::array<double, 3>> spacing = {});

Volume load_raw(const std::string& header_path, const std::string& data_path);
void save_raw(const Volume& v, const std::string& header_path, const std::string& data_path);
// Payload-only writer for datasets where several payloads share one header.
void save_raw_payload(const Volume& v, const std::string& data_path);

VolumeHeader load_header(const std::string& header_path);

// Uncompressed single-file NIfTI-1 (.nii), read-only. Supported voxel types:
// uint8, int16, int32, float32, float64; dim[0] in {3,4} with dim[4] mapped
// to channels. scl_slope/scl_inter are applied when scl_slope != 0. When
// spacing_out is given it receives pixdim[1..3].
Volume load_nifti1(const std::string& path,
                   std::array<double, 3>* spacing_out = nullptr);

// Dispatch on extension: ".nii" -> NIfTI-1, ".json" -> raw header with the
// payload at the same stem ".f32".
Volume load_volume(const std::string& path);

Volume crop(const Volume& v, std::array<int, 3> origin, std::array<int, 3> size);
std::pair<Volume, std::array<int, 3>> random_crop(const Volume& v,
                                                  std::array<int, 3> size,
                                                  std::uint64_t seed);
Volume normalize(const Volume& v, NormalizeMode mode);

NormalizeMode normalize_mode_from_string(const std::string& s);
std::string to_string(NormalizeMode mode);

}  // namespace rvox
