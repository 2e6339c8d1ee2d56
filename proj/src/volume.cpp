#include "rvox/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "rvox/error.hpp"
#include "rvox/rng.hpp"

namespace rvox {

namespace {

using nlohmann::json;

constexpr const char* kDtype = "float32-le";
constexpr const char* kLayout = "((c*L+z)*H+y)*W+x";

void check_finite(const Volume& v, const std::string& what) {
  for (float x : v.data) {
    if (!std::isfinite(x))
      throw DomainError("invalid data: non-finite value in " + what);
  }
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  auto n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<std::size_t>(n));
  in.read(buf.data(), n);
  if (!in) throw IoError("cannot read " + path);
  return buf;
}

}  // namespace

VolumeHeader header_for(const Volume& v, std::optional<std::array<double, 3>> spacing) {
  VolumeHeader h;
  h.dims = v.dims();
  h.channels = v.c;
  h.spacing = spacing;
  return h;
}

VolumeHeader load_header(const std::string& header_path) {
  json j;
  try {
    j = json::parse(read_file(header_path));
  } catch (const json::exception& e) {
    throw IoError("bad header: " + header_path + ": " + e.what());
  }
  VolumeHeader h;
  try {
    if (!j.is_object()) throw DomainError("bad header: not an object");
    for (auto& [key, _] : j.items()) {
      if (key != "dims" && key != "channels" && key != "dtype" &&
          key != "layout" && key != "spacing")
        throw DomainError("bad header: unknown key '" + key + "'");
    }
    auto dims = j.at("dims");
    if (!dims.is_array() || dims.size() != 3)
      throw DomainError("bad header: dims must be [W,H,L]");
    for (int a = 0; a < 3; ++a) h.dims[a] = dims[a].get<int>();
    h.channels = j.at("channels").get<int>();
    h.dtype = j.at("dtype").get<std::string>();
    h.layout = j.at("layout").get<std::string>();
    if (j.contains("spacing")) {
      auto s = j["spacing"];
      if (!s.is_array() || s.size() != 3)
        throw DomainError("bad header: spacing must be [sx,sy,sz]");
      h.spacing = std::array<double, 3>{s[0].get<double>(), s[1].get<double>(),
                                        s[2].get<double>()};
    }
  } catch (const json::exception& e) {
    throw DomainError(std::string("bad header: ") + e.what());
  }
  if (h.dtype != kDtype) throw DomainError("bad header: dtype '" + h.dtype + "'");
  if (h.layout != kLayout)
    throw DomainError("bad header: layout '" + h.layout + "'");
  if (h.dims[0] < 1 || h.dims[1] < 1 || h.dims[2] < 1 || h.channels < 1)
    throw DomainError("bad header: dims and channels must be >= 1");
  return h;
}

Volume load_raw(const std::string& header_path, const std::string& data_path) {
  VolumeHeader h = load_header(header_path);
  std::vector<char> raw = read_file(data_path);
  const std::size_t expect =
      std::size_t(h.dims[0]) * h.dims[1] * h.dims[2] * h.channels * 4;
  if (raw.size() != expect)
    throw DomainError("corrupt volume: " + data_path + " is " +
                      std::to_string(raw.size()) + " bytes, header expects " +
                      std::to_string(expect));
  Volume v(h.dims[0], h.dims[1], h.dims[2], h.channels);
  static_assert(sizeof(float) == 4);
  std::memcpy(v.data.data(), raw.data(), raw.size());
  check_finite(v, data_path);
  return v;
}

void save_raw(const Volume& v, const std::string& header_path,
              const std::string& data_path) {
  if (v.w < 1 || v.h < 1 || v.l < 1 || v.c < 1)
    throw DomainError("cannot save empty volume");
  VolumeHeader h = header_for(v);
  json j;
  j["dims"] = {h.dims[0], h.dims[1], h.dims[2]};
  j["channels"] = h.channels;
  j["dtype"] = h.dtype;
  j["layout"] = h.layout;
  if (h.spacing)
    j["spacing"] = {(*h.spacing)[0], (*h.spacing)[1], (*h.spacing)[2]};
  std::ofstream hout(header_path, std::ios::binary | std::ios::trunc);
  if (!hout) throw IoError("write error: " + header_path);
  hout << j.dump(2) << "\n";
  if (!hout.flush()) throw IoError("write error: " + header_path);
  save_raw_payload(v, data_path);
}

void save_raw_payload(const Volume& v, const std::string& data_path) {
  std::ofstream out(data_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write error: " + data_path);
  out.write(reinterpret_cast<const char*>(v.data.data()),
            std::streamsize(v.data.size() * 4));
  if (!out.flush()) throw IoError("write error: " + data_path);
}

Volume load_volume(const std::string& path) {
  std::filesystem::path p(path);
  if (p.extension() == ".nii") return load_nifti1(path);
  if (p.extension() == ".json") {
    std::filesystem::path data = p;
    data.replace_extension(".f32");
    return load_raw(path, data.string());
  }
  throw IoError("cannot load " + path + ": expected .nii or .json header");
}

Volume crop(const Volume& v, std::array<int, 3> origin, std::array<int, 3> size) {
  const std::array<int, 3> dims = v.dims();
  for (int a = 0; a < 3; ++a) {
    if (size[a] < 1 || origin[a] < 0 || origin[a] + size[a] > dims[a])
      throw DomainError("crop out of range on axis " + std::to_string(a));
  }
  Volume out(size[0], size[1], size[2], v.c);
  for (int chan = 0; chan < v.c; ++chan)
    for (int z = 0; z < size[2]; ++z)
      for (int y = 0; y < size[1]; ++y) {
        const float* src =
            &v.data[v.index(origin[0], origin[1] + y, origin[2] + z, chan)];
        float* dst = &out.data[out.index(0, y, z, chan)];
        std::copy(src, src + size[0], dst);
      }
  return out;
}

std::pair<Volume, std::array<int, 3>> random_crop(const Volume& v,
                                                  std::array<int, 3> size,
                                                  std::uint64_t seed) {
  const std::array<int, 3> dims = v.dims();
  for (int a = 0; a < 3; ++a)
    if (size[a] > dims[a] || size[a] < 1)
      throw DomainError("crop too large on axis " + std::to_string(a));
  Rng rng(seed);
  std::array<int, 3> origin{};
  for (int a = 0; a < 3; ++a)
    origin[a] = int(rng.uniform_int(std::uint64_t(dims[a] - size[a]) + 1));
  return {crop(v, origin, size), origin};
}

Volume normalize(const Volume& v, NormalizeMode mode) {
  check_finite(v, "normalize input");
  Volume out = v;
  const std::size_t n = v.voxels_per_channel();
  for (int chan = 0; chan < v.c; ++chan) {
    float* p = &out.data[std::size_t(chan) * n];
    if (mode == NormalizeMode::MinMax01) {
      auto [lo_it, hi_it] = std::minmax_element(p, p + n);
      const float lo = *lo_it, hi = *hi_it;
      if (hi == lo) {
        std::fill(p, p + n, 0.f);  // constant channel maps to 0
      } else {
        // divide rather than multiply by the reciprocal so min and max map
        // to exactly 0 and 1
        const float range = hi - lo;
        for (std::size_t i = 0; i < n; ++i) p[i] = (p[i] - lo) / range;
      }
    } else {
      double sum = 0;
      for (std::size_t i = 0; i < n; ++i) sum += p[i];
      const double mean = sum / double(n);
      double ss = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = p[i] - mean;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / double(n));  // population sd
      if (sd == 0.0)
        throw DomainError("degenerate channel: zscore on constant channel " +
                          std::to_string(chan));
      for (std::size_t i = 0; i < n; ++i)
        p[i] = float((p[i] - mean) / sd);
    }
  }
  check_finite(out, "normalize output");
  return out;
}

NormalizeMode normalize_mode_from_string(const std::string& s) {
  if (s == "minmax01") return NormalizeMode::MinMax01;
  if (s == "zscore") return NormalizeMode::ZScore;
  throw DomainError("unknown normalize mode '" + s + "'");
}

std::string to_string(NormalizeMode mode) {
  return mode == NormalizeMode::MinMax01 ? "minmax01" : "zscore";
}

}  // namespace rvox
