#include "rvox/rubik.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "rvox/error.hpp"
#include "rvox/rng.hpp"

namespace rvox::rubik {

namespace {

using nlohmann::json;

// In-plane axes for a rotation about `a`, in cyclic (right-handed) order, so
// "counter-clockwise seen from the positive axis" means the same thing on
// every axis.
struct PlaneAxes {
  int u, v;
};

PlaneAxes plane_axes(Axis a) {
  switch (a) {
    case Axis::Sagittal: return {1, 2};  // rotate in (y, z)
    case Axis::Coronal: return {2, 0};   // rotate in (z, x)
    default: return {0, 1};              // Axial: rotate in (x, y)
  }
}

void validate_rotation(const Volume& v, const GridSpec& grid,
                       const LayerRotation& rot) {
  if (v.dims() != grid.dims)
    throw DomainError("grid/volume mismatch: volume dims do not match grid");
  const int a = int(rot.axis);
  if (rot.layer < 0 || rot.layer >= grid.counts[a])
    throw DomainError("illegal rotation: layer " + std::to_string(rot.layer) +
                      " out of range for axis " + axis_name(rot.axis));
  const auto angles = valid_angles(grid, rot.axis);
  if (std::find(angles.begin(), angles.end(), rot.angle) == angles.end())
    throw DomainError("illegal rotation: " + std::to_string(rot.angle) +
                      " deg not valid along axis " + axis_name(rot.axis));
}

// Permutes the slab in place. scratch is reused across calls.
void rotate_layer_inplace(Volume& v, const GridSpec& grid,
                          const LayerRotation& rot,
                          std::vector<float>& scratch) {
  validate_rotation(v, grid, rot);
  const int a = int(rot.axis);
  const auto [ua, va] = plane_axes(rot.axis);
  const int n = grid.side[a];
  const int a0 = rot.layer * n;
  const int su = grid.covered[ua];
  const int sv = grid.covered[va];

  scratch.resize(std::size_t(v.c) * n * su * sv);
  int p[3];
  std::size_t k = 0;
  for (int chan = 0; chan < v.c; ++chan)
    for (int pa = a0; pa < a0 + n; ++pa)
      for (int pv = 0; pv < sv; ++pv)
        for (int pu = 0; pu < su; ++pu) {
          p[a] = pa;
          p[ua] = pu;
          p[va] = pv;
          scratch[k++] = v.data[v.index(p[0], p[1], p[2], chan)];
        }

  k = 0;
  for (int chan = 0; chan < v.c; ++chan)
    for (int pa = a0; pa < a0 + n; ++pa)
      for (int pv = 0; pv < sv; ++pv)
        for (int pu = 0; pu < su; ++pu) {
          int qu, qv;
          switch (rot.angle) {
            case 90:  // (u, v) -> (S-1-v, u), square cross-section only
              qu = su - 1 - pv;
              qv = pu;
              break;
            case 270:  // three 90-degree steps: (u, v) -> (v, S-1-u)
              qu = pv;
              qv = sv - 1 - pu;
              break;
            default:  // 180: valid on any cross-section
              qu = su - 1 - pu;
              qv = sv - 1 - pv;
              break;
          }
          p[a] = pa;
          p[ua] = qu;
          p[va] = qv;
          v.data[v.index(p[0], p[1], p[2], chan)] = scratch[k++];
        }
}

json grid_to_json(const GridSpec& g) {
  return json{{"counts", g.counts}, {"covered", g.covered}, {"dims", g.dims}};
}

}  // namespace

const char* axis_name(Axis a) {
  switch (a) {
    case Axis::Sagittal: return "sagittal";
    case Axis::Coronal: return "coronal";
    default: return "axial";
  }
}

Axis axis_from_name(const std::string& name) {
  if (name == "sagittal") return Axis::Sagittal;
  if (name == "coronal") return Axis::Coronal;
  if (name == "axial") return Axis::Axial;
  throw DomainError("unknown axis '" + name + "'");
}

GridSpec make_grid(std::array<int, 3> dims, std::array<int, 3> side) {
  GridSpec g;
  g.dims = dims;
  g.side = side;
  for (int a = 0; a < 3; ++a) {
    if (side[a] < 1)
      throw DomainError("subcube side must be >= 1 on axis " + std::to_string(a));
    if (dims[a] < 1)
      throw DomainError("volume dims must be >= 1 on axis " + std::to_string(a));
    g.counts[a] = dims[a] / side[a];
    if (g.counts[a] < 1)
      throw DomainError("subcube larger than volume on axis " +
                        std::to_string(a));
    g.covered[a] = g.counts[a] * side[a];
  }
  return g;
}

std::vector<int> valid_angles(const GridSpec& grid, Axis axis) {
  const auto [ua, va] = plane_axes(axis);
  if (grid.covered[ua] == grid.covered[va] &&
      grid.counts[ua] == grid.counts[va])
    return {90, 180, 270};
  return {180};
}

Volume rotate_layer(const Volume& v, const GridSpec& grid,
                    const LayerRotation& rot) {
  Volume out = v;
  std::vector<float> scratch;
  rotate_layer_inplace(out, grid, rot, scratch);
  return out;
}

TransformSequence sample_sequence(const GridSpec& grid,
                                  const DisarrangeParams& params) {
  const int m = params.layers_per_axis;
  if (m < 0) throw DomainError("too many layers: m must be >= 0");
  TransformSequence seq;
  seq.reserve(std::size_t(m) * 3);
  for (int a = 0; a < 3; ++a) {
    const Axis axis = Axis(a);
    if (m > grid.counts[a])
      throw DomainError("too many layers: m = " + std::to_string(m) +
                        " exceeds grid count " +
                        std::to_string(grid.counts[a]) + " on axis " +
                        axis_name(axis));
    // Independent streams per axis: one for layer picks, one for angles.
    Rng layer_rng(Rng::split(params.seed, std::uint64_t(a) * 2));
    Rng angle_rng(Rng::split(params.seed, std::uint64_t(a) * 2 + 1));
    const auto angles = valid_angles(grid, axis);

    std::vector<int> pool(std::size_t(grid.counts[a]));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < m; ++i) {
      // partial Fisher-Yates: without replacement, uniform over layers
      const std::size_t j =
          std::size_t(i) + layer_rng.uniform_int(pool.size() - std::size_t(i));
      std::swap(pool[std::size_t(i)], pool[j]);
      const int angle = angles[angle_rng.uniform_int(angles.size())];
      seq.push_back({axis, pool[std::size_t(i)], angle});
    }
  }
  return seq;
}

std::pair<Volume, DisarrangeRecord> disarrange(const Volume& v,
                                               const DisarrangeParams& params) {
  DisarrangeRecord rec;
  rec.params = params;
  rec.grid = make_grid(v.dims(), params.side);
  rec.sequence = sample_sequence(rec.grid, params);
  Volume out = v;
  std::vector<float> scratch;
  for (const auto& rot : rec.sequence)
    rotate_layer_inplace(out, rec.grid, rot, scratch);
  return {std::move(out), std::move(rec)};
}

TransformSequence invert_sequence(const TransformSequence& seq) {
  TransformSequence inv(seq.rbegin(), seq.rend());
  for (auto& rot : inv) rot.angle = 360 - rot.angle;
  return inv;
}

Volume restore(const Volume& v, const DisarrangeRecord& record) {
  if (v.dims() != record.grid.dims)
    throw DomainError("grid/volume mismatch: record grid does not match volume");
  Volume out = v;
  std::vector<float> scratch;
  for (const auto& rot : invert_sequence(record.sequence))
    rotate_layer_inplace(out, record.grid, rot, scratch);
  return out;
}

std::string record_to_json(const DisarrangeRecord& rec) {
  json seq = json::array();
  for (const auto& rot : rec.sequence)
    seq.push_back(json{{"axis", axis_name(rot.axis)},
                       {"layer", rot.layer},
                       {"angle", rot.angle}});
  json j{{"seed", rec.params.seed},
         {"side", rec.params.side},
         {"m", rec.params.layers_per_axis},
         {"grid", grid_to_json(rec.grid)},
         {"sequence", seq}};
  return j.dump(2) + "\n";
}

DisarrangeRecord record_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad record: ") + e.what());
  }
  DisarrangeRecord rec;
  try {
    rec.params.seed = j.at("seed").get<std::uint64_t>();
    auto side = j.at("side");
    for (int a = 0; a < 3; ++a) rec.params.side[a] = side.at(a).get<int>();
    rec.params.layers_per_axis = j.at("m").get<int>();
    auto dims = j.at("grid").at("dims");
    std::array<int, 3> d{};
    for (int a = 0; a < 3; ++a) d[a] = dims.at(a).get<int>();
    rec.grid = make_grid(d, rec.params.side);
    for (int a = 0; a < 3; ++a) {
      if (rec.grid.counts[a] != j.at("grid").at("counts").at(a).get<int>() ||
          rec.grid.covered[a] != j.at("grid").at("covered").at(a).get<int>())
        throw DomainError("bad record: grid fields inconsistent with side/dims");
    }
    for (const auto& e : j.at("sequence")) {
      LayerRotation rot;
      rot.axis = axis_from_name(e.at("axis").get<std::string>());
      rot.layer = e.at("layer").get<int>();
      rot.angle = e.at("angle").get<int>();
      const int a = int(rot.axis);
      if (rot.layer < 0 || rot.layer >= rec.grid.counts[a])
        throw DomainError("bad record: layer out of range");
      const auto angles = valid_angles(rec.grid, rot.axis);
      if (std::find(angles.begin(), angles.end(), rot.angle) == angles.end())
        throw DomainError("bad record: angle " + std::to_string(rot.angle) +
                          " not valid on axis " + axis_name(rot.axis));
      rec.sequence.push_back(rot);
    }
    if (rec.sequence.size() != std::size_t(rec.params.layers_per_axis) * 3)
      throw DomainError("bad record: sequence length != 3*m");
  } catch (const json::exception& e) {
    throw DomainError(std::string("bad record: ") + e.what());
  }
  return rec;
}

void save_record(const DisarrangeRecord& rec, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write error: " + path);
  out << record_to_json(rec);
  if (!out.flush()) throw IoError("write error: " + path);
}

DisarrangeRecord load_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return record_from_json(text);
}

}  // namespace rvox::rubik
