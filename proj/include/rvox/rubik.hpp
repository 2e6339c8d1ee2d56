#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rvox/volume.hpp"

namespace rvox::rubik {

// Fixed anatomical-axis mapping: Sagittal -> x/W, Coronal -> y/H, Axial -> z/L.
enum class Axis : int { Sagittal = 0, Coronal = 1, Axial = 2 };

const char* axis_name(Axis a);
Axis axis_from_name(const std::string& name);

// Partition of a volume into subcubes of per-axis side `side`; residual
// voxels beyond counts*side are outside the grid and are never moved.
struct GridSpec {
  std::array<int, 3> side{};     // subcube voxels per axis
  std::array<int, 3> counts{};   // subcubes per axis, floor(dim/side)
  std::array<int, 3> covered{};  // counts*side, voxels
  std::array<int, 3> dims{};     // source volume dims

  bool operator==(const GridSpec&) const = default;
};

struct LayerRotation {
  Axis axis = Axis::Sagittal;
  int layer = 0;    // 0-based subcube layer index along `axis`
  int angle = 180;  // 90 | 180 | 270, degrees counter-clockwise seen from +axis

  bool operator==(const LayerRotation&) const = default;
};

using TransformSequence = std::vector<LayerRotation>;

struct DisarrangeParams {
  std::array<int, 3> side{2, 2, 2};
  int layers_per_axis = 1;  // m; 0 gives the identity transform
  std::uint64_t seed = 0;

  bool operator==(const DisarrangeParams&) const = default;
};

// Everything needed to undo a disarrangement exactly.
struct DisarrangeRecord {
  DisarrangeParams params;
  GridSpec grid;
  TransformSequence sequence;

  bool operator==(const DisarrangeRecord&) const = default;
};

GridSpec make_grid(std::array<int, 3> dims, std::array<int, 3> side);

// {90,180,270} when the two in-plane covered extents and the two in-plane
// grid counts are both equal; {180} otherwise (the short-axis rule).
std::vector<int> valid_angles(const GridSpec& grid, Axis axis);

Volume rotate_layer(const Volume& v, const GridSpec& grid,
                    const LayerRotation& rot);

// m distinct layers per axis in the fixed order Sagittal, Coronal, Axial,
// each with an angle drawn uniformly from valid_angles. Layer and angle
// draws come from per-axis streams split off the seed, so draw counts on
// one axis never shift another axis's stream.
TransformSequence sample_sequence(const GridSpec& grid,
                                  const DisarrangeParams& params);

std::pair<Volume, DisarrangeRecord> disarrange(const Volume& v,
                                               const DisarrangeParams& params);

// Reversed order, each angle replaced by 360 - angle (180 is self-inverse).
TransformSequence invert_sequence(const TransformSequence& seq);

Volume restore(const Volume& v, const DisarrangeRecord& record);

std::string record_to_json(const DisarrangeRecord& rec);
DisarrangeRecord record_from_json(const std::string& text);
void save_record(const DisarrangeRecord& rec, const std::string& path);
DisarrangeRecord load_record(const std::string& path);

}  // namespace rvox::rubik
