#include "rvox/rubik.hpp"

#include <algorithm>
#include <set>

#include "doctest.h"
#include "rvox/error.hpp"
#include "rvox/rng.hpp"
#include "test_helpers.hpp"

using namespace rvox;
using namespace rvox::rubik;
using rvtest::expect_throw_contains;

namespace {

// per-channel sorted voxel values; equal before/after means pure permutation
std::vector<std::vector<float>> sorted_channels(const Volume& v) {
  std::vector<std::vector<float>> out;
  const std::size_t per = v.voxels_per_channel();
  for (int c = 0; c < v.c; ++c) {
    std::vector<float> ch(v.data.begin() + std::ptrdiff_t(std::size_t(c) * per),
                          v.data.begin() + std::ptrdiff_t(std::size_t(c + 1) * per));
    std::sort(ch.begin(), ch.end());
    out.push_back(std::move(ch));
  }
  return out;
}

}  // namespace

TEST_CASE("make_grid reproduces the reference partitions") {
  const GridSpec pancreas = make_grid({128, 128, 128}, {7, 7, 7});
  CHECK(pancreas.counts == std::array<int, 3>{18, 18, 18});
  CHECK(pancreas.covered == std::array<int, 3>{126, 126, 126});

  const GridSpec brain = make_grid({144, 144, 32}, {4, 4, 2});
  CHECK(brain.counts == std::array<int, 3>{36, 36, 16});
  CHECK(brain.covered == std::array<int, 3>{144, 144, 32});

  const GridSpec single = make_grid({8, 8, 8}, {8, 8, 8});
  CHECK(single.counts == std::array<int, 3>{1, 1, 1});

  expect_throw_contains<DomainError>([] { make_grid({4, 4, 4}, {5, 4, 4}); },
                                     "subcube larger than volume");
}

TEST_CASE("valid_angles applies the short-axis rule") {
  const GridSpec brain = make_grid({144, 144, 32}, {4, 4, 2});
  CHECK(valid_angles(brain, Axis::Axial) == std::vector<int>{90, 180, 270});
  CHECK(valid_angles(brain, Axis::Sagittal) == std::vector<int>{180});
  CHECK(valid_angles(brain, Axis::Coronal) == std::vector<int>{180});

  const GridSpec cubic = make_grid({126, 126, 126}, {7, 7, 7});
  for (int a = 0; a < 3; ++a)
    CHECK(valid_angles(cubic, Axis(a)) == std::vector<int>{90, 180, 270});

  // equal extents but unequal counts: still 180 only
  const GridSpec mixed = make_grid({12, 12, 5}, {3, 4, 5});
  CHECK(mixed.covered[0] == mixed.covered[1]);
  CHECK(valid_angles(mixed, Axis::Axial) == std::vector<int>{180});
}

TEST_CASE("rotate_layer: enumerated 2x2 quarter turn") {
  // single axial slab, 2x2 in plane; values laid out as
  //   (0,0)=a (1,0)=b (0,1)=c (1,1)=d
  Volume v(2, 2, 1, 1);
  const float a = 1, b = 2, c = 3, d = 4;
  v.at(0, 0, 0) = a;
  v.at(1, 0, 0) = b;
  v.at(0, 1, 0) = c;
  v.at(1, 1, 0) = d;
  const GridSpec g = make_grid({2, 2, 1}, {1, 1, 1});
  const Volume r = rotate_layer(v, g, {Axis::Axial, 0, 90});
  // (u,v) -> (S-1-v, u): a->(1,0), b->(1,1), d->(0,1), c->(0,0)
  CHECK(r.at(0, 0, 0) == c);
  CHECK(r.at(1, 0, 0) == a);
  CHECK(r.at(1, 1, 0) == b);
  CHECK(r.at(0, 1, 0) == d);
}

TEST_CASE("rotation group laws hold bit-exactly on random slabs") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int side = 1 + int(rng.uniform_int(3));
    const int n_sub = 2 + int(rng.uniform_int(3));
    const int dim = side * n_sub + int(rng.uniform_int(2));  // maybe residual
    const int c = 1 + int(rng.uniform_int(2));
    const Volume v = rvtest::random_volume(dim, dim, dim, c, rng.next_u64());
    const GridSpec g = make_grid(v.dims(), {side, side, side});
    const Axis axis = Axis(int(rng.uniform_int(3)));
    const int layer = int(rng.uniform_int(std::uint64_t(g.counts[int(axis)])));

    const LayerRotation r90{axis, layer, 90};
    const LayerRotation r180{axis, layer, 180};
    const LayerRotation r270{axis, layer, 270};

    const Volume v90 = rotate_layer(v, g, r90);
    const Volume v180 = rotate_layer(v, g, r180);
    const Volume v270 = rotate_layer(v, g, r270);

    CHECK(rotate_layer(rotate_layer(rotate_layer(v90, g, r90), g, r90), g, r90) == v);
    CHECK(rotate_layer(v90, g, r90) == v180);
    CHECK(rotate_layer(v180, g, r90) == v270);
    CHECK(rotate_layer(v180, g, r180) == v);
  }
}

TEST_CASE("180 on a non-square cross-section is an involution") {
  const Volume v = rvtest::random_volume(8, 8, 4, 1, 11);
  const GridSpec g = make_grid(v.dims(), {2, 2, 2});  // covered 8x8x4
  const LayerRotation rot{Axis::Sagittal, 1, 180};    // in-plane 8x4
  const Volume once = rotate_layer(v, g, rot);
  CHECK(sorted_channels(once) == sorted_channels(v));
  CHECK(once != v);
  CHECK(rotate_layer(once, g, rot) == v);
}

TEST_CASE("rotate_layer validation") {
  const Volume v = rvtest::random_volume(8, 8, 4, 1, 3);
  const GridSpec g = make_grid(v.dims(), {2, 2, 2});
  expect_throw_contains<DomainError>(
      [&] { rotate_layer(v, g, {Axis::Sagittal, 0, 90}); }, "illegal rotation");
  expect_throw_contains<DomainError>(
      [&] { rotate_layer(v, g, {Axis::Axial, 7, 180}); }, "illegal rotation");
  const Volume w = rvtest::random_volume(8, 8, 6, 1, 4);
  expect_throw_contains<DomainError>(
      [&] { rotate_layer(w, g, {Axis::Axial, 0, 180}); }, "grid/volume mismatch");
}

TEST_CASE("rotation touches only its slab inside the covered extent") {
  const Volume v = rvtest::random_volume(7, 7, 7, 2, 13);
  const GridSpec g = make_grid(v.dims(), {2, 2, 2});  // covered 6x6x6
  const Volume r = rotate_layer(v, g, {Axis::Axial, 1, 90});
  for (int c = 0; c < v.c; ++c)
    for (int z = 0; z < 7; ++z)
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
          const bool in_slab = z >= 2 && z < 4 && x < 6 && y < 6;
          if (!in_slab) CHECK(r.at(x, y, z, c) == v.at(x, y, z, c));
        }
}

TEST_CASE("sample_sequence layout and distinctness") {
  const GridSpec g = make_grid({24, 24, 24}, {4, 4, 4});  // 6x6x6
  DisarrangeParams params{{4, 4, 4}, 4, 99};
  const TransformSequence seq = sample_sequence(g, params);
  REQUIRE(seq.size() == 12);
  for (int a = 0; a < 3; ++a) {
    std::set<int> layers;
    for (int i = 0; i < 4; ++i) {
      const auto& rot = seq[std::size_t(a * 4 + i)];
      CHECK(rot.axis == Axis(a));
      CHECK(rot.layer >= 0);
      CHECK(rot.layer < 6);
      CHECK((rot.angle == 90 || rot.angle == 180 || rot.angle == 270));
      layers.insert(rot.layer);
    }
    CHECK(layers.size() == 4);  // distinct within the axis
  }
  CHECK(sample_sequence(g, params) == seq);  // deterministic
}

TEST_CASE("sample_sequence exhausts layers when m equals the grid count") {
  const GridSpec g = make_grid({6, 6, 6}, {2, 2, 2});  // 3x3x3
  DisarrangeParams params{{2, 2, 2}, 3, 5};
  const TransformSequence seq = sample_sequence(g, params);
  REQUIRE(seq.size() == 9);
  for (int a = 0; a < 3; ++a) {
    std::set<int> layers;
    for (int i = 0; i < 3; ++i) layers.insert(seq[std::size_t(a * 3 + i)].layer);
    CHECK(layers == std::set<int>{0, 1, 2});
  }
}

TEST_CASE("sampler never emits quarter turns on short axes") {
  const GridSpec g = make_grid({144, 144, 32}, {4, 4, 2});
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    DisarrangeParams params{{4, 4, 2}, 3, seed};
    for (const auto& rot : sample_sequence(g, params))
      if (rot.axis != Axis::Axial) CHECK(rot.angle == 180);
  }
}

TEST_CASE("sample_sequence rejects oversized m") {
  const GridSpec g = make_grid({6, 6, 6}, {2, 2, 2});
  DisarrangeParams params{{2, 2, 2}, 4, 0};
  expect_throw_contains<DomainError>([&] { sample_sequence(g, params); },
                                     "too many layers");
}

TEST_CASE("per-axis seed streams are independent") {
  // same seed, different m: the first m draws per axis must agree
  const GridSpec g = make_grid({20, 20, 20}, {2, 2, 2});
  const auto small = sample_sequence(g, {{2, 2, 2}, 2, 77});
  const auto large = sample_sequence(g, {{2, 2, 2}, 5, 77});
  for (int a = 0; a < 3; ++a)
    for (int i = 0; i < 2; ++i) {
      const auto& s = small[std::size_t(a * 2 + i)];
      const auto& l = large[std::size_t(a * 5 + i)];
      CHECK(s.axis == l.axis);
      CHECK(s.layer == l.layer);
      CHECK(s.angle == l.angle);
    }
}

TEST_CASE("disarrange with m=0 is the identity") {
  const Volume v = rvtest::random_volume(8, 8, 8, 1, 2);
  auto [x, rec] = disarrange(v, {{2, 2, 2}, 0, 123});
  CHECK(x == v);
  CHECK(rec.sequence.empty());
  CHECK(restore(x, rec) == v);
}

TEST_CASE("disarrange conserves per-channel voxel multisets") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int w = 6 + int(rng.uniform_int(9));
    const int h = 6 + int(rng.uniform_int(9));
    const int l = 6 + int(rng.uniform_int(9));
    const int c = 1 + int(rng.uniform_int(3));
    const Volume v = rvtest::random_volume(w, h, l, c, rng.next_u64());
    std::array<int, 3> side{};
    for (int a = 0; a < 3; ++a) side[std::size_t(a)] = 2 + int(rng.uniform_int(2));
    const GridSpec g = make_grid(v.dims(), side);
    int min_count = std::min({g.counts[0], g.counts[1], g.counts[2]});
    const int m = 1 + int(rng.uniform_int(std::uint64_t(min_count)));
    auto [x, rec] = disarrange(v, {side, m, rng.next_u64()});
    CHECK(sorted_channels(x) == sorted_channels(v));
  }
}

TEST_CASE("identical permutation is applied to every channel") {
  // channel k = channel 0 + k; the relation must survive disarrangement
  Volume v = rvtest::random_volume(8, 8, 8, 1, 17);
  Volume multi(8, 8, 8, 4);
  const std::size_t per = v.voxels_per_channel();
  for (int k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < per; ++i)
      multi.data[std::size_t(k) * per + i] = v.data[i] + float(k);
  auto [x, rec] = disarrange(multi, {{2, 2, 2}, 2, 55});
  CHECK(x != multi);
  for (int k = 1; k < 4; ++k)
    for (std::size_t i = 0; i < per; ++i)
      CHECK(x.data[std::size_t(k) * per + i] == x.data[i] + float(k));
}

TEST_CASE("disarrange is deterministic") {
  const Volume v = rvtest::random_volume(9, 9, 9, 2, 23);
  auto [x1, r1] = disarrange(v, {{3, 3, 3}, 2, 777});
  auto [x2, r2] = disarrange(v, {{3, 3, 3}, 2, 777});
  CHECK(x1 == x2);
  CHECK(r1 == r2);
}

TEST_CASE("invert_sequence") {
  CHECK(invert_sequence({}).empty());
  const TransformSequence seq{{Axis::Axial, 1, 90}};
  const TransformSequence inv = invert_sequence(seq);
  REQUIRE(inv.size() == 1);
  CHECK(inv[0].angle == 270);
  CHECK(inv[0].layer == 1);

  const TransformSequence longer{
      {Axis::Axial, 1, 90}, {Axis::Coronal, 0, 180}, {Axis::Sagittal, 2, 270}};
  CHECK(invert_sequence(invert_sequence(longer)) == longer);
}

TEST_CASE("restore inverts disarrange bit-exactly (randomized property)") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const int w = 4 + int(rng.uniform_int(13));
    const int h = 4 + int(rng.uniform_int(13));
    const int l = 4 + int(rng.uniform_int(13));
    const int c = 1 + int(rng.uniform_int(2));
    const Volume v = rvtest::random_volume(w, h, l, c, rng.next_u64());
    std::array<int, 3> side{};
    for (int a = 0; a < 3; ++a)
      side[std::size_t(a)] =
          1 + int(rng.uniform_int(std::uint64_t(v.dims()[std::size_t(a)])));
    const GridSpec g = make_grid(v.dims(), side);
    const int min_count = std::min({g.counts[0], g.counts[1], g.counts[2]});
    const int m = int(rng.uniform_int(std::uint64_t(min_count) + 1));
    auto [x, rec] = disarrange(v, {side, m, rng.next_u64()});
    CHECK(restore(x, rec) == v);
  }
}

TEST_CASE("restore with the wrong record does not recover the input") {
  const Volume v = rvtest::random_volume(12, 12, 12, 1, 41);
  auto [x, rec_a] = disarrange(v, {{3, 3, 3}, 2, 1000});
  auto [x2, rec_b] = disarrange(v, {{3, 3, 3}, 2, 2000});
  REQUIRE(rec_a.sequence != rec_b.sequence);
  CHECK(restore(x, rec_b) != v);
  CHECK(restore(x, rec_a) == v);
}

TEST_CASE("restore validates dims") {
  const Volume v = rvtest::random_volume(8, 8, 8, 1, 1);
  auto [x, rec] = disarrange(v, {{2, 2, 2}, 1, 5});
  const Volume other = rvtest::random_volume(10, 8, 8, 1, 2);
  expect_throw_contains<DomainError>([&] { restore(other, rec); },
                                     "grid/volume mismatch");
}

TEST_CASE("voxels outside the covered extent never move") {
  const Volume v = rvtest::random_volume(9, 10, 11, 2, 67);
  const GridSpec g = make_grid(v.dims(), {2, 3, 4});  // covered 8x9x8
  auto [x, rec] = disarrange(v, {{2, 3, 4}, 2, 8});
  for (int c = 0; c < v.c; ++c)
    for (int z = 0; z < v.l; ++z)
      for (int y = 0; y < v.h; ++y)
        for (int x0 = 0; x0 < v.w; ++x0)
          if (x0 >= g.covered[0] || y >= g.covered[1] || z >= g.covered[2])
            CHECK(x.at(x0, y, z, c) == v.at(x0, y, z, c));
}

TEST_CASE("record JSON round trip") {
  const Volume v = rvtest::random_volume(12, 12, 8, 1, 3);
  auto [x, rec] = disarrange(v, {{3, 3, 2}, 2, 424242});
  const std::string text = record_to_json(rec);
  const DisarrangeRecord back = record_from_json(text);
  CHECK(back == rec);

  const auto dir = rvtest::temp_dir("rubik");
  const std::string path = (dir / "rec.json").string();
  save_record(rec, path);
  CHECK(load_record(path) == rec);
}

TEST_CASE("record parser rejects inconsistent documents") {
  expect_throw_contains<IoError>([&] { record_from_json("{oops"); },
                                 "bad record");

  // an angle made illegal for a short axis must be rejected
  auto [xb, rec_b] =
      disarrange(rvtest::random_volume(8, 8, 4, 1, 9), {{2, 2, 2}, 1, 77});
  const std::string tb = record_to_json(rec_b);
  const auto pos = tb.find("\"angle\": 180");
  REQUIRE(pos != std::string::npos);
  std::string broken = tb;
  broken.replace(pos, 12, "\"angle\": 90");
  expect_throw_contains<DomainError>([&] { record_from_json(broken); },
                                     "bad record");
}
