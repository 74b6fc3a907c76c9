#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "geom.hpp"
#include "rng.hpp"

namespace jigsaw::synth {

using geom::RigidTransform;
using geom::Vec3;

struct SynthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ShapeFamily { kSphere, kBox, kCylinder, kSuperellipsoid };

ShapeFamily shape_from_string(const std::string& s);
std::string shape_to_string(ShapeFamily f);

struct SynthConfig {
  ShapeFamily shape = ShapeFamily::kSphere;
  int pieces_min = 2;
  int pieces_max = 5;
  int points_per_object = 1000;
  double eta = 0.025;
  // Sinusoidal cut perturbation, as a fraction of the object diameter.
  double perturb_amplitude = 0.05;
  // Tangential offset applied to each side's copy of a co-sampled fracture
  // point, in final object units. Zero gives exactly mirrored surfaces.
  double fracture_jitter = 0.005;
  uint64_t seed = 0;
  int count = 100;  // objects per dataset

  void validate() const;
};

// One fractured object. `points` are canonical (assembled) coordinates,
// grouped by piece; gt_pose maps each piece's scattered frame back to the
// canonical frame, so applying gt_pose to scattered_points() reassembles
// the object exactly.
struct PointCloudObject {
  std::vector<Vec3> points;
  std::vector<uint16_t> piece_id;
  std::vector<uint8_t> label;
  std::vector<RigidTransform> gt_pose;
  std::vector<std::pair<uint32_t, uint32_t>> gt_match;
  double eta = 0.025;

  int n_pieces() const { return static_cast<int>(gt_pose.size()); }
  int n_points() const { return static_cast<int>(points.size()); }
  // Contiguous [begin, end) per piece.
  std::vector<std::pair<int, int>> piece_ranges() const;
  std::vector<int> piece_counts() const;
  std::vector<Vec3> piece_points(int piece) const;
  std::vector<Vec3> scattered_points() const;
  // Piece with the most points (area proxy).
  int largest_piece() const;
  std::vector<uint32_t> fracture_indices() const;

  void check_invariants() const;  // cheap structural checks
};

// Fracture labels per Eq.-of-record: label 1 iff the distance to the nearest
// point of any other piece is <= eta.
std::vector<uint8_t> compute_labels(const std::vector<Vec3>& points,
                                    const std::vector<uint16_t>& piece_id,
                                    int n_pieces, double eta);

// Row-wise ground-truth matching: one (i, j) pair per fracture point i where
// j is its nearest neighbor among fracture points of other pieces.
std::vector<std::pair<uint32_t, uint32_t>> build_gt_matching(
    const PointCloudObject& obj);

// Generates a canonical object (gt poses identity) of 0.8 diameter.
PointCloudObject generate_object(const SynthConfig& cfg, uint64_t seed);

// Recenter each piece at the origin and apply a uniform random rotation;
// stores the inverse as gt_pose.
void scatter(PointCloudObject& obj, Rng& rng);

}  // namespace jigsaw::synth
