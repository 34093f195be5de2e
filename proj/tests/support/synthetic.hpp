#pragma once

// Synthetic grasp datasets written in the on-disk Cornell and Jacquard
// layouts, so loaders and training can be exercised without the real data.

#include <cstdint>
#include <filesystem>

#include "pegg/datasets.hpp"

namespace pegg::testkit {

/// One tabletop image with a single rectangular block and 3-5 grasps across
/// its narrow axis. `object_scale` multiplies block size (1 = Cornell scale).
GraspSample make_synthetic_sample(std::uint64_t seed, int rows, int cols, double object_scale = 1.0,
                                  int center_jitter = 40);

/// Writes `n` samples as pcd####r.png / pcd####d.tiff / pcd####cpos.txt plus
/// a z.txt object index (two images per object). Sample 1 stores depth as
/// an ASCII point cloud instead of a tiff; the first rectangle of sample 2
/// has a NaN corner.
void write_cornell_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed);

/// Writes `n` scenes as <scene>/<id>_RGB.png, <id>_perfect_depth.tiff,
/// <id>_grasps.txt at size x size pixels.
void write_jacquard_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed, int size = 512);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace pegg::testkit
