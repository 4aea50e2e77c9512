#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scanfill/fields.hpp"
#include "scanfill/geometry.hpp"
#include "scanfill/mesh.hpp"

namespace scanfill {

// ---- PNG -------------------------------------------------------------------------------

struct Image16 {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;  ///< row-major

  std::uint16_t at(int col, int row) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  ///< 1 (gray), 3 (RGB) or 4 (RGBA)
  std::vector<std::uint8_t> pixels;  ///< row-major, interleaved
};

Image16 read_png_gray16(const std::filesystem::path& path);
/// Any 8-bit PNG; palettes are expanded, 16-bit channels are stripped to 8 bits.
Image8 read_png8(const std::filesystem::path& path);

void write_png_gray16(const std::filesystem::path& path, int width, int height,
                      std::span<const std::uint16_t> pixels);
void write_png_gray8(const std::filesystem::path& path, int width, int height,
                     std::span<const std::uint8_t> pixels);
void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    std::span<const std::uint8_t> pixels);
void write_png_rgba8(const std::filesystem::path& path, int width, int height,
                     std::span<const std::uint8_t> pixels);

// ---- Point clouds and meshes ------------------------------------------------------------

/// Vertices (and faces, when present) of an ASCII or binary PLY file.
TriangleMesh read_ply(const std::filesystem::path& path);

/// Points from a PLY file, or from whitespace-separated "x y z" text ('#' starts a comment).
std::vector<Vec3> load_points(const std::filesystem::path& path);

void write_points_ply_ascii(const std::filesystem::path& path, std::span<const Vec3> points);
/// Binary little-endian PLY with float32 vertices and int32 face indices.
void write_mesh_ply(const std::filesystem::path& path, const TriangleMesh& mesh);

// ---- Camera intrinsics ------------------------------------------------------------------

/// "fx fy cx cy" on the first line, "width height" on the second.
CameraIntrinsics read_intrinsics(const std::filesystem::path& path);
void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& intrinsics);

/// Camera-to-world pose as three rows of "r0 r1 r2 t".
CameraPose read_pose(const std::filesystem::path& path);
void write_pose(const std::filesystem::path& path, const CameraPose& pose);

// ---- Field checkpoints ------------------------------------------------------------------

void write_checkpoint(const std::filesystem::path& path, const FieldParams& params,
                      const DensityParams& density);
FieldParams read_checkpoint(const std::filesystem::path& path, DensityParams* density = nullptr);

}  // namespace scanfill
