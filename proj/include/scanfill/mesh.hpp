#pragma once

#include <array>
#include <vector>

#include "scanfill/geometry.hpp"

namespace scanfill {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return triangles.empty(); }
};

}  // namespace scanfill
