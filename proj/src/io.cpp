#include "scanfill/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <png.h>

#include "scanfill/error.hpp"

namespace scanfill {
namespace {

namespace fs = std::filesystem;

// ---- PNG helpers ------------------------------------------------------------------------

struct PngImage {
  png_image image{};
  PngImage() {
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

void begin_read(PngImage& png, const fs::path& path) {
  if (!png_image_begin_read_from_file(&png.image, path.c_str())) {
    fail(ErrorCode::kFormatError, path.string() + ": " + png.image.message);
  }
}

template <typename T>
void write_png(const fs::path& path, int width, int height, std::uint32_t format,
               std::span<const T> pixels, int channels) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    fail(ErrorCode::kInvalidArgument, "PNG buffer does not match its dimensions");
  }
  PngImage png;
  png.image.width = static_cast<png_uint_32>(width);
  png.image.height = static_cast<png_uint_32>(height);
  png.image.format = format;
  if (!png_image_write_to_file(&png.image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIoError, path.string() + ": " + png.image.message);
  }
}

// ---- PLY helpers ------------------------------------------------------------------------

enum class PlyFormat { kAscii, kBinaryLittle, kBinaryBig };

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
  std::string count_type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

std::size_t type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  return 0;
}

template <typename T>
T load_scalar(const unsigned char* p, bool big_endian) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if (big_endian != (std::endian::native == std::endian::big)) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

double decode(const std::string& t, const unsigned char* p, bool big) {
  if (t == "char" || t == "int8") return load_scalar<std::int8_t>(p, big);
  if (t == "uchar" || t == "uint8") return load_scalar<std::uint8_t>(p, big);
  if (t == "short" || t == "int16") return load_scalar<std::int16_t>(p, big);
  if (t == "ushort" || t == "uint16") return load_scalar<std::uint16_t>(p, big);
  if (t == "int" || t == "int32") return load_scalar<std::int32_t>(p, big);
  if (t == "uint" || t == "uint32") return load_scalar<std::uint32_t>(p, big);
  if (t == "float" || t == "float32") return load_scalar<float>(p, big);
  return load_scalar<double>(p, big);
}

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const fs::path& path) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    fail(ErrorCode::kFormatError,
         path.string() + ": truncated at byte offset " + std::to_string(static_cast<long long>(in.gcount())));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Image16 read_png_gray16(const fs::path& path) {
  PngImage png;
  begin_read(png, path);
  png.image.format = PNG_FORMAT_LINEAR_Y;
  Image16 out;
  out.width = static_cast<int>(png.image.width);
  out.height = static_cast<int>(png.image.height);
  out.pixels.resize(PNG_IMAGE_SIZE(png.image) / sizeof(std::uint16_t));
  if (!png_image_finish_read(&png.image, nullptr, out.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kFormatError, path.string() + ": " + png.image.message);
  }
  return out;
}

Image8 read_png8(const fs::path& path) {
  PngImage png;
  begin_read(png, path);
  const bool alpha = png.image.format & PNG_FORMAT_FLAG_ALPHA;
  const bool color = png.image.format & PNG_FORMAT_FLAG_COLOR;
  Image8 out;
  if (color) {
    png.image.format = alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
    out.channels = alpha ? 4 : 3;
  } else {
    png.image.format = alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_GRAY;
    out.channels = alpha ? 4 : 1;
  }
  out.width = static_cast<int>(png.image.width);
  out.height = static_cast<int>(png.image.height);
  out.pixels.resize(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, out.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kFormatError, path.string() + ": " + png.image.message);
  }
  return out;
}

void write_png_gray16(const fs::path& path, int width, int height,
                      std::span<const std::uint16_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_LINEAR_Y, pixels, 1);
}

void write_png_gray8(const fs::path& path, int width, int height,
                     std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_GRAY, pixels, 1);
}

void write_png_rgb8(const fs::path& path, int width, int height,
                    std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_RGB, pixels, 3);
}

void write_png_rgba8(const fs::path& path, int width, int height,
                     std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_RGBA, pixels, 4);
}

TriangleMesh read_ply(const fs::path& path) {
  const std::string data = read_all(path);
  std::size_t pos = 0;
  int line_no = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= data.size()) {
      fail(ErrorCode::kFormatError, path.string() + ": header ends early at line " + std::to_string(line_no));
    }
    const std::size_t end = data.find('\n', pos);
    std::string line = data.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? data.size() : end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  auto header_error = [&](const std::string& what) {
    fail(ErrorCode::kFormatError, path.string() + ":" + std::to_string(line_no) + ": " + what);
  };

  if (next_line() != "ply") header_error("missing 'ply' magic");
  PlyFormat format = PlyFormat::kAscii;
  std::vector<PlyElement> elements;
  for (;;) {
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "end_header") break;
    if (key == "comment" || key == "obj_info" || key.empty()) continue;
    if (key == "format") {
      std::string f;
      ls >> f;
      if (f == "ascii") format = PlyFormat::kAscii;
      else if (f == "binary_little_endian") format = PlyFormat::kBinaryLittle;
      else if (f == "binary_big_endian") format = PlyFormat::kBinaryBig;
      else header_error("unknown format '" + f + "'");
    } else if (key == "element") {
      PlyElement e;
      if (!(ls >> e.name >> e.count)) header_error("malformed element line");
      elements.push_back(e);
    } else if (key == "property") {
      if (elements.empty()) header_error("property before any element");
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        ls >> p.count_type >> p.type >> p.name;
        if (type_size(p.count_type) == 0) header_error("bad list count type");
      } else {
        p.type = t;
        ls >> p.name;
      }
      if (type_size(p.type) == 0) header_error("unknown property type '" + p.type + "'");
      elements.back().properties.push_back(p);
    } else {
      header_error("unexpected header keyword '" + key + "'");
    }
  }

  TriangleMesh mesh;
  const bool big = format == PlyFormat::kBinaryBig;
  std::istringstream ascii(format == PlyFormat::kAscii ? data.substr(pos) : std::string());
  int ascii_line = line_no;
  auto read_values = [&](const PlyElement& e, std::vector<double>& scalars,
                         std::vector<std::vector<double>>& lists) {
    scalars.clear();
    lists.clear();
    if (format == PlyFormat::kAscii) {
      std::string line;
      do {
        if (!std::getline(ascii, line)) {
          fail(ErrorCode::kFormatError, path.string() + ":" + std::to_string(ascii_line) +
                                            ": unexpected end of " + e.name + " data");
        }
        ++ascii_line;
      } while (line.find_first_not_of(" \t\r") == std::string::npos);
      std::istringstream ls(line);
      for (const auto& p : e.properties) {
        double v;
        if (!(ls >> v)) {
          fail(ErrorCode::kFormatError, path.string() + ":" + std::to_string(ascii_line) +
                                            ": cannot parse property '" + p.name + "'");
        }
        if (p.is_list) {
          std::vector<double> items(static_cast<std::size_t>(v));
          for (auto& item : items) {
            if (!(ls >> item)) {
              fail(ErrorCode::kFormatError,
                   path.string() + ":" + std::to_string(ascii_line) + ": short list");
            }
          }
          lists.push_back(std::move(items));
          scalars.push_back(NAN);
        } else {
          scalars.push_back(v);
        }
      }
      return;
    }
    auto need = [&](std::size_t n) {
      if (pos + n > data.size()) {
        fail(ErrorCode::kFormatError,
             path.string() + ": truncated binary data at byte offset " + std::to_string(pos));
      }
    };
    for (const auto& p : e.properties) {
      if (p.is_list) {
        need(type_size(p.count_type));
        const auto n = static_cast<std::size_t>(
            decode(p.count_type, reinterpret_cast<const unsigned char*>(data.data() + pos), big));
        pos += type_size(p.count_type);
        std::vector<double> items(n);
        for (auto& item : items) {
          need(type_size(p.type));
          item = decode(p.type, reinterpret_cast<const unsigned char*>(data.data() + pos), big);
          pos += type_size(p.type);
        }
        lists.push_back(std::move(items));
        scalars.push_back(NAN);
      } else {
        need(type_size(p.type));
        scalars.push_back(decode(p.type, reinterpret_cast<const unsigned char*>(data.data() + pos), big));
        pos += type_size(p.type);
      }
    }
  };

  std::vector<double> scalars;
  std::vector<std::vector<double>> lists;
  for (const auto& e : elements) {
    int ix = -1, iy = -1, iz = -1, iface = -1;
    for (std::size_t k = 0; k < e.properties.size(); ++k) {
      const auto& name = e.properties[k].name;
      if (name == "x") ix = static_cast<int>(k);
      if (name == "y") iy = static_cast<int>(k);
      if (name == "z") iz = static_cast<int>(k);
      if (e.properties[k].is_list && (name == "vertex_indices" || name == "vertex_index")) iface = static_cast<int>(k);
    }
    if (e.name == "vertex" && (ix < 0 || iy < 0 || iz < 0)) {
      fail(ErrorCode::kFormatError, path.string() + ": vertex element lacks x/y/z");
    }
    for (std::size_t i = 0; i < e.count; ++i) {
      read_values(e, scalars, lists);
      if (e.name == "vertex") {
        mesh.vertices.emplace_back(scalars[ix], scalars[iy], scalars[iz]);
      } else if (e.name == "face" && iface >= 0) {
        int list_index = 0;
        for (int k = 0; k < iface; ++k) list_index += e.properties[k].is_list ? 1 : 0;
        const auto& idx = lists[list_index];
        for (std::size_t t = 1; t + 1 < idx.size(); ++t) {  // fan-triangulate polygons
          mesh.triangles.push_back({static_cast<int>(idx[0]), static_cast<int>(idx[t]),
                                    static_cast<int>(idx[t + 1])});
        }
      }
    }
  }
  for (const auto& tri : mesh.triangles) {
    for (int v : tri) {
      if (v < 0 || static_cast<std::size_t>(v) >= mesh.vertices.size()) {
        fail(ErrorCode::kFormatError, path.string() + ": face index out of range");
      }
    }
  }
  return mesh;
}

std::vector<Vec3> load_points(const fs::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) fail(ErrorCode::kIoError, "cannot open " + path.string());
  char magic[4] = {};
  probe.read(magic, 3);
  if (std::string(magic, 3) == "ply") return read_ply(path).vertices;

  std::ifstream in(path);
  std::vector<Vec3> points;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r,") == std::string::npos) continue;
    for (char& c : line) {
      if (c == ',') c = ' ';
    }
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z())) {
      fail(ErrorCode::kFormatError, path.string() + ":" + std::to_string(line_no) + ": expected 'x y z'");
    }
    points.push_back(p);
  }
  return points;
}

void write_points_ply_ascii(const fs::path& path, std::span<const Vec3> points) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  out.precision(17);
  for (const auto& p : points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

void write_mesh_ply(const fs::path& path, const TriangleMesh& mesh) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << mesh.vertices.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nelement face "
      << mesh.triangles.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (const auto& v : mesh.vertices) {
    for (int a = 0; a < 3; ++a) put_le<float>(out, static_cast<float>(v[a]));
  }
  for (const auto& t : mesh.triangles) {
    put_le<std::uint8_t>(out, 3);
    for (int v : t) put_le<std::int32_t>(out, v);
  }
}

CameraIntrinsics read_intrinsics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  CameraIntrinsics intr;
  if (!(in >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >> intr.height)) {
    fail(ErrorCode::kFormatError, path.string() + ": expected 'fx fy cx cy' then 'width height'");
  }
  intr.validate();
  return intr;
}

void write_intrinsics(const fs::path& path, const CameraIntrinsics& intr) {
  intr.validate();
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out.precision(17);
  out << intr.fx << ' ' << intr.fy << ' ' << intr.cx << ' ' << intr.cy << '\n'
      << intr.width << ' ' << intr.height << '\n';
  if (!out) fail(ErrorCode::kIoError, "failed writing " + path.string());
}

CameraPose read_pose(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  Mat3 r;
  Vec3 t;
  for (int row = 0; row < 3; ++row) {
    if (!(in >> r(row, 0) >> r(row, 1) >> r(row, 2) >> t[row])) {
      fail(ErrorCode::kFormatError, path.string() + ": expected three rows of 'r0 r1 r2 t'");
    }
  }
  try {
    return CameraPose{Rotation3(r), t};
  } catch (const Error& e) {
    fail(ErrorCode::kFormatError, path.string() + ": " + e.what());
  }
}

void write_pose(const fs::path& path, const CameraPose& pose) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out.precision(17);
  const Mat3& r = pose.rotation.matrix();
  for (int row = 0; row < 3; ++row) {
    out << r(row, 0) << ' ' << r(row, 1) << ' ' << r(row, 2) << ' ' << pose.translation[row] << '\n';
  }
  if (!out) fail(ErrorCode::kIoError, "failed writing " + path.string());
}

namespace {
constexpr char kCheckpointMagic[8] = {'S', 'C', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void write_checkpoint(const fs::path& path, const FieldParams& params,
                      const DensityParams& density) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::int32_t>(out, params.config.encoding.levels);
  put_le<std::int32_t>(out, params.config.encoding.include_input ? 1 : 0);
  put_le<std::int32_t>(out, params.config.sdf_width);
  put_le<std::int32_t>(out, params.config.color_width);
  put_le<double>(out, density.alpha);
  put_le<double>(out, density.beta);
  const auto layer_count = static_cast<std::uint32_t>(params.sdf.layers.size() + params.color.layers.size());
  put_le<std::uint32_t>(out, layer_count);
  for (const MlpSpec* spec : {&params.sdf, &params.color}) {
    for (const auto& layer : spec->layers) {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.in));
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.out));
    }
  }
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.values.size()));
  for (Eigen::Index i = 0; i < params.values.size(); ++i) put_le<double>(out, params.values[i]);
  if (!out) fail(ErrorCode::kIoError, "failed writing " + path.string());
}

FieldParams read_checkpoint(const fs::path& path, DensityParams* density) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    fail(ErrorCode::kFormatError, path.string() + ": not a field checkpoint");
  }
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kFormatError, path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  FieldConfig cfg;
  cfg.encoding.levels = get_le<std::int32_t>(in, path);
  cfg.encoding.include_input = get_le<std::int32_t>(in, path) != 0;
  cfg.sdf_width = get_le<std::int32_t>(in, path);
  cfg.color_width = get_le<std::int32_t>(in, path);
  DensityParams dp;
  dp.alpha = get_le<double>(in, path);
  dp.beta = get_le<double>(in, path);
  if (cfg.encoding.levels < 0 || cfg.encoding.levels > 32 || cfg.sdf_width < 1 || cfg.color_width < 1 ||
      cfg.sdf_width > 1 << 16 || cfg.color_width > 1 << 16) {
    fail(ErrorCode::kFormatError, path.string() + ": implausible network configuration");
  }
  FieldParams params = FieldParams::zeros(cfg);
  const auto layer_count = get_le<std::uint32_t>(in, path);
  if (layer_count != params.sdf.layers.size() + params.color.layers.size()) {
    fail(ErrorCode::kFormatError, path.string() + ": layer count mismatch");
  }
  for (const MlpSpec* spec : {&params.sdf, &params.color}) {
    for (const auto& layer : spec->layers) {
      const auto lin = get_le<std::uint32_t>(in, path);
      const auto lout = get_le<std::uint32_t>(in, path);
      if (static_cast<int>(lin) != layer.in || static_cast<int>(lout) != layer.out) {
        fail(ErrorCode::kFormatError, path.string() + ": layer shape mismatch");
      }
    }
  }
  const auto count = get_le<std::uint64_t>(in, path);
  if (count != params.size()) fail(ErrorCode::kFormatError, path.string() + ": parameter count mismatch");
  for (std::uint64_t i = 0; i < count; ++i) params.values[static_cast<Eigen::Index>(i)] = get_le<double>(in, path);
  if (density) *density = dp;
  return params;
}

}  // namespace scanfill
