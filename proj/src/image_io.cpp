#include "fusionreid/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace fusionreid {

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Header tokens of a netpbm file: magic, then integers separated by
// whitespace and '#' comments. Returns the offset of the raster.
struct NetpbmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t raster = 0;
};

NetpbmHeader parse_header(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto bad = [&](const std::string& why) { return DataError("'" + name + "': " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw bad("malformed header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw bad("header value too large");
      ++pos;
    }
    return v;
  };
  NetpbmHeader h;
  if (bytes.size() < 2 || bytes[0] != 'P') throw bad("not a netpbm file");
  h.magic = std::string{static_cast<char>(bytes[0]), static_cast<char>(bytes[1])};
  pos = 2;
  h.width = read_uint();
  h.height = read_uint();
  h.maxval = read_uint();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw bad("malformed header");
  h.raster = pos + 1;
  if (h.width == 0 || h.height == 0) throw bad("empty image");
  if (h.maxval == 0 || h.maxval > 255) throw bad("only 8-bit images are supported");
  return h;
}

void write_bytes(const std::filesystem::path& path, const std::string& header, const std::vector<unsigned char>& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << header;
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

unsigned char to_level(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const NetpbmHeader h = parse_header(bytes, path.string());
  if (h.magic != "P6") throw DataError("'" + path.string() + "': expected a P6 image, found " + h.magic);
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.raster + 3 * n) throw DataError("'" + path.string() + "': truncated raster");
  std::vector<double> data(3 * n);
  const double maxval = static_cast<double>(h.maxval);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) data[c * n + i] = bytes[h.raster + 3 * i + c] / maxval;
  return Tensor({3, h.height, h.width}, std::move(data));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw DimensionError("write_ppm expects [3,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.size(1), w = image.size(2), n = h * w;
  std::vector<unsigned char> raster(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) raster[3 * i + c] = to_level(image[c * n + i]);
  write_bytes(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", raster);
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width) {
  if (values.size() != height * width || values.empty()) {
    throw DimensionError("write_pgm: " + std::to_string(values.size()) + " values for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " map");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::vector<unsigned char> raster(values.size(), 0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < values.size(); ++i) raster[i] = to_level((values[i] - *lo) / range);
  }
  write_bytes(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", raster);
}

std::vector<int> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  const auto bytes = slurp(path);
  const NetpbmHeader h = parse_header(bytes, path.string());
  if (h.magic != "P5") throw DataError("'" + path.string() + "': expected a P5 image");
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.raster + n) throw DataError("'" + path.string() + "': truncated raster");
  height = h.height;
  width = h.width;
  return {bytes.begin() + static_cast<std::ptrdiff_t>(h.raster),
          bytes.begin() + static_cast<std::ptrdiff_t>(h.raster + n)};
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  if (image.dim() != 3) throw DimensionError("resize expects [C,H,W], got " + shape_str(image.shape()));
  if (height == 0 || width == 0) throw ConfigError("resize: target size must be positive");
  const std::size_t c_n = image.size(0), h_in = image.size(1), w_in = image.size(2);
  if (h_in == height && w_in == width) return image.detach().clone();
  std::vector<double> out(c_n * height * width);
  const double sy = static_cast<double>(h_in) / static_cast<double>(height);
  const double sx = static_cast<double>(w_in) / static_cast<double>(width);
  auto sample_axis = [](double pos, std::size_t extent, std::size_t& i0, std::size_t& i1, double& t) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, extent - 1);
    t = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    sample_axis((static_cast<double>(y) + 0.5) * sy - 0.5, h_in, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      sample_axis((static_cast<double>(x) + 0.5) * sx - 0.5, w_in, x0, x1, tx);
      for (std::size_t c = 0; c < c_n; ++c) {
        const double* p = image.data().data() + c * h_in * w_in;
        const double top = p[y0 * w_in + x0] * (1 - tx) + p[y0 * w_in + x1] * tx;
        const double bottom = p[y1 * w_in + x0] * (1 - tx) + p[y1 * w_in + x1] * tx;
        out[(c * height + y) * width + x] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return Tensor({c_n, height, width}, std::move(out));
}

Tensor quantize_8bit(const Tensor& image) {
  std::vector<double> v(image.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = to_level(image[i]) / 255.0;
  return Tensor(image.shape(), std::move(v));
}

}  // namespace fusionreid
