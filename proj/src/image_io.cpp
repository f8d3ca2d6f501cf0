#include "elastid/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "elastid/errors.hpp"

namespace elastid {

namespace {

void skip_pnm_whitespace(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
}

int read_pnm_int(std::istream& in) {
  skip_pnm_whitespace(in);
  int v = 0;
  in >> v;
  return v;
}

}  // namespace

void write_ppm(const ImageF& image, const std::string& path) {
  if (image.channels != 3)
    throw InvalidParameterError("write_ppm: expected a 3-channel image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_ppm: cannot open '" + path + "'");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<std::uint8_t> row(image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const float* px = image.at(y, x);
      for (int c = 0; c < 3; ++c)
        row[x * 3 + c] = static_cast<std::uint8_t>(
            std::lround(std::clamp(px[c], 0.f, 1.f) * 255.f));
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("write_ppm: write failed for '" + path + "'");
}

ImageF read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_ppm: cannot open '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError("read_ppm: '" + path + "' is not P6");
  const int w = read_pnm_int(in);
  const int h = read_pnm_int(in);
  const int maxval = read_pnm_int(in);
  if (maxval != 255) throw FormatError("read_ppm: only 8-bit supported");
  in.get();  // single whitespace
  ImageF img = ImageF::zeros(h, w, 3);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw CorruptionError("read_ppm: truncated '" + path + "'");
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.data[i] = static_cast<float>(raw[i]) / 255.f;
  return img;
}

void write_pgm(const MaskImage& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_pgm: cannot open '" + path + "'");
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<std::uint8_t> row(mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) row[x] = mask.at(y, x) ? 255 : 0;
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("write_pgm: write failed for '" + path + "'");
}

MaskImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_pgm: cannot open '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError("read_pgm: '" + path + "' is not P5");
  const int w = read_pnm_int(in);
  const int h = read_pnm_int(in);
  const int maxval = read_pnm_int(in);
  if (maxval <= 0 || maxval > 255)
    throw FormatError("read_pgm: unsupported max value");
  in.get();
  MaskImage mask = MaskImage::zeros(h, w);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw CorruptionError("read_pgm: truncated '" + path + "'");
  for (std::size_t i = 0; i < raw.size(); ++i)
    mask.data[i] = raw[i] >= maxval / 2 ? 1 : 0;
  return mask;
}

}  // namespace elastid
