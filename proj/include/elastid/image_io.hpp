#pragma once

#include <string>

#include "elastid/projection.hpp"

namespace elastid {

// Binary PPM (P6), values scaled from [0,1] to 8 bits.
void write_ppm(const ImageF& image, const std::string& path);
ImageF read_ppm(const std::string& path);

// Binary PGM (P5); masks write 0/255.
void write_pgm(const MaskImage& mask, const std::string& path);
MaskImage read_pgm(const std::string& path);

}  // namespace elastid
