#pragma once

// 8-bit raster images and binary masks, with the PPM/PGM loaders and the
// handful of raster ops the synthesis stage needs. Masks hold {0,1} in
// memory and are scaled to {0,255} on disk.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "refgen/tensor.hpp"

namespace refgen {

struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // RGB interleaved, row-major

    Image() = default;
    Image(int w, int h, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0);
    uint8_t* at(int x, int y) { return px.data() + 3 * ((size_t)y * w + x); }
    const uint8_t* at(int x, int y) const { return px.data() + 3 * ((size_t)y * w + x); }
    bool same_size(const Image& o) const { return w == o.w && h == o.h; }
};

struct Mask {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // 0 or 1

    Mask() = default;
    Mask(int w, int h, uint8_t v = 0);
    uint8_t& at(int x, int y) { return px[(size_t)y * w + x]; }
    uint8_t at(int x, int y) const { return px[(size_t)y * w + x]; }
};

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
};

// Binary P6/P5 with a canonical header; loaders accept comments and any
// whitespace, writers always emit the same bytes for the same pixels.
Image load_ppm(const std::filesystem::path& p);
void save_ppm(const std::filesystem::path& p, const Image& img);
Mask load_pgm(const std::filesystem::path& p);  // >= 128 reads as 1
void save_pgm(const std::filesystem::path& p, const Mask& m);

Image resize_nearest(const Image& img, int nw, int nh);
Mask resize_nearest(const Mask& m, int nw, int nh);
Image crop(const Image& img, int x, int y, int cw, int ch);
Mask crop(const Mask& m, int x, int y, int cw, int ch);
Image hflip(const Image& img);
Mask hflip(const Mask& m);
void paste(Image& dst, const Image& src, int x, int y);
void paste(Mask& dst, const Mask& src, int x, int y);
void fill_rect(Image& img, int x, int y, int rw, int rh, Rgb c);
void fill_rect(Mask& m, int x, int y, int rw, int rh, uint8_t v);

// Pixels with mask 0 are replaced by the fill color.
Image apply_background_fill(const Image& img, const Mask& m, Rgb fill);

// [3,H,W] doubles in [-1,1]; tensor_to_image clamps back to bytes.
Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

// Area-pool a pixel mask down by `factor` (sizes must divide); a cell is 1
// when at least half its pixels are 1. Returned as a [1,h,w] 0/1 tensor.
Tensor pool_mask(const Mask& m, int factor);

}  // namespace refgen
