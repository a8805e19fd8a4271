#include "refgen/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace refgen {

namespace {

[[noreturn]] void fail(const std::filesystem::path& p, const std::string& what) {
    throw std::runtime_error(p.string() + ": " + what);
}

// Reads one PNM header token, skipping whitespace and # comments.
int read_pnm_int(std::istream& in, const std::filesystem::path& p) {
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
        } else if (!std::isspace(c)) {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c))
        fail(p, "malformed header");
    int v = c - '0';
    while ((c = in.get()) != EOF && std::isdigit(c))
        v = v * 10 + (c - '0');
    return v;
}

std::ifstream open_in(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in)
        fail(p, "cannot open");
    return in;
}

std::ofstream open_out(const std::filesystem::path& p) {
    if (p.has_parent_path())
        std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out)
        fail(p, "cannot write");
    return out;
}

void check_magic(std::istream& in, const char* magic, const std::filesystem::path& p) {
    char m[2];
    in.read(m, 2);
    if (!in || m[0] != magic[0] || m[1] != magic[1])
        fail(p, std::string("not a ") + magic + " file");
}

void check_dims(int w, int h, int maxval, const std::filesystem::path& p) {
    if (w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15)
        fail(p, "bad dimensions");
    if (maxval != 255)
        fail(p, "only maxval 255 supported");
}

void clamp_rect(int& x, int& y, int& rw, int& rh, int w, int h) {
    int x1 = std::clamp(x, 0, w), y1 = std::clamp(y, 0, h);
    int x2 = std::clamp(x + rw, 0, w), y2 = std::clamp(y + rh, 0, h);
    x = x1;
    y = y1;
    rw = x2 - x1;
    rh = y2 - y1;
}

}  // namespace

Image::Image(int w_, int h_, uint8_t r, uint8_t g, uint8_t b) : w(w_), h(h_) {
    px.resize((size_t)3 * w * h);
    for (size_t i = 0; i < px.size(); i += 3) {
        px[i] = r;
        px[i + 1] = g;
        px[i + 2] = b;
    }
}

Mask::Mask(int w_, int h_, uint8_t v) : w(w_), h(h_), px((size_t)w_ * h_, v) {}

Image load_ppm(const std::filesystem::path& p) {
    auto in = open_in(p);
    check_magic(in, "P6", p);
    int w = read_pnm_int(in, p);
    int h = read_pnm_int(in, p);
    int maxval = read_pnm_int(in, p);
    check_dims(w, h, maxval, p);
    Image img;
    img.w = w;
    img.h = h;
    img.px.resize((size_t)3 * w * h);
    in.read(reinterpret_cast<char*>(img.px.data()), (std::streamsize)img.px.size());
    if ((size_t)in.gcount() != img.px.size())
        fail(p, "truncated pixel data");
    return img;
}

void save_ppm(const std::filesystem::path& p, const Image& img) {
    auto out = open_out(p);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()), (std::streamsize)img.px.size());
    if (!out)
        fail(p, "write failed");
}

Mask load_pgm(const std::filesystem::path& p) {
    auto in = open_in(p);
    check_magic(in, "P5", p);
    int w = read_pnm_int(in, p);
    int h = read_pnm_int(in, p);
    int maxval = read_pnm_int(in, p);
    check_dims(w, h, maxval, p);
    Mask m;
    m.w = w;
    m.h = h;
    m.px.resize((size_t)w * h);
    in.read(reinterpret_cast<char*>(m.px.data()), (std::streamsize)m.px.size());
    if ((size_t)in.gcount() != m.px.size())
        fail(p, "truncated pixel data");
    for (auto& v : m.px)
        v = v >= 128 ? 1 : 0;
    return m;
}

void save_pgm(const std::filesystem::path& p, const Mask& m) {
    auto out = open_out(p);
    out << "P5\n" << m.w << " " << m.h << "\n255\n";
    std::vector<uint8_t> bytes(m.px.size());
    for (size_t i = 0; i < bytes.size(); i++)
        bytes[i] = m.px[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!out)
        fail(p, "write failed");
}

Image resize_nearest(const Image& img, int nw, int nh) {
    if (nw <= 0 || nh <= 0)
        throw std::invalid_argument("resize to non-positive size");
    Image out;
    out.w = nw;
    out.h = nh;
    out.px.resize((size_t)3 * nw * nh);
    for (int y = 0; y < nh; y++) {
        int sy = (int)(((int64_t)y * img.h) / nh);
        for (int x = 0; x < nw; x++) {
            int sx = (int)(((int64_t)x * img.w) / nw);
            std::copy_n(img.at(sx, sy), 3, out.at(x, y));
        }
    }
    return out;
}

Mask resize_nearest(const Mask& m, int nw, int nh) {
    if (nw <= 0 || nh <= 0)
        throw std::invalid_argument("resize to non-positive size");
    Mask out(nw, nh);
    for (int y = 0; y < nh; y++) {
        int sy = (int)(((int64_t)y * m.h) / nh);
        for (int x = 0; x < nw; x++)
            out.at(x, y) = m.at((int)(((int64_t)x * m.w) / nw), sy);
    }
    return out;
}

Image crop(const Image& img, int x, int y, int cw, int ch) {
    if (x < 0 || y < 0 || cw <= 0 || ch <= 0 || x + cw > img.w || y + ch > img.h)
        throw std::invalid_argument("crop outside image bounds");
    Image out;
    out.w = cw;
    out.h = ch;
    out.px.resize((size_t)3 * cw * ch);
    for (int row = 0; row < ch; row++)
        std::copy_n(img.at(x, y + row), (size_t)3 * cw, out.at(0, row));
    return out;
}

Mask crop(const Mask& m, int x, int y, int cw, int ch) {
    if (x < 0 || y < 0 || cw <= 0 || ch <= 0 || x + cw > m.w || y + ch > m.h)
        throw std::invalid_argument("crop outside mask bounds");
    Mask out(cw, ch);
    for (int row = 0; row < ch; row++)
        std::copy_n(m.px.data() + (size_t)(y + row) * m.w + x, (size_t)cw,
                    out.px.data() + (size_t)row * cw);
    return out;
}

Image hflip(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.h; y++)
        for (int x = 0; x < img.w; x++)
            std::copy_n(img.at(img.w - 1 - x, y), 3, out.at(x, y));
    return out;
}

Mask hflip(const Mask& m) {
    Mask out = m;
    for (int y = 0; y < m.h; y++)
        for (int x = 0; x < m.w; x++)
            out.at(x, y) = m.at(m.w - 1 - x, y);
    return out;
}

void paste(Image& dst, const Image& src, int x, int y) {
    for (int row = 0; row < src.h; row++) {
        int dy = y + row;
        if (dy < 0 || dy >= dst.h)
            continue;
        int sx0 = std::max(0, -x);
        int sx1 = std::min(src.w, dst.w - x);
        if (sx0 < sx1)
            std::copy_n(src.at(sx0, row), (size_t)3 * (sx1 - sx0), dst.at(x + sx0, dy));
    }
}

void paste(Mask& dst, const Mask& src, int x, int y) {
    for (int row = 0; row < src.h; row++) {
        int dy = y + row;
        if (dy < 0 || dy >= dst.h)
            continue;
        int sx0 = std::max(0, -x);
        int sx1 = std::min(src.w, dst.w - x);
        if (sx0 < sx1)
            std::copy_n(src.px.data() + (size_t)row * src.w + sx0, (size_t)(sx1 - sx0),
                        dst.px.data() + (size_t)dy * dst.w + x + sx0);
    }
}

void fill_rect(Image& img, int x, int y, int rw, int rh, Rgb c) {
    clamp_rect(x, y, rw, rh, img.w, img.h);
    for (int row = 0; row < rh; row++)
        for (int col = 0; col < rw; col++) {
            uint8_t* p = img.at(x + col, y + row);
            p[0] = c.r;
            p[1] = c.g;
            p[2] = c.b;
        }
}

void fill_rect(Mask& m, int x, int y, int rw, int rh, uint8_t v) {
    clamp_rect(x, y, rw, rh, m.w, m.h);
    for (int row = 0; row < rh; row++)
        for (int col = 0; col < rw; col++)
            m.at(x + col, y + row) = v ? 1 : 0;
}

Image apply_background_fill(const Image& img, const Mask& m, Rgb fill) {
    if (img.w != m.w || img.h != m.h)
        throw std::invalid_argument("mask size does not match image");
    Image out = img;
    for (int y = 0; y < img.h; y++)
        for (int x = 0; x < img.w; x++)
            if (!m.at(x, y)) {
                uint8_t* p = out.at(x, y);
                p[0] = fill.r;
                p[1] = fill.g;
                p[2] = fill.b;
            }
    return out;
}

Tensor image_to_tensor(const Image& img) {
    Tensor t({3, img.h, img.w});
    int64_t hw = (int64_t)img.w * img.h;
    for (int y = 0; y < img.h; y++)
        for (int x = 0; x < img.w; x++) {
            const uint8_t* p = img.at(x, y);
            int64_t i = (int64_t)y * img.w + x;
            for (int c = 0; c < 3; c++)
                t[c * hw + i] = p[c] / 127.5 - 1.0;
        }
    return t;
}

Image tensor_to_image(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 3)
        throw std::invalid_argument("expected [3,H,W] tensor, got " + t.shape_str());
    int h = (int)t.dim(1), w = (int)t.dim(2);
    Image img(w, h);
    int64_t hw = (int64_t)w * h;
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            uint8_t* p = img.at(x, y);
            int64_t i = (int64_t)y * w + x;
            for (int c = 0; c < 3; c++) {
                double v = std::round((t[c * hw + i] + 1.0) * 127.5);
                p[c] = (uint8_t)std::clamp(v, 0.0, 255.0);
            }
        }
    return img;
}

Tensor pool_mask(const Mask& m, int factor) {
    if (factor <= 0 || m.w % factor != 0 || m.h % factor != 0)
        throw std::invalid_argument("mask size not divisible by pooling factor");
    int lw = m.w / factor, lh = m.h / factor;
    Tensor t({1, lh, lw});
    int threshold = (factor * factor + 1) / 2;  // "at least half"
    for (int y = 0; y < lh; y++)
        for (int x = 0; x < lw; x++) {
            int count = 0;
            for (int dy = 0; dy < factor; dy++)
                for (int dx = 0; dx < factor; dx++)
                    count += m.at(x * factor + dx, y * factor + dy);
            t[(int64_t)y * lw + x] = count >= threshold ? 1.0 : 0.0;
        }
    return t;
}

}  // namespace refgen
