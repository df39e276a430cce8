#include "magik/png.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <zlib.h>

namespace magik::png {
namespace {

// 5x7 glyphs, 7 rows of 5 bits (MSB left). Lowercase maps to uppercase;
// anything unknown renders as blank.
const std::uint8_t* glyph(char ch) {
  static const struct {
    char c;
    std::uint8_t rows[7];
  } kFont[] = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
  };
  char up = (ch >= 'a' && ch <= 'z') ? static_cast<char>(ch - 'a' + 'A') : ch;
  for (const auto& g : kFont)
    if (g.c == up) return g.rows;
  return nullptr;
}

void be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>(v & 0xFF));
}

void chunk(std::string& out, const char type[4], const std::string& data) {
  be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  std::uint32_t crc = ::crc32(0L, nullptr, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(body.data()),
                static_cast<uInt>(body.size()));
  be32(out, crc);
}

Rgb lighten(Rgb c, float amount) {
  auto mix = [&](std::uint8_t v) {
    return static_cast<std::uint8_t>(v + (255 - v) * amount);
  };
  return {mix(c.r), mix(c.g), mix(c.b)};
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

Canvas::Canvas(int width, int height, Rgb background) : w_(width), h_(height) {
  px_.resize(static_cast<std::size_t>(w_) * h_ * 3);
  for (int i = 0; i < w_ * h_; ++i) {
    px_[3 * i + 0] = background.r;
    px_[3 * i + 1] = background.g;
    px_[3 * i + 2] = background.b;
  }
}

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  std::size_t i = 3 * (static_cast<std::size_t>(y) * w_ + x);
  px_[i] = c.r;
  px_[i + 1] = c.g;
  px_[i + 2] = c.b;
}

void Canvas::fill_rect(int x, int y, int w, int h, Rgb c) {
  for (int yy = y; yy < y + h; ++yy)
    for (int xx = x; xx < x + w; ++xx) set(xx, yy, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
  int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::text(int x, int y, const std::string& s, Rgb c) {
  for (char ch : s) {
    if (const std::uint8_t* g = glyph(ch)) {
      for (int r = 0; r < 7; ++r)
        for (int b = 0; b < 5; ++b)
          if (g[r] & (1 << (4 - b))) set(x + b, y + r, c);
    }
    x += 6;
  }
}

void write_png(const std::string& path, const Canvas& canvas) {
  const int w = canvas.width(), h = canvas.height();
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * w));
  const std::uint8_t* px = canvas.pixels().data();
  for (int y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter type 0 (none)
    raw.append(reinterpret_cast<const char*>(px + static_cast<std::size_t>(y) * w * 3),
               static_cast<std::size_t>(w) * 3);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                9) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  compressed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  be32(ihdr, static_cast<std::uint32_t>(w));
  be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);   // deflate
  ihdr.push_back(0);   // adaptive filtering
  ihdr.push_back(0);   // no interlace
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", compressed);
  chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<double> ema_smooth(const std::vector<double>& y, double factor) {
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    out[i] = i == 0 ? y[0] : factor * out[i - 1] + (1.0 - factor) * y[i];
  return out;
}

void write_line_chart(const std::string& path, const std::vector<Series>& series,
                      const std::string& x_label, const std::string& y_label, int width,
                      int height) {
  const int ml = 58, mr = 14, mt = 22, mb = 40;
  Canvas cv(width, height);
  const Rgb axis{90, 90, 90}, label{50, 50, 50};

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const int x0 = ml, x1 = width - mr, y0 = height - mb, y1 = mt;
  auto px = [&](double x) {
    return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
  };
  auto py = [&](double y) {
    return y0 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y0 - y1)));
  };

  cv.line(x0, y0, x1, y0, axis);
  cv.line(x0, y0, x0, y1, axis);
  for (int t = 0; t <= 4; ++t) {
    double xv = xmin + (xmax - xmin) * t / 4.0;
    double yv = ymin + (ymax - ymin) * t / 4.0;
    int xs = px(xv), ys = py(yv);
    cv.line(xs, y0, xs, y0 + 3, axis);
    cv.line(x0 - 3, ys, x0, ys, axis);
    std::string xt = fmt_tick(xv), yt = fmt_tick(yv);
    cv.text(xs - 3 * static_cast<int>(xt.size()), y0 + 6, xt, label);
    cv.text(x0 - 6 - 6 * static_cast<int>(yt.size()), ys - 3, yt, label);
  }
  cv.text((x0 + x1) / 2 - 3 * static_cast<int>(x_label.size()), height - 12, x_label, label);
  cv.text(4, 4, y_label, label);

  int legend_x = x0 + 8;
  for (const auto& s : series) {
    if (s.x.empty()) continue;
    Rgb faint = lighten(s.color, 0.7f);
    for (std::size_t i = 1; i < s.x.size(); ++i)
      cv.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), faint);
    std::vector<double> sm = ema_smooth(s.y, 0.9);
    for (std::size_t i = 1; i < s.x.size(); ++i)
      cv.line(px(s.x[i - 1]), py(sm[i - 1]), px(s.x[i]), py(sm[i]), s.color);
    if (!s.name.empty()) {
      cv.fill_rect(legend_x, y1 - 14, 10, 4, s.color);
      cv.text(legend_x + 14, y1 - 17, s.name, label);
      legend_x += 14 + 6 * static_cast<int>(s.name.size()) + 14;
    }
  }
  write_png(path, cv);
}

void write_image_grid(const std::string& path, const Tensor& grid, int scale) {
  if (grid.shape().size() != 5 || grid.shape()[4] != 3)
    throw std::invalid_argument("write_image_grid wants a [rows, cols, H, W, 3] tensor");
  const int rows = grid.shape()[0], cols = grid.shape()[1];
  const int ih = grid.shape()[2], iw = grid.shape()[3];
  const int sep = 2;
  Canvas cv(cols * (iw * scale + sep) + sep, rows * (ih * scale + sep) + sep, {40, 40, 40});
  const float* g = grid.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const float* cell =
          g + ((static_cast<std::size_t>(r) * cols + c) * ih * iw * 3);
      int ox = sep + c * (iw * scale + sep);
      int oy = sep + r * (ih * scale + sep);
      for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x) {
          const float* p = cell + (static_cast<std::size_t>(y) * iw + x) * 3;
          auto q = [](float v) {
            v = std::min(1.0f, std::max(0.0f, v));
            return static_cast<std::uint8_t>(std::lround(255.0f * v));
          };
          Rgb col{q(p[0]), q(p[1]), q(p[2])};
          cv.fill_rect(ox + x * scale, oy + y * scale, scale, scale, col);
        }
    }
  write_png(path, cv);
}

}  // namespace magik::png
