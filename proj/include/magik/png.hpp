#pragma once

// PNG output for the traversal grids and training-curve plots: an RGB
// canvas with just enough drawing (rectangles, lines, 5x7 bitmap text) for
// axis-and-polyline charts, streamed out as one zlib-compressed IDAT.

#include <cstdint>
#include <string>
#include <vector>

#include "magik/tensor.hpp"

namespace magik::png {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

class Canvas {
 public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});

  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, Rgb c);
  void fill_rect(int x, int y, int w, int h, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  /// 5x7 bitmap glyphs (digits, upper/lower letters, ".-+%/ "), scale 1.
  void text(int x, int y, const std::string& s, Rgb c);

  const std::vector<std::uint8_t>& pixels() const { return px_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;  // RGB, row-major
};

/// Truecolor 8-bit PNG (filter 0 scanlines, single IDAT).
void write_png(const std::string& path, const Canvas& canvas);

struct Series {
  std::string name;
  std::vector<double> x, y;
  Rgb color{31, 119, 180};
};

/// Exponential moving average with the given retention factor; the first
/// output equals the first input.
std::vector<double> ema_smooth(const std::vector<double>& y, double factor);

/// Axis-and-polyline chart. Each series is drawn faint at its raw values
/// and solid after EMA smoothing (factor 0.9); names go into a legend line.
void write_line_chart(const std::string& path, const std::vector<Series>& series,
                      const std::string& x_label, const std::string& y_label, int width = 640,
                      int height = 400);

/// Renders a [rows, cols, H, W, 3] float grid (values in [0,1]) as one
/// image: cells upscaled by `scale`, 2-px separators.
void write_image_grid(const std::string& path, const Tensor& grid, int scale = 3);

}  // namespace magik::png
