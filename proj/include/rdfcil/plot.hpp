#pragma once

// Static plot files: incremental-accuracy curves (SVG) and image grids (PNG).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>
#include <torch/torch.h>

#include "rdfcil/errors.hpp"

namespace rdfcil {

struct Curve {
  std::string label;
  std::vector<double> x;  // learned classes
  std::vector<double> y;  // accuracy in percent
};

inline void write_curves_svg(const std::filesystem::path& file, const std::vector<Curve>& curves,
                             const std::string& title) {
  const double W = 640, H = 420, L = 60, R = 160, T = 40, Bm = 50;
  double xmin = 1e300, xmax = -1e300;
  for (const auto& c : curves) {
    for (double v : c.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
  }
  if (xmin > xmax) xmin = 0, xmax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  auto px = [&](double v) { return L + (v - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double v) { return T + (100.0 - v) / 100.0 * (H - T - Bm); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - Bm << "\" x2=\"" << W - R << "\" y2=\"" << H - Bm
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - Bm << "\" stroke=\"black\"/>\n";
  for (int a = 0; a <= 100; a += 20) {
    s << "<text x=\"" << L - 8 << "\" y=\"" << py(a) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << a
      << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-size=\"12\">Number of classes</text>\n"
    << "<text x=\"16\" y=\"" << (T + H - Bm) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
    << (T + H - Bm) / 2 << ")\" text-anchor=\"middle\">Accuracy (%)</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* colour = palette[i % (sizeof(palette) / sizeof(*palette))];
    s << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < c.x.size() && k < c.y.size(); ++k) s << px(c.x[k]) << ',' << py(c.y[k]) << ' ';
    s << "\"/>\n";
    for (std::size_t k = 0; k < c.x.size() && k < c.y.size(); ++k) {
      s << "<circle cx=\"" << px(c.x[k]) << "\" cy=\"" << py(c.y[k]) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    }
    const double ly = T + 14 + 18 * static_cast<double>(i);
    s << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"12\" fill=\"" << colour
      << "\"/><text x=\"" << W - R + 30 << "\" y=\"" << ly + 1 << "\" font-size=\"12\">" << c.label << "</text>\n";
  }
  s << "</svg>\n";
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << s.str();
}

// images: float (N, C, H, W) in [0, 1], C in {1, 3}; laid out k per row.
inline void write_png_grid(const std::filesystem::path& file, const torch::Tensor& images, std::int64_t per_row,
                           std::int64_t scale = 1) {
  detail::require(images.dim() == 4 && (images.size(1) == 1 || images.size(1) == 3), "png grid: bad image shape ",
                  images.sizes());
  detail::require(per_row >= 1 && scale >= 1, "png grid: per_row and scale must be >= 1");
  const auto n = images.size(0), h = images.size(2), w = images.size(3);
  const auto rows = (n + per_row - 1) / per_row;
  const std::int64_t pad = 1;
  const auto cell_h = h * scale + pad, cell_w = w * scale + pad;
  const auto H = rows * cell_h + pad, W = per_row * cell_w + pad;
  auto img = (images.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  if (img.size(1) == 1) img = img.expand({n, 3, h, w}).contiguous();
  auto acc = img.accessor<std::uint8_t, 4>();
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(H * W * 3), 255);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto oy = (i / per_row) * cell_h + pad, ox = (i % per_row) * cell_w + pad;
    for (std::int64_t y = 0; y < h * scale; ++y) {
      for (std::int64_t x = 0; x < w * scale; ++x) {
        for (int c = 0; c < 3; ++c) {
          buf[static_cast<std::size_t>(((oy + y) * W + ox + x) * 3 + c)] = acc[i][c][y / scale][x / scale];
        }
      }
    }
  }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(file.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot write " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + file.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::int64_t y = 0; y < H; ++y) png_write_row(png, buf.data() + static_cast<std::size_t>(y * W * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace rdfcil
