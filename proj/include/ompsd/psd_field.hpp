#pragma once

// Discretized phase-space distributions on Cartesian (A_x, A_y) grids and
// on radial grids, with CSV persistence.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "ompsd/error.hpp"

namespace ompsd {

/// Uniform cell-centered grid over [x_min, x_max] x [y_min, y_max].
struct CartesianGrid {
  std::size_t nx = 0;
  std::size_t ny = 0;
  double x_min = 0.0;
  double x_max = 0.0;
  double y_min = 0.0;
  double y_max = 0.0;

  static CartesianGrid square(std::size_t cells, double half_width) {
    return CartesianGrid{cells, cells, -half_width, half_width, -half_width, half_width};
  }

  double dx() const { return (x_max - x_min) / static_cast<double>(nx); }
  double dy() const { return (y_max - y_min) / static_cast<double>(ny); }
  double cell_area() const { return dx() * dy(); }
  std::size_t size() const { return nx * ny; }
  double x(std::size_t i) const { return x_min + (static_cast<double>(i) + 0.5) * dx(); }
  double y(std::size_t j) const { return y_min + (static_cast<double>(j) + 0.5) * dy(); }
  std::size_t index(std::size_t i, std::size_t j) const { return j * nx + i; }

  void validate() const {
    if (nx == 0 || ny == 0 || !(x_max > x_min) || !(y_max > y_min))
      throw InvalidArgument("CartesianGrid: empty or inverted extents");
  }

  bool operator==(const CartesianGrid&) const = default;
};

/// Node-centered radial grid r_i = i dr. Node i owns the annulus
/// [r_i - dr/2, r_i + dr/2] clipped at 0, so the innermost face sits at dr/2.
struct RadialGrid {
  std::size_t n = 0;
  double dr = 0.0;

  double r(std::size_t i) const { return static_cast<double>(i) * dr; }
  double r_max() const { return static_cast<double>(n - 1) * dr; }
  std::size_t size() const { return n; }
  double volume(std::size_t i) const {
    return i == 0 ? std::numbers::pi * 0.25 * dr * dr
                  : 2.0 * std::numbers::pi * r(i) * dr;
  }
  /// Circumference of the face between node i and i + 1.
  double face_length(std::size_t i) const {
    return 2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) * dr;
  }

  void validate() const {
    if (n < 2 || !(dr > 0.0)) throw InvalidArgument("RadialGrid: need n >= 2 and dr > 0");
  }

  bool operator==(const RadialGrid&) const = default;
};

/// Non-negative density values on a grid. Values are densities per unit
/// phase-space area, so the mass is the volume-weighted sum.
template <class Grid>
struct PsdField {
  Grid grid;
  std::vector<double> values;
  double time = 0.0;

  PsdField() = default;
  PsdField(Grid g, std::vector<double> v, double t = 0.0)
      : grid(std::move(g)), values(std::move(v)), time(t) {
    if (values.size() != grid.size()) throw InvalidArgument("PsdField: value count does not match grid");
  }
  explicit PsdField(Grid g) : grid(std::move(g)), values(grid.size(), 0.0) {}

  double volume(std::size_t k) const {
    if constexpr (std::is_same_v<Grid, CartesianGrid>) {
      (void)k;
      return grid.cell_area();
    } else {
      return grid.volume(k);
    }
  }

  double mass() const {
    double m = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) m += values[k] * volume(k);
    return m;
  }

  double min_value() const {
    double m = values.empty() ? 0.0 : values.front();
    for (double v : values) m = std::min(m, v);
    return m;
  }

  /// Scales to unit mass; throws if there is no mass to scale.
  PsdField& normalize() {
    const double m = mass();
    if (!(m > 0.0) || !std::isfinite(m)) throw NumericalError("PsdField: cannot normalize a field without mass");
    for (double& v : values) v /= m;
    return *this;
  }
};

using PsdField2d = PsdField<CartesianGrid>;
using RadialPsd = PsdField<RadialGrid>;

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError(where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// CSV layout:
///   # ompsd-psd v1
///   # grid,cartesian,nx,ny,x_min,x_max,y_min,y_max   (or  # grid,radial,n,dr)
///   # time_label,<seconds>
///   x,y,p                                           (or  r,p)
///   one record per cell, x fastest; 17 significant digits.
inline std::string to_csv(const PsdField2d& f) {
  using detail::format_double;
  std::string out = "# ompsd-psd v1\n# grid,cartesian," + std::to_string(f.grid.nx) + "," +
                    std::to_string(f.grid.ny) + "," + format_double(f.grid.x_min) + "," +
                    format_double(f.grid.x_max) + "," + format_double(f.grid.y_min) + "," +
                    format_double(f.grid.y_max) + "\n# time_label," + format_double(f.time) +
                    "\nx,y,p\n";
  for (std::size_t j = 0; j < f.grid.ny; ++j)
    for (std::size_t i = 0; i < f.grid.nx; ++i) {
      out += format_double(f.grid.x(i));
      out += ',';
      out += format_double(f.grid.y(j));
      out += ',';
      out += format_double(f.values[f.grid.index(i, j)]);
      out += '\n';
    }
  return out;
}

inline std::string to_csv(const RadialPsd& f) {
  using detail::format_double;
  std::string out = "# ompsd-psd v1\n# grid,radial," + std::to_string(f.grid.n) + "," +
                    format_double(f.grid.dr) + "\n# time_label," + format_double(f.time) + "\nr,p\n";
  for (std::size_t i = 0; i < f.grid.n; ++i) {
    out += format_double(f.grid.r(i));
    out += ',';
    out += format_double(f.values[i]);
    out += '\n';
  }
  return out;
}

namespace detail {

struct ParsedPsd {
  bool radial = false;
  CartesianGrid cart;
  RadialGrid rad;
  double time = 0.0;
  std::vector<double> values;
};

inline ParsedPsd parse_psd_csv(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  ParsedPsd p;
  bool have_grid = false;
  std::size_t line_no = 0;
  auto where = [&] { return name + ":" + std::to_string(line_no); };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# grid,", 0) == 0) {
      const auto parts = split(std::string_view(line).substr(2));
      if (parts.size() == 8 && parts[1] == "cartesian") {
        p.cart.nx = static_cast<std::size_t>(parse_double(parts[2], where()));
        p.cart.ny = static_cast<std::size_t>(parse_double(parts[3], where()));
        p.cart.x_min = parse_double(parts[4], where());
        p.cart.x_max = parse_double(parts[5], where());
        p.cart.y_min = parse_double(parts[6], where());
        p.cart.y_max = parse_double(parts[7], where());
      } else if (parts.size() == 4 && parts[1] == "radial") {
        p.radial = true;
        p.rad.n = static_cast<std::size_t>(parse_double(parts[2], where()));
        p.rad.dr = parse_double(parts[3], where());
      } else {
        throw ConfigError(where() + ": malformed grid header");
      }
      have_grid = true;
    } else if (line.rfind("# time_label,", 0) == 0) {
      p.time = parse_double(std::string_view(line).substr(13), where());
    } else if (line[0] == '#' || line == "x,y,p" || line == "r,p") {
      continue;
    } else {
      const auto parts = split(line);
      if (parts.size() != (p.radial ? 2u : 3u)) throw ConfigError(where() + ": wrong field count");
      p.values.push_back(parse_double(parts.back(), where()));
    }
  }
  if (!have_grid) throw ConfigError(name + ": missing grid header");
  return p;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline PsdField2d psd2d_from_csv(const std::string& text, const std::string& name = "<csv>") {
  auto p = detail::parse_psd_csv(text, name);
  if (p.radial) throw ConfigError(name + ": expected a cartesian PSD");
  return PsdField2d(p.cart, std::move(p.values), p.time);
}

inline RadialPsd radial_from_csv(const std::string& text, const std::string& name = "<csv>") {
  auto p = detail::parse_psd_csv(text, name);
  if (!p.radial) throw ConfigError(name + ": expected a radial PSD");
  return RadialPsd(p.rad, std::move(p.values), p.time);
}

/// Bilinear interpolation of cell-centered values; zero outside the grid.
inline double sample_bilinear(const PsdField2d& f, double x, double y) {
  const auto& g = f.grid;
  const double u = (x - g.x_min) / g.dx() - 0.5;
  const double v = (y - g.y_min) / g.dy() - 0.5;
  if (u < -0.5 || v < -0.5 || u > static_cast<double>(g.nx) - 0.5 || v > static_cast<double>(g.ny) - 0.5)
    return 0.0;
  const double uc = std::clamp(u, 0.0, static_cast<double>(g.nx - 1));
  const double vc = std::clamp(v, 0.0, static_cast<double>(g.ny - 1));
  const auto i0 = std::min(static_cast<std::size_t>(uc), g.nx > 1 ? g.nx - 2 : 0);
  const auto j0 = std::min(static_cast<std::size_t>(vc), g.ny > 1 ? g.ny - 2 : 0);
  const std::size_t i1 = std::min(i0 + 1, g.nx - 1);
  const std::size_t j1 = std::min(j0 + 1, g.ny - 1);
  const double fu = uc - static_cast<double>(i0);
  const double fv = vc - static_cast<double>(j0);
  const auto at = [&](std::size_t i, std::size_t j) { return f.values[g.index(i, j)]; };
  return (1 - fu) * (1 - fv) * at(i0, j0) + fu * (1 - fv) * at(i1, j0) + (1 - fu) * fv * at(i0, j1) +
         fu * fv * at(i1, j1);
}

/// Linear interpolation of a radial profile; zero beyond the last node.
inline double sample_radial(const RadialPsd& f, double r) {
  const double u = r / f.grid.dr;
  if (u > static_cast<double>(f.grid.n - 1)) return 0.0;
  const auto i0 = std::min(static_cast<std::size_t>(u), f.grid.n - 2);
  const double t = u - static_cast<double>(i0);
  return (1 - t) * f.values[i0] + t * f.values[i0 + 1];
}

/// Rotationally symmetric 2D field built from a radial profile, renormalized.
inline PsdField2d radial_to_cartesian(const RadialPsd& f, const CartesianGrid& grid, int subsamples = 4) {
  PsdField2d out(grid);
  out.time = f.time;
  const double dx = grid.dx(), dy = grid.dy();
  for (std::size_t j = 0; j < grid.ny; ++j)
    for (std::size_t i = 0; i < grid.nx; ++i) {
      double acc = 0.0;
      for (int a = 0; a < subsamples; ++a)
        for (int b = 0; b < subsamples; ++b) {
          const double x = grid.x(i) + ((a + 0.5) / subsamples - 0.5) * dx;
          const double y = grid.y(j) + ((b + 0.5) / subsamples - 0.5) * dy;
          acc += sample_radial(f, std::hypot(x, y));
        }
      out.values[grid.index(i, j)] = acc / (subsamples * subsamples);
    }
  if (out.mass() > 0.0) out.normalize();
  return out;
}

/// Angle average of a 2D field onto a radial grid (density per unit area).
inline RadialPsd angular_average(const PsdField2d& f, const RadialGrid& grid, int angles = 256) {
  RadialPsd out(grid);
  out.time = f.time;
  for (std::size_t k = 0; k < grid.n; ++k) {
    double acc = 0.0;
    for (int a = 0; a < angles; ++a) {
      const double th = 2.0 * std::numbers::pi * (a + 0.5) / angles;
      acc += sample_bilinear(f, grid.r(k) * std::cos(th), grid.r(k) * std::sin(th));
    }
    out.values[k] = acc / angles;
  }
  return out;
}

}  // namespace ompsd
