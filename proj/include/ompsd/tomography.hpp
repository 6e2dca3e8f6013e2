#pragma once

// PSD reconstruction from displacement records: lock-in demodulation into
// quadrature samples, direct 2D histograms, rotated-quadrature marginals and
// filtered back-projection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "ompsd/error.hpp"
#include "ompsd/fokker_planck.hpp"
#include "ompsd/langevin.hpp"
#include "ompsd/psd_field.hpp"

namespace ompsd::tomo {

struct QuadratureSample {
  double a_x = 0.0;
  double a_y = 0.0;
  double window_center = 0.0;  ///< s
};

struct DemodWindow {
  std::size_t samples = 0;  ///< trace intervals per window
  double duration = 0.0;    ///< s, an integer number of carrier periods
};

/// Rounds a requested window to whole carrier periods and checks the scale
/// separation: at least 10 periods, and window * slow_rate <= 0.01 when a
/// slow rate is given.
inline DemodWindow demod_window(double carrier, double sample_rate, double window, double slow_rate = 0.0) {
  const double period = 2.0 * std::numbers::pi / carrier;
  const double periods = std::round(window / period);
  if (!(periods >= 10.0))
    throw InvalidArgument("demodulate: window must span at least 10 carrier periods");
  DemodWindow w;
  w.duration = periods * period;
  if (slow_rate > 0.0 && w.duration * slow_rate > 0.01)
    throw InvalidArgument("demodulate: window is not short against the slow dynamics");
  w.samples = static_cast<std::size_t>(std::llround(w.duration * sample_rate));
  if (w.samples < 2) throw InvalidArgument("demodulate: window holds fewer than two samples");
  return w;
}

/// Trapezoidal lock-in estimate over samples [start, start + m].
inline QuadratureSample demodulate_at(const langevin::SignalTrace& tr, std::size_t start, std::size_t m) {
  if (start + m >= tr.samples.size()) throw InvalidArgument("demodulate: window runs past the end of the trace");
  langevin::CarrierPhasor phasor(tr.carrier, tr.sample_rate, tr.time(start), m + 1);
  double sx = 0.0, sy = 0.0;
  for (std::size_t k = 0; k <= m; ++k) {
    double c = 0.0, s = 0.0;
    phasor.at(k, c, s);
    const double w = (k == 0 || k == m) ? 0.5 : 1.0;
    const double x = tr.samples[start + k];
    sx += w * x * c;
    sy += w * x * s;
  }
  // (2 / T) * integral, with T = m / fs and dt = 1 / fs.
  const double scale = 2.0 / static_cast<double>(m);
  return {scale * sx, scale * sy, tr.time(start) + 0.5 * static_cast<double>(m) / tr.sample_rate};
}

/// Consecutive non-overlapping windows covering the trace.
inline std::vector<QuadratureSample> demodulate(const langevin::SignalTrace& tr, double window,
                                                double slow_rate = 0.0) {
  tr.validate();
  const auto w = demod_window(tr.carrier, tr.sample_rate, window, slow_rate);
  if (tr.samples.size() < w.samples + 1) throw InvalidArgument("demodulate: trace shorter than one window");
  std::vector<QuadratureSample> out;
  for (std::size_t start = 0; start + w.samples < tr.samples.size(); start += w.samples)
    out.push_back(demodulate_at(tr, start, w.samples));
  return out;
}

/// Normalized 2D histogram; samples outside the grid are dropped.
inline PsdField2d direct_psd(const std::vector<QuadratureSample>& samples, const CartesianGrid& grid) {
  if (samples.empty()) throw InvalidArgument("direct_psd: no samples");
  grid.validate();
  PsdField2d f(grid);
  std::size_t inside = 0;
  for (const auto& s : samples) {
    const double u = (s.a_x - grid.x_min) / grid.dx();
    const double v = (s.a_y - grid.y_min) / grid.dy();
    if (u < 0.0 || v < 0.0 || u >= static_cast<double>(grid.nx) || v >= static_cast<double>(grid.ny)) continue;
    f.values[grid.index(static_cast<std::size_t>(u), static_cast<std::size_t>(v))] += 1.0;
    ++inside;
  }
  if (inside == 0) throw NumericalError("direct_psd: no sample falls inside the grid");
  f.normalize();
  return f;
}

/// Marginal densities of X_phi = a_x cos(phi) + a_y sin(phi) for K angles
/// phi_k = pi k / K and M bins over [-range, range].
struct Sinogram {
  std::size_t angles = 0;
  std::size_t bins = 0;
  double range = 0.0;
  std::vector<double> density;  ///< angle-major, K x M

  double angle(std::size_t k) const { return std::numbers::pi * static_cast<double>(k) / static_cast<double>(angles); }
  double bin_width() const { return 2.0 * range / static_cast<double>(bins); }
  double bin_center(std::size_t m) const { return -range + (static_cast<double>(m) + 0.5) * bin_width(); }
  double& at(std::size_t k, std::size_t m) { return density[k * bins + m]; }
  double at(std::size_t k, std::size_t m) const { return density[k * bins + m]; }
};

inline void check_sinogram_shape(std::size_t k, std::size_t m, double range) {
  if (k < 16) throw InvalidArgument("sinogram: need at least 16 angles");
  if (m < 64) throw InvalidArgument("sinogram: need at least 64 bins");
  if (!(range > 0.0)) throw InvalidArgument("sinogram: range must be positive");
}

inline Sinogram sinogram(const std::vector<QuadratureSample>& samples, std::size_t k_angles, std::size_t m_bins,
                         double range) {
  if (samples.empty()) throw InvalidArgument("sinogram: no samples");
  check_sinogram_shape(k_angles, m_bins, range);
  Sinogram s{k_angles, m_bins, range, std::vector<double>(k_angles * m_bins, 0.0)};
  const double ds = s.bin_width();
  for (std::size_t k = 0; k < k_angles; ++k) {
    const double c = std::cos(s.angle(k)), sn = std::sin(s.angle(k));
    std::size_t inside = 0;
    for (const auto& q : samples) {
      const double u = (q.a_x * c + q.a_y * sn + range) / ds;
      if (u < 0.0 || u >= static_cast<double>(m_bins)) continue;
      s.at(k, static_cast<std::size_t>(u)) += 1.0;
      ++inside;
    }
    if (inside == 0) throw NumericalError("sinogram: every sample falls outside the bin range");
    for (std::size_t m = 0; m < m_bins; ++m) s.at(k, m) /= static_cast<double>(inside) * ds;
  }
  return s;
}

/// Exact projections of a gridded field, each cell split into sub x sub
/// point masses. Used to test the inversion against known densities.
inline Sinogram project_field(const PsdField2d& f, std::size_t k_angles, std::size_t m_bins, double range,
                              int sub = 4) {
  check_sinogram_shape(k_angles, m_bins, range);
  Sinogram s{k_angles, m_bins, range, std::vector<double>(k_angles * m_bins, 0.0)};
  const auto& g = f.grid;
  const double ds = s.bin_width();
  const double w = g.cell_area() / (sub * sub);
  for (std::size_t k = 0; k < k_angles; ++k) {
    const double c = std::cos(s.angle(k)), sn = std::sin(s.angle(k));
    double total = 0.0;
    for (std::size_t j = 0; j < g.ny; ++j)
      for (std::size_t i = 0; i < g.nx; ++i) {
        const double v = f.values[g.index(i, j)];
        if (v == 0.0) continue;
        for (int a = 0; a < sub; ++a)
          for (int b = 0; b < sub; ++b) {
            const double x = g.x(i) + ((a + 0.5) / sub - 0.5) * g.dx();
            const double y = g.y(j) + ((b + 0.5) / sub - 0.5) * g.dy();
            const double u = (x * c + y * sn + range) / ds;
            if (u < 0.0 || u >= static_cast<double>(m_bins)) continue;
            s.at(k, static_cast<std::size_t>(u)) += v * w;
            total += v * w;
          }
      }
    if (!(total > 0.0)) throw NumericalError("project_field: field has no mass inside the bin range");
    for (std::size_t m = 0; m < m_bins; ++m) s.at(k, m) /= total * ds;
  }
  return s;
}

struct Reconstruction {
  PsdField2d field;
  double clipped_fraction = 0.0;  ///< negative mass removed, relative to the positive mass
};

namespace detail {

/// Ram-Lak kernel sampled at spacing ds, apodized in frequency by a cosine
/// window that reaches zero at cutoff * Nyquist. Returned in circular order.
inline std::vector<double> ramp_kernel(std::size_t p, double ds, double cutoff) {
  std::vector<double> h(p, 0.0);
  const auto half = static_cast<long>(p / 2);
  for (std::size_t k = 0; k < p; ++k) {
    const long n = static_cast<long>(k) <= half ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(p);
    if (n == 0) h[k] = 1.0 / (4.0 * ds * ds);
    else if (n % 2 != 0) h[k] = -1.0 / (std::numbers::pi * std::numbers::pi * double(n) * double(n) * ds * ds);
  }
  // The kernel is real and even, so its DFT is the cosine transform.
  std::vector<double> spec(p, 0.0), out(p, 0.0);
  const double two_pi_over_p = 2.0 * std::numbers::pi / static_cast<double>(p);
  for (std::size_t f = 0; f < p; ++f) {
    double acc = 0.0;
    for (std::size_t k = 0; k < p; ++k) acc += h[k] * std::cos(two_pi_over_p * double((f * k) % p));
    const double nu = static_cast<double>(std::min(f, p - f)) / (0.5 * static_cast<double>(p));
    spec[f] = nu <= cutoff ? acc * std::cos(0.5 * std::numbers::pi * nu / cutoff) : 0.0;
  }
  for (std::size_t k = 0; k < p; ++k) {
    double acc = 0.0;
    for (std::size_t f = 0; f < p; ++f) acc += spec[f] * std::cos(two_pi_over_p * double((f * k) % p));
    out[k] = acc / static_cast<double>(p);
  }
  return out;
}

}  // namespace detail

/// Filtered back-projection onto grid. The filtered projections are
/// evaluated out to the grid's half-diagonal, where they are negative even
/// though the raw projections vanish.
inline Reconstruction inverse_radon(const Sinogram& s, const CartesianGrid& grid, double cutoff = 0.8,
                                    double max_clipped = 0.1) {
  check_sinogram_shape(s.angles, s.bins, s.range);
  grid.validate();
  if (!(cutoff > 0.0 && cutoff <= 1.0)) throw InvalidArgument("inverse_radon: cutoff must lie in (0, 1]");
  const double ds = s.bin_width();
  const double reach = std::hypot(std::max(std::abs(grid.x_min), std::abs(grid.x_max)),
                                  std::max(std::abs(grid.y_min), std::abs(grid.y_max)));
  const auto ext = static_cast<std::size_t>(std::ceil(std::max(0.0, reach - s.range) / ds)) + 1;
  const std::size_t mt = s.bins + 2 * ext;
  std::size_t p = 1;
  while (p < 2 * mt) p *= 2;
  const auto kern = detail::ramp_kernel(p, ds, cutoff);
  const double s0 = -s.range - static_cast<double>(ext) * ds + 0.5 * ds;

  PsdField2d f(grid);
  std::vector<double> q(mt);
  for (std::size_t k = 0; k < s.angles; ++k) {
    for (std::size_t j = 0; j < mt; ++j) {
      double acc = 0.0;
      for (std::size_t m = 0; m < s.bins; ++m) {
        const std::size_t src = m + ext;
        acc += kern[(j + p - src) % p] * s.at(k, m);
      }
      q[j] = acc * ds;
    }
    const double c = std::cos(s.angle(k)), sn = std::sin(s.angle(k));
    for (std::size_t jy = 0; jy < grid.ny; ++jy)
      for (std::size_t ix = 0; ix < grid.nx; ++ix) {
        const double u = (grid.x(ix) * c + grid.y(jy) * sn - s0) / ds;
        double v = 0.0;
        if (u <= 0.0) v = q.front();
        else if (u >= static_cast<double>(mt - 1)) v = q.back();
        else {
          const auto i0 = static_cast<std::size_t>(u);
          const double t = u - static_cast<double>(i0);
          v = (1 - t) * q[i0] + t * q[i0 + 1];
        }
        f.values[grid.index(ix, jy)] += v;
      }
  }
  double pos = 0.0, neg = 0.0;
  for (double& v : f.values) {
    v *= std::numbers::pi / static_cast<double>(s.angles);
    if (v < 0.0) {
      neg -= v;
      v = 0.0;
    } else {
      pos += v;
    }
  }
  if (!(pos > 0.0)) throw NumericalError("inverse_radon: reconstruction has no positive mass");
  Reconstruction r{std::move(f), neg / pos};
  if (r.clipped_fraction > max_clipped)
    throw NumericalError("inverse_radon: clipped negative mass " + std::to_string(r.clipped_fraction) +
                         " exceeds " + std::to_string(max_clipped));
  r.field.normalize();
  return r;
}

struct PsdComparison {
  double l1 = 0.0;
  double linf = 0.0;
  double d_mean_radius = 0.0;
  double d_mean_r2 = 0.0;
  double d_radial_width = 0.0;
  double d_angular_entropy = 0.0;
};

/// Bilinear resampling onto another grid, renormalized when mass remains.
inline PsdField2d resample(const PsdField2d& f, const CartesianGrid& grid) {
  if (f.grid == grid) return f;
  PsdField2d out(grid);
  out.time = f.time;
  for (std::size_t j = 0; j < grid.ny; ++j)
    for (std::size_t i = 0; i < grid.nx; ++i) out.values[grid.index(i, j)] = sample_bilinear(f, grid.x(i), grid.y(j));
  if (out.mass() > 0.0) out.normalize();
  return out;
}

inline RadialPsd resample(const RadialPsd& f, const RadialGrid& grid) {
  if (f.grid == grid) return f;
  RadialPsd out(grid);
  out.time = f.time;
  for (std::size_t i = 0; i < grid.n; ++i) out.values[i] = sample_radial(f, grid.r(i));
  if (out.mass() > 0.0) out.normalize();
  return out;
}

/// Distances between a and b, with b resampled onto a's grid if needed.
template <class Field>
PsdComparison compare_psd(const Field& a, const Field& b_in) {
  const Field b = resample(b_in, a.grid);
  PsdComparison c;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    const double d = std::abs(a.values[k] - b.values[k]);
    c.l1 += d * a.volume(k);
    c.linf = std::max(c.linf, d);
  }
  const auto ma = fp::moments(a), mb = fp::moments(b);
  c.d_mean_radius = mb.mean_radius - ma.mean_radius;
  c.d_mean_r2 = mb.mean_r2 - ma.mean_r2;
  c.d_radial_width = mb.radial_width - ma.radial_width;
  c.d_angular_entropy = mb.angular_entropy - ma.angular_entropy;
  return c;
}

/// Expected L1 distance between an n-sample histogram and its parent
/// density on the same grid, plus three standard errors of slack. Each
/// cell count is treated as Poisson with mean lambda = n p_i area, whose
/// mean absolute deviation is 2 e^-lambda lambda^(k+1) / k!, k = floor(lambda).
inline double histogram_l1_allowance(const PsdField2d& expected, std::size_t n) {
  if (n == 0) throw InvalidArgument("histogram_l1_allowance: no samples");
  const double dn = static_cast<double>(n);
  double mad = 0.0;
  for (std::size_t k = 0; k < expected.values.size(); ++k) {
    const double lambda = dn * expected.values[k] * expected.volume(k);
    if (!(lambda > 0.0)) continue;
    const double fl = std::floor(lambda);
    mad += 2.0 * std::exp(-lambda + (fl + 1.0) * std::log(lambda) - std::lgamma(fl + 1.0));
  }
  return mad / dn + 3.0 / std::sqrt(dn);
}

/// Full width at half maximum of the azimuthally averaged profile, using
/// annuli one cell wide inside the inscribed disk. A profile that peaks at
/// the origin is measured from r = 0.
inline double ring_width(const PsdField2d& f) {
  const auto& g = f.grid;
  const double dr = g.dx();
  const double r_max = std::min(std::min(-g.x_min, g.x_max), std::min(-g.y_min, g.y_max));
  const auto nb = static_cast<std::size_t>(r_max / dr);
  if (nb < 3) throw InvalidArgument("ring_width: grid too small");
  std::vector<double> sum(nb, 0.0), count(nb, 0.0);
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i) {
      const auto b = static_cast<std::size_t>(std::hypot(g.x(i), g.y(j)) / dr);
      if (b >= nb) continue;
      sum[b] += f.values[g.index(i, j)];
      count[b] += 1.0;
    }
  std::vector<double> prof(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) prof[b] = count[b] > 0.0 ? sum[b] / count[b] : 0.0;
  const auto peak = static_cast<std::size_t>(std::max_element(prof.begin(), prof.end()) - prof.begin());
  const double half = 0.5 * prof[peak];
  if (!(half > 0.0)) throw NumericalError("ring_width: empty profile");
  auto center = [&](double b) { return (b + 0.5) * dr; };
  double lo = 0.0;
  for (std::size_t b = peak; b > 0; --b)
    if (prof[b - 1] <= half) {
      lo = center(static_cast<double>(b) - (prof[b] - half) / (prof[b] - prof[b - 1]));
      break;
    }
  double hi = r_max;
  for (std::size_t b = peak; b + 1 < nb; ++b)
    if (prof[b + 1] <= half) {
      hi = center(static_cast<double>(b) + (prof[b] - half) / (prof[b] - prof[b + 1]));
      break;
    }
  return hi - lo;
}

/// Conditioning cell in polar coordinates around a reference point.
struct Condition {
  double phase = 0.0;
  double radius = 0.0;
  double phase_tolerance = std::numbers::pi / 16.0;
  double radius_tolerance = 0.0;

  bool contains(double x, double y) const {
    double dphi = std::remainder(std::atan2(y, x) - phase, 2.0 * std::numbers::pi);
    return std::abs(dphi) <= phase_tolerance && std::abs(std::hypot(x, y) - radius) <= radius_tolerance;
  }
};

struct WindowPair {
  QuadratureSample first;
  QuadratureSample second;
};

inline std::vector<QuadratureSample> select_conditioned(const std::vector<WindowPair>& pairs, const Condition& c) {
  std::vector<QuadratureSample> out;
  for (const auto& p : pairs)
    if (c.contains(p.first.a_x, p.first.a_y)) out.push_back(p.second);
  return out;
}

constexpr std::size_t kMinConditioned = 100;

/// PSD of second-window quadratures whose first window lies in the cell.
inline PsdField2d conditioned_psd(const std::vector<WindowPair>& pairs, const Condition& c,
                                  const CartesianGrid& grid) {
  const auto kept = select_conditioned(pairs, c);
  if (kept.size() < kMinConditioned)
    throw NumericalError("conditioned_psd: only " + std::to_string(kept.size()) +
                         " samples satisfy the condition (need 100)");
  return direct_psd(kept, grid);
}

inline std::string to_csv(const Sinogram& s) {
  using ompsd::detail::format_double;
  std::string out = "angle,bin_center,density\n";
  for (std::size_t k = 0; k < s.angles; ++k)
    for (std::size_t m = 0; m < s.bins; ++m) {
      out += format_double(s.angle(k));
      out += ',';
      out += format_double(s.bin_center(m));
      out += ',';
      out += format_double(s.at(k, m));
      out += '\n';
    }
  return out;
}

}  // namespace ompsd::tomo
