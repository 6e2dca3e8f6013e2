#pragma once

// Finite-volume Fokker-Planck evolution of the phase-space density under
//   dP/dt = div(P grad H + Theta grad P),  H(r) = gamma0 r^2 / 2 + gamma2 r^4 / 4,
// on Cartesian and radial grids, the analytic steady state, the Gaussian
// width law after a cooling-to-heating switch, and field moments.
//
// Face fluxes use exponential fitting (Scharfetter-Gummel) on cell-averaged
// potentials U_i = -Theta ln <exp(-H/Theta)>_cell. The scheme is upwind for
// strong drift, central for weak drift, conserves mass to round-off and has
// the cell average of exp(-H/Theta) as its exact discrete stationary state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "ompsd/error.hpp"
#include "ompsd/model.hpp"
#include "ompsd/parallel.hpp"
#include "ompsd/psd_field.hpp"

namespace ompsd::fp {

struct PotentialSpec {
  double gamma0 = 0.0;
  double gamma2 = 0.0;
  double theta = 0.0;

  static PotentialSpec from(const model::EffectiveParams& e) { return {e.gamma0, e.gamma2, e.theta}; }

  void validate() const {
    if (!(theta > 0.0) || !std::isfinite(theta)) throw InvalidArgument("PotentialSpec: Theta must be positive");
    if (!(gamma2 >= 0.0) || !std::isfinite(gamma0)) throw InvalidArgument("PotentialSpec: invalid rates");
  }
};

inline double potential(const PotentialSpec& s, double r) {
  const double r2 = r * r;
  return 0.5 * s.gamma0 * r2 + 0.25 * s.gamma2 * r2 * r2;
}

/// |dH/dr|, the drift speed.
inline double potential_slope(const PotentialSpec& s, double r) {
  return std::abs(s.gamma0 * r + s.gamma2 * r * r * r);
}

inline bool normalizable(const PotentialSpec& s) { return s.gamma2 > 0.0 || s.gamma0 > 0.0; }

inline void require_normalizable(const PotentialSpec& s, const char* who) {
  s.validate();
  if (!normalizable(s)) throw InvalidArgument(std::string(who) + ": exp(-H/Theta) is not normalizable");
}

/// Minimum of H over r >= 0: sqrt(-gamma0/gamma2) above threshold, else 0.
inline double ring_radius(const PotentialSpec& s) {
  return (s.gamma0 < 0.0 && s.gamma2 > 0.0) ? std::sqrt(-s.gamma0 / s.gamma2) : 0.0;
}

/// Radius beyond which the steady state carries negligible mass.
inline double default_extent(const PotentialSpec& s) {
  require_normalizable(s, "default_extent");
  if (s.gamma0 < 0.0) {
    const double a0 = ring_radius(s);
    const double width = std::sqrt(s.theta / (-2.0 * s.gamma0));
    return std::max(1.8 * a0, a0 + 12.0 * width);
  }
  double ext = s.gamma0 > 0.0 ? 7.0 * std::sqrt(s.theta / s.gamma0) : std::numeric_limits<double>::infinity();
  if (s.gamma2 > 0.0) ext = std::min(ext, 5.0 * std::pow(s.theta / s.gamma2, 0.25));
  return ext;
}

namespace detail {

/// x / (exp(x) - 1), finite for all x.
inline double bernoulli(double x) {
  if (std::abs(x) < 1e-10) return 1.0 - 0.5 * x;
  const double e = std::expm1(x);
  if (std::isinf(e)) return 0.0;
  return x / e;
}

/// Densities this small are dropped to keep arithmetic out of the subnormal range.
inline double flush(double v) { return v < 1e-290 ? 0.0 : v; }

/// -Theta ln(mean exp(-H_k/Theta)) for sub-sample energies H_k.
inline double log_mean_exp(const double* h, std::size_t n, const double* w, double theta) {
  double m = h[0];
  for (std::size_t k = 1; k < n; ++k) m = std::min(m, h[k]);
  double acc = 0.0, wsum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    acc += w[k] * std::exp(-(h[k] - m) / theta);
    wsum += w[k];
  }
  return m - theta * std::log(acc / wsum);
}

/// Length over which exp(-H / Theta) changes appreciably near its maximum.
inline double density_scale(const PotentialSpec& s) {
  if (s.gamma0 < 0.0) return std::sqrt(s.theta / (-2.0 * s.gamma0));
  if (s.gamma0 > 0.0) return std::sqrt(s.theta / s.gamma0);
  return std::pow(s.theta / s.gamma2, 0.25);
}

/// Sub-samples per cell side: at least eight across the density scale.
inline int subsamples(const PotentialSpec& s, double h, int floor) {
  const double want = std::ceil(8.0 * h / density_scale(s));
  return static_cast<int>(std::clamp(want, static_cast<double>(floor), 64.0));
}

}  // namespace detail

/// Cell-averaged potential on a Cartesian grid; sub = 0 picks the sampling
/// from the density scale.
inline std::vector<double> cell_potential(const PotentialSpec& s, const CartesianGrid& g, int sub = 0) {
  if (sub <= 0) sub = detail::subsamples(s, std::max(g.dx(), g.dy()), 4);
  std::vector<double> u(g.size());
  std::vector<double> h(static_cast<std::size_t>(sub * sub)), w(h.size(), 1.0);
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i) {
      std::size_t k = 0;
      for (int a = 0; a < sub; ++a)
        for (int b = 0; b < sub; ++b) {
          const double x = g.x(i) + ((a + 0.5) / sub - 0.5) * g.dx();
          const double y = g.y(j) + ((b + 0.5) / sub - 0.5) * g.dy();
          h[k++] = potential(s, std::hypot(x, y));
        }
      u[g.index(i, j)] = detail::log_mean_exp(h.data(), h.size(), w.data(), s.theta);
    }
  return u;
}

/// Area-weighted potential average over each node's annulus.
inline std::vector<double> cell_potential(const PotentialSpec& s, const RadialGrid& g, int sub = 0) {
  if (sub <= 0) sub = detail::subsamples(s, g.dr, 8);
  std::vector<double> u(g.size());
  std::vector<double> h(static_cast<std::size_t>(sub)), w(h.size());
  for (std::size_t i = 0; i < g.n; ++i) {
    const double lo = i == 0 ? 0.0 : g.r(i) - 0.5 * g.dr;
    const double hi = g.r(i) + 0.5 * g.dr;
    for (int k = 0; k < sub; ++k) {
      const double r = lo + (k + 0.5) / sub * (hi - lo);
      h[static_cast<std::size_t>(k)] = potential(s, r);
      w[static_cast<std::size_t>(k)] = r;
    }
    u[i] = detail::log_mean_exp(h.data(), h.size(), w.data(), s.theta);
  }
  return u;
}

template <class Grid>
PsdField<Grid> steady_state(const PotentialSpec& s, const Grid& grid) {
  require_normalizable(s, "steady_state");
  grid.validate();
  const auto u = cell_potential(s, grid);
  const double umin = *std::min_element(u.begin(), u.end());
  PsdField<Grid> f(grid);
  for (std::size_t k = 0; k < u.size(); ++k) f.values[k] = std::exp(-(u[k] - umin) / s.theta);
  f.normalize();
  return f;
}

/// Cell averages of an isotropic Gaussian with per-quadrature variance var.
inline PsdField2d gaussian_field(const CartesianGrid& g, double var, double cx = 0.0, double cy = 0.0) {
  if (!(var > 0.0)) throw InvalidArgument("gaussian_field: variance must be positive");
  const double s = std::sqrt(2.0 * var);
  auto cdf_diff = [&](double a, double b, double c) {
    return 0.5 * (std::erf((b - c) / s) - std::erf((a - c) / s));
  };
  std::vector<double> px(g.nx), py(g.ny);
  for (std::size_t i = 0; i < g.nx; ++i)
    px[i] = cdf_diff(g.x(i) - 0.5 * g.dx(), g.x(i) + 0.5 * g.dx(), cx);
  for (std::size_t j = 0; j < g.ny; ++j)
    py[j] = cdf_diff(g.y(j) - 0.5 * g.dy(), g.y(j) + 0.5 * g.dy(), cy);
  PsdField2d f(g);
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i) f.values[g.index(i, j)] = px[i] * py[j];
  f.normalize();
  return f;
}

/// Annulus averages of a centered isotropic Gaussian.
inline RadialPsd gaussian_field(const RadialGrid& g, double var) {
  if (!(var > 0.0)) throw InvalidArgument("gaussian_field: variance must be positive");
  RadialPsd f(g);
  for (std::size_t i = 0; i < g.n; ++i) {
    const double lo = i == 0 ? 0.0 : g.r(i) - 0.5 * g.dr;
    const double hi = g.r(i) + 0.5 * g.dr;
    const double m = std::exp(-lo * lo / (2.0 * var)) - std::exp(-hi * hi / (2.0 * var));
    f.values[i] = m / g.volume(i);
  }
  f.normalize();
  return f;
}

/// Largest admissible time step: 0.4 min(h^2 / (2 Theta dim), h / max|grad H|).
inline double stable_dt(const PotentialSpec& s, const CartesianGrid& g) {
  const double h = std::min(g.dx(), g.dy());
  const double rmax = std::hypot(std::max(std::abs(g.x_min), std::abs(g.x_max)),
                                 std::max(std::abs(g.y_min), std::abs(g.y_max)));
  double dt = h * h / (4.0 * s.theta);
  for (int k = 1; k <= 64; ++k) {
    const double sp = potential_slope(s, rmax * k / 64.0);
    if (sp > 0.0) dt = std::min(dt, h / sp);
  }
  return 0.4 * dt;
}

inline double stable_dt(const PotentialSpec& s, const RadialGrid& g) {
  double dt = g.dr * g.dr / (2.0 * s.theta);
  for (int k = 1; k <= 256; ++k) {
    const double sp = potential_slope(s, g.r_max() * k / 256.0);
    if (sp > 0.0) dt = std::min(dt, g.dr / sp);
  }
  return 0.4 * dt;
}

struct EvolveOptions {
  double dt = 0.0;                   ///< 0 selects stable_dt
  std::vector<double> snapshot_times;  ///< absolute times, landed exactly
  double leak_tolerance = 1e-4;      ///< allowed mass fraction in the boundary layer
  std::size_t leak_check_every = 200;
  std::size_t threads = 0;           ///< 0 uses thread_count()
};

template <class Field>
struct EvolveResult {
  Field field;
  std::vector<Field> snapshots;
  std::size_t steps = 0;
  double dt = 0.0;
  double max_mass_drift = 0.0;  ///< max |mass(t) / mass(0) - 1| over checked steps
  double min_value = 0.0;       ///< smallest density seen at checks
};

namespace detail {

/// Face transfer rates between neighbouring cells: flux = fwd * P_left - bwd * P_right.
struct FaceRates {
  std::vector<double> fwd;
  std::vector<double> bwd;
};

inline void fill_face(FaceRates& fr, std::size_t k, double scale, double du, double theta) {
  fr.fwd[k] = scale * bernoulli(du / theta);
  fr.bwd[k] = scale * bernoulli(-du / theta);
}

struct StepPlan {
  std::vector<double> stops;  ///< times at which to stop; last is t_final
  std::vector<bool> is_snapshot;
};

inline StepPlan plan(double t0, double t_final, std::vector<double> snaps) {
  std::sort(snaps.begin(), snaps.end());
  StepPlan p;
  for (double t : snaps) {
    if (t < t0 - 1e-12 * std::max(1.0, std::abs(t0)) || t > t_final * (1 + 1e-12))
      throw InvalidArgument("evolve: snapshot time outside [t0, t_final]");
    p.stops.push_back(std::min(std::max(t, t0), t_final));
    p.is_snapshot.push_back(true);
  }
  p.stops.push_back(t_final);
  p.is_snapshot.push_back(false);
  return p;
}

template <class Field, class Advance, class Leak>
EvolveResult<Field> drive(Field field, double t_final, double dt, const EvolveOptions& opt, Advance&& advance,
                          Leak&& leak_fraction) {
  if (!(t_final >= field.time)) throw InvalidArgument("evolve: t_final precedes the field time");
  EvolveResult<Field> res;
  res.dt = dt;
  const double m0 = field.mass();
  if (!(m0 > 0.0)) throw InvalidArgument("evolve: initial field has no mass");
  if (field.min_value() < 0.0) throw InvalidArgument("evolve: initial field has negative values");
  res.min_value = field.min_value();
  auto check = [&] {
    const double m = field.mass();
    res.max_mass_drift = std::max(res.max_mass_drift, std::abs(m / m0 - 1.0));
    res.min_value = std::min(res.min_value, field.min_value());
    if (leak_fraction(field) > opt.leak_tolerance * m)
      throw NumericalError("evolve: boundary layer holds more than " + std::to_string(opt.leak_tolerance) +
                           " of the mass at t = " + std::to_string(field.time) + "; enlarge the grid");
  };
  check();
  const auto p = plan(field.time, t_final, opt.snapshot_times);
  std::vector<double> scratch(field.values.size());
  for (std::size_t s = 0; s < p.stops.size(); ++s) {
    const double stop = p.stops[s];
    const double span = stop - field.time;
    if (span > 0.0) {
      const auto n = static_cast<std::size_t>(std::ceil(span / dt * (1.0 - 1e-12)));
      const double h = span / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        advance(field.values, scratch, h);
        field.values.swap(scratch);
        ++res.steps;
        if (res.steps % opt.leak_check_every == 0) check();
      }
    }
    field.time = stop;
    check();
    if (p.is_snapshot[s]) res.snapshots.push_back(field);
  }
  res.field = std::move(field);
  return res;
}

}  // namespace detail

/// Explicit evolution on a Cartesian grid with zero-flux outer boundaries.
inline EvolveResult<PsdField2d> evolve(const PsdField2d& init, const PotentialSpec& s, double t_final,
                                       const EvolveOptions& opt = {}) {
  s.validate();
  const auto& g = init.grid;
  g.validate();
  const std::size_t nx = g.nx, ny = g.ny;
  const auto u = cell_potential(s, g);
  detail::FaceRates fx{std::vector<double>(g.size(), 0.0), std::vector<double>(g.size(), 0.0)};
  detail::FaceRates fy{std::vector<double>(g.size(), 0.0), std::vector<double>(g.size(), 0.0)};
  const double sx = s.theta / (g.dx() * g.dx());
  const double sy = s.theta / (g.dy() * g.dy());
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t k = g.index(i, j);
      if (i + 1 < nx) detail::fill_face(fx, k, sx, u[g.index(i + 1, j)] - u[k], s.theta);
      if (j + 1 < ny) detail::fill_face(fy, k, sy, u[g.index(i, j + 1)] - u[k], s.theta);
    }
  double max_out = 0.0;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t k = g.index(i, j);
      double out = fx.fwd[k] + fy.fwd[k];
      if (i > 0) out += fx.bwd[k - 1];
      if (j > 0) out += fy.bwd[k - nx];
      max_out = std::max(max_out, out);
    }
  const double bound = stable_dt(s, g);
  const double positive = max_out > 0.0 ? 0.95 / max_out : bound;
  double dt = opt.dt;
  if (dt <= 0.0) {
    dt = std::min(bound, positive);
  } else if (dt > bound * (1 + 1e-12) || dt > positive) {
    throw InvalidArgument("evolve: dt = " + std::to_string(dt) + " exceeds the stability bound " +
                          std::to_string(std::min(bound, positive)));
  }
  const std::size_t workers = opt.threads ? opt.threads : thread_count();

  const double* xf = fx.fwd.data();
  const double* xb = fx.bwd.data();
  const double* yf = fy.fwd.data();
  const double* yb = fy.bwd.data();
  auto advance = [&](const std::vector<double>& pv, std::vector<double>& outv, double h) {
    const double* p = pv.data();
    double* out = outv.data();
    auto edge_cell = [&](std::size_t i, std::size_t j) {
      const std::size_t k = j * nx + i;
      double div = 0.0;
      if (i + 1 < nx) div -= xf[k] * p[k] - xb[k] * p[k + 1];
      if (i > 0) div += xf[k - 1] * p[k - 1] - xb[k - 1] * p[k];
      if (j + 1 < ny) div -= yf[k] * p[k] - yb[k] * p[k + nx];
      if (j > 0) div += yf[k - nx] * p[k - nx] - yb[k - nx] * p[k];
      out[k] = detail::flush(p[k] + h * div);
    };
    parallel_for(
        ny,
        [&](std::size_t j0, std::size_t j1) {
          for (std::size_t j = j0; j < j1; ++j) {
            if (j == 0 || j + 1 == ny || nx < 3) {
              for (std::size_t i = 0; i < nx; ++i) edge_cell(i, j);
              continue;
            }
            edge_cell(0, j);
            for (std::size_t k = j * nx + 1, end = j * nx + nx - 1; k < end; ++k) {
              const double div = -(xf[k] * p[k] - xb[k] * p[k + 1]) + (xf[k - 1] * p[k - 1] - xb[k - 1] * p[k]) -
                                 (yf[k] * p[k] - yb[k] * p[k + nx]) + (yf[k - nx] * p[k - nx] - yb[k - nx] * p[k]);
              out[k] = detail::flush(p[k] + h * div);
            }
            edge_cell(nx - 1, j);
          }
        },
        workers);
  };
  auto leak = [&](const PsdField2d& f) {
    double m = 0.0;
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i)
        if (i == 0 || j == 0 || i + 1 == nx || j + 1 == ny) m += f.values[g.index(i, j)];
    return m * g.cell_area();
  };
  return detail::drive(init, t_final, dt, opt, advance, leak);
}

/// Angle-averaged evolution on a node-centered radial grid; conserves the
/// volume-weighted sum of P over annuli.
inline EvolveResult<RadialPsd> radial_evolve(const RadialPsd& init, const PotentialSpec& s, double t_final,
                                             const EvolveOptions& opt = {}) {
  s.validate();
  const auto& g = init.grid;
  g.validate();
  const std::size_t n = g.n;
  const auto u = cell_potential(s, g);
  // Face i sits between nodes i and i + 1; rates are per unit density.
  std::vector<double> fwd(n, 0.0), bwd(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double du = u[i + 1] - u[i];
    const double c = s.theta / g.dr * g.face_length(i);
    fwd[i] = c * detail::bernoulli(du / s.theta);
    bwd[i] = c * detail::bernoulli(-du / s.theta);
  }
  double max_out = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double out = 0.0;
    if (i + 1 < n) out += fwd[i];
    if (i > 0) out += bwd[i - 1];
    max_out = std::max(max_out, out / g.volume(i));
  }
  const double bound = stable_dt(s, g);
  const double positive = max_out > 0.0 ? 0.95 / max_out : bound;
  double dt = opt.dt;
  if (dt <= 0.0) {
    dt = std::min(bound, positive);
  } else if (dt > bound * (1 + 1e-12) || dt > positive) {
    throw InvalidArgument("radial_evolve: dt = " + std::to_string(dt) + " exceeds the stability bound " +
                          std::to_string(std::min(bound, positive)));
  }
  std::vector<double> inv_vol(n);
  for (std::size_t i = 0; i < n; ++i) inv_vol[i] = 1.0 / g.volume(i);

  auto advance = [&](const std::vector<double>& p, std::vector<double>& out, double h) {
    for (std::size_t i = 0; i < n; ++i) {
      double net = 0.0;
      if (i + 1 < n) net -= fwd[i] * p[i] - bwd[i] * p[i + 1];
      if (i > 0) net += fwd[i - 1] * p[i - 1] - bwd[i - 1] * p[i];
      out[i] = detail::flush(p[i] + h * net * inv_vol[i]);
    }
  };
  auto leak = [&](const RadialPsd& f) { return f.values[n - 1] * g.volume(n - 1); };
  return detail::drive(init, t_final, dt, opt, advance, leak);
}

/// Width after a cooling-to-heating switch, as printed:
///   delta_H^2 = 2 Theta / (gamma_ba + gamma_m)
///             * (1 + 2 gamma_ba (exp(2 (gamma_ba - gamma_m) t) - 1) / (gamma_ba - gamma_m)).
inline double gaussian_width_formula(double theta, double gamma_ba, double gamma_m, double t) {
  const double diff = gamma_ba - gamma_m;
  const double growth = 2.0 * gamma_ba * std::expm1(2.0 * diff * t) / diff;
  return std::sqrt(2.0 * theta / (gamma_ba + gamma_m) * (1.0 + growth));
}

/// Expansion of the same law for small (gamma_ba - gamma_m) t.
inline double gaussian_width_series(double theta, double gamma_ba, double gamma_m, double t) {
  const double x = 2.0 * (gamma_ba - gamma_m) * t;
  const double growth = 4.0 * gamma_ba * t * (1.0 + x / 2.0 + x * x / 6.0);
  return std::sqrt(2.0 * theta / (gamma_ba + gamma_m) * (1.0 + growth));
}

inline double gaussian_width_oracle(double theta, double gamma_ba, double gamma_m, double t) {
  if (!(t >= 0.0)) throw InvalidArgument("gaussian_width_oracle: t must be non-negative");
  if (std::abs(gamma_ba - gamma_m) * t < 1e-6) return gaussian_width_series(theta, gamma_ba, gamma_m, t);
  return gaussian_width_formula(theta, gamma_ba, gamma_m, t);
}

struct Moments {
  double mass = 0.0;
  double mean_radius = 0.0;
  double mean_r2 = 0.0;
  double radial_width = 0.0;  ///< standard deviation of the radius
  double angular_entropy = 0.0;
};

constexpr std::size_t kEntropyBins = 64;

inline Moments moments(const PsdField2d& f, int sub = 4) {
  const auto& g = f.grid;
  Moments m;
  std::vector<double> bins(kEntropyBins, 0.0);
  const double w = 1.0 / (sub * sub);
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i) {
      const double cell = f.values[g.index(i, j)] * g.cell_area();
      if (cell == 0.0) continue;
      m.mass += cell;
      for (int a = 0; a < sub; ++a)
        for (int b = 0; b < sub; ++b) {
          const double x = g.x(i) + ((a + 0.5) / sub - 0.5) * g.dx();
          const double y = g.y(j) + ((b + 0.5) / sub - 0.5) * g.dy();
          const double r2 = x * x + y * y;
          m.mean_r2 += w * cell * r2;
          m.mean_radius += w * cell * std::sqrt(r2);
          double th = std::atan2(y, x);
          if (th < 0.0) th += 2.0 * std::numbers::pi;
          auto bin = static_cast<std::size_t>(th / (2.0 * std::numbers::pi) * kEntropyBins);
          bins[std::min(bin, kEntropyBins - 1)] += w * cell;
        }
    }
  if (m.mass > 0.0) {
    m.mean_radius /= m.mass;
    m.mean_r2 /= m.mass;
    m.radial_width = std::sqrt(std::max(0.0, m.mean_r2 - m.mean_radius * m.mean_radius));
    const double dtheta = 2.0 * std::numbers::pi / kEntropyBins;
    for (double b : bins) {
      const double p = b / m.mass;
      if (p > 0.0) m.angular_entropy -= p * std::log(p / dtheta);
    }
  }
  return m;
}

inline Moments moments(const RadialPsd& f) {
  const auto& g = f.grid;
  Moments m;
  for (std::size_t i = 0; i < g.n; ++i) {
    const double cell = f.values[i] * g.volume(i);
    m.mass += cell;
    // Annulus averages of r and r^2 for node i.
    const double lo = i == 0 ? 0.0 : g.r(i) - 0.5 * g.dr;
    const double hi = g.r(i) + 0.5 * g.dr;
    const double area = hi * hi - lo * lo;
    m.mean_radius += cell * (2.0 / 3.0) * (hi * hi * hi - lo * lo * lo) / area;
    m.mean_r2 += cell * 0.5 * (hi * hi + lo * lo);
  }
  if (m.mass > 0.0) {
    m.mean_radius /= m.mass;
    m.mean_r2 /= m.mass;
    m.radial_width = std::sqrt(std::max(0.0, m.mean_r2 - m.mean_radius * m.mean_radius));
  }
  m.angular_entropy = std::log(2.0 * std::numbers::pi);
  return m;
}

/// Width delta with P(0) = 1 / (pi delta^2), exact for a centered Gaussian
/// whose quadratures each have variance delta^2 / 2.
inline double core_width(const RadialPsd& f) {
  if (!(f.values[0] > 0.0)) throw NumericalError("core_width: zero density at the origin");
  return 1.0 / std::sqrt(std::numbers::pi * f.values[0] / f.mass());
}

inline double core_width(const PsdField2d& f) {
  const double p0 = sample_bilinear(f, 0.0, 0.0);
  if (!(p0 > 0.0)) throw NumericalError("core_width: zero density at the origin");
  return 1.0 / std::sqrt(std::numbers::pi * p0 / f.mass());
}

/// Width from the second moment, delta^2 = <r^2>.
template <class Field>
double moment_width(const Field& f) {
  return std::sqrt(moments(f).mean_r2);
}

/// Radius of the density maximum along r, refined by a parabola in ln P.
inline double profile_mode(const RadialPsd& f) {
  const auto& v = f.values;
  const auto it = std::max_element(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(it - v.begin());
  if (k == 0 || k + 1 == v.size() || v[k - 1] <= 0.0 || v[k + 1] <= 0.0) return f.grid.r(k);
  const double a = std::log(v[k - 1]), b = std::log(v[k]), c = std::log(v[k + 1]);
  const double denom = a - 2.0 * b + c;
  const double off = denom < 0.0 ? 0.5 * (a - c) / denom : 0.0;
  return f.grid.r(k) + std::clamp(off, -0.5, 0.5) * f.grid.dr;
}

}  // namespace ompsd::fp
