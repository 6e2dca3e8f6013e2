#pragma once

// Closed-form slow-amplitude coefficients of a mechanical resonator coupled
// to a driven cavity, plus Hopf-threshold location and drive calibration.
//
// Amplitudes are measured in units of the thermal amplitude
// delta_m = sqrt(2 Theta / gamma_m), which fixes Theta = gamma_m / 2.

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <boost/math/tools/minima.hpp>

#include "ompsd/error.hpp"

namespace ompsd::model {

/// Fixed physical rates of the resonator and cavity. All rates are stored
/// in 1/s, the mechanical frequency in rad/s.
struct DeviceParams {
  double omega_m = 2.0 * std::numbers::pi * 662.7e3;
  double gamma_m = 2.5;
  double gamma_c = 4.2e6;
  double coupling = 0.013;     ///< G, cavity frequency shift per zero-point displacement
  double gamma2_norm = 2.0e-4; ///< gamma_2 delta_m^2 / gamma_m
  double omega2 = 0.0;         ///< nonlinear frequency pull; carried but not used in dynamics

  /// Normalized cavity damping gamma_c / omega_m.
  double g() const { return gamma_c / omega_m; }
  double theta() const { return 0.5 * gamma_m; }
  double gamma2() const { return gamma2_norm * gamma_m; }
  /// 2 G^2 / omega_m, the prefactor of the back-action terms.
  double backaction_scale() const { return 2.0 * coupling * coupling / omega_m; }

  void validate() const {
    if (!(omega_m > 0.0)) throw ConfigError("device: omega_m must be positive");
    if (!(gamma_m > 0.0)) throw ConfigError("device: gamma_m must be positive");
    if (!(gamma_c > 0.0)) throw ConfigError("device: gamma_c must be positive");
    if (!(gamma2_norm >= 0.0)) throw ConfigError("device: gamma2_norm must be non-negative");
    if (!std::isfinite(coupling)) throw ConfigError("device: coupling must be finite");
  }

  /// Builds device parameters from laboratory units: the mechanical
  /// frequency in Hz (converted with 2 pi) and damping/coupling rates in 1/s.
  static DeviceParams from_lab_units(double f_m_hz, double gamma_m_per_s, double gamma_c_per_s,
                                     double coupling_per_s, double gamma2_norm) {
    DeviceParams p;
    p.omega_m = 2.0 * std::numbers::pi * f_m_hz;
    p.gamma_m = gamma_m_per_s;
    p.gamma_c = gamma_c_per_s;
    p.coupling = coupling_per_s;
    p.gamma2_norm = gamma2_norm;
    p.validate();
    return p;
  }
};

struct PhotonNumber {
  double value = 0.0;
};

struct DriveAmplitude {
  double value = 0.0;
};

/// Cavity drive: normalized detuning d = (omega_p - omega_c) / omega_m and
/// exactly one authoritative strength, either the photon number E_c or the
/// normalized drive amplitude a_p.
struct DriveParams {
  double detuning = 0.0;
  std::variant<PhotonNumber, DriveAmplitude> strength = PhotonNumber{};

  static DriveParams with_photons(double d, double photons) {
    return DriveParams{d, PhotonNumber{photons}};
  }
  static DriveParams with_amplitude(double d, double a_p) {
    return DriveParams{d, DriveAmplitude{a_p}};
  }
};

/// Derived slow-amplitude coefficients; amplitudes in delta_m units.
struct EffectiveParams {
  double omega0 = 0.0;
  double gamma0 = 0.0;
  double omega2 = 0.0;
  double gamma2 = 0.0;
  double gamma_ba = 0.0;
  double theta = 0.0;

  double gamma_m() const { return gamma0 - gamma_ba; }
};

/// Effective parameters specified directly by rates, with the back-action
/// part defined relative to the bare damping gamma_m.
inline EffectiveParams effective_from_rates(double gamma_m, double gamma0, double gamma2) {
  EffectiveParams e;
  e.gamma0 = gamma0;
  e.gamma2 = gamma2;
  e.gamma_ba = gamma0 - gamma_m;
  e.theta = 0.5 * gamma_m;
  return e;
}

/// Xi_l(d, g) = [-i(d+l) + g]^-1 + [-i(d-l) - g]^-1.
inline std::complex<double> xi_l(double d, double g, int l) {
  using namespace std::complex_literals;
  const double dl = static_cast<double>(l);
  return 1.0 / (-1i * (d + dl) + g) + 1.0 / (-1i * (d - dl) - g);
}

/// Mean cavity photon number for a normalized drive amplitude, ignoring
/// the optomechanical shift of the cavity resonance.
inline double cavity_photon_number(double a_p, double d, double g) {
  if (!(g > 0.0)) throw InvalidArgument("cavity_photon_number: g must be positive");
  return a_p * a_p / (d * d + g * g);
}

inline double photon_number(const DeviceParams& dev, const DriveParams& drive) {
  if (const auto* n = std::get_if<PhotonNumber>(&drive.strength)) {
    if (!(n->value >= 0.0)) throw ConfigError("drive: photon number must be non-negative");
    return n->value;
  }
  return cavity_photon_number(std::get<DriveAmplitude>(drive.strength).value, drive.detuning,
                              dev.g());
}

inline EffectiveParams effective_params(const DeviceParams& dev, const DriveParams& drive) {
  const double photons = photon_number(dev, drive);
  const std::complex<double> xi = xi_l(drive.detuning, dev.g(), 1);
  const double scale = dev.backaction_scale() * photons;
  EffectiveParams e;
  e.gamma_ba = scale * xi.real() + 0.0;
  e.omega0 = scale * xi.imag() + 0.0;
  e.gamma0 = dev.gamma_m + e.gamma_ba;
  e.omega2 = dev.omega2;
  e.gamma2 = dev.gamma2();
  e.theta = dev.theta();
  return e;
}

/// Limit-cycle radius sqrt(-gamma0/gamma2), zero below threshold.
inline double seo_amplitude(const EffectiveParams& eff) {
  if (!(eff.gamma2 > 0.0))
    throw InvalidArgument("seo_amplitude: gamma2 must be positive for a finite limit cycle");
  return eff.gamma0 < 0.0 ? std::sqrt(-eff.gamma0 / eff.gamma2) : 0.0;
}

/// Scan window for threshold search. The root tolerance is relative to
/// gamma_m.
struct ThresholdScan {
  double d_min = -5.0;
  double d_max = 5.0;
  double step = 1e-3;
  double tolerance = 1e-9;
};

namespace detail {

inline double gamma0_at(const DeviceParams& dev, double a_p, double d) {
  return effective_params(dev, DriveParams::with_amplitude(d, a_p)).gamma0;
}

template <class F>
double bisect_root(F&& f, double lo, double hi, double f_lo, double tol) {
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double f_mid = f(mid);
    if (std::abs(f_mid) < tol) return mid;
    if ((f_mid < 0.0) == (f_lo < 0.0)) {
      lo = mid;
      f_lo = f_mid;
    } else {
      hi = mid;
    }
  }
  throw NumericalError("hopf_thresholds: bisection did not reach the root tolerance");
}

}  // namespace detail

/// All detunings in the scan window where gamma0(d) changes sign, i.e. the
/// supercritical Hopf points for a fixed drive amplitude.
inline std::vector<double> hopf_thresholds(const DeviceParams& dev, double a_p,
                                           const ThresholdScan& scan = {}) {
  if (!(scan.step > 0.0) || !(scan.d_max > scan.d_min))
    throw InvalidArgument("hopf_thresholds: invalid scan window");
  std::vector<double> roots;
  if (a_p == 0.0) return roots;
  const double tol = scan.tolerance * dev.gamma_m;
  auto f = [&](double d) { return detail::gamma0_at(dev, a_p, d); };
  const auto n = static_cast<long>(std::ceil((scan.d_max - scan.d_min) / scan.step));
  double d_prev = scan.d_min;
  double f_prev = f(d_prev);
  for (long i = 1; i <= n; ++i) {
    const double d = std::min(scan.d_max, scan.d_min + static_cast<double>(i) * scan.step);
    const double f_cur = f(d);
    if (std::abs(f_cur) < tol) {
      roots.push_back(d);
    } else if (std::abs(f_prev) >= tol && (f_cur < 0.0) != (f_prev < 0.0)) {
      roots.push_back(detail::bisect_root(f, d_prev, d, f_prev, tol));
    }
    d_prev = d;
    f_prev = f_cur;
  }
  return roots;
}

/// Smallest drive amplitude for which gamma0 reaches zero somewhere in the
/// scan window, together with the detuning of the deepest gamma0 dip.
/// Returns nullopt when back-action never heats inside the window.
inline std::optional<std::pair<double, double>> minimum_unstable_amplitude(
    const DeviceParams& dev, const ThresholdScan& scan = {}) {
  const double g = dev.g();
  auto heating = [&](double d) { return xi_l(d, g, 1).real() / (d * d + g * g); };
  double best_d = scan.d_min;
  double best = heating(best_d);
  const auto n = static_cast<long>(std::ceil((scan.d_max - scan.d_min) / scan.step));
  for (long i = 1; i <= n; ++i) {
    const double d = std::min(scan.d_max, scan.d_min + static_cast<double>(i) * scan.step);
    const double v = heating(d);
    if (v < best) {
      best = v;
      best_d = d;
    }
  }
  const double lo = std::max(scan.d_min, best_d - scan.step);
  const double hi = std::min(scan.d_max, best_d + scan.step);
  const auto refined = boost::math::tools::brent_find_minima(heating, lo, hi, 40);
  best_d = refined.first;
  best = refined.second;
  if (!(best < 0.0) || dev.backaction_scale() <= 0.0) return std::nullopt;
  return std::make_pair(std::sqrt(dev.gamma_m / (dev.backaction_scale() * -best)), best_d);
}

struct Calibration {
  double a_p = 0.0;
  double d_low = 0.0;
  double d_high = 0.0;
  double residual = 0.0;  ///< sqrt of the summed squared root mismatch
};

/// Fits the drive amplitude so that the two Hopf thresholds match the
/// observed pair as closely as a single scalar allows. a_p enters only
/// through G^2 a_p^2, so rescaling G is equivalent and not a separate fit.
inline Calibration calibrate_drive(const DeviceParams& dev, double d_low, double d_high,
                                   const ThresholdScan& scan = {}) {
  if (!(d_low > 0.0) || !(d_high > d_low))
    throw InvalidArgument("calibrate_drive: targets must satisfy 0 < d_low < d_high");
  const auto onset = minimum_unstable_amplitude(dev, scan);
  if (!onset) throw NumericalError("calibrate_drive: no drive amplitude produces an unstable window");
  const double log_a_min = std::log(onset->first);
  constexpr double kPenalty = 1e6;

  auto mismatch = [&](double log_a) {
    const auto roots = hopf_thresholds(dev, std::exp(log_a), scan);
    if (roots.size() != 2) return kPenalty;
    const double e1 = roots[0] - d_low;
    const double e2 = roots[1] - d_high;
    return e1 * e1 + e2 * e2;
  };

  // Coarse log scan brackets the optimum, Brent refines it.
  constexpr int kScan = 400;
  const double span = std::log(1e3);
  double best_x = log_a_min;
  double best_f = kPenalty;
  for (int i = 1; i <= kScan; ++i) {
    const double x = log_a_min + span * std::pow(static_cast<double>(i) / kScan, 2.0);
    const double v = mismatch(x);
    if (v < best_f) {
      best_f = v;
      best_x = x;
    }
  }
  if (!(best_f < kPenalty))
    throw NumericalError("calibrate_drive: no drive amplitude yields two thresholds in the scan window");
  const auto bracket = [&](int sign) {
    const double t = std::sqrt((best_x - log_a_min) / span) + sign * 1.0 / kScan;
    return log_a_min + span * std::pow(std::clamp(t, 1e-9, 1.0), 2.0);
  };
  const auto refined = boost::math::tools::brent_find_minima(mismatch, bracket(-1), bracket(+1), 30);
  const double log_a = refined.second < best_f ? refined.first : best_x;
  const auto roots = hopf_thresholds(dev, std::exp(log_a), scan);
  if (roots.size() != 2)
    throw NumericalError("calibrate_drive: refined amplitude lost the unstable window");
  Calibration c;
  c.a_p = std::exp(log_a);
  c.d_low = roots[0];
  c.d_high = roots[1];
  c.residual = std::hypot(roots[0] - d_low, roots[1] - d_high);
  return c;
}

}  // namespace ompsd::model
