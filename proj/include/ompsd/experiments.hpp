#pragma once

// Scenario runner behind the ompsd command: configuration handling, the
// steady sweep, dwell and switch protocols, output files and manifests.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "CLI11.hpp"
#include "json.hpp"
#include "ompsd/error.hpp"
#include "ompsd/fokker_planck.hpp"
#include "ompsd/langevin.hpp"
#include "ompsd/model.hpp"
#include "ompsd/parallel.hpp"
#include "ompsd/psd_field.hpp"
#include "ompsd/rng.hpp"
#include "ompsd/tomography.hpp"

#ifndef OMPSD_VERSION
#define OMPSD_VERSION "0.1.0"
#endif

namespace ompsd::experiments {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = OMPSD_VERSION;

// Every accepted key with its default. Floats are written with a decimal
// point so that integer keys can be told apart; null marks an optional
// number.
inline const Json& default_config() {
  static const Json cfg = Json::parse(R"({
    "scenario": "",
    "seed": 1,
    "output_dir": "ompsd_out",
    "threads": 0,
    "device": {
      "f_m_hz": 662700.0,
      "gamma_m_per_s": 2.5,
      "gamma_c_per_s": 4.2e6,
      "coupling_per_s": 0.013,
      "gamma2_norm": 2.0e-4
    },
    "calibration": {
      "d_low": 0.474,
      "d_high": 1.06,
      "reference_power_uw": 0.63,
      "a_p": null
    },
    "signal": {
      "sample_rate_hz": 5301600.0,
      "window_periods": 20,
      "noise_sigma": 0.5
    },
    "tomography": {
      "angles": 128,
      "bins": 128,
      "cells": 64,
      "cutoff": 0.8,
      "max_clipped": 0.1
    },
    "params": {
      "d": 0.7,
      "photons": 0.0,
      "a_p": null
    },
    "steady_sweep": {
      "power_uw": 0.63,
      "d_min": 0.3,
      "d_max": 1.2,
      "d_step": 0.01,
      "direction": "up",
      "n_windows": 20000,
      "radial_nodes": 400,
      "write_fields": false
    },
    "dwell": {
      "power_uw": 0.77,
      "d": 0.7,
      "dwell_times_norm": [0.12, 1.2, 7.5, 12.0],
      "n_trajectories": 20000,
      "phase": 0.0,
      "phase_tolerance": 0.19634954084936207,
      "radius_tolerance_norm": 0.1,
      "dt_norm": 0.002,
      "fp_cells_per_width": 3.0
    },
    "switch": {
      "power_uw": 1.0,
      "d1": -0.475,
      "snapshots_norm": [],
      "n_snapshots": 12,
      "t_min_norm": 1.0e-3,
      "t_max_norm": 3.0,
      "late_time_norm": 40.0,
      "n_trajectories": 40000,
      "dt_norm": 0.002,
      "radial_dr_norm": 0.1,
      "fp2d_h_norm": 0.125,
      "fp2d_extent_norm": 5.0,
      "compare_cells": 32,
      "compare_extent_norm": 4.0,
      "route_tolerance": 0.1,
      "equilibrate": false,
      "equilibration_time_norm": 10.0
    },
    "fp_evolve": {
      "gamma0_norm": 1.0,
      "gamma2_norm": 2.0e-4,
      "t_final_norm": 5.0,
      "n_snapshots": 5,
      "cells": 128,
      "extent": 0.0,
      "initial_var_norm": 0.5
    },
    "tomo": {
      "trace": "",
      "slow_rate_per_s": 0.0,
      "extent": 0.0
    }
  })");
  return cfg;
}

namespace detail {

inline std::string join_key(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

inline void assign_checked(Json& slot, const Json& v, const std::string& key) {
  if (slot.is_object()) {
    if (!v.is_object()) throw ConfigError("config key '" + key + "' must be an object");
    for (auto it = v.begin(); it != v.end(); ++it) {
      const std::string sub = join_key(key, it.key());
      if (!slot.contains(it.key())) throw ConfigError("unknown config key '" + sub + "'");
      assign_checked(slot[it.key()], it.value(), sub);
    }
    return;
  }
  if (slot.is_boolean()) {
    if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
    slot = v;
  } else if (slot.is_string()) {
    if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    slot = v;
  } else if (slot.is_number_unsigned()) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError("config key '" + key + "' must be a non-negative integer");
    slot = v.get<std::uint64_t>();
  } else if (slot.is_number_float() || slot.is_null()) {
    if (v.is_null() && slot.is_null()) return;
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError("config key '" + key + "' must be finite");
    slot = x;
  } else if (slot.is_array()) {
    if (!v.is_array()) throw ConfigError("config key '" + key + "' must be a list of numbers");
    Json arr = Json::array();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError("config key '" + key + "' must be a list of numbers");
      arr.push_back(e.get<double>());
    }
    slot = std::move(arr);
  }
}

}  // namespace detail

/// Defaults overlaid with a user document. Unknown keys and type
/// mismatches are rejected with the dotted key path.
inline Json resolve_config(const Json& user, const std::string& scenario = "") {
  Json cfg = default_config();
  if (!user.is_null()) detail::assign_checked(cfg, user, "");
  const std::string given = cfg["scenario"].get<std::string>();
  if (!scenario.empty()) {
    if (!given.empty() && given != scenario)
      throw ConfigError("config key 'scenario' is '" + given + "' but the command is '" + scenario + "'");
    cfg["scenario"] = scenario;
  }
  return cfg;
}

inline Json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return Json::parse(in, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError("cannot parse config file '" + path + "': " + e.what());
  }
}

// ----------------------------------------------------------------------------
// Output directory and manifest

inline std::string crc32_hex(const std::string& data) {
  boost::crc_32_type crc;
  crc.process_bytes(data.data(), data.size());
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc.checksum();
  return os.str();
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Files of one run. The manifest is written when the run starts and
/// rewritten with checksums when it finishes.
class RunOutput {
 public:
  RunOutput(const fs::path& dir, std::string command, const Json& resolved)
      : dir_(dir), command_(std::move(command)), started_(utc_now()),
        clock_(std::chrono::steady_clock::now()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_))
      throw ConfigError("config key 'output_dir': cannot create directory '" + dir_.string() + "'");
    write("resolved_config.json", resolved.dump(2) + "\n");
    write_manifest("running");
  }

  void write(const std::string& name, const std::string& content) {
    const fs::path path = dir_ / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write output file '" + path.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw ConfigError("cannot write output file '" + path.string() + "'");
    for (auto& f : files_)
      if (f.name == name) {
        f = {name, crc32_hex(content), content.size()};
        return;
      }
    files_.push_back({name, crc32_hex(content), content.size()});
  }

  void finish(const std::string& status) { write_manifest(status); }

  const fs::path& dir() const { return dir_; }
  std::vector<std::string> files() const {
    std::vector<std::string> out;
    for (const auto& f : files_) out.push_back(f.name);
    return out;
  }

 private:
  struct Entry {
    std::string name;
    std::string crc;
    std::size_t bytes;
  };

  void write_manifest(const std::string& status) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    std::ostringstream os;
    os << "ompsd manifest v1\n"
       << "version: " << kVersion << "\n"
       << "command: " << command_ << "\n"
       << "status: " << status << "\n"
       << "started: " << started_ << "\n"
       << "wall_clock_s: " << std::fixed << std::setprecision(3) << wall << "\n"
       << "resolved_config: resolved_config.json\n"
       << "outputs:\n";
    for (const auto& f : files_) os << "  " << f.crc << " " << f.bytes << " " << f.name << "\n";
    std::ofstream out(dir_ / "manifest.txt", std::ios::binary);
    if (!out) throw ConfigError("cannot write manifest in '" + dir_.string() + "'");
    out << os.str();
  }

  fs::path dir_;
  std::string command_;
  std::string started_;
  std::chrono::steady_clock::time_point clock_;
  std::vector<Entry> files_;
};

// ----------------------------------------------------------------------------
// Settings shared by the scenarios

struct SignalSettings {
  double sample_rate = 0.0;
  std::size_t window_periods = 0;
  double noise_sigma = 0.0;
};

struct TomoSettings {
  std::size_t angles = 0;
  std::size_t bins = 0;
  std::size_t cells = 0;
  double cutoff = 0.0;
  double max_clipped = 0.0;
};

struct Setup {
  model::DeviceParams device;
  SignalSettings signal;
  TomoSettings tomo;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  double reference_power = 0.0;
  std::optional<double> fixed_amplitude;
};

inline double num(const Json& j, const char* key) { return j.at(key).get<double>(); }
inline std::size_t count(const Json& j, const char* key) { return j.at(key).get<std::size_t>(); }

inline Setup make_setup(const Json& cfg) {
  Setup s;
  const auto& dev = cfg.at("device");
  s.device = model::DeviceParams::from_lab_units(num(dev, "f_m_hz"), num(dev, "gamma_m_per_s"),
                                                 num(dev, "gamma_c_per_s"), num(dev, "coupling_per_s"),
                                                 num(dev, "gamma2_norm"));
  const auto& sig = cfg.at("signal");
  s.signal = {num(sig, "sample_rate_hz"), count(sig, "window_periods"), num(sig, "noise_sigma")};
  if (!(s.signal.sample_rate > 2.0 * num(dev, "f_m_hz")))
    throw ConfigError("config key 'signal.sample_rate_hz' must exceed twice 'device.f_m_hz'");
  if (s.signal.window_periods < 10) throw ConfigError("config key 'signal.window_periods' must be at least 10");
  if (!(s.signal.noise_sigma >= 0.0)) throw ConfigError("config key 'signal.noise_sigma' must be non-negative");
  const auto& t = cfg.at("tomography");
  s.tomo = {count(t, "angles"), count(t, "bins"), count(t, "cells"), num(t, "cutoff"), num(t, "max_clipped")};
  if (s.tomo.angles < 16) throw ConfigError("config key 'tomography.angles' must be at least 16");
  if (s.tomo.bins < 64) throw ConfigError("config key 'tomography.bins' must be at least 64");
  if (s.tomo.cells < 8) throw ConfigError("config key 'tomography.cells' must be at least 8");
  if (!(s.tomo.cutoff > 0.0 && s.tomo.cutoff <= 1.0))
    throw ConfigError("config key 'tomography.cutoff' must lie in (0, 1]");
  if (!(s.tomo.max_clipped >= 0.0 && s.tomo.max_clipped <= 1.0))
    throw ConfigError("config key 'tomography.max_clipped' must lie in [0, 1]");
  s.seed = cfg.at("seed").get<std::uint64_t>();
  s.threads = count(cfg, "threads");
  const auto& cal = cfg.at("calibration");
  s.reference_power = num(cal, "reference_power_uw");
  if (!(s.reference_power > 0.0)) throw ConfigError("config key 'calibration.reference_power_uw' must be positive");
  if (!cal.at("a_p").is_null()) {
    s.fixed_amplitude = num(cal, "a_p");
    if (!(*s.fixed_amplitude >= 0.0)) throw ConfigError("config key 'calibration.a_p' must be non-negative");
  }
  return s;
}

inline model::Calibration drive_calibration(const Json& cfg, const Setup& s, double& a_ref) {
  const auto& c = cfg.at("calibration");
  const double lo = num(c, "d_low"), hi = num(c, "d_high");
  if (!(lo > 0.0 && hi > lo)) throw ConfigError("config keys 'calibration.d_low' < 'calibration.d_high' must be positive and ordered");
  model::Calibration cal;
  if (s.fixed_amplitude) {
    cal.a_p = *s.fixed_amplitude;
    const auto roots = model::hopf_thresholds(s.device, cal.a_p);
    if (roots.size() == 2) {
      cal.d_low = roots[0];
      cal.d_high = roots[1];
      cal.residual = std::hypot(roots[0] - lo, roots[1] - hi);
    } else {
      cal.residual = std::numeric_limits<double>::infinity();
    }
  } else {
    cal = model::calibrate_drive(s.device, lo, hi);
  }
  a_ref = cal.a_p;
  return cal;
}

inline double scaled_amplitude(double a_ref, double power_uw, const Setup& s, const char* key) {
  if (!(power_uw >= 0.0)) throw ConfigError(std::string("config key '") + key + "' must be non-negative");
  return a_ref * std::sqrt(power_uw / s.reference_power);
}

// ----------------------------------------------------------------------------
// Measurement helpers

using ompsd::detail::format_double;

/// Demodulation window rounded to whole carrier periods.
inline tomo::DemodWindow window_of(const Setup& s) {
  const double period = 2.0 * std::numbers::pi / s.device.omega_m;
  return tomo::demod_window(s.device.omega_m, s.signal.sample_rate,
                            static_cast<double>(s.signal.window_periods) * period);
}

/// Each amplitude is held fixed over one detector window; window k starts
/// at k * spacing and carries its own noise stream.
inline std::vector<tomo::QuadratureSample> measure_windows(const std::vector<langevin::PhasePoint>& amps,
                                                           const Setup& s, std::uint64_t seed,
                                                           double spacing = 0.0, std::size_t threads = 0) {
  const auto w = window_of(s);
  const double span = (static_cast<double>(w.samples) + 0.5) / s.signal.sample_rate;
  std::vector<tomo::QuadratureSample> out(amps.size());
  parallel_for(
      amps.size(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t k = b; k < e; ++k) {
          const auto tr = langevin::synthesize_signal({amps[k], amps[k]}, span, s.device.omega_m,
                                                      s.signal.sample_rate, s.signal.noise_sigma,
                                                      derive_seed(seed, 0x57494e, k),
                                                      spacing * static_cast<double>(k));
          out[k] = tomo::demodulate_at(tr, 0, w.samples);
        }
      },
      threads ? threads : (s.threads ? s.threads : thread_count()));
  return out;
}

inline tomo::Reconstruction reconstruct(const std::vector<tomo::QuadratureSample>& q, const TomoSettings& t,
                                        const CartesianGrid& grid) {
  const double range = std::max(grid.x_max, grid.y_max);
  return tomo::inverse_radon(tomo::sinogram(q, t.angles, t.bins, range), grid, t.cutoff, t.max_clipped);
}

struct Matrix {
  std::string corner;
  std::vector<double> columns;
  std::vector<std::pair<double, std::vector<double>>> rows;

  std::string to_csv() const {
    std::string out = corner;
    for (double c : columns) out += "," + format_double(c);
    out += "\n";
    for (const auto& [label, vals] : rows) {
      out += format_double(label);
      for (double v : vals) out += "," + format_double(v);
      out += "\n";
    }
    return out;
  }
};

inline std::vector<double> radial_row(const RadialPsd& f, const RadialGrid& axis) {
  std::vector<double> v(axis.n);
  for (std::size_t i = 0; i < axis.n; ++i) v[i] = sample_radial(f, axis.r(i));
  return v;
}

struct FpDiagnostic {
  std::string route;
  std::size_t steps = 0;
  double dt = 0.0;
  double max_mass_drift = 0.0;
  double min_value = 0.0;
};

template <class Field>
FpDiagnostic diagnostic_of(const std::string& route, const fp::EvolveResult<Field>& r) {
  return {route, r.steps, r.dt, r.max_mass_drift, r.min_value};
}

inline std::string diagnostics_csv(const std::vector<FpDiagnostic>& ds) {
  std::string out = "route,steps,dt_s,max_mass_drift,min_value\n";
  for (const auto& d : ds)
    out += d.route + "," + std::to_string(d.steps) + "," + format_double(d.dt) + "," +
           format_double(d.max_mass_drift) + "," + format_double(d.min_value) + "\n";
  return out;
}

inline std::vector<double> sign_changes(const std::vector<double>& x, const std::vector<double>& f) {
  std::vector<double> roots;
  for (std::size_t i = 1; i < x.size(); ++i)
    if ((f[i - 1] < 0.0) != (f[i] < 0.0)) roots.push_back(x[i - 1] + (x[i] - x[i - 1]) * f[i - 1] / (f[i - 1] - f[i]));
  std::sort(roots.begin(), roots.end());
  return roots;
}

inline std::string index_tag(std::size_t k) {
  std::string s = std::to_string(k);
  return std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

// ----------------------------------------------------------------------------
// Steady sweep

struct SweepPoint {
  double d = 0.0;
  model::EffectiveParams eff;
  double seo_amplitude = 0.0;
  double ring_radius = 0.0;       ///< mode of the analytic radial profile
  double ring_radius_tomo = 0.0;  ///< mode of the reconstructed profile
  double l1_radon = 0.0;
  double l1_direct = 0.0;
  double clipped = 0.0;
  RadialPsd analytic;
  RadialPsd tomo;
};

struct SweepResult {
  model::Calibration calibration;
  double a_p = 0.0;
  std::vector<double> thresholds;        ///< from the model at the sweep power
  std::vector<double> sweep_crossings;   ///< sign changes of gamma0 on the sweep grid
  RadialGrid axis;
  std::vector<SweepPoint> points;        ///< in sweep order
  Matrix matrix;
  Matrix matrix_tomo;
};

inline SweepResult run_steady_sweep(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  const auto& c = cfg.at("steady_sweep");
  const double d_min = num(c, "d_min"), d_max = num(c, "d_max"), step = num(c, "d_step");
  if (!(step > 0.0)) throw ConfigError("config key 'steady_sweep.d_step' must be positive");
  if (!(d_max >= d_min)) throw ConfigError("config key 'steady_sweep.d_max' must not be below 'steady_sweep.d_min'");
  const std::string direction = c.at("direction").get<std::string>();
  if (direction != "up" && direction != "down")
    throw ConfigError("config key 'steady_sweep.direction' must be 'up' or 'down'");
  const std::size_t n_windows = count(c, "n_windows");
  if (n_windows < 100) throw ConfigError("config key 'steady_sweep.n_windows' must be at least 100");
  const std::size_t nodes = count(c, "radial_nodes");
  if (nodes < 16) throw ConfigError("config key 'steady_sweep.radial_nodes' must be at least 16");

  SweepResult res;
  double a_ref = 0.0;
  res.calibration = drive_calibration(cfg, s, a_ref);
  res.a_p = scaled_amplitude(a_ref, num(c, "power_uw"), s, "steady_sweep.power_uw");
  res.thresholds = model::hopf_thresholds(s.device, res.a_p);

  const auto n = static_cast<std::size_t>(std::llround((d_max - d_min) / step)) + 1;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = direction == "up" ? i : n - 1 - i;

  // Grid points are indexed from d_min in both directions, so a detuning
  // gets the same value and seed whichever way it is visited.
  std::vector<SweepPoint> pts(n);
  double r_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pts[i].d = d_min + static_cast<double>(i) * step;
    pts[i].eff = model::effective_params(s.device, model::DriveParams::with_amplitude(pts[i].d, res.a_p));
    r_max = std::max(r_max, fp::default_extent(fp::PotentialSpec::from(pts[i].eff)));
  }
  res.axis = RadialGrid{nodes, r_max / static_cast<double>(nodes - 1)};

  parallel_for(
      n,
      [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
          auto& p = pts[i];
          const auto spec = fp::PotentialSpec::from(p.eff);
          try {
            p.seo_amplitude = model::seo_amplitude(p.eff);
            p.analytic = fp::steady_state(spec, res.axis);
            p.ring_radius = fp::profile_mode(p.analytic);
            const double ext = fp::default_extent(spec);
            const auto grid = CartesianGrid::square(s.tomo.cells, ext);
            const auto samples = langevin::sample_steady_state(p.eff, n_windows, derive_seed(s.seed, 0x535745, i));
            const auto q = measure_windows(samples.points, s, derive_seed(s.seed, 0x4e4f49, i), 0.0, 1);
            const auto rec = reconstruct(q, s.tomo, grid);
            const auto w2d = fp::steady_state(spec, grid);
            p.clipped = rec.clipped_fraction;
            p.l1_radon = tomo::compare_psd(w2d, rec.field).l1;
            p.l1_direct = tomo::compare_psd(w2d, tomo::direct_psd(q, grid)).l1;
            p.tomo = angular_average(rec.field, res.axis);
            p.ring_radius_tomo = fp::profile_mode(p.tomo);
          } catch (const Error& err) {
            throw NumericalError("steady_sweep at d = " + format_double(p.d) + ": " + err.what());
          }
        }
      },
      s.threads ? s.threads : thread_count());

  std::vector<double> ds, g0;
  for (const auto& p : pts) {
    ds.push_back(p.d);
    g0.push_back(p.eff.gamma0);
  }
  res.sweep_crossings = sign_changes(ds, g0);

  res.matrix.corner = res.matrix_tomo.corner = "d/r";
  res.matrix.columns = res.matrix_tomo.columns = std::vector<double>(nodes);
  for (std::size_t i = 0; i < nodes; ++i) res.matrix.columns[i] = res.matrix_tomo.columns[i] = res.axis.r(i);
  std::string summary = "d,gamma0,gamma_ba,omega0,seo_amplitude,ring_radius,ring_radius_tomo,clipped_fraction,l1_radon,l1_direct\n";
  const bool fields = c.at("write_fields").get<bool>();
  for (std::size_t k : order) {
    auto& p = pts[k];
    res.matrix.rows.emplace_back(p.d, p.analytic.values);
    res.matrix_tomo.rows.emplace_back(p.d, p.tomo.values);
    summary += format_double(p.d) + "," + format_double(p.eff.gamma0) + "," + format_double(p.eff.gamma_ba) + "," +
               format_double(p.eff.omega0) + "," + format_double(p.seo_amplitude) + "," +
               format_double(p.ring_radius) + "," + format_double(p.ring_radius_tomo) + "," +
               format_double(p.clipped) + "," + format_double(p.l1_radon) + "," + format_double(p.l1_direct) + "\n";
    if (fields) {
      out.write("psd_sweep_" + index_tag(k) + "_analytic.csv", to_csv(p.analytic));
      out.write("psd_sweep_" + index_tag(k) + "_tomo.csv", to_csv(p.tomo));
    }
    res.points.push_back(std::move(p));
  }
  out.write("sweep_matrix.csv", res.matrix.to_csv());
  out.write("sweep_matrix_tomo.csv", res.matrix_tomo.to_csv());
  out.write("sweep_summary.csv", summary);

  auto pair_row = [](const std::string& name, const std::vector<double>& r) {
    std::string row = name;
    for (double v : r) row += "," + format_double(v);
    return row + "\n";
  };
  const auto& cal = cfg.at("calibration");
  out.write("thresholds.csv", "source,values\n" +
                                  pair_row("target", {num(cal, "d_low"), num(cal, "d_high")}) +
                                  pair_row("calibration", {res.calibration.d_low, res.calibration.d_high}) +
                                  pair_row("model", res.thresholds) + pair_row("sweep_grid", res.sweep_crossings));
  out.write("calibration.csv", "a_p,d_low,d_high,residual,sweep_a_p\n" + format_double(res.calibration.a_p) + "," +
                                   format_double(res.calibration.d_low) + "," +
                                   format_double(res.calibration.d_high) + "," +
                                   format_double(res.calibration.residual) + "," + format_double(res.a_p) + "\n");
  return res;
}

// ----------------------------------------------------------------------------
// Dwell

struct DwellPoint {
  double t_d = 0.0;  ///< s
  std::size_t survivors = 0;
  double entropy_langevin = 0.0;
  double entropy_fp = 0.0;
  PsdField2d langevin;
  PsdField2d fp;  ///< resampled onto the Langevin grid
};

struct DwellResult {
  model::EffectiveParams eff;
  double ring = 0.0;
  tomo::Condition condition;
  std::vector<DwellPoint> points;
  std::vector<FpDiagnostic> diagnostics;
};

inline DwellResult run_dwell(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  const auto& c = cfg.at("dwell");
  const double gm = s.device.gamma_m;
  std::vector<double> times;
  for (const auto& t : c.at("dwell_times_norm")) times.push_back(t.get<double>() / gm);
  if (times.empty()) throw ConfigError("config key 'dwell.dwell_times_norm' must not be empty");
  for (std::size_t k = 0; k < times.size(); ++k)
    if (!(times[k] > 0.0) || (k > 0 && !(times[k] > times[k - 1])))
      throw ConfigError("config key 'dwell.dwell_times_norm' must be positive and increasing");
  const std::size_t n = count(c, "n_trajectories");
  if (n < tomo::kMinConditioned) throw ConfigError("config key 'dwell.n_trajectories' must be at least 100");

  DwellResult res;
  double a_ref = 0.0;
  drive_calibration(cfg, s, a_ref);
  const double a_p = scaled_amplitude(a_ref, num(c, "power_uw"), s, "dwell.power_uw");
  res.eff = model::effective_params(s.device, model::DriveParams::with_amplitude(num(c, "d"), a_p));
  if (!(res.eff.gamma0 < 0.0 && res.eff.gamma2 > 0.0))
    throw ConfigError("config keys 'dwell.power_uw' and 'dwell.d' give gamma0 = " + format_double(res.eff.gamma0) +
                      ", not a self-oscillating state");
  res.ring = model::seo_amplitude(res.eff);
  res.condition = {num(c, "phase"), res.ring, num(c, "phase_tolerance"), num(c, "radius_tolerance_norm") * res.ring};
  if (!(res.condition.phase_tolerance > 0.0) || !(res.condition.radius_tolerance > 0.0))
    throw ConfigError("config keys 'dwell.phase_tolerance' and 'dwell.radius_tolerance_norm' must be positive");
  const auto spec = fp::PotentialSpec::from(res.eff);

  // Stationary ensemble, first window at t = 0, second window after t_d.
  const auto init = langevin::sample_steady_state(res.eff, n, derive_seed(s.seed, 0x44574c, 0));
  const auto first = measure_windows(init.points, s, derive_seed(s.seed, 0x44574c, 1));
  double max_r = res.ring;
  for (const auto& p : init.points) max_r = std::max(max_r, p.radius());
  const double dt = std::min(num(c, "dt_norm") / gm, 0.999 * langevin::max_dt(res.eff, max_r));
  if (!(dt > 0.0)) throw ConfigError("config key 'dwell.dt_norm' must be positive");
  langevin::SimulateOptions so;
  so.snapshot_times = times;
  so.threads = s.threads;
  const auto sim = langevin::simulate_ensemble(res.eff, init, times.back(), dt, so);

  const auto grid = CartesianGrid::square(s.tomo.cells, fp::default_extent(spec));

  // Fokker-Planck route from the steady state restricted to the cell.
  const double sigma_r = std::sqrt(spec.theta / (-2.0 * spec.gamma0));
  const double cells_per_width = num(c, "fp_cells_per_width");
  if (!(cells_per_width > 0.0)) throw ConfigError("config key 'dwell.fp_cells_per_width' must be positive");
  const double fp_ext = res.ring + 16.0 * sigma_r;
  const auto fp_cells = 2 * static_cast<std::size_t>(std::ceil(fp_ext * cells_per_width / sigma_r));
  const auto fgrid = CartesianGrid::square(fp_cells, fp_ext);
  auto start = fp::steady_state(spec, fgrid);
  for (std::size_t j = 0; j < fgrid.ny; ++j)
    for (std::size_t i = 0; i < fgrid.nx; ++i)
      if (!res.condition.contains(fgrid.x(i), fgrid.y(j))) start.values[fgrid.index(i, j)] = 0.0;
  start.normalize();
  fp::EvolveOptions eo;
  eo.snapshot_times = times;
  eo.threads = s.threads;
  const auto evo = fp::evolve(start, spec, times.back(), eo);
  res.diagnostics.push_back(diagnostic_of("fp2d", evo));

  std::string table = "gamma_m_t_d,survivors,entropy_langevin,entropy_fp,entropy_uniform\n";
  for (std::size_t k = 0; k < times.size(); ++k) {
    const auto second = measure_windows(sim.snapshots[k].points, s, derive_seed(s.seed, 0x44574c, 2 + k));
    std::vector<tomo::WindowPair> pairs(n);
    for (std::size_t i = 0; i < n; ++i) pairs[i] = {first[i], second[i]};
    DwellPoint p;
    p.t_d = times[k];
    p.survivors = tomo::select_conditioned(pairs, res.condition).size();
    p.langevin = tomo::conditioned_psd(pairs, res.condition, grid);
    p.langevin.time = times[k];
    p.entropy_langevin = fp::moments(p.langevin).angular_entropy;
    p.entropy_fp = fp::moments(evo.snapshots[k]).angular_entropy;
    p.fp = tomo::resample(evo.snapshots[k], grid);
    table += format_double(times[k] * gm) + "," + std::to_string(p.survivors) + "," +
             format_double(p.entropy_langevin) + "," + format_double(p.entropy_fp) + "," +
             format_double(std::log(2.0 * std::numbers::pi)) + "\n";
    out.write("psd_dwell_" + index_tag(k) + "_langevin.csv", to_csv(p.langevin));
    out.write("psd_dwell_" + index_tag(k) + "_fp.csv", to_csv(p.fp));
    res.points.push_back(std::move(p));
  }
  out.write("dwell_entropy.csv", table);
  out.write("fp_diagnostics.csv", diagnostics_csv(res.diagnostics));
  return res;
}

// ----------------------------------------------------------------------------
// Switch

struct SwitchSnapshot {
  double t = 0.0;  ///< s after the switch
  double width_oracle = 0.0;
  double width_radial = 0.0;
  bool linear_regime = false;
  double l1_radial_fp2d = 0.0;
  double l1_radial_tomo = 0.0;
  double l1_fp2d_tomo = 0.0;
  double allowance = 0.0;
  double clipped = 0.0;
  RadialPsd radial;
  PsdField2d fp2d;  ///< on the 2D solver grid
  PsdField2d tomo;  ///< on the comparison grid
  langevin::EnsembleState ensemble;
};

struct SwitchResult {
  model::EffectiveParams cool;
  model::EffectiveParams heat;
  double gamma_ba = 0.0;  ///< back-action magnitude, cooling sign
  double w0 = 0.0;        ///< pre-switch width
  double ring = 0.0;      ///< post-switch limit-cycle radius
  RadialPsd initial;
  std::vector<SwitchSnapshot> snapshots;
  RadialPsd late;
  double late_l1 = 0.0;
  std::vector<FpDiagnostic> diagnostics;
  Matrix matrix;
};

/// Log-spaced snapshot times over [t_min, t_max], both inclusive.
inline std::vector<double> log_times(double t_min, double t_max, std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t k = 0; k < n; ++k)
    t[k] = n == 1 ? t_max : t_min * std::pow(t_max / t_min, static_cast<double>(k) / static_cast<double>(n - 1));
  return t;
}

inline SwitchResult run_switch(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  const auto& c = cfg.at("switch");
  const double gm = s.device.gamma_m;
  const double theta = s.device.theta();

  std::vector<double> times;
  for (const auto& t : c.at("snapshots_norm")) times.push_back(t.get<double>() / gm);
  if (times.empty()) {
    const double lo = num(c, "t_min_norm"), hi = num(c, "t_max_norm");
    if (!(lo > 0.0 && hi > lo)) throw ConfigError("config keys 'switch.t_min_norm' < 'switch.t_max_norm' must be positive");
    if (count(c, "n_snapshots") == 0) throw ConfigError("config key 'switch.n_snapshots' must be positive");
    times = log_times(lo / gm, hi / gm, count(c, "n_snapshots"));
  }
  for (std::size_t k = 0; k < times.size(); ++k)
    if (!(times[k] > 0.0) || (k > 0 && !(times[k] > times[k - 1])))
      throw ConfigError("config key 'switch.snapshots_norm' must be positive and increasing");
  const double t_late = num(c, "late_time_norm") / gm;
  if (!(t_late > times.back())) throw ConfigError("config key 'switch.late_time_norm' must exceed the last snapshot");
  const double d1 = num(c, "d1");
  if (!(d1 < 0.0)) throw ConfigError("config key 'switch.d1' must be negative (red detuning)");
  const std::size_t n_traj = count(c, "n_trajectories");
  if (n_traj < 100) throw ConfigError("config key 'switch.n_trajectories' must be at least 100");

  SwitchResult res;
  double a_ref = 0.0;
  drive_calibration(cfg, s, a_ref);
  const double a_p = scaled_amplitude(a_ref, num(c, "power_uw"), s, "switch.power_uw");
  res.cool = model::effective_params(s.device, model::DriveParams::with_amplitude(d1, a_p));
  res.heat = model::effective_params(s.device, model::DriveParams::with_amplitude(-d1, a_p));
  res.gamma_ba = res.cool.gamma_ba;
  if (!(res.gamma_ba > 0.0)) throw ConfigError("config key 'switch.power_uw' gives no back-action cooling");
  res.w0 = std::sqrt(2.0 * theta / res.cool.gamma0);
  res.ring = res.heat.gamma0 < 0.0 ? model::seo_amplitude(res.heat) : 0.0;
  const auto spec_cool = fp::PotentialSpec::from(res.cool);
  const auto spec_heat = fp::PotentialSpec::from(res.heat);
  const double var0 = 0.5 * res.w0 * res.w0;  // per quadrature
  auto oracle = [&](double t) { return fp::gaussian_width_oracle(theta, res.gamma_ba, gm, t); };
  const bool equilibrate = c.at("equilibrate").get<bool>();
  const double t_eq = num(c, "equilibration_time_norm") / gm;
  const double var_thermal = theta / gm;

  // Radial route, carried on to the late time.
  const double dr = num(c, "radial_dr_norm") * res.w0;
  if (!(dr > 0.0)) throw ConfigError("config key 'switch.radial_dr_norm' must be positive");
  const double r_max = std::max(fp::default_extent(spec_heat), 6.0 * oracle(times.back()));
  const RadialGrid rgrid{static_cast<std::size_t>(std::ceil(r_max / dr)) + 1, dr};
  res.initial = fp::gaussian_field(rgrid, var0);
  if (equilibrate) {
    const auto eq = fp::radial_evolve(fp::gaussian_field(rgrid, var_thermal), spec_cool, t_eq);
    res.diagnostics.push_back(diagnostic_of("radial_equilibration", eq));
    res.initial = eq.field;
    res.initial.time = 0.0;
  }
  fp::EvolveOptions ro;
  ro.snapshot_times = times;
  ro.threads = s.threads;
  const auto radial = fp::radial_evolve(res.initial, spec_heat, t_late, ro);
  res.diagnostics.push_back(diagnostic_of("radial", radial));
  res.late = radial.field;
  res.late_l1 = tomo::compare_psd(fp::steady_state(spec_heat, rgrid), res.late).l1;

  // 2D route.
  const double h = num(c, "fp2d_h_norm") * res.w0;
  const double ext2 = num(c, "fp2d_extent_norm") * oracle(times.back());
  if (!(h > 0.0) || !(ext2 > 0.0))
    throw ConfigError("config keys 'switch.fp2d_h_norm' and 'switch.fp2d_extent_norm' must be positive");
  const auto grid2 = CartesianGrid::square(2 * static_cast<std::size_t>(std::ceil(ext2 / h)), ext2);
  auto init2 = fp::gaussian_field(grid2, var0);
  if (equilibrate) {
    const auto eq = fp::evolve(fp::gaussian_field(grid2, var_thermal), spec_cool, t_eq);
    res.diagnostics.push_back(diagnostic_of("fp2d_equilibration", eq));
    init2 = eq.field;
    init2.time = 0.0;
  }
  fp::EvolveOptions eo;
  eo.snapshot_times = times;
  eo.threads = s.threads;
  const auto evo2 = fp::evolve(init2, spec_heat, times.back(), eo);
  res.diagnostics.push_back(diagnostic_of("fp2d", evo2));

  // Langevin route from the cooled Gaussian.
  std::vector<langevin::PhasePoint> pts(n_traj);
  {
    const double sd = std::sqrt(equilibrate ? var_thermal : var0);
    for (std::size_t k = 0; k < n_traj; ++k) {
      StreamRng rng(derive_seed(s.seed, 0x535749, 0), k);
      std::normal_distribution<double> normal(0.0, sd);
      const double x = normal(rng);
      const double y = normal(rng);
      pts[k] = {x, y};
    }
  }
  auto ens = langevin::EnsembleState::at_points(pts, derive_seed(s.seed, 0x535749, 1));
  auto lang_dt = [&](const model::EffectiveParams& e, const langevin::EnsembleState& st) {
    double m = e.gamma0 < 0.0 && e.gamma2 > 0.0 ? model::seo_amplitude(e) : 0.0;
    for (const auto& p : st.points) m = std::max(m, p.radius());
    const double dt = std::min(num(c, "dt_norm") / gm, 0.999 * langevin::max_dt(e, m));
    if (!(dt > 0.0)) throw ConfigError("config key 'switch.dt_norm' must be positive");
    return dt;
  };
  langevin::SimulateOptions so;
  so.threads = s.threads;
  if (equilibrate) {
    ens = langevin::simulate_ensemble(res.cool, ens, t_eq, lang_dt(res.cool, ens), so).state;
    ens.time = 0.0;
  }
  so.snapshot_times = times;
  const auto sim = langevin::simulate_ensemble(res.heat, ens, times.back(), lang_dt(res.heat, ens), so);

  const std::size_t cmp_cells = count(c, "compare_cells");
  const double cmp_norm = num(c, "compare_extent_norm");
  const double tol = num(c, "route_tolerance");
  if (cmp_cells < 8 || !(cmp_norm > 0.0))
    throw ConfigError("config keys 'switch.compare_cells' (>= 8) and 'switch.compare_extent_norm' (> 0) are invalid");

  std::string widths = "gamma_m_t,width_oracle,width_radial,relative_error,width_over_ring,linear_regime\n";
  std::string routes = "gamma_m_t,l1_radial_fp2d,l1_radial_tomo,l1_fp2d_tomo,allowance,clipped_fraction\n";
  std::string disagreement;
  for (std::size_t k = 0; k < times.size(); ++k) {
    SwitchSnapshot sn;
    sn.t = times[k];
    sn.radial = radial.snapshots[k];
    sn.fp2d = evo2.snapshots[k];
    sn.ensemble = sim.snapshots[k];
    sn.width_oracle = oracle(sn.t);
    sn.width_radial = fp::core_width(sn.radial);
    sn.linear_regime = res.ring > 0.0 && sn.width_oracle <= 0.3 * res.ring;

    const auto cgrid = CartesianGrid::square(cmp_cells, cmp_norm * sn.width_oracle);
    const auto q = measure_windows(sn.ensemble.points, s, derive_seed(s.seed, 0x535749, 2 + k));
    const auto rad2 = radial_to_cartesian(sn.radial, cgrid);
    const auto fp2 = tomo::resample(sn.fp2d, cgrid);
    const auto rec = reconstruct(q, s.tomo, cgrid);
    sn.tomo = rec.field;
    sn.tomo.time = sn.t;
    sn.clipped = rec.clipped_fraction;
    sn.l1_radial_fp2d = tomo::compare_psd(fp2, rad2).l1;
    sn.l1_radial_tomo = tomo::compare_psd(rad2, sn.tomo).l1;
    sn.l1_fp2d_tomo = tomo::compare_psd(fp2, sn.tomo).l1;
    sn.allowance = tomo::histogram_l1_allowance(fp2, n_traj);
    // The sampled route is held to the same bound plus its sampling noise.
    if (sn.l1_radial_fp2d > tol || sn.l1_fp2d_tomo > tol + sn.allowance || sn.l1_radial_tomo > tol + sn.allowance)
      disagreement += " gamma_m t = " + format_double(sn.t * gm);

    widths += format_double(sn.t * gm) + "," + format_double(sn.width_oracle) + "," +
              format_double(sn.width_radial) + "," + format_double(sn.width_radial / sn.width_oracle - 1.0) + "," +
              format_double(res.ring > 0.0 ? sn.width_oracle / res.ring : 0.0) + "," +
              (sn.linear_regime ? "1" : "0") + "\n";
    routes += format_double(sn.t * gm) + "," + format_double(sn.l1_radial_fp2d) + "," +
              format_double(sn.l1_radial_tomo) + "," + format_double(sn.l1_fp2d_tomo) + "," +
              format_double(sn.allowance) + "," + format_double(sn.clipped) + "\n";
    out.write("psd_switch_" + index_tag(k) + "_radial.csv", to_csv(sn.radial));
    out.write("psd_switch_" + index_tag(k) + "_fp2d.csv", to_csv(fp2));
    out.write("psd_switch_" + index_tag(k) + "_tomo.csv", to_csv(sn.tomo));
    res.snapshots.push_back(std::move(sn));
  }

  res.matrix.corner = "gamma_m_t/r";
  res.matrix.columns.resize(rgrid.n);
  for (std::size_t i = 0; i < rgrid.n; ++i) res.matrix.columns[i] = rgrid.r(i);
  res.matrix.rows.emplace_back(0.0, res.initial.values);
  for (const auto& sn : res.snapshots) res.matrix.rows.emplace_back(sn.t * gm, sn.radial.values);
  res.matrix.rows.emplace_back(t_late * gm, res.late.values);

  out.write("switch_matrix.csv", res.matrix.to_csv());
  out.write("switch_width.csv", widths);
  out.write("switch_routes.csv", routes);
  out.write("switch_late.csv", "gamma_m_t,l1_radial_vs_steady,ring_radius,profile_mode\n" + format_double(t_late * gm) +
                                   "," + format_double(res.late_l1) + "," + format_double(res.ring) + "," +
                                   format_double(fp::profile_mode(res.late)) + "\n");
  out.write("psd_switch_initial_radial.csv", to_csv(res.initial));
  out.write("psd_switch_late_radial.csv", to_csv(res.late));
  out.write("fp_diagnostics.csv", diagnostics_csv(res.diagnostics));
  if (!disagreement.empty())
    throw NumericalError("switch: routes disagree beyond switch.route_tolerance = " + format_double(tol) + " at" +
                         disagreement + " (see switch_routes.csv)");
  return res;
}

// ----------------------------------------------------------------------------
// Single-purpose commands

inline std::string params_report(const model::DeviceParams& dev, const model::DriveParams& drive) {
  const auto e = model::effective_params(dev, drive);
  std::string out = "quantity,value\n";
  auto row = [&](const char* k, double v) { out += std::string(k) + "," + format_double(v) + "\n"; };
  row("d", drive.detuning);
  row("photons", model::photon_number(dev, drive));
  row("g", dev.g());
  row("gamma_m", dev.gamma_m);
  row("gamma_ba", e.gamma_ba);
  row("gamma0", e.gamma0);
  row("omega0", e.omega0);
  row("gamma2", e.gamma2);
  row("omega2", e.omega2);
  row("theta", e.theta);
  row("seo_amplitude", e.gamma2 > 0.0 ? model::seo_amplitude(e) : 0.0);
  return out;
}

inline std::string run_params(const Json& cfg) {
  const Setup s = make_setup(cfg);
  const auto& p = cfg.at("params");
  const double d = num(p, "d");
  if (!p.at("a_p").is_null()) return params_report(s.device, model::DriveParams::with_amplitude(d, num(p, "a_p")));
  const double photons = num(p, "photons");
  if (!(photons >= 0.0)) throw ConfigError("config key 'params.photons' must be non-negative");
  return params_report(s.device, model::DriveParams::with_photons(d, photons));
}

inline model::Calibration run_calibrate(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  double a_ref = 0.0;
  const auto cal = drive_calibration(cfg, s, a_ref);
  const auto& c = cfg.at("calibration");
  out.write("calibration.csv", "a_p,d_low,d_high,residual,target_low,target_high\n" + format_double(cal.a_p) + "," +
                                   format_double(cal.d_low) + "," + format_double(cal.d_high) + "," +
                                   format_double(cal.residual) + "," + format_double(num(c, "d_low")) + "," +
                                   format_double(num(c, "d_high")) + "\n");
  return cal;
}

struct FpEvolveResult {
  PsdField2d field;
  PsdField2d steady;
  std::vector<double> l1;  ///< against the steady state, per snapshot
  FpDiagnostic diagnostic;
};

inline FpEvolveResult run_fp_evolve(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  const auto& c = cfg.at("fp_evolve");
  const double gm = s.device.gamma_m;
  const fp::PotentialSpec spec{num(c, "gamma0_norm") * gm, num(c, "gamma2_norm") * gm, s.device.theta()};
  if (!fp::normalizable(spec))
    throw ConfigError("config keys 'fp_evolve.gamma0_norm' and 'fp_evolve.gamma2_norm' give no steady state");
  const double t_final = num(c, "t_final_norm") / gm;
  if (!(t_final > 0.0)) throw ConfigError("config key 'fp_evolve.t_final_norm' must be positive");
  const std::size_t cells = count(c, "cells");
  if (cells < 8) throw ConfigError("config key 'fp_evolve.cells' must be at least 8");
  const double var = num(c, "initial_var_norm");
  if (!(var > 0.0)) throw ConfigError("config key 'fp_evolve.initial_var_norm' must be positive");
  const double ext =
      num(c, "extent") > 0.0 ? num(c, "extent") : std::max(fp::default_extent(spec), 7.0 * std::sqrt(var));
  const auto grid = CartesianGrid::square(cells, ext);
  fp::EvolveOptions eo;
  const std::size_t n_snap = count(c, "n_snapshots");
  for (std::size_t k = 1; k <= n_snap; ++k)
    eo.snapshot_times.push_back(t_final * static_cast<double>(k) / static_cast<double>(n_snap + 1));
  eo.threads = s.threads;
  const auto r = fp::evolve(fp::gaussian_field(grid, var), spec, t_final, eo);
  FpEvolveResult res{r.field, fp::steady_state(spec, grid), {}, diagnostic_of("fp2d", r)};
  std::string table = "gamma_m_t,l1_vs_steady\n";
  auto add = [&](const PsdField2d& f) {
    res.l1.push_back(tomo::compare_psd(res.steady, f).l1);
    table += format_double(f.time * gm) + "," + format_double(res.l1.back()) + "\n";
  };
  for (const auto& f : r.snapshots) add(f);
  add(r.field);
  out.write("psd_fp_evolve.csv", to_csv(res.field));
  out.write("psd_fp_steady.csv", to_csv(res.steady));
  out.write("fp_evolve_l1.csv", table);
  out.write("fp_diagnostics.csv", diagnostics_csv({res.diagnostic}));
  return res;
}

struct TomoResult {
  std::size_t windows = 0;
  tomo::Reconstruction radon;
  PsdField2d direct;
  double l1_between = 0.0;
};

inline TomoResult run_tomo(const Json& cfg, RunOutput& out) {
  const Setup s = make_setup(cfg);
  const auto& c = cfg.at("tomo");
  const std::string path = c.at("trace").get<std::string>();
  if (path.empty()) throw ConfigError("config key 'tomo.trace' (or --trace) must name a trace file");
  const auto tr = langevin::read_trace(path);
  const double period = 2.0 * std::numbers::pi / tr.carrier;
  const auto q = tomo::demodulate(tr, static_cast<double>(s.signal.window_periods) * period, num(c, "slow_rate_per_s"));
  double ext = num(c, "extent");
  if (!(ext > 0.0)) {
    for (const auto& v : q) ext = std::max(ext, std::hypot(v.a_x, v.a_y));
    ext *= 1.05;
  }
  if (!(ext > 0.0)) throw NumericalError("tomo: all demodulated quadratures are zero");
  const auto grid = CartesianGrid::square(s.tomo.cells, ext);
  TomoResult res{q.size(), reconstruct(q, s.tomo, grid), tomo::direct_psd(q, grid), 0.0};
  res.l1_between = tomo::compare_psd(res.direct, res.radon.field).l1;
  const auto m = fp::moments(res.radon.field);
  out.write("psd_tomo.csv", to_csv(res.radon.field));
  out.write("psd_tomo_direct.csv", to_csv(res.direct));
  out.write("sinogram.csv", tomo::to_csv(tomo::sinogram(q, s.tomo.angles, s.tomo.bins, ext)));
  out.write("tomo_summary.csv", "windows,clipped_fraction,l1_radon_vs_direct,mean_radius,radial_width\n" +
                                    std::to_string(res.windows) + "," + format_double(res.radon.clipped_fraction) +
                                    "," + format_double(res.l1_between) + "," + format_double(m.mean_radius) + "," +
                                    format_double(m.radial_width) + "\n");
  return res;
}

// ----------------------------------------------------------------------------
// Command line

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

inline int cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Phase-space distributions of a cavity-driven mechanical resonator", "ompsd"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, format = "csv", trace;
  std::optional<std::uint64_t> seed;
  std::optional<double> d, photons;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"params", "print effective parameters for a detuning and photon number"},
      {"steady-sweep", "steady-state PSDs across a detuning sweep"},
      {"dwell", "conditioned PSDs after a list of dwell times"},
      {"switch", "time-resolved PSDs after a cooling-to-heating switch"},
      {"fp-evolve", "evolve the Fokker-Planck equation from a Gaussian"},
      {"tomo", "reconstruct a PSD from a recorded signal trace"},
      {"calibrate", "fit the drive amplitude to two threshold detunings"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--out", out_dir, "output directory (overrides the config)");
    sub->add_option("--format", format, "output format")->check(CLI::IsMember({"csv"}));
    if (name == "params") {
      sub->add_option("--d", d, "normalized detuning");
      sub->add_option("--photons", photons, "cavity photon number E_c");
    }
    if (name == "tomo") sub->add_option("--trace", trace, "signal trace file");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  std::string scenario = command;
  std::replace(scenario.begin(), scenario.end(), '-', '_');

  try {
    Json user = config_path.empty() ? Json::object() : load_config_file(config_path);
    Json cfg = resolve_config(user, scenario);
    if (seed) cfg["seed"] = *seed;
    if (!out_dir.empty()) cfg["output_dir"] = out_dir;
    if (d) cfg["params"]["d"] = *d;
    if (photons) cfg["params"]["photons"] = *photons;
    if (!trace.empty()) cfg["tomo"]["trace"] = trace;

    if (command == "params") {
      out << run_params(cfg);
      return kExitOk;
    }
    RunOutput run(cfg.at("output_dir").get<std::string>(), command, cfg);
    try {
      if (command == "steady-sweep") {
        const auto r = run_steady_sweep(cfg, run);
        out << "steady-sweep: " << r.points.size() << " detunings, a_p = " << format_double(r.a_p) << "\n";
      } else if (command == "dwell") {
        const auto r = run_dwell(cfg, run);
        for (const auto& p : r.points)
          out << "dwell: gamma_m t_d = " << format_double(p.t_d * r.eff.gamma_m()) << " entropy "
              << format_double(p.entropy_langevin) << " (" << p.survivors << " windows)\n";
      } else if (command == "switch") {
        const auto r = run_switch(cfg, run);
        out << "switch: " << r.snapshots.size() << " snapshots, late L1 " << format_double(r.late_l1) << "\n";
      } else if (command == "fp-evolve") {
        const auto r = run_fp_evolve(cfg, run);
        out << "fp-evolve: final L1 vs steady state " << format_double(r.l1.back()) << "\n";
      } else if (command == "tomo") {
        const auto r = run_tomo(cfg, run);
        out << "tomo: " << r.windows << " windows, clipped " << format_double(r.radon.clipped_fraction) << "\n";
      } else if (command == "calibrate") {
        const auto r = run_calibrate(cfg, run);
        out << "calibrate: a_p = " << format_double(r.a_p) << " thresholds " << format_double(r.d_low) << " "
            << format_double(r.d_high) << " residual " << format_double(r.residual) << "\n";
      }
      run.finish("complete");
    } catch (const std::exception& e) {
      try {
        run.finish(std::string("failed: ") + e.what());
      } catch (const std::exception&) {
      }
      throw;
    }
    out << "outputs in " << cfg.at("output_dir").get<std::string>() << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "ompsd " << command << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    err << "ompsd " << command << ": invalid setting: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "ompsd " << command << ": numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "ompsd " << command << ": " << e.what() << "\n";
    return kExitNumerical;
  }
}

}  // namespace ompsd::experiments
