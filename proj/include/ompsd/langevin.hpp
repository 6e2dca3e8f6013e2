#pragma once

// Stochastic slow-amplitude dynamics dA = -grad H dt + sqrt(2 Theta) dW for
// ensembles of trajectories, steady-state sampling, and synthesis of the
// carrier-frequency displacement signal seen by a detector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "ompsd/error.hpp"
#include "ompsd/fokker_planck.hpp"
#include "ompsd/model.hpp"
#include "ompsd/parallel.hpp"
#include "ompsd/rng.hpp"

namespace ompsd::langevin {

struct PhasePoint {
  double a_x = 0.0;
  double a_y = 0.0;

  double radius() const { return std::hypot(a_x, a_y); }
  bool operator==(const PhasePoint&) const = default;
};

/// Ensemble of trajectories. Trajectory k draws its noise from stream
/// streams[k] of the master seed, starting at counter positions[k].
struct EnsembleState {
  std::vector<PhasePoint> points;
  double time = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> streams;
  std::vector<std::uint64_t> positions;

  static EnsembleState at_points(std::vector<PhasePoint> pts, std::uint64_t seed, double time = 0.0) {
    EnsembleState s;
    s.points = std::move(pts);
    s.time = time;
    s.seed = seed;
    s.streams.resize(s.points.size());
    for (std::size_t k = 0; k < s.streams.size(); ++k) s.streams[k] = k;
    s.positions.assign(s.points.size(), 0);
    return s;
  }

  std::size_t size() const { return points.size(); }
};

enum class Integrator { EulerMaruyama, Heun };

/// -grad H; with rotate set, also the carrier-frame rotation -i Omega_eff A.
inline PhasePoint drift(const model::EffectiveParams& eff, const PhasePoint& p, bool rotate = false) {
  const double r2 = p.a_x * p.a_x + p.a_y * p.a_y;
  const double g = eff.gamma0 + eff.gamma2 * r2;
  PhasePoint d{-g * p.a_x, -g * p.a_y};
  if (rotate) {
    const double w = eff.omega0 + eff.omega2 * r2;
    d.a_x += w * p.a_y;
    d.a_y -= w * p.a_x;
  }
  return d;
}

/// One step with unit normal draws (n_x, n_y).
inline PhasePoint step(const model::EffectiveParams& eff, const PhasePoint& p, double dt, double n_x, double n_y,
                       Integrator method = Integrator::EulerMaruyama, bool rotate = false) {
  const double amp = std::sqrt(2.0 * eff.theta * dt);
  const PhasePoint d0 = drift(eff, p, rotate);
  const PhasePoint pred{p.a_x + d0.a_x * dt + amp * n_x, p.a_y + d0.a_y * dt + amp * n_y};
  if (method == Integrator::EulerMaruyama) return pred;
  const PhasePoint d1 = drift(eff, pred, rotate);
  return {p.a_x + 0.5 * (d0.a_x + d1.a_x) * dt + amp * n_x, p.a_y + 0.5 * (d0.a_y + d1.a_y) * dt + amp * n_y};
}

/// Largest step allowed by dt <= 0.01 / max(|gamma0|, gamma2 max A^2, gamma_m).
inline double max_dt(const model::EffectiveParams& eff, double max_radius) {
  const double rate = std::max({std::abs(eff.gamma0), eff.gamma2 * max_radius * max_radius, eff.gamma_m()});
  return rate > 0.0 ? 0.01 / rate : std::numeric_limits<double>::infinity();
}

struct SimulateOptions {
  Integrator method = Integrator::EulerMaruyama;
  std::vector<double> snapshot_times;  ///< absolute times
  bool rotate = false;
  std::size_t threads = 0;
};

struct SimulateResult {
  EnsembleState state;
  std::vector<EnsembleState> snapshots;
};

inline SimulateResult simulate_ensemble(const model::EffectiveParams& eff, const EnsembleState& init,
                                        double t_final, double dt, const SimulateOptions& opt = {}) {
  if (!(dt > 0.0)) throw InvalidArgument("simulate_ensemble: dt must be positive");
  if (init.streams.size() != init.size() || init.positions.size() != init.size())
    throw InvalidArgument("simulate_ensemble: stream bookkeeping does not match the ensemble");
  if (!(t_final >= init.time)) throw InvalidArgument("simulate_ensemble: t_final precedes the ensemble time");
  double max_r = eff.gamma0 < 0.0 && eff.gamma2 > 0.0 ? std::sqrt(-eff.gamma0 / eff.gamma2) : 0.0;
  for (const auto& p : init.points) max_r = std::max(max_r, p.radius());
  const double limit = max_dt(eff, max_r);
  if (dt > limit * (1 + 1e-12))
    throw InvalidArgument("simulate_ensemble: dt = " + std::to_string(dt) + " exceeds the stability bound " +
                          std::to_string(limit));

  auto snaps = opt.snapshot_times;
  std::sort(snaps.begin(), snaps.end());
  for (double t : snaps)
    if (t < init.time || t > t_final) throw InvalidArgument("simulate_ensemble: snapshot time outside the run");
  std::vector<double> stops = snaps;
  stops.push_back(t_final);

  // Per-segment step counts chosen so every stop is landed exactly.
  std::vector<std::size_t> seg_steps(stops.size());
  std::vector<double> seg_dt(stops.size());
  double t = init.time;
  for (std::size_t s = 0; s < stops.size(); ++s) {
    const double span = stops[s] - t;
    seg_steps[s] = span > 0.0 ? static_cast<std::size_t>(std::ceil(span / dt * (1.0 - 1e-12))) : 0;
    seg_dt[s] = seg_steps[s] ? span / static_cast<double>(seg_steps[s]) : 0.0;
    t = stops[s];
  }

  SimulateResult res;
  res.state = init;
  res.state.time = t_final;
  std::vector<std::vector<PhasePoint>> snap_points(snaps.size(), std::vector<PhasePoint>(init.size()));
  std::vector<std::vector<std::uint64_t>> snap_pos(snaps.size(), std::vector<std::uint64_t>(init.size()));

  parallel_for(
      init.size(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t k = b; k < e; ++k) {
          StreamRng rng(init.seed, init.streams[k], init.positions[k]);
          std::normal_distribution<double> normal;
          PhasePoint p = init.points[k];
          for (std::size_t s = 0; s < stops.size(); ++s) {
            for (std::size_t n = 0; n < seg_steps[s]; ++n) {
              const double nx = normal(rng);
              const double ny = normal(rng);
              p = step(eff, p, seg_dt[s], nx, ny, opt.method, opt.rotate);
            }
            if (s < snaps.size()) {
              snap_points[s][k] = p;
              snap_pos[s][k] = rng.position();
            }
          }
          if (!std::isfinite(p.a_x) || !std::isfinite(p.a_y))
            throw NumericalError("simulate_ensemble: trajectory " + std::to_string(k) + " diverged");
          res.state.points[k] = p;
          res.state.positions[k] = rng.position();
        }
      },
      opt.threads ? opt.threads : thread_count());

  for (std::size_t s = 0; s < snaps.size(); ++s) {
    EnsembleState st = init;
    st.points = std::move(snap_points[s]);
    st.positions = std::move(snap_pos[s]);
    st.time = snaps[s];
    res.snapshots.push_back(std::move(st));
  }
  return res;
}

/// Tabulated inverse CDF of the radial steady-state density r exp(-H/Theta).
class RadialSampler {
 public:
  explicit RadialSampler(const fp::PotentialSpec& s, std::size_t table = 65536) {
    fp::require_normalizable(s, "sample_steady_state");
    const double r_max = 1.2 * fp::default_extent(s);
    const double a0 = fp::ring_radius(s);
    const double h_min = fp::potential(s, a0);
    r_.resize(table);
    cdf_.resize(table);
    double prev = 0.0;
    for (std::size_t i = 0; i < table; ++i) {
      r_[i] = r_max * static_cast<double>(i) / static_cast<double>(table - 1);
      const double dens = r_[i] * std::exp(-(fp::potential(s, r_[i]) - h_min) / s.theta);
      cdf_[i] = i == 0 ? 0.0 : cdf_[i - 1] + 0.5 * (prev + dens) * (r_[i] - r_[i - 1]);
      prev = dens;
    }
    const double total = cdf_.back();
    if (!(total > 0.0)) throw NumericalError("sample_steady_state: radial density table is empty");
    for (double& c : cdf_) c /= total;
  }

  double operator()(double u) const {
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.begin()) return r_.front();
    if (it == cdf_.end()) return r_.back();
    const auto i = static_cast<std::size_t>(it - cdf_.begin());
    const double span = cdf_[i] - cdf_[i - 1];
    const double t = span > 0.0 ? (u - cdf_[i - 1]) / span : 0.0;
    return r_[i - 1] + t * (r_[i] - r_[i - 1]);
  }

 private:
  std::vector<double> r_;
  std::vector<double> cdf_;
};

/// n independent draws from W = exp(-H/Theta) / Z. Sample k uses stream k
/// of the seed; the returned ensemble continues from those streams.
inline EnsembleState sample_steady_state(const model::EffectiveParams& eff, std::size_t n, std::uint64_t seed) {
  const RadialSampler radial(fp::PotentialSpec::from(eff));
  EnsembleState s = EnsembleState::at_points(std::vector<PhasePoint>(n), seed);
  for (std::size_t k = 0; k < n; ++k) {
    StreamRng rng(seed, derive_seed(seed, 0x535353, k));
    const double r = radial(rng.uniform());
    const double th = 2.0 * std::numbers::pi * rng.uniform();
    s.points[k] = {r * std::cos(th), r * std::sin(th)};
  }
  return s;
}

/// Uniformly sampled detector record x(t_k), t_k = t0 + k / sample_rate.
struct SignalTrace {
  std::vector<double> samples;
  double sample_rate = 0.0;  ///< Hz
  double carrier = 0.0;      ///< rad/s
  double noise_sigma = 0.0;
  double t0 = 0.0;
  std::uint64_t seed = 0;

  double time(std::size_t k) const { return t0 + static_cast<double>(k) / sample_rate; }
  double duration() const {
    return samples.empty() ? 0.0 : static_cast<double>(samples.size() - 1) / sample_rate;
  }

  void validate() const {
    if (!(carrier > 0.0) || !(sample_rate > carrier / std::numbers::pi))
      throw InvalidArgument("SignalTrace: sample rate must exceed twice the carrier frequency");
    for (double v : samples)
      if (!std::isfinite(v)) throw NumericalError("SignalTrace: non-finite sample");
  }
};

/// cos and sin of carrier * (t0 + k / sample_rate), exact at block starts
/// and extended by angle addition inside each block. Indices k < length
/// may be requested.
class CarrierPhasor {
 public:
  static constexpr std::size_t kBlock = 1024;

  CarrierPhasor(double carrier, double sample_rate, double t0, std::size_t length = kBlock)
      : carrier_(carrier), rate_(sample_rate), t0_(t0), cos_(std::min(length, kBlock)),
        sin_(std::min(length, kBlock)) {
    for (std::size_t r = 0; r < cos_.size(); ++r) {
      const double ph = carrier * static_cast<double>(r) / sample_rate;
      cos_[r] = std::cos(ph);
      sin_[r] = std::sin(ph);
    }
  }

  void at(std::size_t k, double& c, double& s) {
    const std::size_t q = k / kBlock, r = k % kBlock;
    if (q != block_) {
      block_ = q;
      const double ph = carrier_ * (t0_ + static_cast<double>(q * kBlock) / rate_);
      bc_ = std::cos(ph);
      bs_ = std::sin(ph);
    }
    c = bc_ * cos_[r] - bs_ * sin_[r];
    s = bs_ * cos_[r] + bc_ * sin_[r];
  }

 private:
  double carrier_, rate_, t0_;
  std::vector<double> cos_, sin_;
  std::size_t block_ = static_cast<std::size_t>(-1);
  double bc_ = 1.0, bs_ = 0.0;
};

/// x(t) = A_x(t) cos(w t) + A_y(t) sin(w t) + n(t), with the amplitude
/// interpolated linearly between trajectory points spaced traj_dt apart
/// (starting at t0) and n ~ N(0, noise_sigma^2) drawn from stream 0 of seed.
inline SignalTrace synthesize_signal(const std::vector<PhasePoint>& traj, double traj_dt, double carrier,
                                     double sample_rate, double noise_sigma, std::uint64_t seed, double t0 = 0.0) {
  if (traj.empty()) throw InvalidArgument("synthesize_signal: empty trajectory");
  if (!(carrier > 0.0) || !(sample_rate > carrier / std::numbers::pi))
    throw InvalidArgument("synthesize_signal: sample rate violates the Nyquist bound for the carrier");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("synthesize_signal: noise_sigma must be non-negative");
  if (traj.size() > 1 && !(traj_dt > 0.0)) throw InvalidArgument("synthesize_signal: traj_dt must be positive");
  SignalTrace tr;
  tr.sample_rate = sample_rate;
  tr.carrier = carrier;
  tr.noise_sigma = noise_sigma;
  tr.t0 = t0;
  tr.seed = seed;
  const double span = traj.size() > 1 ? traj_dt * static_cast<double>(traj.size() - 1) : 0.0;
  const auto count = static_cast<std::size_t>(std::floor(span * sample_rate * (1.0 + 1e-12))) + 1;
  tr.samples.resize(count);
  StreamRng rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  CarrierPhasor phasor(carrier, sample_rate, t0, count);
  for (std::size_t k = 0; k < count; ++k) {
    const double tau = static_cast<double>(k) / sample_rate;
    PhasePoint a = traj.front();
    if (traj.size() > 1) {
      const double u = std::min(tau / traj_dt, static_cast<double>(traj.size() - 1));
      const auto i = std::min(static_cast<std::size_t>(u), traj.size() - 2);
      const double f = u - static_cast<double>(i);
      a = {(1 - f) * traj[i].a_x + f * traj[i + 1].a_x, (1 - f) * traj[i].a_y + f * traj[i + 1].a_y};
    }
    double c = 0.0, sn = 0.0;
    phasor.at(k, c, sn);
    double x = a.a_x * c + a.a_y * sn;
    if (noise_sigma > 0.0) x += noise_sigma * normal(rng);
    tr.samples[k] = x;
  }
  return tr;
}

// Binary layout, little-endian, 64-byte header:
//   0  char[8]  "OMPSDSIG"
//   8  u32      version (1)
//  12  u32      flags (0)
//  16  f64      sample_rate
//  24  f64      carrier
//  32  u64      sample count
//  40  f64      t0
//  48  f64      noise_sigma
//  56  u64      seed
//  64  f64[count]
// A sidecar <path>.json repeats the metadata in readable form.

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& buf, std::size_t off, T v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof(T));
  for (std::size_t b = 0; b < sizeof(T); ++b) buf[off + b] = static_cast<unsigned char>(bits >> (8 * b));
}

template <class T>
T get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  T v;
  std::memcpy(&v, &bits, sizeof(T));
  return v;
}

}  // namespace detail

constexpr std::uint32_t kTraceVersion = 1;

inline std::vector<unsigned char> encode_trace(const SignalTrace& tr) {
  std::vector<unsigned char> buf(64 + 8 * tr.samples.size(), 0);
  std::memcpy(buf.data(), "OMPSDSIG", 8);
  detail::put_le<std::uint32_t>(buf, 8, kTraceVersion);
  detail::put_le<std::uint32_t>(buf, 12, 0);
  detail::put_le<double>(buf, 16, tr.sample_rate);
  detail::put_le<double>(buf, 24, tr.carrier);
  detail::put_le<std::uint64_t>(buf, 32, tr.samples.size());
  detail::put_le<double>(buf, 40, tr.t0);
  detail::put_le<double>(buf, 48, tr.noise_sigma);
  detail::put_le<std::uint64_t>(buf, 56, tr.seed);
  for (std::size_t k = 0; k < tr.samples.size(); ++k) detail::put_le<double>(buf, 64 + 8 * k, tr.samples[k]);
  return buf;
}

inline SignalTrace decode_trace(const std::vector<unsigned char>& buf, const std::string& name = "<trace>") {
  if (buf.size() < 64 || std::memcmp(buf.data(), "OMPSDSIG", 8) != 0)
    throw ConfigError(name + ": not a signal trace (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(buf.data() + 8);
  if (version != kTraceVersion) throw ConfigError(name + ": unsupported trace version " + std::to_string(version));
  SignalTrace tr;
  tr.sample_rate = detail::get_le<double>(buf.data() + 16);
  tr.carrier = detail::get_le<double>(buf.data() + 24);
  const auto count = detail::get_le<std::uint64_t>(buf.data() + 32);
  tr.t0 = detail::get_le<double>(buf.data() + 40);
  tr.noise_sigma = detail::get_le<double>(buf.data() + 48);
  tr.seed = detail::get_le<std::uint64_t>(buf.data() + 56);
  if (buf.size() != 64 + 8 * count) throw ConfigError(name + ": sample count does not match file size");
  tr.samples.resize(count);
  for (std::size_t k = 0; k < count; ++k) tr.samples[k] = detail::get_le<double>(buf.data() + 64 + 8 * k);
  return tr;
}

inline nlohmann::json trace_metadata(const SignalTrace& tr) {
  return {{"format", "OMPSDSIG"},   {"version", kTraceVersion}, {"sample_rate_hz", tr.sample_rate},
          {"carrier_rad_s", tr.carrier}, {"count", tr.samples.size()}, {"t0_s", tr.t0},
          {"noise_sigma", tr.noise_sigma}, {"seed", tr.seed}};
}

inline void write_trace(const std::string& path, const SignalTrace& tr) {
  const auto buf = encode_trace(tr);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write trace file '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  std::ofstream side(path + ".json");
  if (!side) throw ConfigError("cannot write trace sidecar '" + path + ".json'");
  side << trace_metadata(tr).dump(2) << '\n';
}

inline SignalTrace read_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open trace file '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_trace(buf, path);
}

}  // namespace ompsd::langevin
