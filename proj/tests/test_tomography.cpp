#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ompsd/fokker_planck.hpp"
#include "ompsd/langevin.hpp"
#include "ompsd/tomography.hpp"

using namespace ompsd;
using namespace ompsd::tomo;
using langevin::PhasePoint;
using langevin::synthesize_signal;
using model::effective_from_rates;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kCarrier = 2 * kPi * 662.7e3;
constexpr double kRate = 8 * 662.7e3;
constexpr double kWindow = 200 / 662.7e3;

std::vector<QuadratureSample> from_points(const std::vector<PhasePoint>& pts) {
  std::vector<QuadratureSample> out;
  for (const auto& p : pts) out.push_back({p.a_x, p.a_y, 0.0});
  return out;
}

std::vector<QuadratureSample> gaussian_samples(std::size_t n, double sigma, double cx, double cy,
                                               std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nx(cx, sigma), ny(cy, sigma);
  std::vector<QuadratureSample> out(n);
  for (auto& q : out) q = {nx(gen), ny(gen), 0.0};
  return out;
}

// Bin averages of the projection of an isotropic Gaussian, known in closed form.
Sinogram gaussian_sinogram(std::size_t k, std::size_t m, double range, double sigma) {
  Sinogram s{k, m, range, std::vector<double>(k * m)};
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      const double lo = s.bin_center(b) - 0.5 * s.bin_width(), hi = lo + s.bin_width();
      s.at(a, b) = 0.5 * (std::erf(hi / (sigma * std::sqrt(2.0))) - std::erf(lo / (sigma * std::sqrt(2.0)))) /
                   s.bin_width();
    }
  return s;
}

double mean_x(const PsdField2d& f) {
  double acc = 0;
  for (std::size_t j = 0; j < f.grid.ny; ++j)
    for (std::size_t i = 0; i < f.grid.nx; ++i) acc += f.grid.x(i) * f.values[f.grid.index(i, j)];
  return acc * f.grid.cell_area();
}

double mean_y(const PsdField2d& f) {
  double acc = 0;
  for (std::size_t j = 0; j < f.grid.ny; ++j)
    for (std::size_t i = 0; i < f.grid.nx; ++i) acc += f.grid.y(j) * f.values[f.grid.index(i, j)];
  return acc * f.grid.cell_area();
}

}  // namespace

TEST(Demodulate, PureCosineAndSine) {
  const auto c = synthesize_signal({{1, 0}, {1, 0}}, kWindow, kCarrier, kRate, 0.0, 1);
  const auto s = synthesize_signal({{0, 1}, {0, 1}}, kWindow, kCarrier, kRate, 0.0, 1);
  const auto qc = demodulate(c, kWindow);
  const auto qs = demodulate(s, kWindow);
  ASSERT_EQ(qc.size(), 1u);
  EXPECT_NEAR(qc[0].a_x, 1.0, 1e-3);
  EXPECT_NEAR(qc[0].a_y, 0.0, 1e-3);
  EXPECT_NEAR(qs[0].a_x, 0.0, 1e-3);
  EXPECT_NEAR(qs[0].a_y, 1.0, 1e-3);
}

TEST(Demodulate, RoundTripOfConstantAmplitude) {
  const auto tr = synthesize_signal({{0.6, -0.8}, {0.6, -0.8}}, 10 * kWindow, kCarrier, kRate, 0.0, 1, 1.234e-3);
  const auto q = demodulate(tr, kWindow);
  ASSERT_EQ(q.size(), 10u);
  for (const auto& s : q) {
    EXPECT_NEAR(s.a_x, 0.6, 1e-3);
    EXPECT_NEAR(s.a_y, -0.8, 1e-3);
  }
  EXPECT_NEAR(q[0].window_center, 1.234e-3 + 0.5 * kWindow, 1e-9);
}

TEST(Demodulate, IsLinear) {
  const auto a = synthesize_signal({{0.3, 1.1}, {-0.4, 0.2}}, 3 * kWindow, kCarrier, kRate, 0.2, 5);
  const auto b = synthesize_signal({{2.0, -1.0}, {0.5, 0.5}}, 3 * kWindow, kCarrier, kRate, 0.4, 6);
  auto mix = a;
  for (std::size_t k = 0; k < mix.samples.size(); ++k) mix.samples[k] = 2.5 * a.samples[k] - 0.75 * b.samples[k];
  const auto qa = demodulate(a, kWindow), qb = demodulate(b, kWindow), qm = demodulate(mix, kWindow);
  ASSERT_EQ(qm.size(), qa.size());
  for (std::size_t k = 0; k < qm.size(); ++k) {
    EXPECT_NEAR(qm[k].a_x, 2.5 * qa[k].a_x - 0.75 * qb[k].a_x, 1e-12);
    EXPECT_NEAR(qm[k].a_y, 2.5 * qa[k].a_y - 0.75 * qb[k].a_y, 1e-12);
  }
}

TEST(Demodulate, RejectsWindowsOutsideScaleSeparation) {
  const auto tr = synthesize_signal({{1, 0}, {1, 0}}, kWindow, kCarrier, kRate, 0.0, 1);
  EXPECT_THROW(demodulate(tr, 5 / 662.7e3), InvalidArgument);
  EXPECT_THROW(demodulate(tr, kWindow, 100.0), InvalidArgument);
  EXPECT_NO_THROW(demodulate(tr, kWindow, 2.5));
}

TEST(DirectPsd, IdenticalSamplesFillOneCell) {
  const std::vector<QuadratureSample> same(50, QuadratureSample{0.3, -0.2, 0.0});
  const auto f = direct_psd(same, CartesianGrid::square(16, 2.0));
  int occupied = 0;
  for (double v : f.values) occupied += v > 0;
  EXPECT_EQ(occupied, 1);
  EXPECT_NEAR(f.mass(), 1.0, 1e-12);
}

TEST(DirectPsd, RejectsEmptyInput) {
  EXPECT_THROW(direct_psd({}, CartesianGrid::square(16, 2.0)), InvalidArgument);
}

TEST(DirectPsd, MatchesAnalyticSteadyState) {
  const auto e = effective_from_rates(1.0, -1.0, 0.01);
  const auto samples = from_points(langevin::sample_steady_state(e, 100000, 4).points);
  const auto grid = CartesianGrid::square(64, 1.8 * model::seo_amplitude(e));
  const auto w = fp::steady_state(fp::PotentialSpec::from(e), grid);
  EXPECT_LE(compare_psd(w, direct_psd(samples, grid)).l1, 0.08);
}

TEST(Sinogram, SymmetricSamplesGiveEqualRows) {
  const auto samples = gaussian_samples(200000, 1.0, 0, 0, 3);
  const auto s = sinogram(samples, 16, 64, 5.0);
  for (std::size_t k = 1; k < 16; ++k) {
    double diff = 0;
    for (std::size_t m = 0; m < 64; ++m) diff += std::abs(s.at(k, m) - s.at(0, m)) * s.bin_width();
    EXPECT_LT(diff, 0.03) << "angle " << k;
  }
}

TEST(Sinogram, PointMassPeaksAtProjection) {
  const std::vector<QuadratureSample> pt(10, QuadratureSample{1.0, 0.0, 0.0});
  const auto s = sinogram(pt, 32, 128, 2.0);
  for (std::size_t k = 0; k < 32; ++k) {
    const auto row = s.density.begin() + static_cast<long>(k * 128);
    const auto peak = static_cast<std::size_t>(std::max_element(row, row + 128) - row);
    const double c = std::cos(s.angle(k));
    EXPECT_LE(std::abs(s.bin_center(peak) - c), 0.5 * s.bin_width() + 1e-12);
    double mass = 0;
    for (std::size_t m = 0; m < 128; ++m) mass += s.at(k, m) * s.bin_width();
    EXPECT_NEAR(mass, 1.0, 1e-12);
  }
}

TEST(Sinogram, GaussianProjectionVariance) {
  const auto samples = gaussian_samples(100000, 0.7, 0, 0, 8);
  const auto s = sinogram(samples, 16, 128, 5.0);
  for (std::size_t k = 0; k < 16; ++k) {
    double var = 0;
    for (std::size_t m = 0; m < 128; ++m) var += s.at(k, m) * s.bin_width() * s.bin_center(m) * s.bin_center(m);
    EXPECT_NEAR(var, 0.49 + s.bin_width() * s.bin_width() / 12, 0.02);
  }
}

TEST(Sinogram, EnforcesMinimumShape) {
  const auto samples = gaussian_samples(100, 1.0, 0, 0, 1);
  EXPECT_THROW(sinogram(samples, 8, 128, 3.0), InvalidArgument);
  EXPECT_THROW(sinogram(samples, 32, 32, 3.0), InvalidArgument);
}

TEST(InverseRadon, AnalyticGaussianSecondMoment) {
  const double sigma = 1.0;
  const auto s = gaussian_sinogram(128, 128, 6.0, sigma);
  const auto r = inverse_radon(s, CartesianGrid::square(64, 5.0));
  EXPECT_NEAR(fp::moments(r.field).mean_r2 / (2 * sigma * sigma), 1.0, 0.05);
  EXPECT_NEAR(r.field.mass(), 1.0, 1e-12);
  EXPECT_LT(r.clipped_fraction, 0.1);
}

TEST(InverseRadon, ThinRingRadiusWithinOneCell) {
  const fp::PotentialSpec ring{-1.0, 0.01, 0.1};
  const auto fine = fp::steady_state(ring, CartesianGrid::square(256, 16.0));
  const auto s = project_field(fine, 64, 128, 16.0);
  const auto grid = CartesianGrid::square(64, 16.0);
  const auto r = inverse_radon(s, grid);
  const auto radial = angular_average(r.field, RadialGrid{400, 0.04});
  EXPECT_NEAR(fp::profile_mode(radial), 10.0, grid.dx());
}

TEST(InverseRadon, AgreesWithDirectHistogram) {
  const auto e = effective_from_rates(1.0, -1.0, 0.01);
  const auto samples = from_points(langevin::sample_steady_state(e, 100000, 9).points);
  const double ext = 1.8 * model::seo_amplitude(e);
  const auto grid = CartesianGrid::square(64, ext);
  const auto rec = inverse_radon(sinogram(samples, 128, 128, ext), grid);
  EXPECT_LE(compare_psd(direct_psd(samples, grid), rec.field).l1, 0.1);
}

TEST(InverseRadon, RotationEquivariance) {
  const auto samples = gaussian_samples(50000, 0.8, 2.0, 0.5, 12);
  const double alpha = 0.7;
  std::vector<QuadratureSample> rotated;
  for (const auto& q : samples)
    rotated.push_back({q.a_x * std::cos(alpha) - q.a_y * std::sin(alpha),
                       q.a_x * std::sin(alpha) + q.a_y * std::cos(alpha), 0.0});
  const auto grid = CartesianGrid::square(64, 5.0);
  const auto a = inverse_radon(sinogram(samples, 64, 128, 5.0), grid).field;
  const auto b = inverse_radon(sinogram(rotated, 64, 128, 5.0), grid).field;
  const double ax = mean_x(a), ay = mean_y(a);
  EXPECT_NEAR(mean_x(b), ax * std::cos(alpha) - ay * std::sin(alpha), 0.03);
  EXPECT_NEAR(mean_y(b), ax * std::sin(alpha) + ay * std::cos(alpha), 0.03);
  EXPECT_NEAR(fp::moments(a).mean_r2, fp::moments(b).mean_r2, 0.05);
}

TEST(InverseRadon, RejectsGarbageReconstruction) {
  Sinogram s{16, 64, 1.0, std::vector<double>(16 * 64, 0.0)};
  for (std::size_t k = 0; k < 16; ++k) s.at(k, (k * 7) % 64) = 32.0;
  EXPECT_THROW(inverse_radon(s, CartesianGrid::square(32, 1.0)), NumericalError);
}

TEST(ComparePsd, IdenticalAndDisjoint) {
  const auto g = CartesianGrid::square(8, 1.0);
  PsdField2d a(g), b(g);
  a.values[0] = 1.0 / g.cell_area();
  b.values[63] = 1.0 / g.cell_area();
  EXPECT_EQ(compare_psd(a, a).l1, 0.0);
  EXPECT_NEAR(compare_psd(a, b).l1, 2.0, 1e-12);
}

TEST(ComparePsd, ShiftedGaussianMatchesQuadrature) {
  // L1 of N(0,1) against N(1,1) in one dimension, by trapezoid rule.
  double oracle = 0;
  const double h = 1e-4;
  for (double x = -12; x <= 12; x += h) {
    const double p = std::exp(-0.5 * x * x) / std::sqrt(2 * kPi);
    const double q = std::exp(-0.5 * (x - 1) * (x - 1)) / std::sqrt(2 * kPi);
    oracle += std::abs(p - q) * h;
  }
  const auto g = CartesianGrid::square(400, 8.0);
  const auto a = fp::gaussian_field(g, 1.0), b = fp::gaussian_field(g, 1.0, 1.0, 0.0);
  EXPECT_NEAR(compare_psd(a, b).l1, oracle, 2e-3);
}

TEST(ComparePsd, ResamplesMismatchedGrids) {
  const auto a = fp::gaussian_field(CartesianGrid::square(64, 5.0), 1.0);
  const auto b = fp::gaussian_field(CartesianGrid::square(100, 6.0), 1.0);
  EXPECT_LT(compare_psd(a, b).l1, 0.02);
}

TEST(Allowance, BoundsHistogramNoise) {
  const auto grid = CartesianGrid::square(64, 4.0);
  const auto parent = fp::gaussian_field(grid, 1.0);
  const auto samples = gaussian_samples(10000, 1.0, 0, 0, 31);
  const double l1 = compare_psd(parent, direct_psd(samples, grid)).l1;
  const double allow = histogram_l1_allowance(parent, 10000);
  EXPECT_LE(l1, allow);
  EXPECT_GE(l1, allow - 2 * 3.0 / std::sqrt(1e4));
}

TEST(Conditioning, ZeroDwellConcentratesAtCell) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  std::vector<WindowPair> pairs;
  for (int k = 0; k < 20000; ++k) {
    const double th = ang(gen);
    const QuadratureSample q{10 * std::cos(th), 10 * std::sin(th), 0.0};
    pairs.push_back({q, q});
  }
  const Condition c{0.0, 10.0, kPi / 16, 1.0};
  const auto f = conditioned_psd(pairs, c, CartesianGrid::square(64, 18.0));
  const auto m = fp::moments(f);
  EXPECT_LT(m.angular_entropy, std::log(2 * kPi / 8));
  EXPECT_GT(mean_x(f), 9.5);
}

TEST(Conditioning, TooFewSurvivorsIsAnError) {
  std::vector<WindowPair> pairs(50, WindowPair{{10, 0, 0}, {10, 0, 0}});
  EXPECT_THROW(conditioned_psd(pairs, Condition{0.0, 10.0, kPi / 16, 1.0}, CartesianGrid::square(8, 12.0)),
               NumericalError);
}

TEST(SinogramCsv, Layout) {
  const auto s = gaussian_sinogram(16, 64, 3.0, 1.0);
  const auto csv = to_csv(s);
  EXPECT_EQ(csv.rfind("angle,bin_center,density\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16 * 64 + 1);
}

TEST(RingWidth, GaussianRingHalfMaximum) {
  const auto grid = CartesianGrid::square(256, 10.0);
  PsdField2d f(grid);
  const double radius = 5.0, sd = 0.5;
  for (std::size_t j = 0; j < grid.ny; ++j)
    for (std::size_t i = 0; i < grid.nx; ++i) {
      const double r = std::hypot(grid.x(i), grid.y(j));
      f.values[grid.index(i, j)] = std::exp(-0.5 * (r - radius) * (r - radius) / (sd * sd));
    }
  EXPECT_NEAR(ring_width(f), 2.0 * std::sqrt(2.0 * std::log(2.0)) * sd, 0.02);
}

TEST(RingWidth, CentralPeakMeasuredFromOrigin) {
  const auto grid = CartesianGrid::square(256, 10.0);
  const auto f = fp::gaussian_field(grid, 2.0);
  EXPECT_NEAR(ring_width(f), std::sqrt(2.0 * std::log(2.0) * 2.0), 0.03);
}
