#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "ompsd/experiments.hpp"

using namespace ompsd;
using namespace ompsd::experiments;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ompsd_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ompsd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, double> csv_map(const std::string& text) {
  std::map<std::string, double> m;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto c = line.find(',');
    m[line.substr(0, c)] = std::stod(line.substr(c + 1));
  }
  return m;
}

std::set<std::string> csv_names(const fs::path& dir) {
  std::set<std::string> s;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") s.insert(e.path().filename().string());
  return s;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

Json small_switch() {
  return Json::parse(R"({"switch": {"n_trajectories": 10000, "n_snapshots": 3, "t_max_norm": 0.3,
                                     "compare_cells": 16,
                                     "route_tolerance": 0.25}})");
}

}  // namespace

TEST(Config, UnknownTopLevelKeyIsNamed) {
  EXPECT_NE(message_of([] { resolve_config(Json{{"sede", 3}}); }).find("'sede'"), std::string::npos);
}

TEST(Config, UnknownNestedKeyIsNamed) {
  const auto msg = message_of([] { resolve_config(Json{{"switch", {{"n_trajectory", 10}}}}); });
  EXPECT_NE(msg.find("'switch.n_trajectory'"), std::string::npos) << msg;
}

TEST(Config, TypeMismatchNamesKey) {
  EXPECT_NE(message_of([] { resolve_config(Json{{"device", {{"f_m_hz", "fast"}}}}); }).find("'device.f_m_hz'"),
            std::string::npos);
  EXPECT_NE(message_of([] { resolve_config(Json{{"switch", {{"n_trajectories", 1.5}}}}); })
                .find("'switch.n_trajectories'"),
            std::string::npos);
  EXPECT_NE(message_of([] { resolve_config(Json{{"seed", -1}}); }).find("'seed'"), std::string::npos);
  EXPECT_NE(message_of([] { resolve_config(Json{{"switch", 3}}); }).find("'switch'"), std::string::npos);
}

TEST(Config, IntegersAcceptedForFloats) {
  const auto cfg = resolve_config(Json{{"dwell", {{"d", 1}}}});
  EXPECT_DOUBLE_EQ(cfg["dwell"]["d"].get<double>(), 1.0);
}

TEST(Config, OptionalNumbersAcceptNullAndValues) {
  EXPECT_TRUE(resolve_config(Json::object())["calibration"]["a_p"].is_null());
  EXPECT_DOUBLE_EQ(resolve_config(Json{{"calibration", {{"a_p", 2.0e5}}}})["calibration"]["a_p"].get<double>(), 2.0e5);
}

TEST(Config, ScenarioMustMatchCommand) {
  EXPECT_NE(message_of([] { resolve_config(Json{{"scenario", "dwell"}}, "switch"); }).find("'scenario'"),
            std::string::npos);
  EXPECT_EQ(resolve_config(Json::object(), "switch")["scenario"], "switch");
}

TEST(Config, DefaultsAreMaterialized) {
  const auto cfg = resolve_config(Json{{"seed", 9}});
  EXPECT_EQ(cfg["seed"].get<std::uint64_t>(), 9u);
  EXPECT_EQ(cfg["switch"]["n_snapshots"].get<std::size_t>(), 12u);
  EXPECT_EQ(cfg["dwell"]["dwell_times_norm"].size(), 4u);
}

TEST(Config, FileErrorsNameThePath) {
  const auto dir = scratch("cfgfile");
  fs::create_directories(dir);
  dump(dir / "bad.json", "{ \"seed\": ");
  EXPECT_NE(message_of([&] { load_config_file((dir / "bad.json").string()); }).find("bad.json"), std::string::npos);
  EXPECT_NE(message_of([&] { load_config_file((dir / "none.json").string()); }).find("none.json"),
            std::string::npos);
}

TEST(Cli, ParamsWithoutPhotonsEchoesBareResonator) {
  const auto r = run_cli({"params", "--d", "0.7", "--photons", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = csv_map(r.out);
  EXPECT_DOUBLE_EQ(m.at("gamma0"), m.at("gamma_m"));
  EXPECT_DOUBLE_EQ(m.at("gamma_m"), 2.5);
  EXPECT_EQ(m.at("omega0"), 0.0);
  EXPECT_EQ(m.at("seo_amplitude"), 0.0);
  EXPECT_EQ(r.out.find("-0,"), std::string::npos);
}

TEST(Cli, ParamsWithPhotonsHeatsOnBlueSide) {
  const auto r = run_cli({"params", "--d", "0.7", "--photons", "2e5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = csv_map(r.out);
  EXPECT_LT(m.at("gamma_ba"), 0.0);
  EXPECT_DOUBLE_EQ(m.at("gamma0"), m.at("gamma_m") + m.at("gamma_ba"));
}

TEST(Cli, MissingConfigFileExitsTwoWithPath) {
  const auto r = run_cli({"switch", "--config", "/nonexistent/cfg.json"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/cfg.json"), std::string::npos) << r.err;
}

TEST(Cli, BinaryReportsMissingConfig) {
  const auto dir = scratch("binary");
  fs::create_directories(dir);
  const std::string cmd = std::string(OMPSD_CLI_PATH) + " switch --config /nonexistent/cfg.json 2> " +
                          (dir / "err.txt").string();
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  EXPECT_NE(slurp(dir / "err.txt").find("/nonexistent/cfg.json"), std::string::npos);
}

TEST(Cli, UnsupportedFormatIsAConfigError) {
  EXPECT_EQ(run_cli({"params", "--format", "hdf5"}).code, 2);
}

TEST(Cli, UnknownCommandIsAConfigError) {
  EXPECT_EQ(run_cli({"sweep"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
}

TEST(Cli, InvalidConfigValueNamesKey) {
  const auto dir = scratch("badvalue");
  fs::create_directories(dir);
  dump(dir / "cfg.json", R"({"fp_evolve": {"cells": 4}})");
  const auto r = run_cli({"fp-evolve", "--config", (dir / "cfg.json").string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fp_evolve.cells"), std::string::npos) << r.err;
  EXPECT_NE(slurp(dir / "out" / "manifest.txt").find("status: failed"), std::string::npos);
}

TEST(Manifest, ListsEveryOutputWithChecksum) {
  const auto dir = scratch("manifest");
  fs::create_directories(dir);
  dump(dir / "cfg.json", R"({"fp_evolve": {"cells": 32, "t_final_norm": 1.0, "n_snapshots": 2}})");
  const auto r = run_cli({"fp-evolve", "--config", (dir / "cfg.json").string(), "--out", (dir / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(dir / "a" / "manifest.txt"));
  std::string line;
  bool outputs = false, complete = false;
  std::set<std::string> listed;
  while (std::getline(in, line)) {
    if (line == "status: complete") complete = true;
    if (line == "outputs:") {
      outputs = true;
      continue;
    }
    if (!outputs) continue;
    std::istringstream ls(line);
    std::string crc, name;
    std::size_t bytes = 0;
    ls >> crc >> bytes >> name;
    const auto data = slurp(dir / "a" / name);
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08lx",
                  crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
    EXPECT_EQ(crc, hex) << name;
    EXPECT_EQ(bytes, data.size()) << name;
    listed.insert(name);
  }
  EXPECT_TRUE(complete);
  for (const auto& e : fs::directory_iterator(dir / "a"))
    if (e.path().filename() != "manifest.txt") EXPECT_TRUE(listed.count(e.path().filename().string())) << e.path();
  EXPECT_TRUE(listed.count("resolved_config.json"));

  const auto again = run_cli({"fp-evolve", "--config", (dir / "a" / "resolved_config.json").string(), "--out",
                              (dir / "b").string()});
  ASSERT_EQ(again.code, 0) << again.err;
  for (const auto& n : csv_names(dir / "a")) EXPECT_EQ(slurp(dir / "a" / n), slurp(dir / "b" / n)) << n;
}

TEST(Crc, MatchesKnownValue) {
  EXPECT_EQ(crc32_hex("123456789"), "cbf43926");
  EXPECT_EQ(crc32_hex(""), "00000000");
}

TEST(FpEvolve, ApproachesSteadyState) {
  const auto dir = scratch("fpevolve");
  Json user = Json::parse(R"({"fp_evolve": {"cells": 48, "t_final_norm": 4.0, "n_snapshots": 3,
                                            "gamma0_norm": 2.0, "initial_var_norm": 1.5}})");
  const auto cfg = resolve_config(user, "fp_evolve");
  RunOutput out(dir, "fp-evolve", cfg);
  const auto r = run_fp_evolve(cfg, out);
  ASSERT_EQ(r.l1.size(), 4u);
  for (std::size_t k = 1; k < r.l1.size(); ++k) EXPECT_LT(r.l1[k], r.l1[k - 1]);
  EXPECT_LT(r.l1.back(), 1e-2);
  for (const char* f : {"psd_fp_evolve.csv", "psd_fp_steady.csv", "fp_evolve_l1.csv", "fp_diagnostics.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(FpEvolve, UnboundedPotentialRejected) {
  const auto dir = scratch("fpunbounded");
  fs::create_directories(dir);
  dump(dir / "cfg.json", R"({"fp_evolve": {"gamma0_norm": -1.0, "gamma2_norm": 0.0}})");
  const auto r = run_cli({"fp-evolve", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fp_evolve.gamma0_norm"), std::string::npos);
}

TEST(Switch, SmallRunIsDeterministicAndSeedSensitive) {
  const auto dir = scratch("switch");
  fs::create_directories(dir);
  dump(dir / "cfg.json", small_switch().dump());
  const std::string cfg = (dir / "cfg.json").string();
  ASSERT_EQ(run_cli({"switch", "--config", cfg, "--seed", "4", "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run_cli({"switch", "--config", cfg, "--seed", "4", "--out", (dir / "b").string()}).code, 0);
  ASSERT_EQ(run_cli({"switch", "--config", cfg, "--seed", "5", "--out", (dir / "c").string()}).code, 0);
  const auto names = csv_names(dir / "a");
  EXPECT_TRUE(names.count("switch_matrix.csv"));
  EXPECT_TRUE(names.count("switch_width.csv"));
  EXPECT_TRUE(names.count("switch_routes.csv"));
  EXPECT_EQ(names, csv_names(dir / "b"));
  for (const auto& n : names) EXPECT_EQ(slurp(dir / "a" / n), slurp(dir / "b" / n)) << n;
  EXPECT_NE(slurp(dir / "a" / "psd_switch_00_tomo.csv"), slurp(dir / "c" / "psd_switch_00_tomo.csv"));
  EXPECT_EQ(slurp(dir / "a" / "psd_switch_00_radial.csv"), slurp(dir / "c" / "psd_switch_00_radial.csv"));
}

TEST(Switch, InitialStateIsCooledGaussian) {
  const auto dir = scratch("switch_init");
  const auto cfg = resolve_config(small_switch(), "switch");
  RunOutput out(dir, "switch", cfg);
  const auto r = run_switch(cfg, out);
  EXPECT_LT(r.w0, 1.0);
  EXPECT_GT(r.gamma_ba, 0.0);
  EXPECT_NEAR(r.w0, std::sqrt(2.0 * 1.25 / (r.gamma_ba + 2.5)), 1e-12);
  EXPECT_NEAR(fp::core_width(r.initial), r.w0, 1e-2 * r.w0);
  for (const auto& sn : r.snapshots) {
    if (sn.linear_regime) EXPECT_NEAR(sn.width_radial / sn.width_oracle, 1.0, 0.02) << sn.t;
    EXPECT_LE(sn.l1_radial_fp2d, 0.1);
  }
  EXPECT_LT(r.late_l1, 1e-2);
}

TEST(Sweep, NoDriveGivesThermalWidthEverywhere) {
  const auto dir = scratch("sweep_thermal");
  const auto cfg = resolve_config(Json::parse(R"({"calibration": {"a_p": 0.0},
      "steady_sweep": {"d_min": 0.3, "d_max": 1.2, "d_step": 0.3, "n_windows": 3000}})"),
                                  "steady_sweep");
  RunOutput out(dir, "steady-sweep", cfg);
  const auto r = run_steady_sweep(cfg, out);
  ASSERT_EQ(r.points.size(), 4u);
  for (const auto& p : r.points) {
    EXPECT_EQ(p.ring_radius, 0.0);
    const double trapz = [&] {
      double m2 = 0.0, m0 = 0.0;
      for (std::size_t k = 0; k < p.analytic.grid.n; ++k) {
        const double rr = p.analytic.grid.r(k);
        m0 += p.analytic.values[k] * rr;
        m2 += p.analytic.values[k] * rr * rr * rr;
      }
      return std::sqrt(m2 / m0);
    }();
    EXPECT_NEAR(trapz, 1.0, 1e-3) << p.d;
  }
  for (const char* f : {"sweep_matrix.csv", "sweep_matrix_tomo.csv", "sweep_summary.csv", "thresholds.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(Sweep, DirectionDoesNotChangeResults) {
  auto run = [](const char* dir_name, const char* direction) {
    const auto dir = scratch(dir_name);
    Json user = Json::parse(R"({"steady_sweep": {"d_min": 0.4, "d_max": 1.1, "d_step": 0.1, "n_windows": 2000}})");
    user["steady_sweep"]["direction"] = direction;
    const auto cfg = resolve_config(user, "steady_sweep");
    RunOutput out(dir, "steady-sweep", cfg);
    return run_steady_sweep(cfg, out);
  };
  const auto up = run("sweep_up", "up");
  const auto down = run("sweep_down", "down");
  ASSERT_EQ(up.points.size(), down.points.size());
  for (std::size_t k = 0; k < up.points.size(); ++k) {
    const auto& a = up.points[k];
    const auto& b = down.points[up.points.size() - 1 - k];
    EXPECT_EQ(a.d, b.d);
    EXPECT_EQ(a.analytic.values, b.analytic.values);
    EXPECT_EQ(a.tomo.values, b.tomo.values);
  }
}

TEST(Dwell, StableDetuningIsAConfigError) {
  const auto dir = scratch("dwell_stable");
  fs::create_directories(dir);
  dump(dir / "cfg.json", R"({"dwell": {"d": 0.3}})");
  const auto r = run_cli({"dwell", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("dwell.d"), std::string::npos) << r.err;
}

TEST(Dwell, TooFewSurvivorsIsANumericalFailure) {
  const auto dir = scratch("dwell_few");
  fs::create_directories(dir);
  dump(dir / "cfg.json", R"({"dwell": {"n_trajectories": 100, "phase_tolerance": 0.01, "dwell_times_norm": [0.12]}})");
  const auto r = run_cli({"dwell", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Tomo, ReconstructsRecordedTrace) {
  const auto dir = scratch("tomo");
  fs::create_directories(dir);
  const auto cfg = resolve_config(Json::object());
  const auto s = make_setup(cfg);
  const auto eff = model::effective_from_rates(2.5, -2.5, 0.025);
  const auto pts = langevin::sample_steady_state(eff, 2000, 3).points;
  const double carrier = 2.0 * std::numbers::pi * 662700.0;
  const double window = 20.0 * 2.0 * std::numbers::pi / carrier;
  const auto tr = langevin::synthesize_signal(pts, window, carrier, 5301600.0, 0.0, 8);
  langevin::write_trace((dir / "trace.bin").string(), tr);
  const auto r = run_cli({"tomo", "--trace", (dir / "trace.bin").string(), "--out", (dir / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"psd_tomo.csv", "psd_tomo_direct.csv", "sinogram.csv", "tomo_summary.csv"})
    EXPECT_TRUE(fs::exists(dir / "o" / f)) << f;
  const auto summary = slurp(dir / "o" / "tomo_summary.csv");
  const auto row = summary.substr(summary.find('\n') + 1);
  EXPECT_GE(std::stoul(row.substr(0, row.find(','))), 1900u);
  (void)s;

  dump(dir / "strict.json", R"({"tomography": {"max_clipped": 0.0}})");
  const auto strict = run_cli({"tomo", "--config", (dir / "strict.json").string(), "--trace",
                               (dir / "trace.bin").string(), "--out", (dir / "p").string()});
  EXPECT_EQ(strict.code, 3) << strict.err;
}

TEST(Tomo, MissingTraceNamesFile) {
  const auto dir = scratch("tomo_missing");
  const auto r = run_cli({"tomo", "--trace", "/nonexistent/trace.bin", "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/trace.bin"), std::string::npos);
}

TEST(Configs, ShippedExamplesResolve) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(OMPSD_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    const auto user = load_config_file(e.path().string());
    ASSERT_TRUE(user.contains("scenario")) << e.path();
    EXPECT_NO_THROW(make_setup(resolve_config(user, user["scenario"].get<std::string>()))) << e.path();
    ++n;
  }
  EXPECT_GE(n, 6u);
}
