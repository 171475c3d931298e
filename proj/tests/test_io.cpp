#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "sqfb/io.hpp"

using namespace sqfb;
using Catch::Approx;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sqfb_test_io_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("numbers survive a text round trip bit for bit") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> expo(-300, 300);
  for (int i = 0; i < 10000; ++i) {
    const double v = std::ldexp(mant(rng), expo(rng));
    REQUIRE(parse_number(format_number(v)) == v);
  }
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(1e-30) == "1e-30");
  CHECK(parse_number(" 2.5\r") == 2.5);
  CHECK_THROWS_AS(parse_number("2.5x"), IoError);
  CHECK_THROWS_AS(parse_number(""), IoError);
}

TEST_CASE("enum names") {
  CHECK(spectrum_source_from(to_string(SpectrumSource::in_loop_y)) == SpectrumSource::in_loop_y);
  CHECK(spectrum_source_from(to_string(SpectrumSource::true_x)) == SpectrumSource::true_x);
  CHECK_THROWS_AS(spectrum_source_from("x"), IoError);
  CHECK(std::string(to_string(FeedbackMode::realistic_chain)) == "realistic_chain");
}

TEST_CASE("csv reader") {
  std::istringstream in("# sqfb test v1\n# a=1\n# b = two=2\nx,y\n1,2\n\n3,4\r\n");
  const auto t = read_csv(in);
  CHECK(t.meta.at("a") == "1");
  CHECK(t.meta.at("b ") == " two=2");
  REQUIRE(t.header == std::vector<std::string>{"x", "y"});
  CHECK(t.numbers("y") == std::vector<double>{2.0, 4.0});
  CHECK_THROWS_WITH(t.column("z"), Catch::Matchers::ContainsSubstring("missing column"));
  CHECK(t.text("x") == std::vector<std::string>{"1", "3"});

  std::istringstream labelled("label,v\nfoo,1.5\n");
  const auto l = read_csv(labelled);
  CHECK(l.text("label").front() == "foo");
  CHECK(l.numbers("v").front() == 1.5);
  CHECK_THROWS_WITH(l.numbers("label"), Catch::Matchers::ContainsSubstring("not a number"));

  std::istringstream ragged("x,y\n1\n");
  CHECK_THROWS_WITH(read_csv(ragged), Catch::Matchers::ContainsSubstring("expected 2"));
  std::istringstream empty("# only=meta\n");
  CHECK_THROWS_AS(read_csv(empty), IoError);
  CHECK_THROWS_AS(read_csv(std::filesystem::path("/nonexistent/file.csv")), IoError);
}

TEST_CASE("trajectory round trip") {
  Trajectory tr;
  tr.config.mode = MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0);
  tr.config.probe.n_c = 5.1e4;
  tr.config.probe.kappa = hz_to_rad(94e6);
  tr.config.probe.g0 = 300.0;
  tr.config.sample_rate = 2e6;
  tr.config.duration = 1.0;
  tr.config.seed = 99;
  std::mt19937_64 rng(22);
  std::normal_distribution<double> nd(0.0, 1e-12);
  for (int i = 0; i < 100; ++i) {
    tr.t.push_back(i / 2e6);
    tr.x.push_back(nd(rng));
    tr.v.push_back(nd(rng));
    tr.y.push_back(nd(rng));
    tr.f_fb.push_back(nd(rng));
  }
  const auto dir = scratch_dir("trajectory");
  {
    std::ofstream os(dir / "t.csv");
    write_trajectory_csv(os, tr, 60);
  }
  const auto back = read_trajectory_csv(dir / "t.csv");
  REQUIRE(back.t.size() == 60);
  CHECK(std::equal(back.x.begin(), back.x.end(), tr.x.begin()));
  CHECK(std::equal(back.f_fb.begin(), back.f_fb.end(), tr.f_fb.begin()));
  CHECK(back.sample_rate() == 2e6);
  CHECK(back.meta.at("seed") == "99");
  CHECK(parse_number(back.meta.at("imprecision_psd")) == imprecision_psd(tr.config.mode, tr.config.probe));
  CHECK(back.meta.at("rows") == "60");
  std::filesystem::remove_all(dir);
}

TEST_CASE("spectrum round trip") {
  Spectrum s;
  s.freq = {0.0, 10.0, 20.0};
  s.psd = {1e-30, 2.5e-29, 3.0e-31};
  s.resolution_bw = 15.0;
  s.averages = 200;
  s.effective_averages = 190.25;
  s.source = SpectrumSource::in_loop_y;
  std::stringstream io;
  write_spectrum_csv(io, s);
  const auto back = read_spectrum_csv(io);
  CHECK(back.freq == s.freq);
  CHECK(back.psd == s.psd);
  CHECK(back.averages == 200);
  CHECK(back.effective_averages == 190.25);
  CHECK(back.resolution_bw == 15.0);
  CHECK(back.source == SpectrumSource::in_loop_y);
  CHECK_FALSE(back.squashing_corrected);

  std::istringstream bare("freq_hz,psd_m2_per_hz\n1,1\n2,1\n");
  const auto b = read_spectrum_csv(bare, 50.0);
  CHECK(b.effective_averages == 50.0);
  CHECK(b.averages == 50);
  CHECK(b.resolution_bw == 1.0);

  std::istringstream backwards("freq_hz,psd_m2_per_hz\n2,1\n1,1\n");
  CHECK_THROWS_AS(read_spectrum_csv(backwards), IoError);
}

TEST_CASE("track and histogram writers") {
  PhaseSpaceTrack tr;
  tr.t = {0.0, 1.0, 2.0, 3.0, 4.0};
  tr.X = {1.0, 2.0, 3.0, 4.0, 5.0};
  tr.Y = {5.0, 4.0, 3.0, 2.0, 1.0};
  tr.lpf_bandwidth = 10.0;
  std::stringstream io;
  write_track_csv(io, tr, 2);
  auto t = read_csv(io);
  CHECK(t.numbers("X_m") == std::vector<double>{1.0, 3.0, 5.0});
  tr.scale = 2.0;
  std::stringstream io2;
  write_track_csv(io2, tr);
  t = read_csv(io2);
  CHECK(t.numbers("Y_shot_noise").size() == 5);
  CHECK(t.meta.at("unit_m") == "2");

  Histogram h;
  h.centers = {0.0, 1.0};
  h.density = {0.5, 0.5};
  h.gaussian = {0.4, 0.4};
  h.bin_width = 1.0;
  std::stringstream io3;
  write_histogram_csv(io3, h);
  t = read_csv(io3);
  CHECK(t.numbers("gaussian_fit") == h.gaussian);
}

TEST_CASE("key-value records") {
  FitResult f;
  f.converged = true;
  f.message = "converged";
  f.params.omega_m = hz_to_rad(1e5);
  f.params.g = 2.0;
  std::stringstream io;
  write_key_values(io, fit_record(f));
  const auto kv = read_key_values(io);
  CHECK(kv.at("converged") == "1");
  CHECK(parse_number(kv.at("f_m_hz")) == Approx(1e5).epsilon(1e-15));
  CHECK(kv.at("gain") == "2");
  std::istringstream bad("a=1\nnot a record\n");
  CHECK_THROWS_AS(read_key_values(bad), IoError);
}

TEST_CASE("file checksum") {
  const auto dir = scratch_dir("crc");
  {
    std::ofstream os(dir / "check.txt", std::ios::binary);
    os << "123456789";
  }
  CHECK(file_crc32(dir / "check.txt") == 0xCBF43926u);
  CHECK_THROWS_AS(file_crc32(dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}
