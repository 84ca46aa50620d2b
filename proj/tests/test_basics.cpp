#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "padtrack/image.hpp"
#include "padtrack/imageio.hpp"
#include "padtrack/numio.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/rng.hpp"

using namespace padtrack;

TEST_SUITE_BEGIN("basics");

TEST_CASE("rng determinism and stream independence") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

  Rng c(derive_seed(5, 0)), d(derive_seed(5, 1));
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng uniform and normal moments") {
  Rng rng(2024);
  double sum = 0, sum2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.005);
  CHECK(std::abs(sum2 / n - 1.0 / 3.0) < 0.005);

  double gsum = 0, gsum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double g = rng.normal();
    gsum += g;
    gsum2 += g * g;
  }
  CHECK(std::abs(gsum / n) < 0.01);
  CHECK(std::abs(gsum2 / n - 1.0) < 0.02);
}

TEST_CASE("beta(1.5, 1) matches inverse-CDF moments") {
  Rng rng(77);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += rng.beta(1.5, 1.0);
  CHECK(std::abs(sum / n - 0.6) < 0.005);  // mean alpha/(alpha+beta)
}

TEST_CASE("number round-trip through text") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    double v = (rng.uniform() - 0.5) * std::pow(10.0, rng.uniform_int(-8, 8));
    CHECK(parse_double(format_double(v)) == v);
  }
  CHECK(parse_double(format_double(60.0)) == 60.0);
  CHECK_THROWS_AS(parse_double("1.2x"), FormatError);
}

TEST_CASE("png round-trip preserves bytes") {
  Rng rng(11);
  ImageU8 img(37, 23, 3);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  const auto path = std::filesystem::temp_directory_path() / "padtrack_io_test.png";
  write_png(path.string(), img);
  const auto back = read_png(path.string());
  CHECK(back == img);
  std::filesystem::remove(path);
}

TEST_CASE("png rgba round-trip") {
  Rng rng(12);
  ImageU8 img(16, 9, 4);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  const auto path = std::filesystem::temp_directory_path() / "padtrack_io_rgba.png";
  write_png(path.string(), img);
  CHECK(read_png(path.string()) == img);
  std::filesystem::remove(path);
}

TEST_CASE("jpeg round-trip is lossy but close at high quality") {
  ImageU8 img(64, 48, 3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>(x * 4);
      img.at(x, y, 1) = static_cast<std::uint8_t>(y * 5);
      img.at(x, y, 2) = 128;
    }
  const auto out = jpeg_roundtrip(img, 95);
  REQUIRE(out.width() == img.width());
  REQUIRE(out.height() == img.height());
  double err = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    err += std::abs(static_cast<int>(out.pixels()[i]) - static_cast<int>(img.pixels()[i]));
  err /= static_cast<double>(img.size());
  CHECK(err < 4.0);   // close
  CHECK(err > 0.001);  // but not identity

  const auto harsh = jpeg_roundtrip(img, 10);
  double err10 = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    err10 += std::abs(static_cast<int>(harsh.pixels()[i]) - static_cast<int>(img.pixels()[i]));
  err10 /= static_cast<double>(img.size());
  CHECK(err10 > err);  // lower quality, more damage
}

TEST_CASE("bilinear sample and resize") {
  ImageU8 img(2, 2, 1);
  img.at(0, 0) = 0;
  img.at(1, 0) = 100;
  img.at(0, 1) = 200;
  img.at(1, 1) = 100;
  CHECK(sample_bilinear(img, 0.5, 0.0, 0) == doctest::Approx(50.0));
  CHECK(sample_bilinear(img, 0.0, 0.5, 0) == doctest::Approx(100.0));
  CHECK(sample_bilinear(img, 0.5, 0.5, 0) == doctest::Approx(100.0));

  const auto up = resize_bilinear(img, 4, 4);
  CHECK(up.width() == 4);
  CHECK(up.height() == 4);
}

TEST_CASE("parallel for_each_index writes every slot once") {
  std::vector<int> hits(10000, 0);
  par::set_jobs(4);
  par::for_each_index(static_cast<std::ptrdiff_t>(hits.size()), [&](std::ptrdiff_t i) {
    hits[i] += 1;
  });
  par::set_jobs(0);
  for (int h : hits) REQUIRE(h == 1);
}

TEST_SUITE_END();
