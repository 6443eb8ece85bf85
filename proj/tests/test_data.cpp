#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flipguard/data.hpp"
#include "test_util.hpp"

using namespace flipguard;

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool sets_equal(const LabeledSet& a, const LabeledSet& b) {
  return a.y == b.y && a.x.shape == b.x.shape &&
         std::memcmp(a.x.data.data(), b.x.data.data(),
                     a.x.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("synthetic datasets are deterministic and inside the unit box") {
  const auto a =
      make_synthetic(SyntheticKind::Gaussians, 600, 2, 3, 4.0, 0.1, 7);
  const auto b =
      make_synthetic(SyntheticKind::Gaussians, 600, 2, 3, 4.0, 0.1, 7);
  CHECK(sets_equal(a.train, b.train));
  CHECK(sets_equal(a.validation, b.validation));
  CHECK(sets_equal(a.test, b.test));
  const auto c =
      make_synthetic(SyntheticKind::Gaussians, 600, 2, 3, 4.0, 0.1, 8);
  CHECK_FALSE(sets_equal(a.train, c.train));

  for (const LabeledSet* s : {&a.train, &a.validation, &a.test})
    for (double v : s->x.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  // 70/15/15 split of 600.
  CHECK(a.train.size() == 420);
  CHECK(a.validation.size() == 90);
  CHECK(a.test.size() == 90);
}

TEST_CASE("per-split class counts stay near uniform for n >= 1000") {
  const auto d =
      make_synthetic(SyntheticKind::Rings, 2000, 2, 4, 3.0, 0.08, 3);
  for (const LabeledSet* s : {&d.train, &d.validation, &d.test}) {
    std::vector<int> counts(4, 0);
    for (int y : s->y) counts[static_cast<std::size_t>(y)]++;
    const double expect = static_cast<double>(s->size()) / 4.0;
    for (int c : counts) {
      CHECK(c >= 0.8 * expect);
      CHECK(c <= 1.2 * expect);
    }
  }
}

TEST_CASE("synthetic input validation") {
  CHECK_THROWS_AS(synthetic_kind_from_name("spiral"), ConfigError);
  CHECK_THROWS_AS(
      make_synthetic(SyntheticKind::Moons, 500, 2, 3, 1.0, 0.1, 1),
      ConfigError);  // moons is binary
  CHECK_THROWS_AS(
      make_synthetic(SyntheticKind::Gaussians, 15, 2, 2, 1.0, 0.1, 1),
      ConfigError);  // n < 10 * classes
  CHECK(make_synthetic(SyntheticKind::Moons, 400, 2, 2, 1.0, 0.08, 1)
            .train.num_classes() == 2);
}

TEST_CASE("benchmark mixture: four classes everywhere, deterministic") {
  const auto a = make_benchmark(1200, 42);
  const auto b = make_benchmark(1200, 42);
  CHECK(sets_equal(a.train, b.train));
  CHECK(a.provenance == b.provenance);
  for (const LabeledSet* s : {&a.train, &a.validation, &a.test}) {
    std::vector<int> counts(4, 0);
    for (int y : s->y) counts[static_cast<std::size_t>(y)]++;
    for (int c : counts) CHECK(c > 0);
  }
}

TEST_CASE("split partitions are pairwise disjoint by identity hash") {
  const auto d =
      make_synthetic(SyntheticKind::Gaussians, 900, 2, 3, 4.0, 0.1, 11);
  d.validate();  // must not throw
  DatasetSplit leaky = d;
  leaky.validation = d.train;  // blatant duplication
  CHECK_THROWS_AS(leaky.validate(), ConfigError);
}

TEST_CASE("csv: hand-written rows parse exactly and round-trip") {
  const std::string path = tmp_path("fg_data.csv");
  {
    std::ofstream f(path);
    f << "label,f0,f1\n";
    f << "1,0.25,0.5\n";
    f << "0,1,0\n";
    f << "2,0.125,0.625\n";
  }
  const LabeledSet s = load_csv(path);
  CHECK(s.size() == 3);
  CHECK(s.y == std::vector<int>{1, 0, 2});
  CHECK(s.x.data == std::vector<double>{0.25, 0.5, 1, 0, 0.125, 0.625});

  const std::string path2 = tmp_path("fg_data_rt.csv");
  save_csv(s, path2);
  const LabeledSet r = load_csv(path2);
  CHECK(sets_equal(s, r));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("csv errors carry line numbers") {
  const std::string path = tmp_path("fg_bad.csv");
  {
    std::ofstream f(path);
    f << "label,f0\n0,0.5\n1,not_a_number\n";
  }
  try {
    load_csv(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  {
    std::ofstream f(path);
    f << "label,f0\n0,1.5\n";  // outside [0,1]
  }
  CHECK_THROWS_AS(load_csv(path), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("idx: big-endian image/label pair, 255 scales to exactly 1") {
  const std::string img = tmp_path("fg-images-idx3-ubyte");
  const std::string lab = tmp_path("fg-labels-idx1-ubyte");
  const auto be32 = [](std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  {
    std::ofstream f(img, std::ios::binary);
    be32(f, 0x803);
    be32(f, 40);  // 40 images so a 70/15/15 split keeps 2 classes around
    be32(f, 2);
    be32(f, 2);
    for (int i = 0; i < 40; ++i) {
      const unsigned char px[4] = {255, 0, static_cast<unsigned char>(i),
                                   128};
      f.write(reinterpret_cast<const char*>(px), 4);
    }
  }
  {
    std::ofstream f(lab, std::ios::binary);
    be32(f, 0x801);
    be32(f, 40);
    for (int i = 0; i < 40; ++i) {
      const unsigned char y = static_cast<unsigned char>(i % 2);
      f.write(reinterpret_cast<const char*>(&y), 1);
    }
  }
  const DatasetSplit d = load_dataset(img, DataFormat::Idx);
  bool saw_one = false;
  for (const LabeledSet* s : {&d.train, &d.validation, &d.test})
    for (std::size_t i = 0; i < s->size(); ++i)
      if (s->x.at(i, 0) == 1.0) saw_one = true;
  CHECK(saw_one);  // pixel 255 -> exactly 1.0

  // Truncating the payload is a parse error.
  std::filesystem::resize_file(img, 24);
  CHECK_THROWS_AS(load_dataset(img, DataFormat::Idx), ParseError);
  std::filesystem::remove(img);
  std::filesystem::remove(lab);
}
