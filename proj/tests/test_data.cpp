#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "cfcm/data.hpp"
#include "cfcm/ops.hpp"

using namespace cfcm;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const char* name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

SynthConfig small_cfg(int classes, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.count = 12;
  cfg.image_size = 32;
  cfg.num_classes = classes;
  cfg.seed = seed;
  cfg.folds = 3;
  return cfg;
}

}  // namespace

TEST_CASE("generator is deterministic per seed") {
  const auto a = generate_synthetic(small_cfg(1, 7));
  const auto b = generate_synthetic(small_cfg(1, 7));
  const auto c = generate_synthetic(small_cfg(1, 8));
  REQUIRE(a.samples.size() == b.samples.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto da = a.samples[i].image.data();
    const auto db = b.samples[i].image.data();
    for (std::size_t j = 0; j < da.size(); ++j) all_equal &= da[j] == db[j];
    all_equal &= a.samples[i].mask == b.samples[i].mask;
  }
  CHECK(all_equal);

  bool any_diff = false;
  for (std::size_t i = 0; i < a.samples.size() && !any_diff; ++i) {
    any_diff = !(a.samples[i].mask == c.samples[i].mask);
  }
  CHECK(any_diff);
}

TEST_CASE("every sample covers every foreground class") {
  for (const int classes : {1, 3}) {
    const auto data = generate_synthetic(small_cfg(classes, 11));
    for (const auto& sample : data.samples) {
      for (int cls = 1; cls <= (classes == 1 ? 1 : classes - 1); ++cls) {
        const auto c = static_cast<std::uint8_t>(cls);
        CHECK(std::any_of(sample.mask.v.begin(), sample.mask.v.end(),
                          [c](std::uint8_t v) { return v == c; }));
      }
      CHECK(sample.image.shape().c == (classes == 3 ? 3 : 1));
      CHECK(sample.mask.h == sample.image.shape().h);
      for (const auto v : sample.image.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
  }
}

TEST_CASE("binary foreground fraction stays in a sane band") {
  SynthConfig cfg;
  cfg.count = 1000;
  cfg.image_size = 32;
  cfg.num_classes = 1;
  cfg.seed = 5;
  cfg.folds = 5;
  const auto data = generate_synthetic(cfg);
  std::int64_t fg = 0, total = 0;
  for (const auto& sample : data.samples) {
    for (const auto v : sample.mask.v) fg += v != 0;
    total += sample.mask.numel();
  }
  const double fraction = static_cast<double>(fg) / static_cast<double>(total);
  CHECK(fraction >= 0.05);
  CHECK(fraction <= 0.5);
}

TEST_CASE("generator validates its configuration") {
  auto cfg = small_cfg(1, 1);
  cfg.num_classes = 2;
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidArgument);
  cfg = small_cfg(1, 1);
  cfg.image_size = 48;
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidArgument);
  cfg = small_cfg(1, 1);
  cfg.blobs_max = 1;
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidArgument);
}

TEST_CASE("pgm minimal file and unsupported depth") {
  const auto dir = temp_dir("cfcm_pgm_test");
  const std::string path = dir + "/one.pgm";
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n# tiny\n1 1\n255\n";
    out.put(static_cast<char>(255));
  }
  const auto image = load_image(path);
  CHECK(image.shape() == Shape4{1, 1, 1, 1});
  CHECK(image.data()[0] == 1.0f);

  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n1 1\n65535\n";
    out.put('\0');
    out.put('\0');
  }
  CHECK_THROWS_WITH_AS(load_image(path), doctest::Contains("unsupported depth"), ParseError);

  {
    std::ofstream out(path, std::ios::binary);
    out << "P7\n1 1\n255\n";
  }
  CHECK_THROWS_AS(load_image(path), ParseError);

  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.put('\x10');  // 1 byte instead of 16
  }
  CHECK_THROWS_WITH_AS(load_image(path), doctest::Contains("truncated"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("image and mask round trips are exact for 8-bit data") {
  const auto dir = temp_dir("cfcm_roundtrip_test");
  Rng rng(13);

  Tensor4<float> gray({1, 1, 9, 7});
  for (auto& v : gray.mutable_data()) {
    v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  }
  save_image(gray, dir + "/g.pgm");
  const auto gray2 = load_image(dir + "/g.pgm");
  REQUIRE(gray2.shape() == gray.shape());
  for (std::size_t i = 0; i < gray.data().size(); ++i) CHECK(gray.data()[i] == gray2.data()[i]);

  Tensor4<float> color({1, 3, 5, 6});
  for (auto& v : color.mutable_data()) {
    v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  }
  save_image(color, dir + "/c.ppm");
  const auto color2 = load_image(dir + "/c.ppm");
  for (std::size_t i = 0; i < color.data().size(); ++i) CHECK(color.data()[i] == color2.data()[i]);

  LabelImage mask(6, 5);
  for (auto& v : mask.v) v = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
  save_mask(mask, dir + "/m.pgm");
  CHECK(load_mask(dir + "/m.pgm") == mask);
  fs::remove_all(dir);
}

TEST_CASE("resize_bilinear identity and constants") {
  Rng rng(14);
  auto image = Tensor4<float>::randn({1, 1, 6, 6}, rng);
  const auto same = resize_bilinear(image, 6, 6);
  for (std::size_t i = 0; i < image.data().size(); ++i) CHECK(same.data()[i] == image.data()[i]);

  Tensor4<float> constant({1, 2, 4, 4}, 0.625f);
  const auto bigger = resize_bilinear(constant, 10, 14);
  for (const auto v : bigger.data()) CHECK(v == doctest::Approx(0.625f).epsilon(1e-6));
}

TEST_CASE("resize_bilinear 2x matches the upsample2 convention") {
  Rng rng(15);
  auto image = Tensor4<float>::randn({1, 2, 2, 2}, rng);
  const auto resized = resize_bilinear(image, 4, 4);
  const auto upsampled = upsample2(image, UpsampleMode::kBilinear);
  REQUIRE(resized.shape() == upsampled.shape());
  for (std::size_t i = 0; i < resized.data().size(); ++i) {
    CHECK(resized.data()[i] == upsampled.data()[i]);
  }
}

TEST_CASE("resize_nearest keeps labels integral") {
  LabelImage mask(4, 4);
  mask.at(0, 0) = 2;
  mask.at(3, 3) = 1;
  const auto up = resize_nearest(mask, 9, 6);
  CHECK(up.h == 9);
  CHECK(up.w == 6);
  for (const auto v : up.v) CHECK(v <= 2);
  const auto down = resize_nearest(up, 4, 4);
  CHECK(down.h == 4);
}

TEST_CASE("kfold_split on n=6, k=3") {
  const auto folds = kfold_split(6, 3, 17);
  REQUIRE(folds.size() == 3);
  std::set<std::int64_t> seen;
  for (const auto& fold : folds) {
    CHECK(fold.test_ids.size() == 2);
    CHECK(fold.train_ids.size() == 4);
    for (const auto id : fold.test_ids) {
      CHECK_FALSE(seen.count(id));
      seen.insert(id);
    }
  }
  CHECK(seen.size() == 6);
}

TEST_CASE("kfold_split properties over random n and k") {
  Rng rng(18);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t k = rng.uniform_int(2, 6);
    const std::int64_t n = rng.uniform_int(k, 40);
    const auto folds = kfold_split(n, k, rng.next_u64());
    REQUIRE(static_cast<std::int64_t>(folds.size()) == k);
    std::set<std::int64_t> seen;
    std::int64_t min_size = n, max_size = 0;
    for (const auto& fold : folds) {
      const auto size = static_cast<std::int64_t>(fold.test_ids.size());
      min_size = std::min(min_size, size);
      max_size = std::max(max_size, size);
      for (const auto id : fold.test_ids) seen.insert(id);
      CHECK(fold.train_ids.size() + fold.test_ids.size() == static_cast<std::size_t>(n));
    }
    CHECK(static_cast<std::int64_t>(seen.size()) == n);
    CHECK(max_size - min_size <= 1);
  }
  CHECK_THROWS_AS(kfold_split(2, 3, 1), InvalidArgument);
  CHECK_THROWS_AS(kfold_split(5, 1, 1), InvalidArgument);
}

TEST_CASE("group split is leave-one-group-out") {
  const std::vector<std::string> groups = {"A", "A", "B", "B", "C", "C"};
  const auto folds = group_split(groups);
  REQUIRE(folds.size() == 3);
  CHECK(folds[0].test_ids == std::vector<std::int64_t>{0, 1});
  CHECK(folds[1].test_ids == std::vector<std::int64_t>{2, 3});
  CHECK(folds[2].test_ids == std::vector<std::int64_t>{4, 5});
  CHECK(folds[0].train_ids == std::vector<std::int64_t>{2, 3, 4, 5});
}

TEST_CASE("dataset directory round trip") {
  const auto dir = temp_dir("cfcm_dataset_test");
  for (const int classes : {1, 3}) {
    const auto data = generate_synthetic(small_cfg(classes, 21));
    save_dataset(data, dir);
    CHECK(fs::exists(fs::path(dir) / "manifest.csv"));

    const auto loaded = load_dataset(dir);
    REQUIRE(loaded.samples.size() == data.samples.size());
    CHECK(loaded.num_classes == classes);
    CHECK(loaded.in_channels == (classes == 3 ? 3 : 1));
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      CHECK(loaded.samples[i].id == data.samples[i].id);
      CHECK(loaded.samples[i].fold == data.samples[i].fold);
      CHECK(loaded.samples[i].group == data.samples[i].group);
      CHECK(loaded.samples[i].mask == data.samples[i].mask);
      const auto da = data.samples[i].image.data();
      const auto db = loaded.samples[i].image.data();
      REQUIRE(da.size() == db.size());
      for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  fs::remove_all(dir);
}
