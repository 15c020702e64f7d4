#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mrn/data.hpp"

using namespace mrn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mrn_data_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// nearest-template classifier over noiseless class patterns
int template_classify(const LabeledImage& img, const std::vector<LabeledImage>& templates) {
  int best = 0;
  double best_d = 1e300;
  for (size_t c = 0; c < templates.size(); ++c) {
    double d = 0.0;
    auto a = img.pixels.values();
    auto b = templates[c].pixels.values();
    for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("hand-built single record decodes exactly") {
  TempDir tmp;
  std::vector<unsigned char> rec(3073, 0);
  rec[0] = 7;    // label
  rec[1] = 255;  // first red pixel
  rec[2] = 128;
  write_bytes(tmp.path / "one.bin", rec);

  auto images = read_cifar_records((tmp.path / "one.bin").string());
  REQUIRE(images.size() == 1);
  CHECK(images[0].label == 7);
  CHECK(images[0].pixels.values()[0] == 1.0);
  CHECK(images[0].pixels.values()[1] == doctest::Approx(128.0 / 255.0));
  CHECK(images[0].pixels.shape() == Shape{3, 32, 32});
}

TEST_CASE("empty and truncated files are rejected with offsets") {
  TempDir tmp;
  write_bytes(tmp.path / "empty.bin", {});
  CHECK_THROWS_WITH_AS(read_cifar_records((tmp.path / "empty.bin").string()),
                       doctest::Contains("empty file"), std::runtime_error);

  std::vector<unsigned char> partial(3073 + 100, 0);
  write_bytes(tmp.path / "partial.bin", partial);
  try {
    read_cifar_records((tmp.path / "partial.bin").string());
    FAIL("expected truncation error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("3073") != std::string::npos);  // offset of the partial record
  }
}

TEST_CASE("label bytes above 9 are rejected with their offset") {
  TempDir tmp;
  std::vector<unsigned char> two(2 * 3073, 0);
  two[3073] = 12;  // second record's label
  write_bytes(tmp.path / "bad.bin", two);
  try {
    read_cifar_records((tmp.path / "bad.bin").string());
    FAIL("expected label error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("12") != std::string::npos);
    CHECK(msg.find("3073") != std::string::npos);
  }
}

TEST_CASE("loading then re-serializing reproduces the bytes exactly") {
  TempDir tmp;
  std::mt19937_64 rng(5);
  std::vector<unsigned char> bytes(4 * 3073);
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = i % 3073 == 0 ? static_cast<unsigned char>(i / 3073 % 10)
                             : static_cast<unsigned char>(rng() & 0xff);
  }
  write_bytes(tmp.path / "r.bin", bytes);
  auto images = read_cifar_records((tmp.path / "r.bin").string());
  write_cifar_records(images, (tmp.path / "w.bin").string());
  CHECK(read_bytes(tmp.path / "w.bin") == bytes);
}

TEST_CASE("standard train layout loads 50,000 images and enforces 10,000 per file") {
  TempDir tmp;
  std::vector<unsigned char> file(10000 * 3073, 0);
  for (int i = 1; i <= 5; ++i) {
    write_bytes(tmp.path / ("data_batch_" + std::to_string(i) + ".bin"), file);
  }
  Dataset train = load_cifar10(tmp.path.string(), "train");
  CHECK(train.images.size() == 50000);
  CHECK(train.has_stats);

  // short test file rejected by the strict layout
  write_bytes(tmp.path / "test_batch.bin", std::vector<unsigned char>(3073, 0));
  CHECK_THROWS_WITH_AS(load_cifar10(tmp.path.string(), "test"), doctest::Contains("10000"),
                       std::runtime_error);
  CHECK_THROWS_AS(load_cifar10(tmp.path.string(), "validation"), std::invalid_argument);
}

TEST_CASE("synthetic datasets are deterministic and balanced") {
  Dataset a = synth_dataset(99, 101, 4, 16, 0.3);
  Dataset b = synth_dataset(99, 101, 4, 16, 0.3);
  REQUIRE(a.images.size() == 101);
  for (size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].label == b.images[i].label);
    auto va = a.images[i].pixels.values();
    auto vb = b.images[i].pixels.values();
    bool same = true;
    for (size_t j = 0; j < va.size(); ++j) same = same && va[j] == vb[j];
    CHECK(same);
  }
  std::array<int, 4> counts{};
  for (const auto& img : a.images) counts[static_cast<size_t>(img.label)]++;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  CHECK(*hi - *lo <= 1);

  Dataset c = synth_dataset(100, 101, 4, 16, 0.3);
  bool all_same = true;
  for (size_t j = 0; j < c.images[0].pixels.values().size(); ++j) {
    all_same = all_same && c.images[0].pixels.values()[j] == a.images[0].pixels.values()[j];
  }
  CHECK_FALSE(all_same);  // different seed, different data
}

TEST_CASE("zero-noise synthetic data is perfectly template-separable") {
  Dataset templates = synth_dataset(1, 2, 2, 16, 0.0);
  Dataset data = synth_dataset(2, 200, 2, 16, 0.0);
  int correct = 0;
  for (const auto& img : data.images) {
    if (template_classify(img, templates.images) == img.label) ++correct;
  }
  CHECK(correct == 200);
}

TEST_CASE("sigma=0.5 synthetic data sits strictly between chance and perfect") {
  Dataset templates = synth_dataset(1, 2, 2, 16, 0.0);
  Dataset data = synth_dataset(7, 1000, 2, 16, 0.5);
  int correct = 0;
  for (const auto& img : data.images) {
    if (template_classify(img, templates.images) == img.label) ++correct;
  }
  const double acc = correct / 1000.0;
  CHECK(acc > 0.55);  // clearly above 2-class chance
  CHECK(acc < 1.0);   // jitter and noise cost the rigid template some hits
}

TEST_CASE("no-flip center crop is the identity") {
  Dataset data = synth_dataset(11, 4, 2, 16, 0.4);
  const LabeledImage& img = data.images[0];
  LabeledImage same = augment_with(img, false, 4, 4);
  auto a = img.pixels.values();
  auto b = same.pixels.values();
  bool equal = true;
  for (size_t i = 0; i < a.size(); ++i) equal = equal && a[i] == b[i];
  CHECK(equal);
  CHECK(same.label == img.label);
}

TEST_CASE("two flips compose to the identity") {
  Dataset data = synth_dataset(13, 4, 2, 16, 0.4);
  const LabeledImage& img = data.images[1];
  LabeledImage once = augment_with(img, true, 4, 4);
  LabeledImage twice = augment_with(once, true, 4, 4);
  auto a = img.pixels.values();
  auto b = twice.pixels.values();
  bool equal = true;
  for (size_t i = 0; i < a.size(); ++i) equal = equal && a[i] == b[i];
  CHECK(equal);
}

TEST_CASE("corner crop shifts a delta image by exactly 4 pixels") {
  std::vector<double> px(3 * 16 * 16, 0.0);
  px[(0 * 16 + 8) * 16 + 8] = 1.0;  // delta at (8,8) in channel 0
  LabeledImage img;
  img.label = 1;
  img.pixels = Tensor({3, 16, 16}, px);
  LabeledImage shifted = augment_with(img, false, 0, 0);  // top-left corner crop
  // content moves down/right by the 4-pixel padding
  CHECK(shifted.pixels.values()[(0 * 16 + 12) * 16 + 12] == 1.0);
  double total = 0.0;
  for (double v : shifted.pixels.values()) total += v;
  CHECK(total == 1.0);
}

TEST_CASE("augmentation preserves label, shape and value range") {
  Dataset data = synth_dataset(17, 32, 3, 16, 0.5);
  std::mt19937_64 rng(23);
  for (const auto& img : data.images) {
    LabeledImage out = augment(img, rng);
    CHECK(out.label == img.label);
    CHECK(out.pixels.shape() == img.pixels.shape());
    for (double v : out.pixels.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("synthetic data exports to the binary record format") {
  TempDir tmp;
  Dataset data = synth_dataset(23, 20, 2, 32, 0.3);  // records are 32x32 by definition
  const std::string p = (tmp.path / "synth.bin").string();
  write_cifar_records(data.images, p);
  auto back = read_cifar_records(p);
  REQUIRE(back.size() == 20);
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].label == data.images[i].label);
    auto a = data.images[i].pixels.values();
    auto b = back[i].pixels.values();
    for (size_t j = 0; j < a.size(); ++j) {
      CHECK(std::fabs(a[j] - b[j]) <= 0.5 / 255.0 + 1e-12);  // byte quantization
    }
  }
}

TEST_CASE("normalization stats describe the training pixels") {
  Dataset data = synth_dataset(19, 64, 2, 16, 0.2);
  double sum = 0.0;
  size_t n = 0;
  for (const auto& img : data.images) {
    auto v = img.pixels.values();
    for (int64_t i = 0; i < 16 * 16; ++i) sum += v[static_cast<size_t>(i)];
    n += 16 * 16;
  }
  CHECK(data.mean[0] == doctest::Approx(sum / n).epsilon(1e-12));
  CHECK(data.stddev[0] > 0.0);
}
