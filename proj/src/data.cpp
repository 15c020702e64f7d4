#include "mrn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace mrn {

namespace {
constexpr int kCifarSize = 32;
constexpr size_t kRecordBytes = 1 + 3 * 1024;
}  // namespace

std::vector<LabeledImage> read_cifar_records(const std::string& file) {
  std::ifstream is(file, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open dataset file: " + file);
  const auto size = static_cast<size_t>(is.tellg());
  if (size == 0) throw std::runtime_error("empty file: " + file);
  if (size % kRecordBytes != 0) {
    throw std::runtime_error("truncated file " + file + ": trailing partial record at byte offset " +
                             std::to_string(size - size % kRecordBytes));
  }
  is.seekg(0);
  std::vector<unsigned char> buf(size);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!is) throw std::runtime_error("read failed: " + file);

  const size_t count = size / kRecordBytes;
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (size_t r = 0; r < count; ++r) {
    const unsigned char* rec = buf.data() + r * kRecordBytes;
    if (rec[0] > 9) {
      throw std::runtime_error("label byte " + std::to_string(int(rec[0])) + " > 9 at byte offset " +
                               std::to_string(r * kRecordBytes) + " in " + file);
    }
    LabeledImage img;
    img.label = rec[0];
    std::vector<double> px(3 * 1024);
    for (size_t i = 0; i < 3 * 1024; ++i) px[i] = static_cast<double>(rec[1 + i]) / 255.0;
    img.pixels = Tensor({3, kCifarSize, kCifarSize}, std::move(px));
    out.push_back(std::move(img));
  }
  return out;
}

void write_cifar_records(const std::vector<LabeledImage>& images, const std::string& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open file for writing: " + file);
  std::vector<unsigned char> rec(kRecordBytes);
  for (const LabeledImage& img : images) {
    if (img.pixels.numel() != 3 * 1024) {
      throw std::invalid_argument("record layout holds 32x32 images, got " +
                                  shape_str(img.pixels.shape()));
    }
    rec[0] = static_cast<unsigned char>(img.label);
    auto v = img.pixels.values();
    for (size_t i = 0; i < 3 * 1024; ++i) {
      const double scaled = std::clamp(v[i], 0.0, 1.0) * 255.0;
      rec[1 + i] = static_cast<unsigned char>(std::llround(scaled));
    }
    os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!os) throw std::runtime_error("write failed: " + file);
}

Dataset load_cifar10(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test") {
    throw std::invalid_argument("split must be 'train' or 'test', got '" + split + "'");
  }
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back(dir + "/test_batch.bin");
  }
  Dataset ds;
  ds.split = split;
  ds.num_classes = 10;
  for (const std::string& f : files) {
    std::vector<LabeledImage> recs = read_cifar_records(f);
    if (recs.size() != 10000) {
      throw std::runtime_error(f + " holds " + std::to_string(recs.size()) +
                               " records; the standard layout has 10000 per file");
    }
    std::move(recs.begin(), recs.end(), std::back_inserter(ds.images));
  }
  if (split == "train") compute_normalization(ds);
  return ds;
}

Dataset synth_dataset(uint64_t seed, int n_samples, int num_classes, int image_size, double noise) {
  if (num_classes < 2) throw std::invalid_argument("synth_dataset needs at least 2 classes");
  if (n_samples < num_classes) {
    throw std::invalid_argument("synth_dataset: " + std::to_string(n_samples) + " samples < " +
                                std::to_string(num_classes) + " classes");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  // position and angle jitter grow with the noise level, so the zero-noise
  // dataset is exactly the class templates
  const int jitter = std::min(image_size / 4, static_cast<int>(std::lround(8.0 * noise)));
  std::uniform_int_distribution<int> offset(-jitter, jitter);
  const double thickness = std::max(1.0, image_size / 12.0);

  Dataset ds;
  ds.split = "train";
  ds.num_classes = num_classes;
  ds.images.reserve(static_cast<size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    const int label = s % num_classes;  // round-robin keeps classes balanced
    double theta = std::numbers::pi * static_cast<double>(label) / num_classes;
    if (noise > 0.0) theta += unit(rng) * 0.3 * noise * std::numbers::pi / num_classes;
    const double dir_x = std::cos(theta), dir_y = std::sin(theta);
    double cx = (image_size - 1) / 2.0, cy = (image_size - 1) / 2.0;
    if (jitter > 0) {
      cx += offset(rng);
      cy += offset(rng);
    }
    std::vector<double> px(static_cast<size_t>(3 * image_size * image_size));
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const double d = -dir_y * (x - cx) + dir_x * (y - cy);  // distance to the bar axis
          double v = std::exp(-(d * d) / (2.0 * thickness * thickness));
          if (noise > 0.0) v += noise * gauss(rng);
          px[static_cast<size_t>((c * image_size + y) * image_size + x)] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    LabeledImage img;
    img.label = label;
    img.pixels = Tensor({3, image_size, image_size}, std::move(px));
    ds.images.push_back(std::move(img));
  }
  compute_normalization(ds);
  return ds;
}

LabeledImage augment(const LabeledImage& image, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> off(0, 8);
  const bool flip = coin(rng);
  const int oy = off(rng);
  const int ox = off(rng);
  return augment_with(image, flip, oy, ox);
}

LabeledImage augment_with(const LabeledImage& image, bool flip, int oy, int ox) {
  const int64_t c = image.pixels.dim(0), h = image.pixels.dim(1), w = image.pixels.dim(2);
  constexpr int kPad = 4;
  if (oy < 0 || oy > 2 * kPad || ox < 0 || ox > 2 * kPad) {
    throw std::invalid_argument("augment offsets must lie in [0, 8]");
  }

  auto src = image.pixels.values();
  std::vector<double> out(static_cast<size_t>(c * h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = y + oy - kPad;  // position in the padded frame
      if (sy < 0 || sy >= h) continue;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sx = x + ox - kPad;
        if (sx < 0 || sx >= w) continue;
        const int64_t src_x = flip ? (w - 1 - sx) : sx;
        out[static_cast<size_t>((ch * h + y) * w + x)] =
            src[static_cast<size_t>((ch * h + sy) * w + src_x)];
      }
    }
  }
  LabeledImage result;
  result.label = image.label;
  result.pixels = Tensor({c, h, w}, std::move(out));
  return result;
}

void compute_normalization(Dataset& dataset) {
  if (dataset.images.empty()) throw std::invalid_argument("cannot normalize an empty dataset");
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  size_t per_channel = 0;
  for (const LabeledImage& img : dataset.images) {
    const int64_t hw = img.pixels.dim(1) * img.pixels.dim(2);
    auto v = img.pixels.values();
    for (int c = 0; c < 3; ++c) {
      for (int64_t i = 0; i < hw; ++i) {
        const double x = v[static_cast<size_t>(c * hw + i)];
        sum[static_cast<size_t>(c)] += x;
        sq[static_cast<size_t>(c)] += x * x;
      }
    }
    per_channel += static_cast<size_t>(hw);
  }
  for (int c = 0; c < 3; ++c) {
    const double m = sum[static_cast<size_t>(c)] / static_cast<double>(per_channel);
    const double var = sq[static_cast<size_t>(c)] / static_cast<double>(per_channel) - m * m;
    dataset.mean[static_cast<size_t>(c)] = m;
    dataset.stddev[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-12));
  }
  dataset.has_stats = true;
}

}  // namespace mrn
