#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mrn/tensor.hpp"

namespace mrn {

struct LabeledImage {
  Tensor pixels;  // [3,H,W], values in [0,1]
  int label = 0;
};

struct Dataset {
  std::vector<LabeledImage> images;
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  std::string split;  // "train" or "test"
  int num_classes = 10;
  bool has_stats = false;
};

/// Reads records in the CIFAR-10 binary layout (3073 bytes each: label byte
/// then 3x1024 channel-major pixels) from a single file. Any whole number of
/// records is accepted; partial records and labels > 9 are rejected with the
/// offending byte offset.
std::vector<LabeledImage> read_cifar_records(const std::string& file);

/// Writes images back to the binary record layout, inverting the [0,1]
/// scaling. Loading then writing reproduces the input bytes exactly.
void write_cifar_records(const std::vector<LabeledImage>& images, const std::string& file);

/// Standard CIFAR-10 directory layout: data_batch_1..5.bin for the train
/// split, test_batch.bin for test; each file must hold exactly 10,000
/// records. Normalization stats are computed for the train split only.
Dataset load_cifar10(const std::string& dir, const std::string& split);

/// Deterministic class-conditional images: one oriented bar per class, with
/// position jitter and Gaussian pixel noise scaled by `noise`. Classes are
/// balanced within one sample.
Dataset synth_dataset(uint64_t seed, int n_samples, int num_classes, int image_size,
                      double noise = 0.25);

/// Train-time augmentation: horizontal flip with p=0.5, then 4-pixel zero
/// padding and a random crop back to the original size. Consumes exactly
/// three draws from the generator.
LabeledImage augment(const LabeledImage& image, std::mt19937_64& rng);

/// The same transform with explicit choices; offsets range over [0, 8] and
/// (4, 4) without flip is the identity.
LabeledImage augment_with(const LabeledImage& image, bool flip, int offset_y, int offset_x);

/// Per-channel mean/std over every pixel of the dataset.
void compute_normalization(Dataset& dataset);

}  // namespace mrn
