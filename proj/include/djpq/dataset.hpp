#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "djpq/tensor.hpp"

namespace djpq {

enum class DatasetFormat { kMnistIdx, kCifar10Bin };
enum class Split { kTrain, kTest };

// Per-channel standardization applied after scaling bytes to [0, 1].
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool operator==(const Normalization&) const = default;
};

// Images are kept as raw bytes (the 8-bit input grid) and standardized when
// a batch is assembled.
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // [N, C, H, W]
  std::vector<int> labels;
  Normalization norm;
  std::string fingerprint;  // content hash of the source files

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return channels * height * width; }
  Shape sample_shape() const { return {channels, height, width}; }

  // [B, C, H, W] tensor of the selected samples, standardized with `norm`.
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

// In-memory parsers. `base_offset` is added to reported byte offsets.
// Throw FormatError with the offending byte offset.
void parse_idx_images(std::span<const std::uint8_t> bytes, Dataset& out);
void parse_idx_labels(std::span<const std::uint8_t> bytes, Dataset& out);
void parse_cifar10(std::span<const std::uint8_t> bytes, Dataset& out, std::size_t base_offset = 0);

// Mean and standard deviation per channel of bytes / 255.
Normalization compute_normalization(const Dataset& data);

// MNIST: {train,t10k}-{images-idx3,labels-idx1}-ubyte in `dir`.
// CIFAR-10: data_batch_*.bin (train) or test_batch.bin (test) in `dir`.
// The returned dataset has no normalization set.
Dataset load_dataset(const std::filesystem::path& dir, DatasetFormat format, Split split);

// Picks the format from the files present in `dir`.
DatasetFormat detect_format(const std::filesystem::path& dir);

// Train and test splits standardized with the training statistics.
struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits load_splits(const std::filesystem::path& dir, DatasetFormat format);

// FNV-1a 64-bit, hex encoded.
std::string content_hash(std::span<const std::uint8_t> bytes);

}  // namespace djpq
