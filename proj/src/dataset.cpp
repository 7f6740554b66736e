#include "djpq/dataset.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "djpq/errors.hpp"

namespace djpq {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

constexpr std::size_t kCifarRecord = 3073;

}  // namespace

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t n = sample_numel();
  const std::size_t plane = height * width;
  if (norm.mean.size() != channels || norm.stddev.size() != channels) {
    throw ContractError("dataset has no normalization for its " + std::to_string(channels) + " channels");
  }
  std::vector<float> out(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t idx = indices[b];
    if (idx >= size()) throw ContractError("sample index " + std::to_string(idx) + " out of range");
    const std::uint8_t* src = pixels.data() + idx * n;
    for (std::size_t c = 0; c < channels; ++c) {
      const double m = norm.mean[c];
      const double s = norm.stddev[c];
      for (std::size_t p = 0; p < plane; ++p) {
        out[b * n + c * plane + p] = static_cast<float>((src[c * plane + p] / 255.0 - m) / s);
      }
    }
  }
  return Tensor(Shape{indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

void parse_idx_images(std::span<const std::uint8_t> bytes, Dataset& out) {
  if (bytes.size() < 16) throw FormatError("IDX image header truncated", bytes.size());
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000803) {
    std::ostringstream os;
    os << "IDX image magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic << " (expected 0x00000803)";
    throw FormatError(os.str(), 0);
  }
  const std::uint64_t n = read_be32(bytes, 4), h = read_be32(bytes, 8), w = read_be32(bytes, 12);
  if (h == 0 || w == 0) throw FormatError("IDX image dimensions must be positive", 8);
  const std::uint64_t plane = h * w;
  const std::uint64_t complete = (bytes.size() - 16) / plane;
  if (n > complete) {
    throw FormatError("IDX image data truncated: " + std::to_string(n) + " images declared, " +
                          std::to_string(complete) + " complete",
                      16 + complete * plane);
  }
  const std::uint64_t need = 16 + n * plane;
  if (bytes.size() > need) throw FormatError("IDX image file has trailing bytes", need);
  out.channels = 1;
  out.height = h;
  out.width = w;
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(need));
}

void parse_idx_labels(std::span<const std::uint8_t> bytes, Dataset& out) {
  if (bytes.size() < 8) throw FormatError("IDX label header truncated", bytes.size());
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000801) {
    std::ostringstream os;
    os << "IDX label magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic << " (expected 0x00000801)";
    throw FormatError(os.str(), 0);
  }
  const std::uint64_t n = read_be32(bytes, 4);
  if (bytes.size() != 8 + n) {
    throw FormatError("IDX label count " + std::to_string(n) + " does not match file length",
                      std::min<std::uint64_t>(bytes.size(), 8 + n));
  }
  out.labels.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const int label = bytes[8 + i];
    if (label > 9) throw FormatError("label " + std::to_string(label) + " outside 0..9", 8 + i);
    out.labels.push_back(label);
  }
}

void parse_cifar10(std::span<const std::uint8_t> bytes, Dataset& out, std::size_t base_offset) {
  const std::size_t full = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("CIFAR-10 record truncated: " + std::to_string(bytes.size() % kCifarRecord) + " of " +
                          std::to_string(kCifarRecord) + " bytes",
                      base_offset + full * kCifarRecord);
  }
  out.channels = 3;
  out.height = 32;
  out.width = 32;
  for (std::size_t r = 0; r < full; ++r) {
    const std::size_t at = r * kCifarRecord;
    const int label = bytes[at];
    if (label > 9) throw FormatError("label " + std::to_string(label) + " outside 0..9", base_offset + at);
    out.labels.push_back(label);
    out.pixels.insert(out.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(at + 1),
                      bytes.begin() + static_cast<std::ptrdiff_t>(at + kCifarRecord));
  }
}

Normalization compute_normalization(const Dataset& data) {
  if (data.size() == 0) throw DataError("cannot normalize an empty dataset");
  Normalization norm;
  const std::size_t plane = data.height * data.width;
  for (std::size_t c = 0; c < data.channels; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint8_t* p = data.pixels.data() + i * data.sample_numel() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        s += v;
        s2 += v * v;
      }
    }
    const double count = static_cast<double>(data.size() * plane);
    const double mean = s / count;
    const double var = std::max(s2 / count - mean * mean, 0.0);
    norm.mean.push_back(mean);
    norm.stddev.push_back(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

DatasetFormat detect_format(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  if (fs::exists(dir / "train-images-idx3-ubyte")) return DatasetFormat::kMnistIdx;
  if (fs::exists(dir / "test_batch.bin") || fs::exists(dir / "data_batch_1.bin")) return DatasetFormat::kCifar10Bin;
  throw DataError("no MNIST IDX or CIFAR-10 binary files in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir, DatasetFormat format, Split split) {
  namespace fs = std::filesystem;
  Dataset d;
  std::string hash_input;
  auto tag = [&](const fs::path& p, std::span<const std::uint8_t> bytes) {
    hash_input += p.filename().string() + ":" + content_hash(bytes) + ";";
  };
  auto wrap = [](const fs::path& p, auto&& fn) {
    try {
      fn();
    } catch (const FormatError& e) {
      throw FormatError(p.string() + ": " + e.detail(), e.offset());
    }
  };
  if (format == DatasetFormat::kMnistIdx) {
    const std::string prefix = split == Split::kTrain ? "train" : "t10k";
    const fs::path ip = dir / (prefix + "-images-idx3-ubyte");
    const fs::path lp = dir / (prefix + "-labels-idx1-ubyte");
    const auto ib = read_file(ip);
    const auto lb = read_file(lp);
    wrap(ip, [&] { parse_idx_images(ib, d); });
    wrap(lp, [&] { parse_idx_labels(lb, d); });
    if (d.labels.size() * d.sample_numel() != d.pixels.size()) {
      throw DataError("image and label counts differ in " + dir.string());
    }
    tag(ip, ib);
    tag(lp, lb);
  } else {
    std::vector<fs::path> files;
    if (split == Split::kTest) {
      files.push_back(dir / "test_batch.bin");
    } else {
      for (int i = 1; i <= 5; ++i) {
        const fs::path p = dir / ("data_batch_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) files.push_back(p);
      }
      if (files.empty()) throw DataError("no CIFAR-10 training batches in " + dir.string());
    }
    for (const auto& p : files) {
      const auto bytes = read_file(p);
      wrap(p, [&] { parse_cifar10(bytes, d); });
      tag(p, bytes);
    }
  }
  if (d.size() == 0) throw DataError("dataset in " + dir.string() + " is empty");
  d.fingerprint = content_hash(std::span(reinterpret_cast<const std::uint8_t*>(hash_input.data()), hash_input.size()));
  return d;
}

DataSplits load_splits(const std::filesystem::path& dir, DatasetFormat format) {
  DataSplits s{load_dataset(dir, format, Split::kTrain), load_dataset(dir, format, Split::kTest)};
  s.train.norm = compute_normalization(s.train);
  s.test.norm = s.train.norm;
  return s;
}

}  // namespace djpq
