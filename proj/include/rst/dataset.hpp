#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rst/tensor.hpp"

namespace rst {

/// Images (or feature rows) with labels. x is [N, ...] with values in [0,1].
struct DataSplit {
  Tensor x;
  std::vector<int> y;

  [[nodiscard]] std::size_t size() const { return y.size(); }
  /// First `count` samples (all when count == 0 or count >= size()).
  [[nodiscard]] DataSplit head(std::size_t count) const;
  [[nodiscard]] DataSplit select(std::span<const std::size_t> rows) const;
};

struct Dataset {
  std::string name;
  DataSplit train;
  DataSplit test;
  std::size_t num_classes = 0;

  /// Checks labels lie in [0, num_classes) and values in [0,1].
  void validate() const;
};

/// Error raised for malformed dataset files; carries the byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  [[nodiscard]] std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Reads a whole file; gzip members (magic 1f 8b) are inflated transparently.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// Parsed IDX payload: dimension sizes and raw unsigned bytes.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

/// Big-endian IDX parser for ubyte arrays (magic 0x00000801 labels, 0x00000803 images).
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray load_idx(const std::filesystem::path& path);

/// Image IDX as [N,1,H,W] scaled by 1/255.
Tensor idx_images_to_tensor(const IdxArray& images);
std::vector<int> idx_labels(const IdxArray& labels);

/// MNIST / Fashion-MNIST layout: {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz].
/// Limits of 0 keep every sample.
Dataset load_mnist_dir(const std::filesystem::path& dir, const std::string& name, std::size_t train_limit = 0,
                       std::size_t test_limit = 0);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes.
DataSplit parse_cifar_batch(std::span<const std::uint8_t> bytes);
/// data_batch_1..5.bin and test_batch.bin under `dir`.
Dataset load_cifar10_dir(const std::filesystem::path& dir, std::size_t train_limit = 0, std::size_t test_limit = 0);

}  // namespace rst
