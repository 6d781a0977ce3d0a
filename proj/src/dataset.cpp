#include "rst/dataset.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <numeric>

namespace rst {

DataSplit DataSplit::head(std::size_t count) const {
  if (count == 0 || count >= size()) return *this;
  return {x.slice_rows(0, count), std::vector<int>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(count))};
}

DataSplit DataSplit::select(std::span<const std::size_t> rows) const {
  DataSplit out{gather_rows(x, rows), {}};
  out.y.reserve(rows.size());
  for (auto r : rows) out.y.push_back(y.at(r));
  return out;
}

void Dataset::validate() const {
  for (const auto* split : {&train, &test}) {
    if (split->x.rank() == 0 || split->x.dim(0) != split->y.size()) {
      throw std::invalid_argument("dataset " + name + ": image/label count mismatch");
    }
    for (int label : split->y) {
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
        throw std::invalid_argument("dataset " + name + ": label " + std::to_string(label) + " outside [0," +
                                    std::to_string(num_classes) + ")");
      }
    }
    for (Real v : split->x.data()) {
      if (v < Real(0) || v > Real(1)) throw std::invalid_argument("dataset " + name + ": pixel outside [0,1]");
    }
  }
}

namespace {

std::vector<std::uint8_t> inflate_gzip(const std::vector<std::uint8_t>& compressed, const std::string& origin) {
  z_stream stream{};
  if (inflateInit2(&stream, 16 + MAX_WBITS) != Z_OK) throw std::runtime_error("zlib init failed");
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 16);
  stream.next_in = const_cast<Bytef*>(compressed.data());
  stream.avail_in = static_cast<uInt>(compressed.size());
  int status = Z_OK;
  while (status != Z_STREAM_END) {
    stream.next_out = chunk.data();
    stream.avail_out = static_cast<uInt>(chunk.size());
    status = inflate(&stream, Z_NO_FLUSH);
    if (status != Z_OK && status != Z_STREAM_END) {
      const auto offset = static_cast<std::size_t>(stream.total_in);
      inflateEnd(&stream);
      throw FormatError(origin + ": corrupt gzip stream", offset);
    }
    out.insert(out.end(), chunk.begin(), chunk.begin() + static_cast<std::ptrdiff_t>(chunk.size() - stream.avail_out));
    if (status != Z_STREAM_END && stream.avail_in == 0 && stream.avail_out != 0) {
      const auto offset = static_cast<std::size_t>(stream.total_in);
      inflateEnd(&stream);
      throw FormatError(origin + ": truncated gzip stream", offset);
    }
  }
  inflateEnd(&stream);
  return out;
}

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return inflate_gzip(bytes, path.string());
  return bytes;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated: expected 4 magic bytes, got " + std::to_string(bytes.size()), bytes.size());
  IdxArray out;
  out.magic = read_be32(bytes, 0);
  if (out.magic != 0x00000801 && out.magic != 0x00000803) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", out.magic);
    throw FormatError(std::string("unsupported IDX magic ") + buf + " (expected 0x00000801 or 0x00000803)", 0);
  }
  const std::size_t rank = out.magic & 0xff;
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) {
    throw FormatError("IDX header truncated: expected " + std::to_string(header) + " bytes, got " +
                          std::to_string(bytes.size()),
                      bytes.size());
  }
  std::size_t expected = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    out.dims.push_back(read_be32(bytes, 4 + 4 * d));
    expected *= out.dims.back();
  }
  const std::size_t actual = bytes.size() - header;
  if (actual < expected) {
    throw FormatError("IDX payload truncated: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(actual),
                      bytes.size());
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                  bytes.begin() + static_cast<std::ptrdiff_t>(header + expected));
  return out;
}

IdxArray load_idx(const std::filesystem::path& path) {
  try {
    return parse_idx(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

Tensor idx_images_to_tensor(const IdxArray& images) {
  if (images.magic != 0x803 || images.dims.size() != 3) throw std::invalid_argument("IDX array is not an image stack");
  std::vector<Real> values(images.data.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<Real>(images.data[i]) / Real(255);
  return Tensor(Shape{images.dims[0], 1, images.dims[1], images.dims[2]}, std::move(values));
}

std::vector<int> idx_labels(const IdxArray& labels) {
  if (labels.magic != 0x801 || labels.dims.size() != 1) throw std::invalid_argument("IDX array is not a label vector");
  return std::vector<int>(labels.data.begin(), labels.data.end());
}

namespace {

std::filesystem::path find_variant(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& candidate : {dir / (stem + ".gz"), dir / stem}) {
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw std::runtime_error("dataset file " + (dir / stem).string() + "[.gz] not found");
}

DataSplit load_mnist_split(const std::filesystem::path& dir, const std::string& prefix, std::size_t limit) {
  DataSplit split{idx_images_to_tensor(load_idx(find_variant(dir, prefix + "-images-idx3-ubyte"))),
                  idx_labels(load_idx(find_variant(dir, prefix + "-labels-idx1-ubyte")))};
  if (split.x.dim(0) != split.y.size()) throw std::runtime_error(prefix + ": image and label counts differ");
  return split.head(limit);
}

}  // namespace

Dataset load_mnist_dir(const std::filesystem::path& dir, const std::string& name, std::size_t train_limit,
                       std::size_t test_limit) {
  Dataset data{name, load_mnist_split(dir, "train", train_limit), load_mnist_split(dir, "t10k", test_limit), 10};
  data.validate();
  return data;
}

DataSplit parse_cifar_batch(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t record = 1 + 3 * 32 * 32;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw FormatError("CIFAR batch size " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(record),
                      bytes.size() - bytes.size() % record);
  }
  const std::size_t n = bytes.size() / record;
  DataSplit split{Tensor(Shape{n, 3, 32, 32}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = bytes[i * record];
    if (label > 9) throw FormatError("CIFAR label " + std::to_string(label) + " out of range", i * record);
    split.y[i] = label;
    for (std::size_t p = 0; p < record - 1; ++p) {
      split.x[i * (record - 1) + p] = static_cast<Real>(bytes[i * record + 1 + p]) / Real(255);
    }
  }
  return split;
}

namespace {

DataSplit concat(const std::vector<DataSplit>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape shape = parts.front().x.shape();
  shape[0] = n;
  std::vector<Real> values;
  std::vector<int> labels;
  values.reserve(numel(shape));
  for (const auto& p : parts) {
    values.insert(values.end(), p.x.data().begin(), p.x.data().end());
    labels.insert(labels.end(), p.y.begin(), p.y.end());
  }
  return {Tensor(shape, std::move(values)), std::move(labels)};
}

}  // namespace

Dataset load_cifar10_dir(const std::filesystem::path& dir, std::size_t train_limit, std::size_t test_limit) {
  std::vector<DataSplit> train;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (std::filesystem::exists(path)) train.push_back(parse_cifar_batch(read_file_bytes(path)));
  }
  if (train.empty()) throw std::runtime_error("no CIFAR-10 data_batch_*.bin files under " + dir.string());
  Dataset data{"cifar10", concat(train).head(train_limit),
               parse_cifar_batch(read_file_bytes(dir / "test_batch.bin")).head(test_limit), 10};
  data.validate();
  return data;
}

}  // namespace rst
