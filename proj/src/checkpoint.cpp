#include "rst/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "rst/dataset.hpp"

namespace rst {

std::string_view to_string(Provenance tag) {
  switch (tag) {
    case Provenance::RST: return "RST";
    case Provenance::NaturalRTT: return "NaturalRTT";
    case Provenance::AdversarialRTT: return "AdversarialRTT";
    case Provenance::FinetunedInherit: return "FinetunedInherit";
    case Provenance::FinetunedReinit: return "FinetunedReinit";
    case Provenance::DenseNatural: return "DenseNatural";
    case Provenance::DenseAdversarial: return "DenseAdversarial";
  }
  return "?";
}

TicketCheckpoint make_checkpoint(const Network& net, Provenance provenance, bool include_weights) {
  TicketCheckpoint ckpt{net.spec().id, net.init(), net.remaining_ratio(), net.pattern(), provenance, {}, net.norm_stats(),
                        std::nullopt};
  for (const auto& p : net.params()) ckpt.masks.push_back(p.mask());
  if (include_weights) {
    std::vector<Tensor> weights;
    for (const auto& p : net.params()) weights.push_back(p.theta());
    ckpt.weights = std::move(weights);
  }
  return ckpt;
}

Network restore(const TicketCheckpoint& checkpoint) {
  Network net(NetworkSpec::from_id(checkpoint.network_id), checkpoint.init, checkpoint.pattern,
              checkpoint.remaining_ratio);
  auto& params = net.params();
  if (checkpoint.masks.size() != params.size()) {
    throw std::invalid_argument("checkpoint has " + std::to_string(checkpoint.masks.size()) + " masks, network " +
                                checkpoint.network_id + " has " + std::to_string(params.size()) + " weight layers");
  }
  if (checkpoint.weights) {
    if (checkpoint.weights->size() != params.size()) throw std::invalid_argument("checkpoint weight payload size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i].replace_theta((*checkpoint.weights)[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_mask(checkpoint.masks[i]);
  if (checkpoint.norm_stats.size() != net.norm_stats().size()) {
    throw std::invalid_argument("checkpoint norm statistics do not match network " + checkpoint.network_id);
  }
  for (std::size_t i = 0; i < checkpoint.norm_stats.size(); ++i) {
    if (checkpoint.norm_stats[i].mean.size() != net.norm_stats()[i].mean.size()) {
      throw std::invalid_argument("checkpoint norm site " + std::to_string(i) + " channel mismatch");
    }
  }
  net.norm_stats() = checkpoint.norm_stats;
  return net;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'R', 'S', 'T', 'K'};
constexpr std::uint16_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { little(v, 2); }
  void u32(std::uint32_t v) { little(v, 4); }
  void u64(std::uint64_t v) { little(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  [[nodiscard]] const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void little(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(little(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(little(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(little(4)); }
  std::uint64_t u64() { return little(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() {
    const auto n = u32();
    auto data = raw(n);
    return std::string(data.begin(), data.end());
  }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("checkpoint truncated: need " + std::to_string(n) + " more bytes, have " +
                            std::to_string(bytes_.size() - pos_),
                        pos_);
    }
  }
  std::uint64_t little(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint8_t> packed((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return packed;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TicketCheckpoint& c) {
  Writer w;
  w.raw(kMagic);
  w.u16(kVersion);
  w.str(c.network_id);
  w.u8(static_cast<std::uint8_t>(c.init.method));
  w.u64(c.init.seed);
  w.f64(c.remaining_ratio);
  w.u8(static_cast<std::uint8_t>(c.pattern));
  w.u8(static_cast<std::uint8_t>(c.provenance));
  w.u32(static_cast<std::uint32_t>(c.masks.size()));
  for (const auto& mask : c.masks) {
    w.u32(static_cast<std::uint32_t>(mask.size()));
    w.raw(pack_bits(mask));
  }
  w.u32(static_cast<std::uint32_t>(c.norm_stats.size()));
  for (const auto& s : c.norm_stats) {
    w.u32(static_cast<std::uint32_t>(s.mean.size()));
    for (Real v : s.mean) w.f64(static_cast<double>(v));
    for (Real v : s.var) w.f64(static_cast<double>(v));
  }
  w.u8(c.weights ? 1 : 0);
  if (c.weights) {
    w.u32(static_cast<std::uint32_t>(c.weights->size()));
    for (const auto& t : *c.weights) {
      w.u32(static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
      for (Real v : t.data()) w.f64(static_cast<double>(v));
    }
  }
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

TicketCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 2 + 4) throw FormatError("checkpoint too short", bytes.size());
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("bad checkpoint magic", 0);
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const auto stored_crc = tail.u32();
  if (stored_crc != crc32_of(body)) throw FormatError("checkpoint CRC-32 mismatch", bytes.size() - 4);

  Reader r(body);
  r.raw(4);
  if (const auto version = r.u16(); version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  TicketCheckpoint c;
  c.network_id = r.str();
  const auto method = r.u8();
  if (method > 3) throw FormatError("bad init method tag", r.position() - 1);
  c.init = {static_cast<InitMethod>(method), r.u64()};
  c.remaining_ratio = r.f64();
  const auto pattern = r.u8();
  if (pattern > 3) throw FormatError("bad sparsity pattern tag", r.position() - 1);
  c.pattern = static_cast<SparsityPattern>(pattern);
  const auto provenance = r.u8();
  if (provenance > 6) throw FormatError("bad provenance tag", r.position() - 1);
  c.provenance = static_cast<Provenance>(provenance);
  const auto layers = r.u32();
  for (std::uint32_t l = 0; l < layers; ++l) {
    const auto groups = r.u32();
    const auto packed = r.raw((groups + 7) / 8);
    std::vector<std::uint8_t> mask(groups);
    for (std::size_t i = 0; i < groups; ++i) mask[i] = (packed[i / 8] >> (i % 8)) & 1u;
    c.masks.push_back(std::move(mask));
  }
  const auto sites = r.u32();
  for (std::uint32_t s = 0; s < sites; ++s) {
    const auto channels = r.u32();
    NormStats stats;
    for (std::uint32_t i = 0; i < channels; ++i) stats.mean.push_back(static_cast<Real>(r.f64()));
    for (std::uint32_t i = 0; i < channels; ++i) stats.var.push_back(static_cast<Real>(r.f64()));
    c.norm_stats.push_back(std::move(stats));
  }
  if (r.u8()) {
    std::vector<Tensor> weights;
    const auto count = r.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
      const auto rank = r.u32();
      Shape shape;
      for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
      std::vector<Real> values(numel(shape));
      for (auto& v : values) v = static_cast<Real>(r.f64());
      weights.emplace_back(std::move(shape), std::move(values));
    }
    c.weights = std::move(weights);
  }
  if (r.position() != body.size()) throw FormatError("trailing bytes in checkpoint", r.position());
  return c;
}

void save_checkpoint(const TicketCheckpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TicketCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

std::size_t bitset_bytes(const TicketCheckpoint& checkpoint) {
  std::size_t total = 0;
  for (const auto& m : checkpoint.masks) total += (m.size() + 7) / 8;
  return total;
}

}  // namespace rst
