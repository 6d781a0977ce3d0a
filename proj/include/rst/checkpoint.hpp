#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rst/nets.hpp"

namespace rst {

enum class Provenance : std::uint8_t {
  RST = 0,
  NaturalRTT = 1,
  AdversarialRTT = 2,
  FinetunedInherit = 3,
  FinetunedReinit = 4,
  DenseNatural = 5,
  DenseAdversarial = 6,
};

std::string_view to_string(Provenance tag);

/// Persistent identity of a ticket: how to rebuild its weights plus its masks.
struct TicketCheckpoint {
  std::string network_id;
  InitSpec init;
  double remaining_ratio = 1.0;
  SparsityPattern pattern = SparsityPattern::Element;
  Provenance provenance = Provenance::RST;
  /// Per weight layer, one byte (0/1) per mask group.
  std::vector<std::vector<std::uint8_t>> masks;
  /// Batch-norm running statistics per norm site.
  std::vector<NormStats> norm_stats;
  /// Dense weights when they are not reconstructible from `init`.
  std::optional<std::vector<Tensor>> weights;

  friend bool operator==(const TicketCheckpoint&, const TicketCheckpoint&) = default;
};

TicketCheckpoint make_checkpoint(const Network& net, Provenance provenance, bool include_weights);

/// Rebuilds the network: weights from the payload when present, else from
/// `init`; then installs masks and norm statistics.
Network restore(const TicketCheckpoint& checkpoint);

/// Binary layout, all integers little-endian:
///
///   "RSTK"                      magic
///   u16 version (1)
///   u32 len, bytes              network id
///   u8 init method, u64 seed    InitSpec
///   f64 remaining ratio
///   u8 pattern, u8 provenance
///   u32 layers; per layer: u32 groups, ceil(groups/8) bytes
///                                bitset, bit i of the layer at byte i/8, bit i%8
///   u32 sites; per site: u32 channels, f64 mean[channels], f64 var[channels]
///   u8 has_weights; if 1: u32 tensors; per tensor: u32 rank, u32 dims[rank], f64 values
///   u32 CRC-32 of every preceding byte
std::vector<std::uint8_t> encode_checkpoint(const TicketCheckpoint& checkpoint);
TicketCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const TicketCheckpoint& checkpoint, const std::filesystem::path& path);
TicketCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Bytes of the packed mask bitsets alone.
std::size_t bitset_bytes(const TicketCheckpoint& checkpoint);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace rst
