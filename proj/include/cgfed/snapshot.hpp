#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgfed/tensor.hpp"

namespace cgfed {

// Snapshot store: per-client, per-round gradient canvases captured during a
// clean federated run, persisted in the fixed CGFG container.
//
// File layout (all little-endian):
//   magic "CGFG" (4 bytes), version u16, rows u32, cols u32, count u32,
//   then per record: client_id u32, round u32, payload f32 row-major
//   (rows*cols values).

struct BadMagicError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TruncatedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kStoreVersion = 1;

struct Snapshot {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  std::vector<float> payload;  // rows*cols, row-major
};

struct SnapshotStore {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<Snapshot> records;

  // Converts to the 32-bit at-rest representation; (client_id, round) pairs
  // must be unique.
  void append(std::uint32_t client_id, std::uint32_t round, const Tensor& canvas);
  Tensor canvas(size_t i) const;
  size_t size() const { return records.size(); }
};

void write_store(const std::string& path, const SnapshotStore& store);
SnapshotStore read_store(const std::string& path);

struct SplitSpec {
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
};

struct SplitResult {
  std::vector<size_t> train;
  std::vector<size_t> test;
};

// Deterministic disjoint/exhaustive split over record indices.
SplitResult split(const SnapshotStore& store, const SplitSpec& spec);

std::vector<Tensor> canvases_of(const SnapshotStore& store, const std::vector<size_t>& idx);

struct RoundStats {
  std::uint32_t round = 0;
  long count = 0;  // pooled element count
  double min = 0, max = 0, mean = 0, stddev = 0;
};

// One row per round, pooled over every canvas element recorded in it.
std::vector<RoundStats> snapshot_stats(const SnapshotStore& store);

// Generic named-tensor container for checkpoints ("CGTC"): magic, version
// u16, count u32, then per record: name (u16 len + bytes), dtype u8
// (0 = f32, 1 = f64), ndim u8, dims u32 each, payload little-endian.
// Checkpoints are written as f64 so a reload reproduces values exactly.
struct NamedTensor {
  std::string name;
  Tensor value;
};

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors,
                   bool as_f32 = false);
std::vector<NamedTensor> read_tensors(std::istream& is);

// Little-endian scalar IO shared by the container formats.
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
std::uint16_t get_u16(std::istream& is, const char* what);
std::uint32_t get_u32(std::istream& is, const char* what);

}  // namespace cgfed
