#pragma once

#include "mccl/config.hpp"
#include "mccl/fka.hpp"
#include "mccl/segnet.hpp"
#include "mccl/serialize.hpp"

namespace mccl {

// Checkpoint file layout (little-endian):
//   magic "MCKP" | version u32 | config_hash u64 | epoch u32 | run_seed u64
//   | precision tag u32 | 8 parameter tensors (enc w1,b1,w2,b2,w3,b3; dec w,b)
//   | prototype bank: eta f64, Z u32, initialized u8[Z], prototypes tensor {Z,C}
inline constexpr char kCheckpointMagic[4] = {'M', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::uint64_t run_seed = 0;
  SegNetParams<S> params;
  PrototypeBank<S> bank;
};

template <typename S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& c) {
  std::ofstream os(path, std::ios::binary);
  check(os.is_open(), "cannot open for write: " + path);
  os.write(kCheckpointMagic, 4);
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint64_t>(os, c.config_hash);
  write_pod<std::uint32_t>(os, c.epoch);
  write_pod<std::uint64_t>(os, c.run_seed);
  write_pod<std::uint32_t>(os, dtype_tag<S>());
  for (const auto* t : param_list(c.params)) write_tensor(os, *t);
  write_pod<double>(os, static_cast<double>(c.bank.eta));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.bank.num_classes()));
  for (auto f : c.bank.initialized) write_pod<std::uint8_t>(os, f);
  write_tensor(os, c.bank.prototypes);
  check(static_cast<bool>(os), "write failed: " + path);
}

struct CheckpointHeader {
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::uint64_t run_seed = 0;
  std::uint32_t precision_tag = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  check(static_cast<bool>(is) && std::memcmp(magic, kCheckpointMagic, 4) == 0,
        "checkpoint: bad magic");
  check(read_pod<std::uint32_t>(is) == kCheckpointVersion, "checkpoint: unsupported version");
  CheckpointHeader h;
  h.config_hash = read_pod<std::uint64_t>(is);
  h.epoch = read_pod<std::uint32_t>(is);
  h.run_seed = read_pod<std::uint64_t>(is);
  h.precision_tag = read_pod<std::uint32_t>(is);
  return h;
}

inline CheckpointHeader peek_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.is_open(), "cannot open: " + path);
  return read_checkpoint_header(is);
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.is_open(), "cannot open: " + path);
  const CheckpointHeader h = read_checkpoint_header(is);
  check(h.precision_tag == dtype_tag<S>(), "checkpoint: precision mismatch");
  Checkpoint<S> c;
  c.config_hash = h.config_hash;
  c.epoch = h.epoch;
  c.run_seed = h.run_seed;
  for (auto* t : param_list(c.params)) *t = read_tensor<S>(is);
  const double eta = read_pod<double>(is);
  const auto z = read_pod<std::uint32_t>(is);
  c.bank.eta = static_cast<S>(eta);
  c.bank.initialized.resize(z);
  for (auto& f : c.bank.initialized) f = read_pod<std::uint8_t>(is);
  c.bank.prototypes = read_tensor<S>(is);
  check(c.bank.prototypes.extent(0) == z, "checkpoint: bank shape mismatch");
  return c;
}

}  // namespace mccl
