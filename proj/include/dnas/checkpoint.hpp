#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "dnas/protocol.hpp"
#include "dnas/supernet.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// Layout (all integers little-endian):
///   "DNASCKPT" | u32 version | u64 len, config text | u64 blob count |
///   per blob, in name order: u64 len, name | u8 kind |
///     kind 0: u32 rank, i64 dims[rank], f64 values[numel]
///     kind 1: u64 len, raw bytes
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Blob {
    bool is_bytes = false;
    Tensor tensor;
    std::string bytes;
  };

  std::string config_text;

  void put(const std::string& name, const Tensor& t);
  void put_bytes(const std::string& name, std::string bytes);
  void put_i64(const std::string& name, std::int64_t v);

  bool has(const std::string& name) const { return blobs_.count(name) != 0; }
  const Tensor& tensor(const std::string& name) const;
  const std::string& bytes(const std::string& name) const;
  std::int64_t i64(const std::string& name) const;
  const std::map<std::string, Blob>& blobs() const { return blobs_; }

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& data);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, Blob> blobs_;
};

/// Weights, logits, norm statistics and (if given) optimizer, stream and counter state.
Checkpoint capture(Supernet& net, const TrainState* state, const std::string& config_text, std::uint64_t seed = 0);
/// Throws IoError on missing or mis-shaped entries.
void restore(Supernet& net, TrainState* state, const Checkpoint& ckpt);

}  // namespace dnas
