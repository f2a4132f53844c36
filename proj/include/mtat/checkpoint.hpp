#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtat/optim.hpp"
#include "mtat/param_set.hpp"

namespace mtat {

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i64 = 3 };

/// Single-file container:
///   "MTAT" u16 version
///   32-byte config digest, u64 iteration, u32+bytes RNG state
///   u32 count of (u32+name, f64) scalars, u32 count of (u32+name, u32+text) strings
///   u32 count of tensors: u16+name, u8 dtype, u8 rank, rank x u64 dims, raw payload
/// All integers and payloads are little-endian.
struct Checkpoint {
  struct Entry {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  std::array<std::uint8_t, 32> config_digest{};
  std::uint64_t iteration = 0;
  std::string rng_state;
  std::map<std::string, double> scalars;
  std::map<std::string, std::string> texts;
  std::vector<Entry> entries;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t);
  template <typename T>
  Tensor<T> get(const std::string& name) const;
  bool has(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  double scalar(const std::string& name) const;

  /// Entries "<prefix>.<param name>" in ParamSet order.
  void put_params(const std::string& prefix, const ParamSet<float>& ps);
  /// Fills `into`, whose structure must match what was stored.
  void get_params(const std::string& prefix, ParamSet<float>& into) const;

  void put_optimizer(const std::string& prefix, const Optimizer<float>& opt, const ParamSet<float>& ps);
  void get_optimizer(const std::string& prefix, Optimizer<float>& opt, const ParamSet<float>& ps) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
/// `source` names the origin in error messages.
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

/// Writes `path`.tmp then renames it over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::array<std::uint8_t, 32> sha256(const std::string& text);
std::string hex(const std::array<std::uint8_t, 32>& digest);

}  // namespace mtat
