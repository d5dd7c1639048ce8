#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace snnlm {

// Error categories. The CLI maps each category to a distinct exit code and
// prints a machine-readable "error: code=<name> ..." line.
enum class Errc {
  invalid_argument,
  shape_mismatch,
  non_finite,
  dead_layer,
  io,
  bad_checkpoint,
  incompatible_kind,
  config,
  corpus,
  divergence,
  unseen_character,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& message);

// FNV-1a over raw bytes; used for parameter-isolation checksums.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Splits one user-facing seed into independent per-purpose streams.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

// Deterministic hash to [0, 1); used for reproducible phase offsets.
double unit_hash(std::uint64_t tag, std::uint64_t index);

}  // namespace snnlm
