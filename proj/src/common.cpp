#include "snnlm/common.hpp"

namespace snnlm {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::non_finite: return "non_finite";
    case Errc::dead_layer: return "dead_layer";
    case Errc::io: return "io";
    case Errc::bad_checkpoint: return "bad_checkpoint";
    case Errc::incompatible_kind: return "incompatible_kind";
    case Errc::config: return "config";
    case Errc::corpus: return "corpus";
    case Errc::divergence: return "divergence";
    case Errc::unseen_character: return "unseen_character";
  }
  return "unknown";
}

void fail(Errc code, const std::string& message) { throw Error(code, message); }

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  // splitmix64 over (root, stream)
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit_hash(std::uint64_t tag, std::uint64_t index) {
  return static_cast<double>(derive_seed(tag, index) >> 11) * 0x1.0p-53;
}

}  // namespace snnlm
