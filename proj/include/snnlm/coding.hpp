#pragma once

#include "snnlm/neuron.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

enum class EncodingScheme { current_driven };

struct EncodingConfig {
  std::int64_t T = 16;
  EncodingScheme scheme = EncodingScheme::current_driven;
  double clip = 1.0;  // max encodable magnitude

  void validate() const;
};

// Encodes real values to a ternary spike train by driving a bipolar IF layer
// with the constant current clamp(x/clip, -1, 1). decode_rates reads back the
// signed rate; the per-element error is at most 1/T and values on the k/T grid
// round-trip exactly.
SpikeTrain rate_encode(const Tensor& x, const EncodingConfig& cfg);

Tensor decode_rates(const SpikeTrain& s);

}  // namespace snnlm
