#pragma once

#include <cstdint>

namespace snnlm {

// Arithmetic-operation accounting for the energy model. Counters follow the
// event-driven semantics of the hardware being modeled: an "ac" is one
// spike-triggered accumulate, a "mac" one multiply-accumulate on the analog
// path. The score (Q*K) and value (AS*V) paths are sign-gated adds and must
// never touch the *_path_mul counters.
struct OpCounters {
  // analog self-attention
  std::uint64_t mac = 0;
  std::uint64_t exp_ops = 0;
  // spiking self-attention
  std::uint64_t ac = 0;
  std::uint64_t score_path_mul = 0;
  std::uint64_t value_path_mul = 0;
  std::uint64_t projection_mul = 0;  // projections driven by real currents
  // spike statistics over the gating trains (input, Q, K, V, AS)
  std::uint64_t spike_opportunities = 0;
  std::uint64_t spikes_emitted = 0;

  void merge(const OpCounters& o) {
    mac += o.mac;
    exp_ops += o.exp_ops;
    ac += o.ac;
    score_path_mul += o.score_path_mul;
    value_path_mul += o.value_path_mul;
    projection_mul += o.projection_mul;
    spike_opportunities += o.spike_opportunities;
    spikes_emitted += o.spikes_emitted;
  }

  double avg_spike_rate() const {
    return spike_opportunities == 0
               ? 0.0
               : static_cast<double>(spikes_emitted) / static_cast<double>(spike_opportunities);
  }
};

}  // namespace snnlm
