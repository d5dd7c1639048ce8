#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "snnlm/tensor.hpp"

namespace snnlm {

enum class ResetMode { subtract, zero };

struct NeuronParams {
  double v_th = 1.0;
  std::optional<double> leak_tau;  // absent = pure IF
  ResetMode reset_mode = ResetMode::subtract;
  bool bipolar = true;

  void validate() const;
  // Per-step membrane retention: 1 for IF, (1 - 1/tau) forward-Euler for LIF.
  double leak_factor() const;
};

// Ternary spike tensor over (t, frame...). dims[0] is the time window T.
struct SpikeTrain {
  std::vector<std::int64_t> dims;  // dims[0] = T
  std::vector<std::int8_t> values;

  SpikeTrain() = default;
  explicit SpikeTrain(std::vector<std::int64_t> d);

  std::int64_t T() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t frame_size() const;
  std::int8_t* frame(std::int64_t t) { return values.data() + static_cast<std::size_t>(t) * frame_size(); }
  const std::int8_t* frame(std::int64_t t) const {
    return values.data() + static_cast<std::size_t>(t) * frame_size();
  }
  std::size_t count_nonzero() const;
};

// Membrane state of one spiking layer; v is flattened over the layer frame.
struct NeuronLayerState {
  std::vector<double> v;
  NeuronParams params;

  NeuronLayerState() = default;
  NeuronLayerState(std::size_t frame, const NeuronParams& p) : v(frame, 0.0), params(p) { p.validate(); }
};

// One simulation step: integrate `current`, emit spikes, apply reset.
// Writes the ternary spikes into `spikes_out` (same length as state.v).
void neuron_step(NeuronLayerState& state, std::span<const double> current,
                 std::span<std::int8_t> spikes_out);

// Runs T steps from a fresh state. currents has shape (T, rest...). Returns the
// spike train plus the signed rate (spike count / T) per frame element.
struct WindowResult {
  SpikeTrain spikes;
  Tensor rates;  // shape = currents.shape()[1:]
};
WindowResult run_window(const NeuronParams& params, const Tensor& currents);

void reset(NeuronLayerState& state);

}  // namespace snnlm
