#include "snnlm/neuron.hpp"

#include <cmath>

namespace snnlm {

// Absolute slack on threshold comparisons. Accumulating a current of exactly
// k/T for T steps lands a hair below k in floating point; the slack keeps the
// spike count at the integer the exact dynamics produce.
static constexpr double kThresholdSlack = 1e-9;

void NeuronParams::validate() const {
  if (!(v_th > 0.0)) fail(Errc::invalid_argument, "NeuronParams: v_th must be > 0");
  if (leak_tau && !(*leak_tau > 0.0))
    fail(Errc::invalid_argument, "NeuronParams: leak_tau must be > 0 when present");
}

double NeuronParams::leak_factor() const { return leak_tau ? 1.0 - 1.0 / *leak_tau : 1.0; }

SpikeTrain::SpikeTrain(std::vector<std::int64_t> d) : dims(std::move(d)) {
  std::size_t n = 1;
  for (auto x : dims) {
    if (x < 0) fail(Errc::invalid_argument, "SpikeTrain: negative dimension");
    n *= static_cast<std::size_t>(x);
  }
  values.assign(n, 0);
}

std::size_t SpikeTrain::frame_size() const {
  if (dims.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) n *= static_cast<std::size_t>(dims[i]);
  return n;
}

std::size_t SpikeTrain::count_nonzero() const {
  std::size_t n = 0;
  for (auto v : values) n += (v != 0);
  return n;
}

void neuron_step(NeuronLayerState& state, std::span<const double> current,
                 std::span<std::int8_t> spikes_out) {
  if (current.size() != state.v.size() || spikes_out.size() != state.v.size())
    fail(Errc::shape_mismatch, "neuron_step: current shape does not match membrane state");
  const NeuronParams& p = state.params;
  const double lam = p.leak_factor();
  const double th = p.v_th;
  const double hi = th - kThresholdSlack;
  const double lo = -th + kThresholdSlack;
  for (std::size_t i = 0; i < state.v.size(); ++i) {
    const double c = current[i];
    if (!std::isfinite(c)) fail(Errc::non_finite, "neuron_step: non-finite input current");
    double v = lam * state.v[i] + c;
    std::int8_t s = 0;
    if (v >= hi)
      s = 1;
    else if (p.bipolar && v <= lo)
      s = -1;
    if (s != 0) {
      if (p.reset_mode == ResetMode::subtract)
        v -= s * th;
      else
        v = 0.0;
    }
    state.v[i] = v;
    spikes_out[i] = s;
  }
}

WindowResult run_window(const NeuronParams& params, const Tensor& currents) {
  params.validate();
  if (currents.ndim() < 1 || currents.dim(0) < 1)
    fail(Errc::invalid_argument, "run_window: time window T must be >= 1");
  const std::int64_t T = currents.dim(0);
  std::vector<std::int64_t> frame_shape(currents.shape().begin() + 1, currents.shape().end());
  std::size_t frame = currents.size() / static_cast<std::size_t>(T);

  WindowResult r;
  r.spikes = SpikeTrain(currents.shape());
  r.rates = Tensor(frame_shape);

  NeuronLayerState state(frame, params);
  std::vector<double> counts(frame, 0.0);
  for (std::int64_t t = 0; t < T; ++t) {
    std::span<const double> cur(currents.data() + static_cast<std::size_t>(t) * frame, frame);
    neuron_step(state, cur, std::span<std::int8_t>(r.spikes.frame(t), frame));
    const std::int8_t* s = r.spikes.frame(t);
    for (std::size_t i = 0; i < frame; ++i) counts[i] += s[i];
  }
  for (std::size_t i = 0; i < frame; ++i) r.rates.raw()[i] = counts[i] / static_cast<double>(T);
  return r;
}

void reset(NeuronLayerState& state) {
  for (auto& x : state.v) x = 0.0;
}

}  // namespace snnlm
