#include "snnlm/coding.hpp"

#include <algorithm>
#include <cmath>

namespace snnlm {

void EncodingConfig::validate() const {
  if (T < 1) fail(Errc::invalid_argument, "EncodingConfig: T must be >= 1");
  if (!(clip > 0.0)) fail(Errc::invalid_argument, "EncodingConfig: clip must be > 0");
}

SpikeTrain rate_encode(const Tensor& x, const EncodingConfig& cfg) {
  cfg.validate();
  if (!x.all_finite()) fail(Errc::non_finite, "rate_encode: non-finite input");

  std::vector<std::int64_t> dims;
  dims.push_back(cfg.T);
  for (auto d : x.shape()) dims.push_back(d);
  Tensor currents(dims);
  const std::size_t frame = x.size();
  for (std::int64_t t = 0; t < cfg.T; ++t) {
    double* dst = currents.data() + static_cast<std::size_t>(t) * frame;
    for (std::size_t i = 0; i < frame; ++i)
      dst[i] = std::clamp(x.data()[i] / cfg.clip, -1.0, 1.0);
  }
  NeuronParams np;  // bipolar IF, v_th = 1, reset by subtraction
  return run_window(np, currents).spikes;
}

Tensor decode_rates(const SpikeTrain& s) {
  if (s.dims.empty()) fail(Errc::invalid_argument, "decode_rates: empty spike train");
  std::vector<std::int64_t> frame_shape(s.dims.begin() + 1, s.dims.end());
  Tensor rates(frame_shape);
  const std::size_t frame = s.frame_size();
  const std::int64_t T = s.T();
  for (std::int64_t t = 0; t < T; ++t) {
    const std::int8_t* f = s.frame(t);
    for (std::size_t i = 0; i < frame; ++i) rates.raw()[i] += f[i];
  }
  for (auto& r : rates.raw()) r /= static_cast<double>(T);
  return rates;
}

}  // namespace snnlm
