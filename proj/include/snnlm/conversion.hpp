#pragma once

#include <string>
#include <vector>

#include "snnlm/model.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

struct ConversionSettings {
  bool use_percentile = false;  // 99.9th percentile of positive activations instead of max
  double percentile = 99.9;
  double ln_eps = kLayerNormEps;
  std::uint64_t calib_seed = 0;  // recorded in the report
  std::string calib_id;
  // Scale the Q/K/V projections by their calibration max magnitudes so spike
  // rates stay in the representable range; the scales are absorbed exactly by
  // the per-layer score threshold and the output projection. Off by default:
  // the baseline methodology carries the attention weights verbatim.
  bool normalize_qkv = false;
};

struct LayerScale {
  std::string name;
  double a = 0.0;       // calibration max positive activation
  double s_norm = 0.0;  // normalization factor (= a)
};

struct LnFoldRecord {
  std::string name;
  std::vector<double> mean, var;  // per-channel calibration statistics
  double max_deviation = 0.0;     // vs true LayerNorm through the next linear layer
  std::int64_t var_floor_channels = 0;
};

struct ConversionReport {
  double encoder_clip = 0.0;
  std::string calib_id;
  std::uint64_t seed = 0;
  std::int64_t calib_sequences = 0;
  std::int64_t block_size = 0;
  std::vector<LayerScale> layers;
  std::vector<LnFoldRecord> ln_folds;
  std::vector<std::pair<std::string, double>> residual_gains;

  std::string to_json() const;
  void save(const std::string& path) const;
};

// Per-channel LayerNorm fold: scale_j = gamma_j / sqrt(var_j + eps),
// shift_j = beta_j - scale_j * mean_j. Channels with var = 0 fall back to
// gamma / sqrt(eps) and are flagged.
struct LnFold {
  std::vector<double> scale, shift;
  std::int64_t var_floor_channels = 0;
};
LnFold fold_layernorm(std::span<const double> gamma, std::span<const double> beta,
                      std::span<const double> calib_mean, std::span<const double> calib_var,
                      double eps);

// Two-scale weight normalization: W~ = W * s_prev / s_cur, b~ = b / s_cur.
struct NormalizedLayer {
  Tensor w, b;
};
NormalizedLayer normalize_layer(const Tensor& w, const Tensor& b, double s_prev, double s_cur);

// ------------------------------------------------------------- transformer

// Calibration maxima at the transformer probe points (per layer: attention
// residual join, MLP pre-activation, MLP residual join).
std::vector<LayerScale> collect_max_activations(const ModelCheckpoint& ann,
                                                const std::vector<std::vector<std::int32_t>>& calib,
                                                const ConversionSettings& cs = {});

struct ConvertResult {
  ModelCheckpoint snn;
  ConversionReport report;
};
ConvertResult convert(const ModelCheckpoint& ann,
                      const std::vector<std::vector<std::int32_t>>& calib,
                      const ConversionSettings& cs = {});

// ------------------------------------------------------------------- MLPs
// Small all-ReLU MLP used by the conversion equivalence checks; weights are
// (out, in), applied as x * W^T + b.

struct MlpModel {
  std::vector<Tensor> w;
  std::vector<Tensor> b;

  struct Trace {
    std::vector<Tensor> pre;  // pre-nonlinearity per layer
    std::vector<Tensor> act;  // post-ReLU per layer
  };
  Trace forward(const Tensor& x) const;
};

std::vector<double> collect_max_activations(const MlpModel& mlp, const Tensor& x,
                                            const ConversionSettings& cs = {});

struct MlpConvertResult {
  MlpModel snn;
  std::vector<LayerScale> scales;
  double s0 = 1.0;
};
MlpConvertResult convert_mlp(const MlpModel& mlp, const Tensor& x, double s0 = 1.0,
                             const ConversionSettings& cs = {});

// IF simulation of the converted MLP on constant input currents x / s0;
// returns the spike rates of every layer.
std::vector<Tensor> spiking_mlp_rates(const MlpConvertResult& conv, const Tensor& x,
                                      std::int64_t time_window);

}  // namespace snnlm
