#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "snnlm/attention.hpp"
#include "snnlm/neuron.hpp"
#include "snnlm/opcount.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

enum class Nonlinearity { relu, gelu };

inline constexpr double kLayerNormEps = 1e-5;

// Spiking-side settings carried in every checkpoint header.
struct SnnSettings {
  std::int64_t time_window = 64;
  double threshold = 1.0;
  double leak_tau = 0.0;  // 0 = pure IF
  ResetMode reset = ResetMode::subtract;
  double encoder_clip = 0.0;          // 0 = measure at conversion
  double score_threshold_scale = 0.0; // 0 = sqrt(d_head)
  // Deterministic per-channel initial membrane offsets inside the spiking
  // forward. Spreads spike phases so coincidence rates track rate products
  // instead of locking to the shared 1/T grid.
  bool phase_dither = false;

  NeuronParams qkv_params() const;
  NeuronParams score_params(std::int64_t d_head) const;
  NeuronParams mlp_params() const;
};

struct TransformerConfig {
  std::int64_t n_layer = 4;
  std::int64_t n_head = 4;
  std::int64_t d_model = 128;
  std::int64_t block_size = 64;
  std::int64_t vocab_size = 0;
  std::int64_t ffn_mult = 4;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  SnnSettings snn;

  std::int64_t d_head() const { return d_model / n_head; }
  std::int64_t d_ff() const { return ffn_mult * d_model; }
  void validate() const;
};

enum class CheckpointKind { analog, spiking };

// Named tensor store with a fixed on-disk order. Tensors are kept
// float32-exact in memory so save/load round-trips bit-identically.
struct ModelCheckpoint {
  TransformerConfig config;
  CheckpointKind kind = CheckpointKind::analog;
  std::string report_ref;
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  Tensor& tensor(const std::string& name);
  const Tensor& tensor(const std::string& name) const;
  void add(const std::string& name, Tensor t);
  void validate() const;
  std::uint64_t checksum_excluding(std::span<const std::string> name_substrings_excluded) const;
};

// Bit-exact checkpoint file format: "NTCK" magic, u32 LE format version,
// u64 LE header length, JSON header (config, kind, report ref, tensor table),
// then raw little-endian float32 tensor data in header order.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

ModelCheckpoint init_analog_model(const TransformerConfig& cfg, std::uint64_t seed);

// Analog forward pass with optional full activation trace (used by the
// conversion calibration, the fine-tuning teacher and tests).
struct AnnTrace {
  Tensor emb;  // residual stream at entry (n, C)
  struct Layer {
    Tensor scores;        // (H, n, n) softmax rows
    Tensor att_out;       // branch after W_o (n, C)
    Tensor x_after_attn;  // (n, C)
    Tensor mlp_pre;       // (n, d_ff) pre-nonlinearity
    Tensor mlp_hidden;    // (n, d_ff) post-nonlinearity
    Tensor mlp_out;       // (n, C)
    Tensor x_after_mlp;   // (n, C)
  };
  std::vector<Layer> layers;
  Tensor logits;  // (n, vocab)
};

Tensor forward_ann(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens);
AnnTrace forward_ann_traced(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens);

// Token + positional embedding (the residual stream entry, absolute units).
Tensor embed_tokens(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens);

// Row-wise LayerNorm with the library epsilon.
Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// Spiking forward pass over the checkpoint's (or an overridden) time window.
struct SnnTrace {
  std::vector<Tensor> as_rates;      // per layer (H, n, n)
  std::vector<Tensor> mlp_rates;     // per layer (n, d_ff)
  std::vector<Tensor> block_inputs;  // per layer (T*n, d_model) stream currents
  std::vector<std::int64_t> spike_counts_per_position;  // summed over all trains
};
Tensor forward_snn(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens,
                   std::int64_t time_window = 0, OpCounters* ops = nullptr,
                   SnnTrace* trace = nullptr);

// Dispatches on checkpoint kind.
Tensor forward_logits(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens,
                      std::int64_t time_window = 0);

struct TrainSettings {
  std::int64_t steps = 2000;
  double lr = 1e-3;
  std::int64_t batch = 8;
  std::uint64_t seed = 1;
  double grad_clip = 1.0;
  std::int64_t warmup_steps = 100;
  std::int64_t log_every = 0;  // 0 = quiet
};

struct TrainResult {
  ModelCheckpoint ckpt;
  std::vector<double> loss_history;
  double final_train_loss = 0.0;
  double val_loss = 0.0;
};

TrainResult train_baseline(std::span<const std::int32_t> train_ids,
                           std::span<const std::int32_t> val_ids, const TransformerConfig& cfg,
                           const TrainSettings& ts);

double validation_loss(const ModelCheckpoint& ckpt, std::span<const std::int32_t> val_ids,
                       std::int64_t max_windows = 0);

struct GenerateSettings {
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};
std::vector<std::int32_t> generate(const ModelCheckpoint& ckpt,
                                   std::span<const std::int32_t> prompt, std::int64_t n_tokens,
                                   const GenerateSettings& gs);

}  // namespace snnlm
