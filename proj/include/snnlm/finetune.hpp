#pragma once

#include <span>
#include <vector>

#include "snnlm/model.hpp"
#include "snnlm/neuron.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

enum class SurrogateKind { fast_sigmoid, arctan };

struct FinetuneConfig {
  double lr = 1e-3;
  std::int64_t steps = 100;
  std::int64_t batch = 2;
  double slope_k = 25.0;
  SurrogateKind kind = SurrogateKind::fast_sigmoid;
  std::uint64_t seed = 0;
  std::int64_t time_window = 0;  // 0 = checkpoint's snn.time_window
  double momentum = 0.9;

  void validate() const;
};

// Smooth stand-in for the spike derivative; strictly positive, peaked at v_th.
double surrogate_derivative(double v, double v_th, double k, SurrogateKind kind);

// Mean squared difference between analog softmax scores and spiking score
// rates over the unmasked (head, query, key) entries.
double attention_alignment_loss(const Tensor& asa_scores, const Tensor& ssa_rates, bool causal);

// One spiking-attention block (folded weights) for the alignment unroll.
// The v*0 vectors optionally seed the initial membranes (phase dithering);
// empty means fresh zero state. They must match the spiking forward exactly.
struct SsaBlock {
  Tensor wq, bq, wk, bk;
  int n_heads = 1;
  NeuronParams np_qkv, np_as;
  std::vector<double> vq0, vk0, vas0;
};

// Unrolls the Q/K spike generation and the AS score layer over T steps on the
// given input currents, evaluates the alignment loss against `teacher`, and
// (optionally) backpropagates through time. In spiking mode the spike
// nonlinearity derivative is replaced by the surrogate and the reset is
// detached; in relaxed mode every spike is the smooth primitive of the
// surrogate and the reset is differentiated through.
struct SsaUnrollResult {
  double loss = 0.0;
  Tensor rates;  // (H, n, n)
  Tensor d_wq, d_wk;
};
SsaUnrollResult ssa_alignment_unroll(const SsaBlock& block, const Tensor& z, std::int64_t T,
                                     std::int64_t n, const Tensor& teacher, double slope_k,
                                     SurrogateKind kind, bool relaxed, bool compute_grads);

struct FinetuneResult {
  ModelCheckpoint ckpt;
  std::vector<double> loss_curve;
  bool improved = true;
};
FinetuneResult finetune_ssa(const ModelCheckpoint& snn, const ModelCheckpoint& ann,
                            std::span<const std::int32_t> data_ids, const FinetuneConfig& cfg);

void save_loss_curve_csv(const std::vector<double>& curve, const std::string& path);

// Analytic gradients of the relaxed model vs central finite differences over
// sampled parameters; returns the maximum relative error.
double relaxed_grad_check(const SsaBlock& block, const Tensor& z, std::int64_t T, std::int64_t n,
                          const Tensor& teacher, double slope_k, SurrogateKind kind, double eps,
                          int n_samples, std::uint64_t seed);

// Seeded toy instance used by the CLI gradcheck command and the test suites.
double relaxed_grad_check_toy(double eps, std::uint64_t seed, int n_samples = 48);

}  // namespace snnlm
