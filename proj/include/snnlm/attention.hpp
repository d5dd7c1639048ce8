#pragma once

#include "snnlm/neuron.hpp"
#include "snnlm/opcount.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

struct AttentionWeights {
  Tensor w_q, w_k, w_v;  // (d_model, d_model), applied as X * W
  Tensor w_o;            // (d_model, d_model)
  int n_heads = 1;

  std::int64_t d_model() const { return w_q.empty() ? 0 : w_q.cols(); }
  std::int64_t d_head() const { return d_model() / n_heads; }
  void validate() const;
};

// Analog self-attention. scores is (n_heads, N, N) with softmax rows; masked
// entries are exactly 0. With `ops` set, runs an instrumented scalar path that
// counts every multiply-accumulate and softmax exponential.
struct AsaResult {
  Tensor scores;
  Tensor output;  // (N, d_model)
};
AsaResult asa_forward(const Tensor& x, const AttentionWeights& w, bool causal,
                      OpCounters* ops = nullptr);

// Spiking Q/K/V generation: at each step the ternary input spikes drive the
// three projections (accumulate-only), and three independent spiking layers
// turn the currents into ternary trains.
struct SsaQkv {
  SpikeTrain q, k, v;  // (T, N, d_model)
};
SsaQkv ssa_qkv(const SpikeTrain& s_in, const AttentionWeights& w, const NeuronParams& np,
               OpCounters* ops = nullptr);

// Attention-score train: per step and head, the (q_pos, k_pos) current is the
// signed AND-accumulate of Q and K spikes over the head channels; one spiking
// layer over the score grid emits the AS train. Masked currents are forced to
// 0. v_init optionally seeds the score membranes (phase dithering); absent
// means a fresh all-zero state.
struct SsaScoresResult {
  SpikeTrain as;  // (T, n_heads, N, N)
  Tensor rates;   // (n_heads, N, N)
};
SsaScoresResult ssa_scores(const SpikeTrain& q, const SpikeTrain& k, int n_heads,
                           const NeuronParams& np_as, bool causal, OpCounters* ops = nullptr,
                           const std::vector<double>* v_init = nullptr);

// AS (x) V aggregation per head (integer-valued currents), heads concatenated.
Tensor ssa_gather(const SpikeTrain& as, const SpikeTrain& v, int n_heads,
                  OpCounters* ops = nullptr);

// Gather followed by the analog output projection: returns (T, N, d_model)
// currents for the next block.
Tensor ssa_output(const SpikeTrain& as, const SpikeTrain& v, const Tensor& w_o, int n_heads,
                  OpCounters* ops = nullptr);

namespace detail {

// Per-step score currents (used by ssa_scores, the SNN forward and the
// fine-tuning unroll). q, k point at one time frame (N * d_model ternary
// values); out has n_heads * N * N entries.
void score_step_currents(const std::int8_t* q, const std::int8_t* k, std::int64_t n,
                         int n_heads, std::int64_t d_head, bool causal, double* out,
                         OpCounters* ops);

// Per-step gather: out (N, d_model) += AS-gated V rows.
void gather_step(const std::int8_t* as, const std::int8_t* v, std::int64_t n, int n_heads,
                 std::int64_t d_head, double* out, OpCounters* ops);

void count_train_stats(const SpikeTrain& s, OpCounters* ops);

}  // namespace detail

}  // namespace snnlm
