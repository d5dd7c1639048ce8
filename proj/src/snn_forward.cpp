#include <cmath>
#include <cstring>

#include "snnlm/coding.hpp"
#include "snnlm/model.hpp"

namespace snnlm {

namespace {

// Adds bias to every row of a (rows, cols) tensor.
void add_bias_rows(Tensor& t, const Tensor& b) {
  const std::int64_t rows = t.rows(), cols = t.cols();
  for (std::int64_t i = 0; i < rows; ++i) {
    double* r = t.data() + i * cols;
    for (std::int64_t j = 0; j < cols; ++j) r[j] += b[j];
  }
}

// Per-channel initial membranes spreading spike phases. The offset repeats
// per position so every sequence position sees the same channel phase.
void apply_phase_dither(NeuronLayerState& state, std::int64_t n, std::int64_t width,
                        std::uint64_t tag) {
  const double th = state.params.v_th * 0.97;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < width; ++j) {
      const double u = unit_hash(tag, static_cast<std::uint64_t>(j));
      state.v[static_cast<std::size_t>(i * width + j)] =
          state.params.bipolar ? (2.0 * u - 1.0) * th : u * th;
    }
}

// Runs a persistent-state spiking layer over currents laid out (T*n, width);
// the frame at step t is rows [t*n, (t+1)*n).
SpikeTrain run_layer(const NeuronParams& np, const Tensor& currents, std::int64_t T,
                     std::int64_t n, std::int64_t width, bool dither = false,
                     std::uint64_t tag = 0) {
  SpikeTrain out({T, n, width});
  NeuronLayerState state(static_cast<std::size_t>(n * width), np);
  if (dither) apply_phase_dither(state, n, width, tag);
  const std::size_t frame = static_cast<std::size_t>(n * width);
  for (std::int64_t t = 0; t < T; ++t) {
    std::span<const double> cur(currents.data() + static_cast<std::size_t>(t) * frame, frame);
    neuron_step(state, cur, std::span<std::int8_t>(out.frame(t), frame));
  }
  return out;
}

std::uint64_t count_nonzero(const Tensor& t) {
  std::uint64_t nnz = 0;
  for (double v : t.raw()) nnz += (v != 0.0);
  return nnz;
}

void add_position_spike_counts(const SpikeTrain& s, std::int64_t n, std::int64_t pos_dim_stride,
                               std::vector<std::int64_t>& counts) {
  // pos_dim_stride = elements per position within one frame
  const std::int64_t T = s.T();
  const std::size_t frame = s.frame_size();
  for (std::int64_t t = 0; t < T; ++t) {
    const std::int8_t* f = s.frame(t);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < pos_dim_stride; ++j)
        counts[i] += (f[i * pos_dim_stride + j] != 0);
    (void)frame;
  }
}

}  // namespace

Tensor forward_snn(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens,
                   std::int64_t time_window, OpCounters* ops, SnnTrace* trace) {
  if (ckpt.kind != CheckpointKind::spiking)
    fail(Errc::incompatible_kind, "forward_snn: analog checkpoint passed (use forward_ann)");
  ckpt.config.validate();
  if (tokens.empty()) fail(Errc::invalid_argument, "forward_snn: empty token sequence");
  if (static_cast<std::int64_t>(tokens.size()) > ckpt.config.block_size)
    fail(Errc::invalid_argument, "forward_snn: sequence longer than block_size");
  for (auto t : tokens)
    if (t < 0 || t >= ckpt.config.vocab_size)
      fail(Errc::invalid_argument, "forward_snn: token id out of vocabulary range");

  const TransformerConfig& cfg = ckpt.config;
  const std::int64_t T = time_window > 0 ? time_window : cfg.snn.time_window;
  const std::int64_t n = static_cast<std::int64_t>(tokens.size());
  const std::int64_t C = cfg.d_model;
  const std::int64_t F = cfg.d_ff();
  const int H = static_cast<int>(cfg.n_head);
  const std::int64_t dh = cfg.d_head();

  if (trace) {
    trace->as_rates.clear();
    trace->mlp_rates.clear();
    trace->block_inputs.clear();
    trace->spike_counts_per_position.assign(static_cast<std::size_t>(n), 0);
  }

  // encoder: embedding scaled by the recorded clip, rate coded
  const double clip = ckpt.tensor("snn.encoder_clip")[0];
  if (!(clip > 0.0)) fail(Errc::bad_checkpoint, "forward_snn: invalid encoder clip");
  Tensor x0 = embed_tokens(ckpt, tokens);
  EncodingConfig ec;
  ec.T = T;
  ec.clip = clip;
  SpikeTrain enc = rate_encode(x0, ec);
  if (ops) {
    ops->spike_opportunities += enc.values.size();
    ops->spikes_emitted += enc.count_nonzero();
  }
  if (trace) add_position_spike_counts(enc, n, C, trace->spike_counts_per_position);

  // residual stream as per-step currents, flattened (T*n, C)
  Tensor stream({T * n, C});
  for (std::size_t i = 0; i < enc.values.size(); ++i)
    stream.raw()[i] = static_cast<double>(enc.values[i]);
  bool stream_ternary = true;

  const NeuronParams np_qkv = cfg.snn.qkv_params();
  const NeuronParams np_mlp = cfg.snn.mlp_params();

  Tensor cur_q, cur_k, cur_v, cur_m, branch;
  Tensor qs_d, dense;
  for (std::int64_t l = 0; l < cfg.n_layer; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    if (trace) trace->block_inputs.push_back(stream);

    // ---- spiking self-attention
    if (ops) {
      const std::uint64_t nnz = count_nonzero(stream);
      ops->ac += 3 * nnz * static_cast<std::uint64_t>(C);
      if (!stream_ternary) ops->projection_mul += 3 * nnz * static_cast<std::uint64_t>(C);
    }
    matmul(stream, ckpt.tensor(p + "attn.w_q"), cur_q);
    matmul(stream, ckpt.tensor(p + "attn.w_k"), cur_k);
    matmul(stream, ckpt.tensor(p + "attn.w_v"), cur_v);
    add_bias_rows(cur_q, ckpt.tensor(p + "attn.b_q"));
    add_bias_rows(cur_k, ckpt.tensor(p + "attn.b_k"));
    add_bias_rows(cur_v, ckpt.tensor(p + "attn.b_v"));
    const bool dither = cfg.snn.phase_dither;
    const std::uint64_t tagbase = static_cast<std::uint64_t>(l) * 8;
    SpikeTrain q = run_layer(np_qkv, cur_q, T, n, C, dither, tagbase + 1);
    SpikeTrain k = run_layer(np_qkv, cur_k, T, n, C, dither, tagbase + 2);
    SpikeTrain v = run_layer(np_qkv, cur_v, T, n, C, dither, tagbase + 3);
    if (ops)
      for (const SpikeTrain* s : {&q, &k, &v}) {
        ops->spike_opportunities += s->values.size();
        ops->spikes_emitted += s->count_nonzero();
      }
    if (trace) {
      add_position_spike_counts(q, n, C, trace->spike_counts_per_position);
      add_position_spike_counts(k, n, C, trace->spike_counts_per_position);
      add_position_spike_counts(v, n, C, trace->spike_counts_per_position);
    }

    NeuronParams np_as = cfg.snn.score_params(dh);
    if (ckpt.has(p + "attn.score_vth")) np_as.v_th = ckpt.tensor(p + "attn.score_vth")[0];
    std::vector<double> as_init;
    if (dither) {
      as_init.resize(static_cast<std::size_t>(H) * n * n);
      for (std::size_t i = 0; i < as_init.size(); ++i)
        as_init[i] = unit_hash(tagbase + 4, i) * np_as.v_th * 0.97;
    }
    SsaScoresResult sc =
        ssa_scores(q, k, H, np_as, /*causal=*/true, ops, dither ? &as_init : nullptr);
    if (trace) {
      trace->as_rates.push_back(sc.rates);
      // AS spikes attributed to the query position
      const std::size_t grid = static_cast<std::size_t>(n) * n;
      for (std::int64_t t = 0; t < T; ++t) {
        const std::int8_t* f = sc.as.frame(t);
        for (int h = 0; h < H; ++h)
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j)
              trace->spike_counts_per_position[i] += (f[h * grid + i * n + j] != 0);
      }
    }

    Tensor gathered = ssa_gather(sc.as, v, H, ops);
    if (ops) ops->ac += count_nonzero(gathered) * static_cast<std::uint64_t>(C);
    Tensor flat_gather({T * n, C});
    flat_gather.raw() = gathered.raw();
    matmul(flat_gather, ckpt.tensor(p + "attn.w_o"), branch);

    const double gain1 = ckpt.tensor(p + "attn.res_gain")[0];
    for (std::size_t i = 0; i < stream.size(); ++i)
      stream.raw()[i] = gain1 * stream.raw()[i] + branch.raw()[i];
    stream_ternary = false;

    // ---- spiking feed-forward
    matmul(stream, ckpt.tensor(p + "mlp.w_in"), cur_m);
    add_bias_rows(cur_m, ckpt.tensor(p + "mlp.b_in"));
    SpikeTrain hidden = run_layer(np_mlp, cur_m, T, n, F, dither, tagbase + 5);
    if (trace) {
      Tensor rates({n, F});
      for (std::int64_t t = 0; t < T; ++t) {
        const std::int8_t* f = hidden.frame(t);
        for (std::size_t i = 0; i < rates.size(); ++i) rates.raw()[i] += f[i];
      }
      for (auto& r : rates.raw()) r /= static_cast<double>(T);
      trace->mlp_rates.push_back(std::move(rates));
      add_position_spike_counts(hidden, n, F, trace->spike_counts_per_position);
    }
    if (qs_d.size() != hidden.values.size()) qs_d = Tensor({T * n, F});
    for (std::size_t i = 0; i < hidden.values.size(); ++i)
      qs_d.raw()[i] = static_cast<double>(hidden.values[i]);
    matmul(qs_d, ckpt.tensor(p + "mlp.w_out"), branch);

    const double gain2 = ckpt.tensor(p + "mlp.res_gain")[0];
    for (std::size_t i = 0; i < stream.size(); ++i)
      stream.raw()[i] = gain2 * stream.raw()[i] + branch.raw()[i];
  }

  // analog head: time-accumulated mean, rescaled by the final s_norm, then
  // the true final LayerNorm and the unembedding
  Tensor zbar({n, C});
  for (std::int64_t t = 0; t < T; ++t) {
    const double* f = stream.data() + static_cast<std::size_t>(t) * n * C;
    for (std::size_t i = 0; i < zbar.size(); ++i) zbar.raw()[i] += f[i];
  }
  const double final_scale = ckpt.tensor("snn.final_scale")[0];
  for (auto& v2 : zbar.raw()) v2 *= final_scale / static_cast<double>(T);

  Tensor normed = layernorm_forward(zbar, ckpt.tensor("lnf.g"), ckpt.tensor("lnf.b"));
  Tensor logits;
  matmul_nt(normed, ckpt.tensor("unembed"), logits);
  return logits;
}

}  // namespace snnlm
