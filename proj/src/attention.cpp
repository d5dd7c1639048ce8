#include "snnlm/attention.hpp"

#include <cmath>
#include <vector>

namespace snnlm {

void AttentionWeights::validate() const {
  if (w_q.ndim() != 2 || w_k.ndim() != 2 || w_v.ndim() != 2 || w_o.ndim() != 2)
    fail(Errc::shape_mismatch, "AttentionWeights: expected 2-D weights");
  const std::int64_t c = w_q.cols();
  for (const Tensor* t : {&w_q, &w_k, &w_v, &w_o}) {
    if (t->rows() != c || t->cols() != c)
      fail(Errc::shape_mismatch, "AttentionWeights: weights must be (d_model, d_model)");
    if (!t->all_finite()) fail(Errc::non_finite, "AttentionWeights: non-finite weight");
  }
  if (n_heads < 1 || c % n_heads != 0)
    fail(Errc::invalid_argument, "AttentionWeights: d_model must be divisible by n_heads");
}

namespace {

// Row-wise masked softmax over row[0..n), keeping only k <= q_pos when causal.
// Masked entries come out exactly 0.
void softmax_row(double* row, std::int64_t n, std::int64_t limit, OpCounters* ops) {
  double mx = -1e300;
  for (std::int64_t j = 0; j < limit; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::int64_t j = 0; j < limit; ++j) {
    row[j] = std::exp(row[j] - mx);
    if (ops) ops->exp_ops++;
    sum += row[j];
  }
  for (std::int64_t j = 0; j < limit; ++j) row[j] /= sum;
  for (std::int64_t j = limit; j < n; ++j) row[j] = 0.0;
}

}  // namespace

AsaResult asa_forward(const Tensor& x, const AttentionWeights& w, bool causal, OpCounters* ops) {
  w.validate();
  if (x.ndim() != 2 || x.cols() != w.d_model())
    fail(Errc::shape_mismatch, "asa_forward: input must be (positions, d_model)");
  if (x.rows() < 1) fail(Errc::invalid_argument, "asa_forward: need at least one position");
  if (!x.all_finite()) fail(Errc::non_finite, "asa_forward: non-finite input");

  const std::int64_t n = x.rows();
  const std::int64_t c = w.d_model();
  const std::int64_t dh = w.d_head();
  const int H = w.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q, k, v;
  if (!ops) {
    matmul(x, w.w_q, q);
    matmul(x, w.w_k, k);
    matmul(x, w.w_v, v);
  } else {
    q = Tensor({n, c});
    k = Tensor({n, c});
    v = Tensor({n, c});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j) {
        double aq = 0.0, ak = 0.0, av = 0.0;
        for (std::int64_t m = 0; m < c; ++m) {
          const double xi = x.at(i, m);
          aq += xi * w.w_q.at(m, j);
          ak += xi * w.w_k.at(m, j);
          av += xi * w.w_v.at(m, j);
        }
        ops->mac += 3 * static_cast<std::uint64_t>(c);
        q.at(i, j) = aq;
        k.at(i, j) = ak;
        v.at(i, j) = av;
      }
  }

  AsaResult r;
  r.scores = Tensor({H, n, n});
  Tensor heads({n, c});  // concatenated per-head outputs

  for (int h = 0; h < H; ++h) {
    const std::int64_t off = h * dh;
    double* sc = r.scores.data() + static_cast<std::size_t>(h) * n * n;
    // dense QK^T over the head slice (masked entries computed then dropped)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double a = 0.0;
        for (std::int64_t d = 0; d < dh; ++d) a += q.at(i, off + d) * k.at(j, off + d);
        if (ops) ops->mac += static_cast<std::uint64_t>(dh);
        sc[i * n + j] = a * scale;
      }
    for (std::int64_t i = 0; i < n; ++i)
      softmax_row(sc + i * n, n, causal ? i + 1 : n, ops);
    // dense scores * V (masked scores are exactly 0)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t d = 0; d < dh; ++d) {
        double a = 0.0;
        for (std::int64_t j = 0; j < n; ++j) a += sc[i * n + j] * v.at(j, off + d);
        if (ops) ops->mac += static_cast<std::uint64_t>(n);
        heads.at(i, off + d) = a;
      }
  }

  if (!ops) {
    matmul(heads, w.w_o, r.output);
  } else {
    r.output = Tensor({n, c});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j) {
        double a = 0.0;
        for (std::int64_t m = 0; m < c; ++m) a += heads.at(i, m) * w.w_o.at(m, j);
        ops->mac += static_cast<std::uint64_t>(c);
        r.output.at(i, j) = a;
      }
  }
  return r;
}

namespace detail {

void count_train_stats(const SpikeTrain& s, OpCounters* ops) {
  if (!ops) return;
  ops->spike_opportunities += s.values.size();
  ops->spikes_emitted += s.count_nonzero();
}

void score_step_currents(const std::int8_t* q, const std::int8_t* k, std::int64_t n,
                         int n_heads, std::int64_t d_head, bool causal, double* out,
                         OpCounters* ops) {
  const std::int64_t c = n_heads * d_head;
  for (int h = 0; h < n_heads; ++h) {
    const std::int64_t off = h * d_head;
    double* cur = out + static_cast<std::size_t>(h) * n * n;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t limit = causal ? i + 1 : n;
      const std::int8_t* qi = q + i * c + off;
      for (std::int64_t j = 0; j < n; ++j) {
        double a = 0.0;
        if (j < limit) {
          const std::int8_t* kj = k + j * c + off;
          // sign-gated adds only: no multiply on this path
          for (std::int64_t d = 0; d < d_head; ++d) {
            const std::int8_t qs = qi[d];
            const std::int8_t ks = kj[d];
            if (qs == 0 || ks == 0) continue;
            a += (qs == ks) ? 1.0 : -1.0;
            if (ops) ops->ac++;
          }
        }
        cur[i * n + j] = a;
      }
    }
  }
}

void gather_step(const std::int8_t* as, const std::int8_t* v, std::int64_t n, int n_heads,
                 std::int64_t d_head, double* out, OpCounters* ops) {
  const std::int64_t c = n_heads * d_head;
  for (int h = 0; h < n_heads; ++h) {
    const std::int64_t off = h * d_head;
    const std::int8_t* ash = as + static_cast<std::size_t>(h) * n * n;
    for (std::int64_t i = 0; i < n; ++i) {
      double* oi = out + i * c + off;
      for (std::int64_t j = 0; j < n; ++j) {
        const std::int8_t g = ash[i * n + j];
        if (g == 0) continue;
        const std::int8_t* vj = v + j * c + off;
        for (std::int64_t d = 0; d < d_head; ++d) {
          const std::int8_t vs = vj[d];
          if (vs == 0) continue;
          oi[d] += (g > 0) == (vs > 0) ? 1.0 : -1.0;
          if (ops) ops->ac++;
        }
      }
    }
  }
}

}  // namespace detail

SsaQkv ssa_qkv(const SpikeTrain& s_in, const AttentionWeights& w, const NeuronParams& np,
               OpCounters* ops) {
  w.validate();
  np.validate();
  if (s_in.dims.size() != 3) fail(Errc::shape_mismatch, "ssa_qkv: expected (T, positions, channels)");
  const std::int64_t T = s_in.T();
  const std::int64_t n = s_in.dims[1];
  const std::int64_t c_in = s_in.dims[2];
  const std::int64_t c = w.d_model();
  if (c_in != w.w_q.rows()) fail(Errc::shape_mismatch, "ssa_qkv: input channels do not match weights");

  detail::count_train_stats(s_in, ops);

  SsaQkv r;
  for (SpikeTrain* t : {&r.q, &r.k, &r.v}) *t = SpikeTrain({T, n, c});
  NeuronLayerState sq(static_cast<std::size_t>(n * c), np);
  NeuronLayerState sk(static_cast<std::size_t>(n * c), np);
  NeuronLayerState sv(static_cast<std::size_t>(n * c), np);

  std::vector<double> cur_q, cur_k, cur_v;
  for (std::int64_t t = 0; t < T; ++t) {
    cur_q.assign(static_cast<std::size_t>(n * c), 0.0);
    cur_k.assign(static_cast<std::size_t>(n * c), 0.0);
    cur_v.assign(static_cast<std::size_t>(n * c), 0.0);
    const std::int8_t* in = s_in.frame(t);
    // event-driven accumulate: each nonzero input spike adds (or subtracts)
    // one weight row into each projection
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t m = 0; m < c_in; ++m) {
        const std::int8_t s = in[i * c_in + m];
        if (s == 0) continue;
        const double sign = s > 0 ? 1.0 : -1.0;
        const double* wq = w.w_q.data() + m * c;
        const double* wk = w.w_k.data() + m * c;
        const double* wv = w.w_v.data() + m * c;
        double* oq = cur_q.data() + i * c;
        double* ok = cur_k.data() + i * c;
        double* ov = cur_v.data() + i * c;
        if (sign > 0)
          for (std::int64_t j = 0; j < c; ++j) {
            oq[j] += wq[j];
            ok[j] += wk[j];
            ov[j] += wv[j];
          }
        else
          for (std::int64_t j = 0; j < c; ++j) {
            oq[j] -= wq[j];
            ok[j] -= wk[j];
            ov[j] -= wv[j];
          }
        if (ops) ops->ac += 3 * static_cast<std::uint64_t>(c);
      }
    neuron_step(sq, cur_q, std::span<std::int8_t>(r.q.frame(t), r.q.frame_size()));
    neuron_step(sk, cur_k, std::span<std::int8_t>(r.k.frame(t), r.k.frame_size()));
    neuron_step(sv, cur_v, std::span<std::int8_t>(r.v.frame(t), r.v.frame_size()));
  }
  if (ops) {
    detail::count_train_stats(r.q, ops);
    detail::count_train_stats(r.k, ops);
    detail::count_train_stats(r.v, ops);
  }
  return r;
}

SsaScoresResult ssa_scores(const SpikeTrain& q, const SpikeTrain& k, int n_heads,
                           const NeuronParams& np_as, bool causal, OpCounters* ops,
                           const std::vector<double>* v_init) {
  np_as.validate();
  if (q.dims.size() != 3 || k.dims.size() != 3 || q.dims != k.dims)
    fail(Errc::shape_mismatch, "ssa_scores: Q and K trains must share (T, positions, channels)");
  const std::int64_t T = q.T();
  const std::int64_t n = q.dims[1];
  const std::int64_t c = q.dims[2];
  if (n_heads < 1 || c % n_heads != 0)
    fail(Errc::invalid_argument, "ssa_scores: channels must be divisible by n_heads");
  const std::int64_t dh = c / n_heads;

  SsaScoresResult r;
  r.as = SpikeTrain({T, n_heads, n, n});
  const std::size_t frame = r.as.frame_size();
  NeuronLayerState state(frame, np_as);
  if (v_init) {
    if (v_init->size() != frame) fail(Errc::shape_mismatch, "ssa_scores: v_init size mismatch");
    state.v = *v_init;
  }
  std::vector<double> cur(frame);
  std::vector<double> counts(frame, 0.0);
  for (std::int64_t t = 0; t < T; ++t) {
    std::fill(cur.begin(), cur.end(), 0.0);
    detail::score_step_currents(q.frame(t), k.frame(t), n, n_heads, dh, causal, cur.data(), ops);
    neuron_step(state, cur, std::span<std::int8_t>(r.as.frame(t), frame));
    const std::int8_t* s = r.as.frame(t);
    for (std::size_t i = 0; i < frame; ++i) counts[i] += s[i];
  }
  r.rates = Tensor({n_heads, n, n});
  for (std::size_t i = 0; i < frame; ++i) r.rates.raw()[i] = counts[i] / static_cast<double>(T);
  if (ops) detail::count_train_stats(r.as, ops);
  return r;
}

Tensor ssa_gather(const SpikeTrain& as, const SpikeTrain& v, int n_heads, OpCounters* ops) {
  if (as.dims.size() != 4 || v.dims.size() != 3)
    fail(Errc::shape_mismatch, "ssa_gather: expected AS (T,H,N,N) and V (T,N,C)");
  const std::int64_t T = as.T();
  const std::int64_t n = as.dims[2];
  const std::int64_t c = v.dims[2];
  if (as.dims[1] != n_heads || as.dims[3] != n || v.T() != T || v.dims[1] != n)
    fail(Errc::shape_mismatch, "ssa_gather: AS and V shapes are inconsistent");
  if (c % n_heads != 0) fail(Errc::invalid_argument, "ssa_gather: channels not divisible by heads");
  const std::int64_t dh = c / n_heads;

  Tensor out({T, n, c});
  for (std::int64_t t = 0; t < T; ++t)
    detail::gather_step(as.frame(t), v.frame(t), n, n_heads, dh,
                        out.data() + static_cast<std::size_t>(t) * n * c, ops);
  return out;
}

Tensor ssa_output(const SpikeTrain& as, const SpikeTrain& v, const Tensor& w_o, int n_heads,
                  OpCounters* ops) {
  Tensor gathered = ssa_gather(as, v, n_heads, ops);
  const std::int64_t T = gathered.dim(0);
  const std::int64_t n = gathered.dim(1);
  const std::int64_t c = gathered.dim(2);
  if (w_o.ndim() != 2 || w_o.rows() != c)
    fail(Errc::shape_mismatch, "ssa_output: W_o shape does not match head outputs");
  if (ops) {
    // integer gather currents drive the projection: one accumulate per output
    // per nonzero input element
    std::uint64_t nnz = 0;
    for (double g : gathered.raw()) nnz += (g != 0.0);
    ops->ac += nnz * static_cast<std::uint64_t>(w_o.cols());
  }
  Tensor flat_in({T * n, c});
  flat_in.raw() = gathered.raw();
  Tensor flat_out;
  matmul(flat_in, w_o, flat_out);
  Tensor out({T, n, w_o.cols()});
  out.raw() = flat_out.raw();
  return out;
}

}  // namespace snnlm
