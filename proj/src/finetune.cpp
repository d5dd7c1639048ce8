#include "snnlm/finetune.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

namespace snnlm {

void FinetuneConfig::validate() const {
  if (!(lr >= 0.0)) fail(Errc::invalid_argument, "FinetuneConfig: lr must be >= 0");
  if (steps < 1) fail(Errc::invalid_argument, "FinetuneConfig: steps must be >= 1");
  if (batch < 1) fail(Errc::invalid_argument, "FinetuneConfig: batch must be >= 1");
  if (!(slope_k > 0.0)) fail(Errc::invalid_argument, "FinetuneConfig: slope_k must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    fail(Errc::invalid_argument, "FinetuneConfig: momentum must be in [0, 1)");
}

double surrogate_derivative(double v, double v_th, double k, SurrogateKind kind) {
  const double x = v - v_th;
  if (kind == SurrogateKind::fast_sigmoid) {
    const double d = 1.0 + k * std::abs(x);
    return 1.0 / (d * d);
  }
  return (k / std::numbers::pi) / (1.0 + (k * x) * (k * x));
}

namespace {

// Smooth primitive whose derivative is the surrogate.
double smooth_spike(double v, double v_th, double k, SurrogateKind kind) {
  const double x = v - v_th;
  if (kind == SurrogateKind::fast_sigmoid) return x / (1.0 + k * std::abs(x));
  return std::atan(k * x) / std::numbers::pi;
}

double bipolar_surrogate(double v, double v_th, double k, SurrogateKind kind) {
  return surrogate_derivative(v, v_th, k, kind) + surrogate_derivative(v, -v_th, k, kind);
}

double bipolar_smooth(double v, double v_th, double k, SurrogateKind kind) {
  return smooth_spike(v, v_th, k, kind) + smooth_spike(v, -v_th, k, kind);
}

}  // namespace

double attention_alignment_loss(const Tensor& asa_scores, const Tensor& ssa_rates, bool causal) {
  if (asa_scores.shape() != ssa_rates.shape() || asa_scores.ndim() != 3)
    fail(Errc::shape_mismatch, "attention_alignment_loss: score shapes differ");
  const std::int64_t H = asa_scores.dim(0);
  const std::int64_t n = asa_scores.dim(1);
  double sum = 0.0;
  std::int64_t count = 0;
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t limit = causal ? i + 1 : n;
      for (std::int64_t j = 0; j < limit; ++j) {
        const std::size_t idx = static_cast<std::size_t>((h * n + i) * n + j);
        const double d = asa_scores[idx] - ssa_rates[idx];
        sum += d * d;
        ++count;
      }
    }
  return sum / static_cast<double>(count);
}

SsaUnrollResult ssa_alignment_unroll(const SsaBlock& block, const Tensor& z, std::int64_t T,
                                     std::int64_t n, const Tensor& teacher, double slope_k,
                                     SurrogateKind kind, bool relaxed, bool compute_grads) {
  const std::int64_t C = block.wq.cols();
  const int H = block.n_heads;
  const std::int64_t dh = C / H;
  if (z.ndim() != 2 || z.rows() != T * n || z.cols() != block.wq.rows())
    fail(Errc::shape_mismatch, "ssa_alignment_unroll: input stream shape mismatch");
  if (teacher.ndim() != 3 || teacher.dim(0) != H || teacher.dim(1) != n || teacher.dim(2) != n)
    fail(Errc::shape_mismatch, "ssa_alignment_unroll: teacher score shape mismatch");
  if (block.np_qkv.reset_mode != ResetMode::subtract ||
      block.np_as.reset_mode != ResetMode::subtract)
    fail(Errc::invalid_argument, "ssa_alignment_unroll: only reset-by-subtraction is supported");

  const double th_q = block.np_qkv.v_th;
  const double th_as = block.np_as.v_th;
  const double lam_q = block.np_qkv.leak_factor();
  const double lam_as = block.np_as.leak_factor();
  const std::size_t qk_frame = static_cast<std::size_t>(n * C);
  const std::size_t as_frame = static_cast<std::size_t>(H) * n * n;

  // projections for all steps at once
  Tensor uq, uk;
  matmul(z, block.wq, uq);
  matmul(z, block.wk, uk);
  for (std::int64_t r = 0; r < T * n; ++r)
    for (std::int64_t j = 0; j < C; ++j) {
      uq.at(r, j) += block.bq[j];
      uk.at(r, j) += block.bk[j];
    }

  // forward scan with caches
  Tensor vpre_q({T, n, C}), vpre_k({T, n, C});
  Tensor sq({T, n, C}), sk({T, n, C});
  Tensor vpre_as({T, H, n, n}), sas({T, H, n, n});
  std::vector<double> vq(qk_frame, 0.0), vk(qk_frame, 0.0), vas(as_frame, 0.0);
  if (!block.vq0.empty()) {
    if (block.vq0.size() != qk_frame || block.vk0.size() != qk_frame ||
        block.vas0.size() != as_frame)
      fail(Errc::shape_mismatch, "ssa_alignment_unroll: initial membrane size mismatch");
    vq = block.vq0;
    vk = block.vk0;
    vas = block.vas0;
  }

  SsaUnrollResult res;
  res.rates = Tensor({H, n, n});

  for (std::int64_t t = 0; t < T; ++t) {
    double* vpq = vpre_q.data() + t * static_cast<std::int64_t>(qk_frame);
    double* vpk = vpre_k.data() + t * static_cast<std::int64_t>(qk_frame);
    double* sqt = sq.data() + t * static_cast<std::int64_t>(qk_frame);
    double* skt = sk.data() + t * static_cast<std::int64_t>(qk_frame);
    const double* uqt = uq.data() + t * static_cast<std::int64_t>(qk_frame);
    const double* ukt = uk.data() + t * static_cast<std::int64_t>(qk_frame);
    for (std::size_t i = 0; i < qk_frame; ++i) {
      const double pq = lam_q * vq[i] + uqt[i];
      const double pk = lam_q * vk[i] + ukt[i];
      vpq[i] = pq;
      vpk[i] = pk;
      double s_q, s_k;
      if (relaxed) {
        s_q = bipolar_smooth(pq, th_q, slope_k, kind);
        s_k = bipolar_smooth(pk, th_q, slope_k, kind);
      } else {
        s_q = pq >= th_q ? 1.0 : (pq <= -th_q ? -1.0 : 0.0);
        s_k = pk >= th_q ? 1.0 : (pk <= -th_q ? -1.0 : 0.0);
      }
      sqt[i] = s_q;
      skt[i] = s_k;
      vq[i] = pq - th_q * s_q;
      vk[i] = pk - th_q * s_k;
    }

    double* vpa = vpre_as.data() + t * static_cast<std::int64_t>(as_frame);
    double* sat = sas.data() + t * static_cast<std::int64_t>(as_frame);
    for (int h = 0; h < H; ++h) {
      const std::int64_t off = h * dh;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          const std::size_t idx = (static_cast<std::size_t>(h) * n + i) * n + j;
          double cur = 0.0;
          if (j <= i) {
            const double* a = sqt + i * C + off;
            const double* b = skt + j * C + off;
            for (std::int64_t d = 0; d < dh; ++d) cur += a[d] * b[d];
          }
          const double p = lam_as * vas[idx] + cur;
          vpa[idx] = p;
          double s;
          if (relaxed)
            s = smooth_spike(p, th_as, slope_k, kind);
          else
            s = p >= th_as ? 1.0 : 0.0;
          sat[idx] = s;
          vas[idx] = p - th_as * s;
          res.rates.raw()[idx] += s / static_cast<double>(T);
        }
    }
  }

  res.loss = attention_alignment_loss(teacher, res.rates, /*causal=*/true);
  if (!compute_grads) return res;

  // count of unmasked score entries (loss normalizer)
  const double inv_count = 1.0 / (static_cast<double>(H) * (static_cast<double>(n) * (n + 1)) / 2.0);
  const double rt = relaxed ? 1.0 : 0.0;  // reset differentiated through only in relaxed mode

  Tensor duq({T * n, C}), duk({T * n, C});
  std::vector<double> beta_q(qk_frame, 0.0), beta_k(qk_frame, 0.0), beta_as(as_frame, 0.0);
  std::vector<double> dsq(qk_frame), dsk(qk_frame);

  for (std::int64_t t = T - 1; t >= 0; --t) {
    const double* vpa = vpre_as.data() + t * static_cast<std::int64_t>(as_frame);
    const double* sqt = sq.data() + t * static_cast<std::int64_t>(qk_frame);
    const double* skt = sk.data() + t * static_cast<std::int64_t>(qk_frame);
    std::fill(dsq.begin(), dsq.end(), 0.0);
    std::fill(dsk.begin(), dsk.end(), 0.0);

    for (int h = 0; h < H; ++h) {
      const std::int64_t off = h * dh;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j <= i; ++j) {
          const std::size_t idx = (static_cast<std::size_t>(h) * n + i) * n + j;
          const double ds = 2.0 * (res.rates.raw()[idx] - teacher.raw()[idx]) * inv_count /
                            static_cast<double>(T);
          const double g = surrogate_derivative(vpa[idx], th_as, slope_k, kind);
          const double dvpre = ds * g + beta_as[idx] * (1.0 - rt * th_as * g);
          beta_as[idx] = lam_as * dvpre;
          // distribute through the AND-accumulate
          const double* a = sqt + i * C + off;
          const double* b = skt + j * C + off;
          double* dq = dsq.data() + i * C + off;
          double* dk = dsk.data() + j * C + off;
          for (std::int64_t d = 0; d < dh; ++d) {
            dq[d] += dvpre * b[d];
            dk[d] += dvpre * a[d];
          }
        }
    }

    const double* vpq = vpre_q.data() + t * static_cast<std::int64_t>(qk_frame);
    const double* vpk = vpre_k.data() + t * static_cast<std::int64_t>(qk_frame);
    double* duqt = duq.data() + t * static_cast<std::int64_t>(qk_frame);
    double* dukt = duk.data() + t * static_cast<std::int64_t>(qk_frame);
    for (std::size_t i = 0; i < qk_frame; ++i) {
      const double gq = bipolar_surrogate(vpq[i], th_q, slope_k, kind);
      const double gk = bipolar_surrogate(vpk[i], th_q, slope_k, kind);
      const double dvq = dsq[i] * gq + beta_q[i] * (1.0 - rt * th_q * gq);
      const double dvk = dsk[i] * gk + beta_k[i] * (1.0 - rt * th_q * gk);
      duqt[i] = dvq;
      dukt[i] = dvk;
      beta_q[i] = lam_q * dvq;
      beta_k[i] = lam_q * dvk;
    }
  }

  matmul_tn(z, duq, res.d_wq);
  matmul_tn(z, duk, res.d_wk);
  return res;
}

// ---------------------------------------------------------------- fine-tune

FinetuneResult finetune_ssa(const ModelCheckpoint& snn, const ModelCheckpoint& ann,
                            std::span<const std::int32_t> data_ids, const FinetuneConfig& cfg) {
  cfg.validate();
  if (snn.kind != CheckpointKind::spiking)
    fail(Errc::incompatible_kind, "finetune_ssa: first checkpoint must be spiking");
  if (ann.kind != CheckpointKind::analog)
    fail(Errc::incompatible_kind, "finetune_ssa: second checkpoint must be analog");
  if (snn.config.n_layer != ann.config.n_layer || snn.config.d_model != ann.config.d_model ||
      snn.config.n_head != ann.config.n_head || snn.config.vocab_size != ann.config.vocab_size)
    fail(Errc::incompatible_kind, "finetune_ssa: spiking checkpoint was not derived from this baseline");
  const std::int64_t block = snn.config.block_size;
  if (static_cast<std::int64_t>(data_ids.size()) < block + 1)
    fail(Errc::corpus, "finetune_ssa: data too small for one window");

  FinetuneResult res;
  res.ckpt = snn;
  ModelCheckpoint& ckpt = res.ckpt;
  const std::int64_t L = snn.config.n_layer;
  const std::int64_t T = cfg.time_window > 0 ? cfg.time_window : snn.config.snn.time_window;
  const std::int64_t dh = snn.config.d_head();

  const NeuronParams np_qkv = snn.config.snn.qkv_params();

  struct Slot {
    Tensor* w;
    Tensor g, m;
  };
  std::vector<Slot> slots;  // 3 per layer: w_q, w_k, w_v
  for (std::int64_t l = 0; l < L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".attn.";
    for (const char* wn : {"w_q", "w_k", "w_v"}) {
      Tensor* w = &ckpt.tensor(p + wn);
      slots.push_back({w, Tensor(w->shape()), Tensor(w->shape())});
    }
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, 11));
  std::uniform_int_distribution<std::size_t> offset_dist(0, data_ids.size() - block - 1);

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (auto& s : slots) s.g.fill(0.0);
    double step_loss = 0.0;

    for (std::int64_t b = 0; b < cfg.batch; ++b) {
      const std::size_t off = offset_dist(rng);
      std::span<const std::int32_t> seq(data_ids.data() + off, block);

      AnnTrace teacher = forward_ann_traced(ann, seq);
      SnnTrace trace;
      forward_snn(ckpt, seq, T, nullptr, &trace);

      for (std::int64_t l = 0; l < L; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".attn.";
        SsaBlock blockp;
        blockp.wq = ckpt.tensor(p + "w_q");
        blockp.bq = ckpt.tensor(p + "b_q");
        blockp.wk = ckpt.tensor(p + "w_k");
        blockp.bk = ckpt.tensor(p + "b_k");
        blockp.n_heads = static_cast<int>(snn.config.n_head);
        blockp.np_qkv = np_qkv;
        blockp.np_as = snn.config.snn.score_params(dh);
        if (ckpt.has(p + "score_vth")) blockp.np_as.v_th = ckpt.tensor(p + "score_vth")[0];
        if (snn.config.snn.phase_dither) {
          const std::int64_t C = snn.config.d_model;
          const std::uint64_t tagbase = static_cast<std::uint64_t>(l) * 8;
          const double thq = blockp.np_qkv.v_th * 0.97;
          blockp.vq0.resize(static_cast<std::size_t>(block * C));
          blockp.vk0.resize(static_cast<std::size_t>(block * C));
          for (std::int64_t i = 0; i < block; ++i)
            for (std::int64_t j = 0; j < C; ++j) {
              blockp.vq0[static_cast<std::size_t>(i * C + j)] =
                  (2.0 * unit_hash(tagbase + 1, static_cast<std::uint64_t>(j)) - 1.0) * thq;
              blockp.vk0[static_cast<std::size_t>(i * C + j)] =
                  (2.0 * unit_hash(tagbase + 2, static_cast<std::uint64_t>(j)) - 1.0) * thq;
            }
          blockp.vas0.resize(static_cast<std::size_t>(snn.config.n_head) * block * block);
          for (std::size_t i = 0; i < blockp.vas0.size(); ++i)
            blockp.vas0[i] = unit_hash(tagbase + 4, i) * blockp.np_as.v_th * 0.97;
        }
        SsaUnrollResult u =
            ssa_alignment_unroll(blockp, trace.block_inputs[l], T, block, teacher.layers[l].scores,
                                 cfg.slope_k, cfg.kind, /*relaxed=*/false, /*compute_grads=*/true);
        const double scale = 1.0 / static_cast<double>(L * cfg.batch);
        step_loss += u.loss * scale;
        for (std::size_t i = 0; i < u.d_wq.size(); ++i) {
          slots[l * 3 + 0].g.raw()[i] += u.d_wq[i] * scale;
          slots[l * 3 + 1].g.raw()[i] += u.d_wk[i] * scale;
        }
        // W_v is trainable but the alignment loss does not depend on it: its
        // gradient is identically zero
      }
    }

    if (!std::isfinite(step_loss))
      fail(Errc::divergence, "finetune_ssa: loss diverged; reduce finetune.lr");

    for (auto& s : slots) {
      for (std::size_t i = 0; i < s.g.size(); ++i) {
        s.m.raw()[i] = cfg.momentum * s.m[i] + s.g[i];
        const double w = snap_f32(s.w->raw()[i] - cfg.lr * s.m[i]);
        if (!std::isfinite(w) || std::abs(w) > 1e30)
          fail(Errc::divergence, "finetune_ssa: weights diverged; reduce finetune.lr");
        s.w->raw()[i] = w;
      }
    }
    res.loss_curve.push_back(step_loss);
  }

  if (res.loss_curve.size() >= 2 && res.loss_curve.back() > res.loss_curve.front()) {
    res.improved = false;
    std::cerr << "warning: alignment loss did not improve (" << res.loss_curve.front() << " -> "
              << res.loss_curve.back() << ")\n";
  }
  return res;
}

void save_loss_curve_csv(const std::vector<double>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(Errc::io, "cannot write loss curve: " + path);
  f << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, curve[i]);
    f << buf;
  }
}

// ---------------------------------------------------------------- gradcheck

double relaxed_grad_check(const SsaBlock& block, const Tensor& z, std::int64_t T, std::int64_t n,
                          const Tensor& teacher, double slope_k, SurrogateKind kind, double eps,
                          int n_samples, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3))
    fail(Errc::invalid_argument, "relaxed_grad_check: eps must be in [1e-6, 1e-3]");
  SsaUnrollResult base = ssa_alignment_unroll(block, z, T, n, teacher, slope_k, kind,
                                              /*relaxed=*/true, /*compute_grads=*/true);
  std::mt19937_64 rng(seed);
  const std::size_t n_params = block.wq.size();
  std::uniform_int_distribution<std::size_t> pick(0, n_params - 1);
  std::uniform_int_distribution<int> which(0, 1);

  SsaBlock pert = block;
  double max_rel = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const std::size_t idx = pick(rng);
    const bool use_q = which(rng) == 0;
    Tensor& w = use_q ? pert.wq : pert.wk;
    const double orig = w.raw()[idx];
    w.raw()[idx] = orig + eps;
    const double lp = ssa_alignment_unroll(pert, z, T, n, teacher, slope_k, kind, true, false).loss;
    w.raw()[idx] = orig - eps;
    const double lm = ssa_alignment_unroll(pert, z, T, n, teacher, slope_k, kind, true, false).loss;
    w.raw()[idx] = orig;
    const double fd = (lp - lm) / (2.0 * eps);
    const double an = use_q ? base.d_wq.raw()[idx] : base.d_wk.raw()[idx];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    max_rel = std::max(max_rel, std::abs(fd - an) / denom);
  }
  return max_rel;
}

double relaxed_grad_check_toy(double eps, std::uint64_t seed, int n_samples) {
  const std::int64_t C = 16, n = 6, T = 8;
  const int H = 2;
  std::mt19937_64 rng(derive_seed(seed, 21));
  SsaBlock block;
  block.wq = Tensor::randn({C, C}, rng, 0.3);
  block.bq = Tensor::randn({C}, rng, 0.05);
  block.wk = Tensor::randn({C, C}, rng, 0.3);
  block.bk = Tensor::randn({C}, rng, 0.05);
  block.n_heads = H;
  block.np_qkv.v_th = 1.0;
  block.np_as.v_th = std::sqrt(static_cast<double>(C / H));
  block.np_as.bipolar = false;

  Tensor z = Tensor::randn({T * n, C}, rng, 0.8);
  Tensor teacher({H, n, n});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t i = 0; i < n; ++i) {
      double sum = 0.0;
      std::vector<double> row(i + 1);
      for (std::int64_t j = 0; j <= i; ++j) {
        row[j] = u(rng);
        sum += row[j];
      }
      for (std::int64_t j = 0; j <= i; ++j)
        teacher.raw()[(h * n + i) * n + j] = row[j] / sum;
    }
  return relaxed_grad_check(block, z, T, n, teacher, 25.0, SurrogateKind::fast_sigmoid, eps,
                            n_samples, derive_seed(seed, 22));
}

}  // namespace snnlm
