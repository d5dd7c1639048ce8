#include "snnlm/conversion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "snnlm/neuron.hpp"

namespace snnlm {

namespace {

using json = nlohmann::ordered_json;

// Tracks the maximum positive value (or, optionally, a high percentile of the
// positive values) seen at one probe point.
class PositiveMaxTracker {
 public:
  PositiveMaxTracker(bool percentile, double pct) : percentile_(percentile), pct_(pct) {}

  void observe(const Tensor& t) {
    for (double v : t.raw()) {
      if (v > max_) max_ = v;
      if (percentile_ && v > 0.0) samples_.push_back(v);
    }
  }

  double value(const std::string& probe) const {
    double a = max_;
    if (percentile_ && !samples_.empty()) {
      std::vector<double> s = samples_;
      const std::size_t k = std::min(
          s.size() - 1,
          static_cast<std::size_t>(pct_ / 100.0 * static_cast<double>(s.size())));
      std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
      a = s[k];
    }
    if (!(a > 0.0)) fail(Errc::dead_layer, "dead layer during calibration: " + probe);
    return a;
  }

 private:
  bool percentile_;
  double pct_;
  double max_ = 0.0;
  std::vector<double> samples_;
};

struct ChannelStats {
  std::vector<double> sum, sumsq;
  std::int64_t count = 0;

  void init(std::int64_t c) {
    sum.assign(static_cast<std::size_t>(c), 0.0);
    sumsq.assign(static_cast<std::size_t>(c), 0.0);
    count = 0;
  }
  void observe(const Tensor& t) {
    const std::int64_t n = t.rows(), c = t.cols();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j) {
        const double v = t.at(i, j);
        sum[j] += v;
        sumsq[j] += v * v;
      }
    count += n;
  }
  std::vector<double> mean() const {
    std::vector<double> m(sum.size());
    for (std::size_t j = 0; j < sum.size(); ++j) m[j] = sum[j] / static_cast<double>(count);
    return m;
  }
  std::vector<double> variance() const {
    std::vector<double> v(sum.size());
    for (std::size_t j = 0; j < sum.size(); ++j) {
      const double m = sum[j] / static_cast<double>(count);
      v[j] = std::max(0.0, sumsq[j] / static_cast<double>(count) - m * m);
    }
    return v;
  }
};

// True per-row LayerNorm (reference path for the fold-deviation metric).
Tensor true_layernorm(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
  Tensor out({x.rows(), x.cols()});
  const std::int64_t n = x.rows(), c = x.cols();
  for (std::int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = (x.at(i, j) - mean) * rstd * g[j] + b[j];
  }
  return out;
}

Tensor apply_affine(const Tensor& x, const LnFold& f) {
  Tensor out({x.rows(), x.cols()});
  for (std::int64_t i = 0; i < x.rows(); ++i)
    for (std::int64_t j = 0; j < x.cols(); ++j)
      out.at(i, j) = x.at(i, j) * f.scale[j] + f.shift[j];
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Folds an LN affine into the following linear layer (weights (in, out)):
// W'[m][j] = scale[m] * W[m][j], b'[j] = sum_m shift[m] * W[m][j].
NormalizedLayer merge_fold_into_linear(const LnFold& f, const Tensor& w) {
  NormalizedLayer r;
  r.w = Tensor({w.rows(), w.cols()});
  r.b = Tensor({w.cols()});
  for (std::int64_t m = 0; m < w.rows(); ++m)
    for (std::int64_t j = 0; j < w.cols(); ++j) {
      r.w.at(m, j) = f.scale[m] * w.at(m, j);
      r.b[j] += f.shift[m] * w.at(m, j);
    }
  return r;
}

}  // namespace

LnFold fold_layernorm(std::span<const double> gamma, std::span<const double> beta,
                      std::span<const double> calib_mean, std::span<const double> calib_var,
                      double eps) {
  const std::size_t c = gamma.size();
  if (beta.size() != c || calib_mean.size() != c || calib_var.size() != c)
    fail(Errc::shape_mismatch, "fold_layernorm: channel counts differ");
  LnFold f;
  f.scale.resize(c);
  f.shift.resize(c);
  for (std::size_t j = 0; j < c; ++j) {
    if (calib_var[j] < 0.0) fail(Errc::invalid_argument, "fold_layernorm: negative variance");
    if (calib_var[j] == 0.0) f.var_floor_channels++;
    f.scale[j] = gamma[j] / std::sqrt(calib_var[j] + eps);
    f.shift[j] = beta[j] - f.scale[j] * calib_mean[j];
  }
  return f;
}

NormalizedLayer normalize_layer(const Tensor& w, const Tensor& b, double s_prev, double s_cur) {
  if (!(s_prev > 0.0) || !(s_cur > 0.0))
    fail(Errc::invalid_argument, "normalize_layer: scales must be positive");
  NormalizedLayer r;
  r.w = w;
  const double f = s_prev / s_cur;
  for (auto& x : r.w.raw()) x *= f;
  r.b = b;
  for (auto& x : r.b.raw()) x /= s_cur;
  return r;
}

// ------------------------------------------------------------- transformer

namespace {

struct CalibStats {
  double emb_max_abs = 0.0;
  ChannelStats lnf_in;
  struct Layer {
    ChannelStats ln1_in, ln2_in;
    PositiveMaxTracker a_att, a_mlp, a_out;
    Layer(bool pct, double p) : a_att(pct, p), a_mlp(pct, p), a_out(pct, p) {}
  };
  std::vector<Layer> layers;
};

CalibStats gather_stats(const ModelCheckpoint& ann,
                        const std::vector<std::vector<std::int32_t>>& calib,
                        const ConversionSettings& cs,
                        std::vector<AnnTrace>* traces_out = nullptr) {
  CalibStats st;
  const std::int64_t C = ann.config.d_model;
  st.lnf_in.init(C);
  for (std::int64_t l = 0; l < ann.config.n_layer; ++l) {
    st.layers.emplace_back(cs.use_percentile, cs.percentile);
    st.layers.back().ln1_in.init(C);
    st.layers.back().ln2_in.init(C);
  }
  for (const auto& seq : calib) {
    AnnTrace tr = forward_ann_traced(ann, seq);
    for (double v : tr.emb.raw()) st.emb_max_abs = std::max(st.emb_max_abs, std::abs(v));
    const Tensor* stream = &tr.emb;
    for (std::int64_t l = 0; l < ann.config.n_layer; ++l) {
      auto& ls = st.layers[l];
      const AnnTrace::Layer& lay = tr.layers[l];
      ls.ln1_in.observe(*stream);
      ls.a_att.observe(lay.x_after_attn);
      ls.ln2_in.observe(lay.x_after_attn);
      ls.a_mlp.observe(lay.mlp_pre);
      ls.a_out.observe(lay.x_after_mlp);
      stream = &lay.x_after_mlp;
    }
    st.lnf_in.observe(*stream);
    if (traces_out) traces_out->push_back(std::move(tr));
  }
  return st;
}

}  // namespace

std::vector<LayerScale> collect_max_activations(const ModelCheckpoint& ann,
                                                const std::vector<std::vector<std::int32_t>>& calib,
                                                const ConversionSettings& cs) {
  if (calib.empty()) fail(Errc::invalid_argument, "collect_max_activations: empty calibration batch");
  CalibStats st = gather_stats(ann, calib, cs);
  std::vector<LayerScale> out;
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const double a1 = st.layers[l].a_att.value(p + "attn.out");
    const double a2 = st.layers[l].a_mlp.value(p + "mlp.hidden");
    const double a3 = st.layers[l].a_out.value(p + "mlp.out");
    out.push_back({p + "attn.out", a1, a1});
    out.push_back({p + "mlp.hidden", a2, a2});
    out.push_back({p + "mlp.out", a3, a3});
  }
  return out;
}

ConvertResult convert(const ModelCheckpoint& ann,
                      const std::vector<std::vector<std::int32_t>>& calib,
                      const ConversionSettings& cs) {
  if (ann.kind != CheckpointKind::analog)
    fail(Errc::incompatible_kind, "convert: expected an analog checkpoint");
  if (ann.config.nonlinearity != Nonlinearity::relu)
    fail(Errc::invalid_argument,
         "convert: checkpoint uses a GeLU feed-forward; retrain the baseline with "
         "model.nonlinearity=relu to make it convertible");
  if (calib.empty()) fail(Errc::invalid_argument, "convert: empty calibration batch");
  ann.validate();

  std::vector<AnnTrace> traces;
  CalibStats st = gather_stats(ann, calib, cs, &traces);

  const std::int64_t L = ann.config.n_layer;
  const double v_th = ann.config.snn.threshold;
  const double clip =
      ann.config.snn.encoder_clip > 0.0 ? ann.config.snn.encoder_clip : st.emb_max_abs;
  if (!(clip > 0.0)) fail(Errc::dead_layer, "convert: embedding scale is not positive");

  ConvertResult res;
  ConversionReport& rep = res.report;
  rep.encoder_clip = clip;
  rep.calib_id = cs.calib_id;
  rep.seed = cs.calib_seed;
  rep.calib_sequences = static_cast<std::int64_t>(calib.size());
  rep.block_size = ann.config.block_size;

  ModelCheckpoint& snn = res.snn;
  snn.config = ann.config;
  snn.config.snn.encoder_clip = clip;
  snn.kind = CheckpointKind::spiking;
  snn.add("wte", ann.tensor("wte"));
  snn.add("wpe", ann.tensor("wpe"));
  snn.add("snn.encoder_clip", Tensor::full({1}, snap_f32(clip)));

  double sigma = clip;  // running residual-stream scale
  const Tensor no_bias_c = Tensor({ann.config.d_model});
  for (std::int64_t l = 0; l < L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto& ls = st.layers[l];

    // LN1 folded into the (verbatim) Q/K/V weights
    LnFold f1 = fold_layernorm(ann.tensor(p + "ln1.g").raw(), ann.tensor(p + "ln1.b").raw(),
                               ls.ln1_in.mean(), ls.ln1_in.variance(), cs.ln_eps);
    double dev1 = 0.0;
    {
      for (const AnnTrace& tr : traces) {
        const Tensor& x = l == 0 ? tr.emb : tr.layers[l - 1].x_after_mlp;
        Tensor folded = apply_affine(x, f1);
        Tensor truth = true_layernorm(x, ann.tensor(p + "ln1.g"), ann.tensor(p + "ln1.b"), cs.ln_eps);
        Tensor a, b;
        for (const char* wn : {"attn.w_q", "attn.w_k", "attn.w_v"}) {
          matmul(folded, ann.tensor(p + wn), a);
          matmul(truth, ann.tensor(p + wn), b);
          dev1 = std::max(dev1, max_abs_diff(a, b));
        }
      }
    }
    rep.ln_folds.push_back({p + "ln1", ls.ln1_in.mean(), ls.ln1_in.variance(), dev1,
                            f1.var_floor_channels});
    // Optional Q/K/V scales: calibration max magnitudes of the folded-path
    // currents. Bipolar layers clip at +-v_th, so the scale is an abs max.
    double s_q = 1.0, s_k = 1.0, s_v = 1.0;
    if (cs.normalize_qkv) {
      double mq = 0.0, mk = 0.0, mv = 0.0;
      Tensor cur;
      for (const AnnTrace& tr : traces) {
        const Tensor& x = l == 0 ? tr.emb : tr.layers[l - 1].x_after_mlp;
        Tensor folded = apply_affine(x, f1);
        matmul(folded, ann.tensor(p + "attn.w_q"), cur);
        for (double vv : cur.raw()) mq = std::max(mq, std::abs(vv));
        matmul(folded, ann.tensor(p + "attn.w_k"), cur);
        for (double vv : cur.raw()) mk = std::max(mk, std::abs(vv));
        matmul(folded, ann.tensor(p + "attn.w_v"), cur);
        for (double vv : cur.raw()) mv = std::max(mv, std::abs(vv));
      }
      if (!(mq > 0.0) || !(mk > 0.0) || !(mv > 0.0))
        fail(Errc::dead_layer, "convert: attention projection never activates: " + p);
      s_q = mq;
      s_k = mk;
      s_v = mv;
      rep.layers.push_back({p + "attn.q", s_q, s_q});
      rep.layers.push_back({p + "attn.k", s_k, s_k});
      rep.layers.push_back({p + "attn.v", s_v, s_v});
    }
    const char* bias_names[3] = {"b_q", "b_k", "b_v"};
    const double qkv_scales[3] = {s_q, s_k, s_v};
    const char* weight_names[3] = {"w_q", "w_k", "w_v"};
    for (int wi = 0; wi < 3; ++wi) {
      NormalizedLayer folded = merge_fold_into_linear(f1, ann.tensor(p + "attn." + weight_names[wi]));
      NormalizedLayer nl = normalize_layer(folded.w, folded.b, sigma, qkv_scales[wi]);
      snap_f32(nl.w);
      snap_f32(nl.b);
      snn.add(p + "attn." + weight_names[wi], std::move(nl.w));
      snn.add(p + "attn." + bias_names[wi], std::move(nl.b));
    }
    {
      // per-layer score threshold keeping the softmax-logit operating point:
      // Q/K rates carry Q/(s_q v_th), K/(s_k v_th)
      const double base_scale = ann.config.snn.score_threshold_scale > 0.0
                                    ? ann.config.snn.score_threshold_scale
                                    : std::sqrt(static_cast<double>(ann.config.d_head()));
      const double vth_as = base_scale * v_th / (s_q * s_k);
      snn.add(p + "attn.score_vth", Tensor::full({1}, snap_f32(vth_as)));
    }

    const double a_att = ls.a_att.value(p + "attn.out");
    rep.layers.push_back({p + "attn.out", a_att, a_att});
    {
      // V spikes carry s_v * v_th charge per spike; the gathered head outputs
      // are in absolute units when scores approximate softmax rows
      NormalizedLayer nl = normalize_layer(ann.tensor(p + "attn.w_o"), no_bias_c, s_v * v_th, a_att);
      snap_f32(nl.w);
      snn.add(p + "attn.w_o", std::move(nl.w));
    }
    const double gain1 = sigma / a_att;
    rep.residual_gains.emplace_back(p + "attn.res_gain", gain1);
    snn.add(p + "attn.res_gain", Tensor::full({1}, snap_f32(gain1)));
    sigma = a_att;

    // LN2 folded into the MLP input projection, normalized to the hidden scale
    LnFold f2 = fold_layernorm(ann.tensor(p + "ln2.g").raw(), ann.tensor(p + "ln2.b").raw(),
                               ls.ln2_in.mean(), ls.ln2_in.variance(), cs.ln_eps);
    double dev2 = 0.0;
    for (const AnnTrace& tr : traces) {
      const Tensor& x = tr.layers[l].x_after_attn;
      Tensor folded = apply_affine(x, f2);
      Tensor truth = true_layernorm(x, ann.tensor(p + "ln2.g"), ann.tensor(p + "ln2.b"), cs.ln_eps);
      Tensor a, b;
      matmul(folded, ann.tensor(p + "mlp.w_in"), a);
      matmul(truth, ann.tensor(p + "mlp.w_in"), b);
      dev2 = std::max(dev2, max_abs_diff(a, b));
    }
    rep.ln_folds.push_back({p + "ln2", ls.ln2_in.mean(), ls.ln2_in.variance(), dev2,
                            f2.var_floor_channels});

    const double a_mlp = ls.a_mlp.value(p + "mlp.hidden");
    rep.layers.push_back({p + "mlp.hidden", a_mlp, a_mlp});
    {
      NormalizedLayer folded = merge_fold_into_linear(f2, ann.tensor(p + "mlp.w_in"));
      NormalizedLayer nl = normalize_layer(folded.w, folded.b, sigma, a_mlp);
      snap_f32(nl.w);
      snap_f32(nl.b);
      snn.add(p + "mlp.w_in", std::move(nl.w));
      snn.add(p + "mlp.b_in", std::move(nl.b));
    }

    const double a_out = ls.a_out.value(p + "mlp.out");
    rep.layers.push_back({p + "mlp.out", a_out, a_out});
    {
      NormalizedLayer nl = normalize_layer(ann.tensor(p + "mlp.w_out"), no_bias_c,
                                           a_mlp * v_th, a_out);
      snap_f32(nl.w);
      snn.add(p + "mlp.w_out", std::move(nl.w));
    }
    const double gain2 = sigma / a_out;
    rep.residual_gains.emplace_back(p + "mlp.res_gain", gain2);
    snn.add(p + "mlp.res_gain", Tensor::full({1}, snap_f32(gain2)));
    sigma = a_out;
  }

  // The language-model head stays analog: it reads the time-accumulated
  // stream mean rescaled by the final s_norm, applies the true final
  // LayerNorm and the unembedding. No folding error on this stage.
  snn.add("snn.final_scale", Tensor::full({1}, snap_f32(sigma)));
  snn.add("lnf.g", ann.tensor("lnf.g"));
  snn.add("lnf.b", ann.tensor("lnf.b"));
  snn.add("unembed", ann.tensor("unembed"));

  snn.validate();
  return res;
}

// ------------------------------------------------------------------- MLPs

MlpModel::Trace MlpModel::forward(const Tensor& x) const {
  if (w.size() != b.size() || w.empty())
    fail(Errc::invalid_argument, "MlpModel: inconsistent layer lists");
  Trace tr;
  Tensor act = x;
  for (std::size_t l = 0; l < w.size(); ++l) {
    Tensor pre;
    matmul_nt(act, w[l], pre);
    for (std::int64_t i = 0; i < pre.rows(); ++i)
      for (std::int64_t j = 0; j < pre.cols(); ++j) pre.at(i, j) += b[l][j];
    Tensor a({pre.rows(), pre.cols()});
    for (std::size_t i = 0; i < pre.size(); ++i) a.raw()[i] = std::max(0.0, pre[i]);
    tr.pre.push_back(std::move(pre));
    act = a;
    tr.act.push_back(std::move(a));
  }
  return tr;
}

std::vector<double> collect_max_activations(const MlpModel& mlp, const Tensor& x,
                                            const ConversionSettings& cs) {
  if (x.rows() < 1) fail(Errc::invalid_argument, "collect_max_activations: empty batch");
  MlpModel::Trace tr = mlp.forward(x);
  std::vector<double> out;
  for (std::size_t l = 0; l < tr.pre.size(); ++l) {
    PositiveMaxTracker tracker(cs.use_percentile, cs.percentile);
    tracker.observe(tr.pre[l]);
    out.push_back(tracker.value("mlp layer " + std::to_string(l)));
  }
  return out;
}

MlpConvertResult convert_mlp(const MlpModel& mlp, const Tensor& x, double s0,
                             const ConversionSettings& cs) {
  MlpConvertResult res;
  res.s0 = s0;
  std::vector<double> a = collect_max_activations(mlp, x, cs);
  double s_prev = s0;
  for (std::size_t l = 0; l < mlp.w.size(); ++l) {
    // weights are (out, in): scale columns by s_prev/s_cur, i.e. whole matrix
    NormalizedLayer nl = normalize_layer(mlp.w[l], mlp.b[l], s_prev, a[l]);
    res.snn.w.push_back(std::move(nl.w));
    res.snn.b.push_back(std::move(nl.b));
    res.scales.push_back({"layer" + std::to_string(l), a[l], a[l]});
    s_prev = a[l];
  }
  return res;
}

std::vector<Tensor> spiking_mlp_rates(const MlpConvertResult& conv, const Tensor& x,
                                      std::int64_t time_window) {
  if (time_window < 1) fail(Errc::invalid_argument, "spiking_mlp_rates: T must be >= 1");
  const std::int64_t batch = x.rows();
  const std::size_t n_layers = conv.snn.w.size();

  NeuronParams np;
  np.bipolar = false;  // ReLU analogue

  std::vector<NeuronLayerState> states;
  std::vector<Tensor> counts;
  for (std::size_t l = 0; l < n_layers; ++l) {
    states.emplace_back(static_cast<std::size_t>(batch * conv.snn.w[l].rows()), np);
    counts.emplace_back(Tensor({batch, conv.snn.w[l].rows()}));
  }

  Tensor input({batch, x.cols()});
  for (std::size_t i = 0; i < x.size(); ++i) input.raw()[i] = x[i] / conv.s0;

  Tensor spikes_prev, cur;
  std::vector<std::int8_t> sp;
  for (std::int64_t t = 0; t < time_window; ++t) {
    const Tensor* in = &input;
    for (std::size_t l = 0; l < n_layers; ++l) {
      matmul_nt(*in, conv.snn.w[l], cur);
      for (std::int64_t i = 0; i < cur.rows(); ++i)
        for (std::int64_t j = 0; j < cur.cols(); ++j) cur.at(i, j) += conv.snn.b[l][j];
      sp.assign(cur.size(), 0);
      neuron_step(states[l], std::span<const double>(cur.data(), cur.size()),
                  std::span<std::int8_t>(sp.data(), sp.size()));
      if (spikes_prev.size() != cur.size()) spikes_prev = Tensor({cur.rows(), cur.cols()});
      for (std::size_t i = 0; i < sp.size(); ++i) {
        spikes_prev.raw()[i] = static_cast<double>(sp[i]);
        counts[l].raw()[i] += sp[i];
      }
      in = &spikes_prev;
    }
  }
  for (auto& c : counts)
    for (auto& v : c.raw()) v /= static_cast<double>(time_window);
  return counts;
}

// ---------------------------------------------------------------- report

std::string ConversionReport::to_json() const {
  json j;
  j["encoder_clip"] = encoder_clip;
  j["calibration"] = {{"id", calib_id},
                      {"seed", seed},
                      {"sequences", calib_sequences},
                      {"block_size", block_size}};
  json layers_j = json::array();
  for (const auto& l : layers)
    layers_j.push_back({{"name", l.name}, {"a", l.a}, {"s_norm", l.s_norm}});
  j["layers"] = layers_j;
  json folds_j = json::array();
  for (const auto& f : ln_folds)
    folds_j.push_back({{"name", f.name},
                       {"mean", f.mean},
                       {"var", f.var},
                       {"max_deviation", f.max_deviation},
                       {"var_floor_channels", f.var_floor_channels}});
  j["layernorm_folds"] = folds_j;
  json gains_j = json::array();
  for (const auto& [name, g] : residual_gains) gains_j.push_back({{"name", name}, {"gain", g}});
  j["residual_gains"] = gains_j;
  return j.dump(2);
}

void ConversionReport::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(Errc::io, "cannot write conversion report: " + path);
  f << to_json() << "\n";
}

}  // namespace snnlm
