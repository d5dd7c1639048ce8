#include "snnlm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "json.hpp"

namespace snnlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

NeuronParams SnnSettings::qkv_params() const {
  NeuronParams p;
  p.v_th = threshold;
  p.bipolar = true;
  p.reset_mode = reset;
  if (leak_tau > 0.0) p.leak_tau = leak_tau;
  return p;
}

NeuronParams SnnSettings::score_params(std::int64_t d_head) const {
  NeuronParams p;
  const double scale =
      score_threshold_scale > 0.0 ? score_threshold_scale : std::sqrt(static_cast<double>(d_head));
  p.v_th = threshold * scale;
  p.bipolar = false;
  p.reset_mode = reset;
  if (leak_tau > 0.0) p.leak_tau = leak_tau;
  return p;
}

NeuronParams SnnSettings::mlp_params() const {
  NeuronParams p;
  p.v_th = threshold;
  p.bipolar = false;
  p.reset_mode = reset;
  return p;  // feed-forward IF layers never leak: the ReLU mapping needs none
}

void TransformerConfig::validate() const {
  if (n_layer < 1 || n_head < 1 || d_model < 1 || block_size < 1 || vocab_size < 1)
    fail(Errc::invalid_argument, "TransformerConfig: all dimensions must be positive");
  if (d_model % n_head != 0)
    fail(Errc::invalid_argument, "TransformerConfig: d_model must be divisible by n_head");
  if (ffn_mult < 1) fail(Errc::invalid_argument, "TransformerConfig: ffn_mult must be >= 1");
  if (snn.time_window < 1) fail(Errc::invalid_argument, "TransformerConfig: snn.time_window must be >= 1");
  if (!(snn.threshold > 0.0)) fail(Errc::invalid_argument, "TransformerConfig: snn.threshold must be > 0");
}

bool ModelCheckpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

Tensor& ModelCheckpoint::tensor(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  fail(Errc::bad_checkpoint, "checkpoint tensor not found: " + name);
}

const Tensor& ModelCheckpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail(Errc::bad_checkpoint, "checkpoint tensor not found: " + name);
}

void ModelCheckpoint::add(const std::string& name, Tensor t) {
  if (has(name)) fail(Errc::bad_checkpoint, "duplicate checkpoint tensor: " + name);
  tensors.emplace_back(name, std::move(t));
}

void ModelCheckpoint::validate() const {
  config.validate();
  for (const auto& [n, t] : tensors) {
    if (!t.all_finite()) fail(Errc::bad_checkpoint, "non-finite tensor in checkpoint: " + n);
  }
}

std::uint64_t ModelCheckpoint::checksum_excluding(
    std::span<const std::string> name_substrings_excluded) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [n, t] : tensors) {
    bool skip = false;
    for (const auto& p : name_substrings_excluded)
      if (n.find(p) != std::string::npos) {
        skip = true;
        break;
      }
    if (skip) continue;
    h = fnv1a64(n.data(), n.size(), h);
    h = tensor_checksum(t, h);
  }
  return h;
}

// ---------------------------------------------------------------- NTCK I/O

namespace {

using json = nlohmann::ordered_json;

const char* kind_name(CheckpointKind k) { return k == CheckpointKind::analog ? "analog" : "spiking"; }
const char* nl_name(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "gelu"; }
const char* reset_name(ResetMode r) { return r == ResetMode::subtract ? "subtract" : "zero"; }

json config_to_json(const TransformerConfig& c) {
  json j;
  j["n_layer"] = c.n_layer;
  j["n_head"] = c.n_head;
  j["d_model"] = c.d_model;
  j["block_size"] = c.block_size;
  j["vocab_size"] = c.vocab_size;
  j["ffn_mult"] = c.ffn_mult;
  j["nonlinearity"] = nl_name(c.nonlinearity);
  j["snn"] = {{"time_window", c.snn.time_window},
              {"threshold", c.snn.threshold},
              {"leak_tau", c.snn.leak_tau},
              {"reset", reset_name(c.snn.reset)},
              {"encoder_clip", c.snn.encoder_clip},
              {"score_threshold_scale", c.snn.score_threshold_scale},
              {"phase_dither", c.snn.phase_dither}};
  return j;
}

TransformerConfig config_from_json(const json& j) {
  TransformerConfig c;
  c.n_layer = j.at("n_layer").get<std::int64_t>();
  c.n_head = j.at("n_head").get<std::int64_t>();
  c.d_model = j.at("d_model").get<std::int64_t>();
  c.block_size = j.at("block_size").get<std::int64_t>();
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::int64_t>();
  std::string nl = j.at("nonlinearity").get<std::string>();
  if (nl == "relu")
    c.nonlinearity = Nonlinearity::relu;
  else if (nl == "gelu")
    c.nonlinearity = Nonlinearity::gelu;
  else
    fail(Errc::bad_checkpoint, "unknown nonlinearity in checkpoint: " + nl);
  const json& s = j.at("snn");
  c.snn.time_window = s.at("time_window").get<std::int64_t>();
  c.snn.threshold = s.at("threshold").get<double>();
  c.snn.leak_tau = s.at("leak_tau").get<double>();
  std::string rs = s.at("reset").get<std::string>();
  if (rs == "subtract")
    c.snn.reset = ResetMode::subtract;
  else if (rs == "zero")
    c.snn.reset = ResetMode::zero;
  else
    fail(Errc::bad_checkpoint, "unknown reset mode in checkpoint: " + rs);
  c.snn.encoder_clip = s.at("encoder_clip").get<double>();
  c.snn.score_threshold_scale = s.at("score_threshold_scale").get<double>();
  if (s.contains("phase_dither")) c.snn.phase_dither = s.at("phase_dither").get<bool>();
  return c;
}

constexpr char kMagic[4] = {'N', 'T', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  ckpt.validate();
  json header;
  header["config"] = config_to_json(ckpt.config);
  header["kind"] = kind_name(ckpt.kind);
  header["report"] = ckpt.report_ref;
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    table.push_back(e);
    offset += t.size() * sizeof(float);
  }
  header["tensors"] = table;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::io, "cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  std::uint32_t ver = kFormatVersion;
  f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  std::vector<float> buf;
  for (const auto& [name, t] : ckpt.tensors) {
    buf.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!f) fail(Errc::io, "failed writing checkpoint: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io, "cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    fail(Errc::bad_checkpoint, "bad magic bytes (not an NTCK checkpoint): " + path);
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (!f || ver != kFormatVersion)
    fail(Errc::bad_checkpoint, "unsupported checkpoint format version");
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen == 0 || hlen > (1ULL << 30)) fail(Errc::bad_checkpoint, "invalid header length");
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) fail(Errc::bad_checkpoint, "truncated checkpoint header");

  json header;
  try {
    header = json::parse(hs);
  } catch (const std::exception& e) {
    fail(Errc::bad_checkpoint, std::string("invalid checkpoint header: ") + e.what());
  }

  ModelCheckpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config"));
    std::string kind = header.at("kind").get<std::string>();
    if (kind == "analog")
      ckpt.kind = CheckpointKind::analog;
    else if (kind == "spiking")
      ckpt.kind = CheckpointKind::spiking;
    else
      fail(Errc::bad_checkpoint, "unknown checkpoint kind: " + kind);
    ckpt.report_ref = header.at("report").get<std::string>();
    std::uint64_t expected_offset = 0;
    for (const auto& e : header.at("tensors")) {
      std::string name = e.at("name").get<std::string>();
      std::vector<std::int64_t> shape = e.at("shape").get<std::vector<std::int64_t>>();
      std::uint64_t offset = e.at("offset").get<std::uint64_t>();
      if (offset != expected_offset) fail(Errc::bad_checkpoint, "tensor offsets out of order");
      Tensor t(shape);
      std::vector<float> buf(t.size());
      f.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!f) fail(Errc::bad_checkpoint, "truncated checkpoint data for tensor " + name);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(buf[i]);
      ckpt.add(name, std::move(t));
      expected_offset += buf.size() * sizeof(float);
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(Errc::bad_checkpoint, std::string("malformed checkpoint header: ") + e.what());
  }
  ckpt.validate();
  return ckpt;
}

// ---------------------------------------------------------------- init

ModelCheckpoint init_analog_model(const TransformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::int64_t C = cfg.d_model;
  const std::int64_t F = cfg.d_ff();
  const double std_w = 0.02;
  const double std_proj = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layer));

  ModelCheckpoint m;
  m.config = cfg;
  m.kind = CheckpointKind::analog;
  m.add("wte", Tensor::randn({cfg.vocab_size, C}, rng, std_w));
  m.add("wpe", Tensor::randn({cfg.block_size, C}, rng, std_w));
  for (std::int64_t l = 0; l < cfg.n_layer; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    m.add(p + "ln1.g", Tensor::full({C}, 1.0));
    m.add(p + "ln1.b", Tensor::zeros({C}));
    m.add(p + "attn.w_q", Tensor::randn({C, C}, rng, std_w));
    m.add(p + "attn.w_k", Tensor::randn({C, C}, rng, std_w));
    m.add(p + "attn.w_v", Tensor::randn({C, C}, rng, std_w));
    m.add(p + "attn.w_o", Tensor::randn({C, C}, rng, std_proj));
    m.add(p + "ln2.g", Tensor::full({C}, 1.0));
    m.add(p + "ln2.b", Tensor::zeros({C}));
    m.add(p + "mlp.w_in", Tensor::randn({C, F}, rng, std_w));
    m.add(p + "mlp.w_out", Tensor::randn({F, C}, rng, std_proj));
  }
  m.add("lnf.g", Tensor::full({C}, 1.0));
  m.add("lnf.b", Tensor::zeros({C}));
  m.add("unembed", Tensor::randn({cfg.vocab_size, C}, rng, std_w));
  return m;
}

// ---------------------------------------------------------------- forward

namespace {

void check_tokens(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens) {
  if (tokens.empty()) fail(Errc::invalid_argument, "forward: empty token sequence");
  if (static_cast<std::int64_t>(tokens.size()) > ckpt.config.block_size)
    fail(Errc::invalid_argument, "forward: sequence longer than block_size");
  for (auto t : tokens)
    if (t < 0 || t >= ckpt.config.vocab_size)
      fail(Errc::invalid_argument, "forward: token id out of vocabulary range");
}

void layernorm_rows(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& out,
                    std::vector<double>* means = nullptr, std::vector<double>* rstds = nullptr) {
  const std::int64_t n = x.rows(), c = x.cols();
  if (out.ndim() != 2 || out.rows() != n || out.cols() != c) out = Tensor({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = (x.at(i, j) - mean) * rstd * g[j] + b[j];
    if (means) (*means)[i] = mean;
    if (rstds) (*rstds)[i] = rstd;
  }
}

double gelu(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
}

void apply_nonlinearity(Nonlinearity nl, const Tensor& pre, Tensor& act) {
  if (act.size() != pre.size()) act = Tensor(pre.shape());
  if (nl == Nonlinearity::relu)
    for (std::size_t i = 0; i < pre.size(); ++i) act.raw()[i] = std::max(0.0, pre[i]);
  else
    for (std::size_t i = 0; i < pre.size(); ++i) act.raw()[i] = gelu(pre[i]);
}

AttentionWeights layer_attention(const ModelCheckpoint& ckpt, std::int64_t l) {
  const std::string p = "layer" + std::to_string(l) + ".attn.";
  AttentionWeights w;
  w.w_q = ckpt.tensor(p + "w_q");
  w.w_k = ckpt.tensor(p + "w_k");
  w.w_v = ckpt.tensor(p + "w_v");
  w.w_o = ckpt.tensor(p + "w_o");
  w.n_heads = static_cast<int>(ckpt.config.n_head);
  return w;
}

}  // namespace

Tensor embed_tokens(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens) {
  const std::int64_t n = static_cast<std::int64_t>(tokens.size());
  const std::int64_t c = ckpt.config.d_model;
  const Tensor& wte = ckpt.tensor("wte");
  const Tensor& wpe = ckpt.tensor("wpe");
  Tensor x({n, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) x.at(i, j) = wte.at(tokens[i], j) + wpe.at(i, j);
  return x;
}

Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  Tensor out;
  layernorm_rows(x, gamma, beta, out);
  return out;
}

AnnTrace forward_ann_traced(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens) {
  if (ckpt.kind != CheckpointKind::analog)
    fail(Errc::incompatible_kind, "forward_ann: spiking checkpoint passed (use forward_snn)");
  ckpt.config.validate();
  check_tokens(ckpt, tokens);
  const std::int64_t n = static_cast<std::int64_t>(tokens.size());

  AnnTrace tr;
  tr.emb = embed_tokens(ckpt, tokens);
  Tensor x = tr.emb;
  Tensor normed, h_pre, h_act, mlp_out;
  for (std::int64_t l = 0; l < ckpt.config.n_layer; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    AnnTrace::Layer lay;
    layernorm_rows(x, ckpt.tensor(p + "ln1.g"), ckpt.tensor(p + "ln1.b"), normed);
    AttentionWeights w = layer_attention(ckpt, l);
    AsaResult att = asa_forward(normed, w, /*causal=*/true);
    lay.scores = std::move(att.scores);
    lay.att_out = std::move(att.output);
    lay.x_after_attn = Tensor({n, x.cols()});
    for (std::size_t i = 0; i < x.size(); ++i)
      lay.x_after_attn.raw()[i] = x.raw()[i] + lay.att_out.raw()[i];

    layernorm_rows(lay.x_after_attn, ckpt.tensor(p + "ln2.g"), ckpt.tensor(p + "ln2.b"), normed);
    matmul(normed, ckpt.tensor(p + "mlp.w_in"), h_pre);
    apply_nonlinearity(ckpt.config.nonlinearity, h_pre, h_act);
    matmul(h_act, ckpt.tensor(p + "mlp.w_out"), mlp_out);
    lay.mlp_pre = h_pre;
    lay.mlp_hidden = h_act;
    lay.mlp_out = mlp_out;
    lay.x_after_mlp = Tensor({n, x.cols()});
    for (std::size_t i = 0; i < x.size(); ++i)
      lay.x_after_mlp.raw()[i] = lay.x_after_attn.raw()[i] + mlp_out.raw()[i];
    x = lay.x_after_mlp;
    tr.layers.push_back(std::move(lay));
  }
  layernorm_rows(x, ckpt.tensor("lnf.g"), ckpt.tensor("lnf.b"), normed);
  matmul_nt(normed, ckpt.tensor("unembed"), tr.logits);
  return tr;
}

Tensor forward_ann(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens) {
  return forward_ann_traced(ckpt, tokens).logits;
}

Tensor forward_logits(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens,
                      std::int64_t time_window) {
  if (ckpt.kind == CheckpointKind::analog) return forward_ann(ckpt, tokens);
  return forward_snn(ckpt, tokens, time_window);
}

// ---------------------------------------------------------------- training

namespace {

struct ParamSlot {
  Tensor* w = nullptr;
  Tensor g, m, v;
  explicit ParamSlot(Tensor* t) : w(t), g(t->shape()), m(t->shape()), v(t->shape()) {}
};

struct LayerCache {
  Tensor x_in, ln1n, q, k, v, att, heads, att_proj, x_mid, ln2n, h_pre, h_act, mlp_proj, x_out;
  std::vector<double> m1, r1, m2, r2;
};

// LayerNorm backward; dx accumulated into dx_out.
void layernorm_backward(const Tensor& x, const Tensor& g, const std::vector<double>& means,
                        const std::vector<double>& rstds, const Tensor& dout, Tensor& dg,
                        Tensor& db, Tensor& dx_out) {
  const std::int64_t n = x.rows(), c = x.cols();
  for (std::int64_t i = 0; i < n; ++i) {
    double sum_dn = 0.0, sum_dn_nh = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double nh = (x.at(i, j) - means[i]) * rstds[i];
      const double dn = dout.at(i, j) * g[j];
      dg[j] += dout.at(i, j) * nh;
      db[j] += dout.at(i, j);
      sum_dn += dn;
      sum_dn_nh += dn * nh;
    }
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::int64_t j = 0; j < c; ++j) {
      const double nh = (x.at(i, j) - means[i]) * rstds[i];
      const double dn = dout.at(i, j) * g[j];
      dx_out.at(i, j) += rstds[i] * (dn - sum_dn * inv_c - nh * sum_dn_nh * inv_c);
    }
  }
}

}  // namespace

TrainResult train_baseline(std::span<const std::int32_t> train_ids,
                           std::span<const std::int32_t> val_ids, const TransformerConfig& cfg,
                           const TrainSettings& ts) {
  cfg.validate();
  if (ts.steps < 1) fail(Errc::invalid_argument, "train: steps must be >= 1");
  if (ts.batch < 1) fail(Errc::invalid_argument, "train: batch must be >= 1");
  if (static_cast<std::int64_t>(train_ids.size()) < 10 * cfg.block_size)
    fail(Errc::corpus, "train: corpus too small (need at least 10 x block_size tokens)");

  TrainResult res;
  res.ckpt = init_analog_model(cfg, derive_seed(ts.seed, 0));
  ModelCheckpoint& ckpt = res.ckpt;

  std::vector<ParamSlot> params;
  params.reserve(ckpt.tensors.size());
  for (auto& [name, t] : ckpt.tensors) params.emplace_back(&t);

  std::mt19937_64 batch_rng(derive_seed(ts.seed, 1));
  const std::int64_t n = cfg.block_size;
  const std::int64_t C = cfg.d_model;
  const std::int64_t F = cfg.d_ff();
  const std::int64_t V = cfg.vocab_size;
  const std::int64_t H = cfg.n_head;
  const std::int64_t dh = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::uniform_int_distribution<std::size_t> offset_dist(0, train_ids.size() - n - 1);

  std::vector<LayerCache> caches(cfg.n_layer);
  Tensor lnfn;
  std::vector<double> mf(n), rf(n);
  Tensor logits, probs;
  Tensor dx({n, C}), dtmp({n, C}), dheads({n, C});
  Tensor dh_act, dh_pre, dlogits, dnormed;

  const double beta1 = 0.9, beta2 = 0.95, adam_eps = 1e-8;

  for (std::int64_t step = 0; step < ts.steps; ++step) {
    for (auto& p : params) p.g.fill(0.0);
    double step_loss = 0.0;

    for (std::int64_t b = 0; b < ts.batch; ++b) {
      const std::size_t off = offset_dist(batch_rng);
      std::span<const std::int32_t> x_tok(train_ids.data() + off, n);
      std::span<const std::int32_t> y_tok(train_ids.data() + off + 1, n);

      // ---- forward
      Tensor x = embed_tokens(ckpt, x_tok);
      for (std::int64_t l = 0; l < cfg.n_layer; ++l) {
        LayerCache& lc = caches[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        lc.x_in = x;
        lc.m1.resize(n);
        lc.r1.resize(n);
        layernorm_rows(x, ckpt.tensor(p + "ln1.g"), ckpt.tensor(p + "ln1.b"), lc.ln1n, &lc.m1,
                       &lc.r1);
        matmul(lc.ln1n, ckpt.tensor(p + "attn.w_q"), lc.q);
        matmul(lc.ln1n, ckpt.tensor(p + "attn.w_k"), lc.k);
        matmul(lc.ln1n, ckpt.tensor(p + "attn.w_v"), lc.v);
        if (lc.att.size() != static_cast<std::size_t>(H * n * n)) lc.att = Tensor({H, n, n});
        if (lc.heads.size() != static_cast<std::size_t>(n * C)) lc.heads = Tensor({n, C});
        for (std::int64_t h = 0; h < H; ++h) {
          double* sc = lc.att.data() + static_cast<std::size_t>(h) * n * n;
          const std::int64_t hoff = h * dh;
          for (std::int64_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::int64_t j = 0; j <= i; ++j) {
              double a = 0.0;
              for (std::int64_t d = 0; d < dh; ++d) a += lc.q.at(i, hoff + d) * lc.k.at(j, hoff + d);
              sc[i * n + j] = a * scale;
              mx = std::max(mx, sc[i * n + j]);
            }
            double sum = 0.0;
            for (std::int64_t j = 0; j <= i; ++j) {
              sc[i * n + j] = std::exp(sc[i * n + j] - mx);
              sum += sc[i * n + j];
            }
            for (std::int64_t j = 0; j <= i; ++j) sc[i * n + j] /= sum;
            for (std::int64_t j = i + 1; j < n; ++j) sc[i * n + j] = 0.0;
            for (std::int64_t d = 0; d < dh; ++d) {
              double a = 0.0;
              for (std::int64_t j = 0; j <= i; ++j) a += sc[i * n + j] * lc.v.at(j, hoff + d);
              lc.heads.at(i, hoff + d) = a;
            }
          }
        }
        matmul(lc.heads, ckpt.tensor(p + "attn.w_o"), lc.att_proj);
        lc.x_mid = Tensor({n, C});
        for (std::size_t i = 0; i < lc.x_mid.size(); ++i)
          lc.x_mid.raw()[i] = lc.x_in.raw()[i] + lc.att_proj.raw()[i];
        lc.m2.resize(n);
        lc.r2.resize(n);
        layernorm_rows(lc.x_mid, ckpt.tensor(p + "ln2.g"), ckpt.tensor(p + "ln2.b"), lc.ln2n,
                       &lc.m2, &lc.r2);
        matmul(lc.ln2n, ckpt.tensor(p + "mlp.w_in"), lc.h_pre);
        apply_nonlinearity(cfg.nonlinearity, lc.h_pre, lc.h_act);
        matmul(lc.h_act, ckpt.tensor(p + "mlp.w_out"), lc.mlp_proj);
        lc.x_out = Tensor({n, C});
        for (std::size_t i = 0; i < lc.x_out.size(); ++i)
          lc.x_out.raw()[i] = lc.x_mid.raw()[i] + lc.mlp_proj.raw()[i];
        x = lc.x_out;
      }
      layernorm_rows(x, ckpt.tensor("lnf.g"), ckpt.tensor("lnf.b"), lnfn, &mf, &rf);
      matmul_nt(lnfn, ckpt.tensor("unembed"), logits);

      // softmax + CE
      if (probs.size() != logits.size()) probs = Tensor({n, V});
      double seq_loss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (std::int64_t j = 0; j < V; ++j) mx = std::max(mx, logits.at(i, j));
        double sum = 0.0;
        for (std::int64_t j = 0; j < V; ++j) {
          probs.at(i, j) = std::exp(logits.at(i, j) - mx);
          sum += probs.at(i, j);
        }
        for (std::int64_t j = 0; j < V; ++j) probs.at(i, j) /= sum;
        seq_loss -= std::log(std::max(probs.at(i, y_tok[i]), 1e-300));
      }
      seq_loss /= static_cast<double>(n);
      step_loss += seq_loss / static_cast<double>(ts.batch);

      // ---- backward
      const double wgt = 1.0 / static_cast<double>(n * ts.batch);
      if (dlogits.size() != probs.size()) dlogits = Tensor({n, V});
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < V; ++j)
          dlogits.at(i, j) = (probs.at(i, j) - (j == y_tok[i] ? 1.0 : 0.0)) * wgt;

      // locate grads by name (tensor order is stable)
      auto grad_of = [&](const std::string& name) -> Tensor& {
        for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
          if (ckpt.tensors[i].first == name) return params[i].g;
        fail(Errc::bad_checkpoint, "grad slot not found: " + name);
      };

      matmul_tn(dlogits, lnfn, grad_of("unembed"), /*accumulate=*/true);
      Tensor df;
      matmul(dlogits, ckpt.tensor("unembed"), df);
      dx.fill(0.0);
      layernorm_backward(caches[cfg.n_layer - 1].x_out, ckpt.tensor("lnf.g"), mf, rf, df,
                         grad_of("lnf.g"), grad_of("lnf.b"), dx);

      for (std::int64_t l = cfg.n_layer - 1; l >= 0; --l) {
        LayerCache& lc = caches[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        // mlp
        matmul_tn(lc.h_act, dx, grad_of(p + "mlp.w_out"), true);
        matmul_nt(dx, ckpt.tensor(p + "mlp.w_out"), dh_act);
        if (dh_pre.size() != dh_act.size()) dh_pre = Tensor({n, F});
        if (cfg.nonlinearity == Nonlinearity::relu) {
          for (std::size_t i = 0; i < dh_act.size(); ++i)
            dh_pre.raw()[i] = lc.h_pre.raw()[i] > 0.0 ? dh_act.raw()[i] : 0.0;
        } else {
          constexpr double kC = 0.7978845608028654;
          for (std::size_t i = 0; i < dh_act.size(); ++i) {
            const double xv = lc.h_pre.raw()[i];
            const double u = kC * (xv + 0.044715 * xv * xv * xv);
            const double th = std::tanh(u);
            const double du = kC * (1.0 + 3.0 * 0.044715 * xv * xv);
            dh_pre.raw()[i] = dh_act.raw()[i] * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du);
          }
        }
        matmul_tn(lc.ln2n, dh_pre, grad_of(p + "mlp.w_in"), true);
        Tensor dln2;
        matmul_nt(dh_pre, ckpt.tensor(p + "mlp.w_in"), dln2);
        // dx currently = d(x_out); residual: d(x_mid) = dx + LNbwd contribution
        layernorm_backward(lc.x_mid, ckpt.tensor(p + "ln2.g"), lc.m2, lc.r2, dln2,
                           grad_of(p + "ln2.g"), grad_of(p + "ln2.b"), dx);

        // attention
        matmul_tn(lc.heads, dx, grad_of(p + "attn.w_o"), true);
        matmul_nt(dx, ckpt.tensor(p + "attn.w_o"), dheads);
        Tensor dq({n, C}), dk({n, C}), dv({n, C});
        for (std::int64_t h = 0; h < H; ++h) {
          const std::int64_t hoff = h * dh;
          const double* sc = lc.att.data() + static_cast<std::size_t>(h) * n * n;
          for (std::int64_t i = 0; i < n; ++i) {
            // dS and softmax backward, causal row i
            double row_dot = 0.0;
            std::vector<double> ds(i + 1);
            for (std::int64_t j = 0; j <= i; ++j) {
              double a = 0.0;
              for (std::int64_t d = 0; d < dh; ++d)
                a += dheads.at(i, hoff + d) * lc.v.at(j, hoff + d);
              ds[j] = a;
              row_dot += a * sc[i * n + j];
            }
            for (std::int64_t j = 0; j <= i; ++j) {
              const double dz = sc[i * n + j] * (ds[j] - row_dot) * scale;
              for (std::int64_t d = 0; d < dh; ++d) {
                dq.at(i, hoff + d) += dz * lc.k.at(j, hoff + d);
                dk.at(j, hoff + d) += dz * lc.q.at(i, hoff + d);
                dv.at(j, hoff + d) += sc[i * n + j] * dheads.at(i, hoff + d);
              }
            }
          }
        }
        matmul_tn(lc.ln1n, dq, grad_of(p + "attn.w_q"), true);
        matmul_tn(lc.ln1n, dk, grad_of(p + "attn.w_k"), true);
        matmul_tn(lc.ln1n, dv, grad_of(p + "attn.w_v"), true);
        Tensor dln1;
        matmul_nt(dq, ckpt.tensor(p + "attn.w_q"), dln1);
        matmul_nt(dk, ckpt.tensor(p + "attn.w_k"), dtmp);
        for (std::size_t i = 0; i < dln1.size(); ++i) dln1.raw()[i] += dtmp.raw()[i];
        matmul_nt(dv, ckpt.tensor(p + "attn.w_v"), dtmp);
        for (std::size_t i = 0; i < dln1.size(); ++i) dln1.raw()[i] += dtmp.raw()[i];
        layernorm_backward(lc.x_in, ckpt.tensor(p + "ln1.g"), lc.m1, lc.r1, dln1,
                           grad_of(p + "ln1.g"), grad_of(p + "ln1.b"), dx);
      }
      // embeddings
      Tensor& g_wte = [&]() -> Tensor& {
        for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
          if (ckpt.tensors[i].first == "wte") return params[i].g;
        fail(Errc::bad_checkpoint, "wte grad slot missing");
      }();
      Tensor& g_wpe = [&]() -> Tensor& {
        for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
          if (ckpt.tensors[i].first == "wpe") return params[i].g;
        fail(Errc::bad_checkpoint, "wpe grad slot missing");
      }();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < C; ++j) {
          g_wte.at(x_tok[i], j) += dx.at(i, j);
          g_wpe.at(i, j) += dx.at(i, j);
        }
    }

    // gradient clipping (global norm)
    if (ts.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (auto& p : params)
        for (double g : p.g.raw()) norm2 += g * g;
      const double norm = std::sqrt(norm2);
      if (norm > ts.grad_clip) {
        const double s = ts.grad_clip / norm;
        for (auto& p : params)
          for (auto& g : p.g.raw()) g *= s;
      }
    }

    // Adam with linear warmup
    const double lr_t =
        ts.warmup_steps > 0 && step < ts.warmup_steps
            ? ts.lr * static_cast<double>(step + 1) / static_cast<double>(ts.warmup_steps)
            : ts.lr;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
    for (auto& p : params) {
      for (std::size_t i = 0; i < p.g.size(); ++i) {
        const double g = p.g[i];
        p.m.raw()[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
        p.v.raw()[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
        const double mh = p.m[i] / bc1;
        const double vh = p.v[i] / bc2;
        p.w->raw()[i] = snap_f32(p.w->raw()[i] - lr_t * mh / (std::sqrt(vh) + adam_eps));
      }
    }

    res.loss_history.push_back(step_loss);
    if (ts.log_every > 0 && ((step + 1) % ts.log_every == 0 || step + 1 == ts.steps))
      std::cerr << "step " << (step + 1) << "/" << ts.steps << " loss " << step_loss << "\n";
  }

  res.final_train_loss = res.loss_history.empty() ? 0.0 : res.loss_history.back();
  if (!val_ids.empty() && static_cast<std::int64_t>(val_ids.size()) > cfg.block_size)
    res.val_loss = validation_loss(res.ckpt, val_ids);
  return res;
}

double validation_loss(const ModelCheckpoint& ckpt, std::span<const std::int32_t> val_ids,
                       std::int64_t max_windows) {
  const std::int64_t n = ckpt.config.block_size;
  const std::int64_t windows = static_cast<std::int64_t>(val_ids.size() - 1) / n;
  if (windows < 1) fail(Errc::invalid_argument, "validation_loss: validation split too small");
  const std::int64_t use = max_windows > 0 ? std::min(windows, max_windows) : windows;
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t w = 0; w < use; ++w) {
    std::span<const std::int32_t> x(val_ids.data() + w * n, n);
    std::span<const std::int32_t> y(val_ids.data() + w * n + 1, n);
    Tensor logits = forward_ann(ckpt, x);
    for (std::int64_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (std::int64_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits.at(i, j));
      double sum = 0.0;
      for (std::int64_t j = 0; j < logits.cols(); ++j) sum += std::exp(logits.at(i, j) - mx);
      total += -(logits.at(i, y[i]) - mx - std::log(sum));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

std::vector<std::int32_t> generate(const ModelCheckpoint& ckpt,
                                   std::span<const std::int32_t> prompt, std::int64_t n_tokens,
                                   const GenerateSettings& gs) {
  if (n_tokens < 1) fail(Errc::invalid_argument, "generate: n_tokens must be >= 1");
  if (prompt.empty()) fail(Errc::invalid_argument, "generate: empty prompt");
  std::vector<std::int32_t> out(prompt.begin(), prompt.end());
  std::mt19937_64 rng(gs.seed);
  const std::int64_t block = ckpt.config.block_size;
  for (std::int64_t i = 0; i < n_tokens; ++i) {
    const std::int64_t start = std::max<std::int64_t>(0, static_cast<std::int64_t>(out.size()) - block);
    std::span<const std::int32_t> window(out.data() + start, out.size() - start);
    Tensor logits = forward_logits(ckpt, window);
    const std::int64_t last = logits.rows() - 1;
    std::int32_t next = 0;
    if (gs.temperature <= 1e-6) {
      double best = -1e300;
      for (std::int64_t j = 0; j < logits.cols(); ++j)
        if (logits.at(last, j) > best) {
          best = logits.at(last, j);
          next = static_cast<std::int32_t>(j);
        }
    } else {
      double mx = -1e300;
      for (std::int64_t j = 0; j < logits.cols(); ++j)
        mx = std::max(mx, logits.at(last, j) / gs.temperature);
      std::vector<double> p(logits.cols());
      double sum = 0.0;
      for (std::int64_t j = 0; j < logits.cols(); ++j) {
        p[j] = std::exp(logits.at(last, j) / gs.temperature - mx);
        sum += p[j];
      }
      std::uniform_real_distribution<double> u(0.0, 1.0);
      double r = u(rng) * sum;
      double acc = 0.0;
      next = static_cast<std::int32_t>(logits.cols() - 1);
      for (std::int64_t j = 0; j < logits.cols(); ++j) {
        acc += p[j];
        if (r < acc) {
          next = static_cast<std::int32_t>(j);
          break;
        }
      }
    }
    out.push_back(next);
  }
  return out;
}

}  // namespace snnlm
