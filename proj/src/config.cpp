#include "snnlm/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>

namespace snnlm {

TransformerConfig RunConfig::transformer(std::int64_t vocab_size) const {
  TransformerConfig c;
  c.n_layer = n_layer;
  c.n_head = n_head;
  c.d_model = d_model;
  c.block_size = block_size;
  c.vocab_size = vocab_size;
  c.ffn_mult = ffn_mult;
  c.nonlinearity = nonlinearity;
  c.snn.time_window = snn_time_window;
  c.snn.threshold = snn_threshold;
  c.snn.leak_tau = snn_leak_tau;
  c.snn.reset = snn_reset == "zero" ? ResetMode::zero : ResetMode::subtract;
  c.snn.encoder_clip = snn_encoder_clip;
  c.snn.score_threshold_scale = snn_score_threshold_scale;
  c.snn.phase_dither = snn_phase_dither;
  return c;
}

FinetuneConfig RunConfig::finetune() const {
  FinetuneConfig f;
  f.lr = ft_lr;
  f.steps = ft_steps;
  f.batch = ft_batch;
  f.slope_k = ft_slope_k;
  f.kind = ft_kind == "arctan" ? SurrogateKind::arctan : SurrogateKind::fast_sigmoid;
  f.seed = ft_seed;
  f.time_window = ft_time_window;
  return f;
}

void RunConfig::validate() const {
  if (!(split_ratio > 0.0 && split_ratio < 1.0))
    fail(Errc::config, "data.split_ratio must be in (0, 1)");
  if (snn_reset != "subtract" && snn_reset != "zero")
    fail(Errc::config, "snn.reset must be 'subtract' or 'zero'");
  if (ft_kind != "fast_sigmoid" && ft_kind != "arctan")
    fail(Errc::config, "finetune.kind must be 'fast_sigmoid' or 'arctan'");
  if (!(e_mac_pj > 0.0) || !(e_ac_pj > 0.0))
    fail(Errc::config, "energy constants must be positive");
  if (eval_tokens < 2) fail(Errc::config, "eval.tokens must be >= 2");
  if (eval_calib_sequences < 1) fail(Errc::config, "eval.calib_sequences must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return static_cast<std::int64_t>(x);
  } catch (const std::exception&) {
    fail(Errc::config, "config key " + key + ": expected integer, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  const std::int64_t x = parse_int(key, v);
  if (x < 0) fail(Errc::config, "config key " + key + ": expected non-negative integer");
  return static_cast<std::uint64_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    fail(Errc::config, "config key " + key + ": expected number, got '" + v + "'");
  }
}

void set_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "model.n_layer") c.n_layer = parse_int(key, value);
  else if (key == "model.n_head") c.n_head = parse_int(key, value);
  else if (key == "model.d_model") c.d_model = parse_int(key, value);
  else if (key == "model.block_size") c.block_size = parse_int(key, value);
  else if (key == "model.ffn_mult") c.ffn_mult = parse_int(key, value);
  else if (key == "model.nonlinearity") {
    if (value == "relu") c.nonlinearity = Nonlinearity::relu;
    else if (value == "gelu") c.nonlinearity = Nonlinearity::gelu;
    else fail(Errc::config, "model.nonlinearity must be 'relu' or 'gelu'");
  } else if (key == "train.steps") c.train_steps = parse_int(key, value);
  else if (key == "train.lr") c.train_lr = parse_double(key, value);
  else if (key == "train.batch") c.train_batch = parse_int(key, value);
  else if (key == "train.seed") c.train_seed = parse_uint(key, value);
  else if (key == "snn.time_window") c.snn_time_window = parse_int(key, value);
  else if (key == "snn.threshold") c.snn_threshold = parse_double(key, value);
  else if (key == "snn.reset") c.snn_reset = value;
  else if (key == "snn.leak_tau") c.snn_leak_tau = parse_double(key, value);
  else if (key == "snn.encoder_clip") c.snn_encoder_clip = parse_double(key, value);
  else if (key == "snn.score_threshold_scale") c.snn_score_threshold_scale = parse_double(key, value);
  else if (key == "snn.normalize_qkv") {
    if (value == "true" || value == "1") c.snn_normalize_qkv = true;
    else if (value == "false" || value == "0") c.snn_normalize_qkv = false;
    else fail(Errc::config, "snn.normalize_qkv must be true or false");
  }
  else if (key == "snn.phase_dither") {
    if (value == "true" || value == "1") c.snn_phase_dither = true;
    else if (value == "false" || value == "0") c.snn_phase_dither = false;
    else fail(Errc::config, "snn.phase_dither must be true or false");
  }
  else if (key == "finetune.lr") c.ft_lr = parse_double(key, value);
  else if (key == "finetune.steps") c.ft_steps = parse_int(key, value);
  else if (key == "finetune.batch") c.ft_batch = parse_int(key, value);
  else if (key == "finetune.slope_k") c.ft_slope_k = parse_double(key, value);
  else if (key == "finetune.kind") c.ft_kind = value;
  else if (key == "finetune.seed") c.ft_seed = parse_uint(key, value);
  else if (key == "finetune.time_window") c.ft_time_window = parse_int(key, value);
  else if (key == "energy.e_mac_pj") c.e_mac_pj = parse_double(key, value);
  else if (key == "energy.e_ac_pj") c.e_ac_pj = parse_double(key, value);
  else if (key == "data.corpus_path") c.corpus_path = value;
  else if (key == "data.split_ratio") c.split_ratio = parse_double(key, value);
  else if (key == "eval.tokens") c.eval_tokens = parse_int(key, value);
  else if (key == "eval.calib_sequences") c.eval_calib_sequences = parse_int(key, value);
  else fail(Errc::config, "unknown config key: " + key);
}

}  // namespace

RunConfig parse_run_config(const std::string& ini_text) {
  RunConfig cfg;
  std::istringstream in(ini_text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        fail(Errc::config, "config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(Errc::config, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) fail(Errc::config, "config key outside any section: " + key);
    set_key(cfg, section + "." + key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Errc::io, "cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    fail(Errc::config, "--set expects section.key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  set_key(cfg, key, value);
  cfg.validate();
}

// ------------------------------------------------------------------ vocab

std::vector<char32_t> decode_utf8(const std::string& text) {
  std::vector<char32_t> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char b0 = static_cast<unsigned char>(text[i]);
    char32_t cp = 0;
    std::size_t len = 1;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6 && i + 1 < text.size()) {
      cp = (b0 & 0x1F) << 6 | (static_cast<unsigned char>(text[i + 1]) & 0x3F);
      len = 2;
    } else if ((b0 >> 4) == 0xE && i + 2 < text.size()) {
      cp = (b0 & 0x0F) << 12 | (static_cast<unsigned char>(text[i + 1]) & 0x3F) << 6 |
           (static_cast<unsigned char>(text[i + 2]) & 0x3F);
      len = 3;
    } else if ((b0 >> 3) == 0x1E && i + 3 < text.size()) {
      cp = (b0 & 0x07) << 18 | (static_cast<unsigned char>(text[i + 1]) & 0x3F) << 12 |
           (static_cast<unsigned char>(text[i + 2]) & 0x3F) << 6 |
           (static_cast<unsigned char>(text[i + 3]) & 0x3F);
      len = 4;
    } else {
      cp = b0;  // invalid byte: treated as its Latin-1 code point
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(std::span<const char32_t> cps) {
  std::string out;
  for (char32_t cp : cps) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

std::vector<std::int32_t> Vocab::encode(const std::string& text, bool byte_fallback) const {
  std::vector<std::int32_t> out;
  for (char32_t cp : decode_utf8(text)) {
    auto it = ids.find(cp);
    if (it != ids.end()) {
      out.push_back(it->second);
      continue;
    }
    if (byte_fallback) {
      const std::string bytes = encode_utf8(std::span<const char32_t>(&cp, 1));
      bool ok = true;
      std::vector<std::int32_t> sub;
      for (char b : bytes) {
        auto bit = ids.find(static_cast<char32_t>(static_cast<unsigned char>(b)));
        if (bit == ids.end()) {
          ok = false;
          break;
        }
        sub.push_back(bit->second);
      }
      if (ok) {
        out.insert(out.end(), sub.begin(), sub.end());
        continue;
      }
    }
    fail(Errc::unseen_character,
         "character U+" + std::to_string(static_cast<std::uint32_t>(cp)) + " not in vocabulary");
  }
  return out;
}

std::string Vocab::decode(std::span<const std::int32_t> ids_in) const {
  std::vector<char32_t> cps;
  cps.reserve(ids_in.size());
  for (std::int32_t id : ids_in) {
    if (id < 0 || id >= size()) fail(Errc::invalid_argument, "Vocab::decode: id out of range");
    cps.push_back(chars[static_cast<std::size_t>(id)]);
  }
  return encode_utf8(cps);
}

double Vocab::bytes_per_token(const std::string& text) const {
  const std::size_t tokens = decode_utf8(text).size();
  if (tokens == 0) fail(Errc::invalid_argument, "bytes_per_token: empty text");
  return static_cast<double>(text.size()) / static_cast<double>(tokens);
}

Corpus ingest_corpus_text(const std::string& text, double split_ratio) {
  if (text.empty()) fail(Errc::corpus, "corpus is empty");
  if (!(split_ratio > 0.0 && split_ratio < 1.0))
    fail(Errc::invalid_argument, "split_ratio must be in (0, 1)");
  const std::vector<char32_t> cps = decode_utf8(text);

  Corpus c;
  std::vector<char32_t> uniq = cps;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  c.vocab.chars = uniq;
  for (std::size_t i = 0; i < uniq.size(); ++i)
    c.vocab.ids[uniq[i]] = static_cast<std::int32_t>(i);

  std::vector<std::int32_t> all;
  all.reserve(cps.size());
  for (char32_t cp : cps) all.push_back(c.vocab.ids[cp]);
  const std::size_t cut = static_cast<std::size_t>(split_ratio * static_cast<double>(all.size()));
  c.train_ids.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cut));
  c.val_ids.assign(all.begin() + static_cast<std::ptrdiff_t>(cut), all.end());
  return c;
}

Corpus ingest_corpus(const std::string& path, double split_ratio) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::corpus, "cannot open corpus file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string text = ss.str();
  if (text.empty()) fail(Errc::corpus, "corpus file is empty: " + path);
  return ingest_corpus_text(text, split_ratio);
}

}  // namespace snnlm
