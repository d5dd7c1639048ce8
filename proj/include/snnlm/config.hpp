#pragma once

#include <map>
#include <string>
#include <vector>

#include "snnlm/finetune.hpp"
#include "snnlm/model.hpp"

namespace snnlm {

// Run configuration read from an INI-style file (sections + key=value) with
// dotted-key overrides. Precedence: file < --set < explicit flag.
struct RunConfig {
  // [model]
  std::int64_t n_layer = 4;
  std::int64_t n_head = 4;
  std::int64_t d_model = 128;
  std::int64_t block_size = 64;
  std::int64_t ffn_mult = 4;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  // [train]
  std::int64_t train_steps = 2000;
  double train_lr = 1e-3;
  std::int64_t train_batch = 8;
  std::uint64_t train_seed = 1;
  // [snn]
  std::int64_t snn_time_window = 64;
  double snn_threshold = 1.0;
  std::string snn_reset = "subtract";
  double snn_leak_tau = 0.0;
  double snn_encoder_clip = 0.0;
  double snn_score_threshold_scale = 0.0;
  bool snn_normalize_qkv = false;
  bool snn_phase_dither = false;
  // [finetune]
  double ft_lr = 1e-3;
  std::int64_t ft_steps = 100;
  std::int64_t ft_batch = 2;
  double ft_slope_k = 25.0;
  std::string ft_kind = "fast_sigmoid";
  std::uint64_t ft_seed = 2;
  std::int64_t ft_time_window = 16;
  // [energy]
  double e_mac_pj = 4.6;
  double e_ac_pj = 0.9;
  // [data]
  std::string corpus_path;
  double split_ratio = 0.9;
  // [eval]
  std::int64_t eval_tokens = 4096;
  std::int64_t eval_calib_sequences = 8;

  TransformerConfig transformer(std::int64_t vocab_size) const;
  FinetuneConfig finetune() const;
  void validate() const;
};

RunConfig parse_run_config(const std::string& ini_text);
RunConfig load_run_config(const std::string& path);
// Applies one "section.key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Character vocabulary: sorted unique Unicode code points from the corpus.
struct Vocab {
  std::vector<char32_t> chars;            // sorted by code point
  std::map<char32_t, std::int32_t> ids;

  std::int64_t size() const { return static_cast<std::int64_t>(chars.size()); }
  // byte_fallback: an unseen character is re-encoded as its UTF-8 bytes when
  // those byte values exist in the vocabulary; otherwise a structured error.
  std::vector<std::int32_t> encode(const std::string& text, bool byte_fallback = false) const;
  std::string decode(std::span<const std::int32_t> ids_in) const;
  double bytes_per_token(const std::string& text) const;
};

struct Corpus {
  Vocab vocab;
  std::vector<std::int32_t> train_ids;
  std::vector<std::int32_t> val_ids;
};
Corpus ingest_corpus(const std::string& path, double split_ratio);
Corpus ingest_corpus_text(const std::string& text, double split_ratio);

std::vector<char32_t> decode_utf8(const std::string& text);
std::string encode_utf8(std::span<const char32_t> cps);

}  // namespace snnlm
