#pragma once

#include <optional>
#include <span>
#include <string>

#include "snnlm/tensor.hpp"

namespace snnlm {

// Fraction of positions where the two sequences agree.
double token_accuracy(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Mean per-token negative log likelihood (natural log) of targets under logits.
double mean_nll(const Tensor& logits, std::span<const std::int32_t> targets);

// Perplexity = exp(mean NLL).
double perplexity(const Tensor& logits, std::span<const std::int32_t> targets);
double perplexity_from_nll(double nll_nats);

// Bits per byte: (NLL / ln 2) / bytes_per_token.
double bits_per_byte(double nll_nats, double bytes_per_token);

struct EvalReport {
  std::string dataset;
  std::int64_t time_window = 0;
  double bytes_per_token = 1.0;
  double nll_ann = 0.0;
  double perplexity_ann = 0.0;
  double bpb_ann = 0.0;
  std::optional<double> token_accuracy;       // SNN vs ANN greedy agreement
  std::optional<double> cosine_similarity;    // flattened logits, one held-out batch
  std::optional<double> nll_snn;
  std::optional<double> perplexity_snn;
  std::optional<double> bpb_snn;

  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
  void save(const std::string& json_path, const std::string& csv_path) const;
};

}  // namespace snnlm
