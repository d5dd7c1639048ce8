#include "snnlm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace snnlm {

double token_accuracy(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
  if (a.size() != b.size()) fail(Errc::shape_mismatch, "token_accuracy: sequence lengths differ");
  if (a.empty()) fail(Errc::invalid_argument, "token_accuracy: empty sequences");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += (a[i] == b[i]);
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) fail(Errc::shape_mismatch, "cosine_similarity: vector lengths differ");
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) fail(Errc::invalid_argument, "cosine_similarity: zero vector");
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

double mean_nll(const Tensor& logits, std::span<const std::int32_t> targets) {
  if (logits.ndim() != 2 || static_cast<std::size_t>(logits.rows()) != targets.size())
    fail(Errc::shape_mismatch, "mean_nll: logits and targets are misaligned");
  const std::int64_t n = logits.rows(), v = logits.cols();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double sum = 0.0;
    for (std::int64_t j = 0; j < v; ++j) sum += std::exp(logits.at(i, j) - mx);
    const std::int32_t y = targets[i];
    if (y < 0 || y >= v) fail(Errc::invalid_argument, "mean_nll: target out of range");
    total += -(logits.at(i, y) - mx - std::log(sum));
  }
  return total / static_cast<double>(n);
}

double perplexity(const Tensor& logits, std::span<const std::int32_t> targets) {
  return std::exp(mean_nll(logits, targets));
}

double perplexity_from_nll(double nll_nats) { return std::exp(nll_nats); }

double bits_per_byte(double nll_nats, double bytes_per_token) {
  if (!(bytes_per_token > 0.0)) fail(Errc::invalid_argument, "bits_per_byte: bytes_per_token must be > 0");
  return (nll_nats / std::log(2.0)) / bytes_per_token;
}

namespace {
using json = nlohmann::ordered_json;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["dataset"] = dataset;
  j["time_window"] = time_window;
  j["bytes_per_token"] = bytes_per_token;
  j["ann"] = {{"nll", nll_ann}, {"perplexity", perplexity_ann}, {"bits_per_byte", bpb_ann}};
  if (nll_snn) {
    j["snn"] = {{"nll", *nll_snn},
                {"perplexity", *perplexity_snn},
                {"bits_per_byte", *bpb_snn}};
    j["token_accuracy"] = *token_accuracy;
    j["cosine_similarity"] = *cosine_similarity;
  }
  return j.dump(2);
}

std::string EvalReport::csv_header() const {
  return "dataset,time_window,bytes_per_token,nll_ann,perplexity_ann,bpb_ann,"
         "nll_snn,perplexity_snn,bpb_snn,token_accuracy,cosine_similarity";
}

std::string EvalReport::csv_row() const {
  std::string row = dataset + "," + std::to_string(time_window) + "," + fmt(bytes_per_token) + "," +
                    fmt(nll_ann) + "," + fmt(perplexity_ann) + "," + fmt(bpb_ann) + ",";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  row += opt(nll_snn) + "," + opt(perplexity_snn) + "," + opt(bpb_snn) + "," +
         opt(token_accuracy) + "," + opt(cosine_similarity);
  return row;
}

void EvalReport::save(const std::string& json_path, const std::string& csv_path) const {
  {
    std::ofstream f(json_path, std::ios::trunc);
    if (!f) fail(Errc::io, "cannot write eval report: " + json_path);
    f << to_json() << "\n";
  }
  {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) fail(Errc::io, "cannot write eval report: " + csv_path);
    f << csv_header() << "\n" << csv_row() << "\n";
  }
}

}  // namespace snnlm
