#pragma once

#include <string>

#include "snnlm/opcount.hpp"
#include "snnlm/tensor.hpp"

namespace snnlm {

// 45 nm digital-logic estimates for one multiply-accumulate / accumulate.
struct EnergyConstants {
  double e_mac_pj = 4.6;
  double e_ac_pj = 0.9;
};

// Closed-form operation counts for one analog attention block on an n-token
// input: 3nC^2 (Q/K/V projections) + n^2 C (scores) + n^2 C (values) + nC^2
// (output projection). Softmax exponentials are reported separately and
// priced at MAC cost.
struct AsaFlops {
  std::uint64_t mac = 0;
  std::uint64_t exp_ops = 0;
};
AsaFlops count_asa_flops(std::int64_t d_model, std::int64_t n_heads, std::int64_t n, bool causal);

// Dense accumulate opportunities for one time step of one spiking attention
// block (the S_OPs term of the spike-op estimate).
std::uint64_t ssa_dense_ops_per_step(std::int64_t d_model, std::int64_t n_heads, std::int64_t n,
                                     bool causal);

// Exact instrumented accumulate count plus the average-rate estimate
// I x T x S_AvgRate x S_OPs, with their relative gap.
struct SpikeOpCount {
  std::uint64_t ac_count = 0;
  double s_avg_rate = 0.0;
  double spikeop_estimate = 0.0;
  double relative_gap = 0.0;
  std::uint64_t dense_ops_per_step = 0;
};
SpikeOpCount count_spike_ops(const OpCounters& trace, std::uint64_t inputs, std::int64_t T,
                             std::uint64_t dense_ops_per_step);

struct EnergyReport {
  EnergyConstants constants;
  std::uint64_t mac_count = 0;
  std::uint64_t exp_count = 0;
  std::uint64_t ac_count = 0;
  std::uint64_t ssa_projection_mul = 0;  // multiplies on current-driven projections (informational)
  double s_avg_rate = 0.0;
  double spikeop_estimate = 0.0;
  double estimate_gap = 0.0;
  double e_asa_pj = 0.0;
  double e_ssa_pj = 0.0;
  double e_asa_softmax_pj = 0.0;  // separate line: exponentials priced at MAC cost
  double reduction = 0.0;         // 1 - E_SSA / E_ASA

  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
  void save(const std::string& json_path, const std::string& csv_path) const;
};

EnergyReport estimate(const OpCounters& trace, const AsaFlops& asa, const EnergyConstants& ec,
                      std::uint64_t inputs, std::int64_t T, std::uint64_t dense_ops_per_step);

}  // namespace snnlm
