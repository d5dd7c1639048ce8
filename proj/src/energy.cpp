#include "snnlm/energy.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace snnlm {

AsaFlops count_asa_flops(std::int64_t d_model, std::int64_t n_heads, std::int64_t n, bool causal) {
  if (n < 1 || d_model < 1 || n_heads < 1)
    fail(Errc::invalid_argument, "count_asa_flops: dimensions must be positive");
  AsaFlops f;
  const std::uint64_t nn = static_cast<std::uint64_t>(n);
  const std::uint64_t c = static_cast<std::uint64_t>(d_model);
  f.mac = 4 * nn * c * c + 2 * nn * nn * c;
  const std::uint64_t rows = causal ? nn * (nn + 1) / 2 : nn * nn;
  f.exp_ops = static_cast<std::uint64_t>(n_heads) * rows;
  return f;
}

std::uint64_t ssa_dense_ops_per_step(std::int64_t d_model, std::int64_t n_heads, std::int64_t n,
                                     bool causal) {
  const std::uint64_t nn = static_cast<std::uint64_t>(n);
  const std::uint64_t c = static_cast<std::uint64_t>(d_model);
  const std::uint64_t pairs = causal ? nn * (nn + 1) / 2 : nn * nn;
  (void)n_heads;  // head count cancels: H * pairs * d_head = pairs * C
  return 3 * nn * c * c  // Q/K/V projections
         + 2 * pairs * c  // score + value gating
         + nn * c * c;    // output projection
}

SpikeOpCount count_spike_ops(const OpCounters& trace, std::uint64_t inputs, std::int64_t T,
                             std::uint64_t dense_ops_per_step) {
  SpikeOpCount r;
  r.ac_count = trace.ac;
  r.s_avg_rate = trace.avg_spike_rate();
  r.dense_ops_per_step = dense_ops_per_step;
  r.spikeop_estimate = static_cast<double>(inputs) * static_cast<double>(T) * r.s_avg_rate *
                       static_cast<double>(dense_ops_per_step);
  r.relative_gap = r.ac_count == 0 ? 0.0
                                   : std::abs(r.spikeop_estimate - static_cast<double>(r.ac_count)) /
                                         static_cast<double>(r.ac_count);
  return r;
}

EnergyReport estimate(const OpCounters& trace, const AsaFlops& asa, const EnergyConstants& ec,
                      std::uint64_t inputs, std::int64_t T, std::uint64_t dense_ops_per_step) {
  if (!(ec.e_mac_pj > 0.0) || !(ec.e_ac_pj > 0.0))
    fail(Errc::invalid_argument, "estimate: energy constants must be positive");
  EnergyReport r;
  r.constants = ec;
  r.mac_count = asa.mac;
  r.exp_count = asa.exp_ops;
  r.ac_count = trace.ac;
  r.ssa_projection_mul = trace.projection_mul;
  SpikeOpCount sc = count_spike_ops(trace, inputs, T, dense_ops_per_step);
  r.s_avg_rate = sc.s_avg_rate;
  r.spikeop_estimate = sc.spikeop_estimate;
  r.estimate_gap = sc.relative_gap;
  r.e_asa_pj = ec.e_mac_pj * static_cast<double>(r.mac_count);
  r.e_ssa_pj = ec.e_ac_pj * static_cast<double>(r.ac_count);
  r.e_asa_softmax_pj = ec.e_mac_pj * static_cast<double>(r.exp_count);
  r.reduction = r.e_asa_pj == 0.0 ? 0.0 : 1.0 - r.e_ssa_pj / r.e_asa_pj;
  return r;
}

namespace {
using json = nlohmann::ordered_json;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string EnergyReport::to_json() const {
  json j;
  j["constants"] = {{"e_mac_pj", constants.e_mac_pj}, {"e_ac_pj", constants.e_ac_pj}};
  j["asa"] = {{"mac_count", mac_count},
              {"softmax_exp_count", exp_count},
              {"energy_pj", e_asa_pj},
              {"energy_uj", e_asa_pj * 1e-6},
              {"softmax_energy_pj", e_asa_softmax_pj}};
  j["ssa"] = {{"ac_count", ac_count},
              {"projection_mul_count", ssa_projection_mul},
              {"avg_spike_rate", s_avg_rate},
              {"spikeop_estimate", spikeop_estimate},
              {"estimate_gap", estimate_gap},
              {"energy_pj", e_ssa_pj},
              {"energy_uj", e_ssa_pj * 1e-6}};
  j["reduction"] = reduction;
  return j.dump(2);
}

std::string EnergyReport::csv_header() const {
  return "e_mac_pj,e_ac_pj,mac_count,softmax_exp_count,ac_count,avg_spike_rate,"
         "spikeop_estimate,estimate_gap,e_asa_pj,e_ssa_pj,reduction";
}

std::string EnergyReport::csv_row() const {
  return fmt(constants.e_mac_pj) + "," + fmt(constants.e_ac_pj) + "," + std::to_string(mac_count) +
         "," + std::to_string(exp_count) + "," + std::to_string(ac_count) + "," + fmt(s_avg_rate) +
         "," + fmt(spikeop_estimate) + "," + fmt(estimate_gap) + "," + fmt(e_asa_pj) + "," +
         fmt(e_ssa_pj) + "," + fmt(reduction);
}

void EnergyReport::save(const std::string& json_path, const std::string& csv_path) const {
  {
    std::ofstream f(json_path, std::ios::trunc);
    if (!f) fail(Errc::io, "cannot write energy report: " + json_path);
    f << to_json() << "\n";
  }
  {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) fail(Errc::io, "cannot write energy report: " + csv_path);
    f << csv_header() << "\n" << csv_row() << "\n";
  }
}

}  // namespace snnlm
