#include "doctest.h"
#include "snnlm/attention.hpp"
#include "snnlm/energy.hpp"

#include <random>

using namespace snnlm;

namespace {

SpikeTrain constant_train(std::vector<std::int64_t> dims, std::int8_t v) {
  SpikeTrain s(std::move(dims));
  for (auto& x : s.values) x = v;
  return s;
}

}  // namespace

TEST_SUITE("energy") {

TEST_CASE("closed form: n=1, d_model=1 is 6 MACs (4 d^2 terms + 2 n^2 terms)") {
  AsaFlops f = count_asa_flops(1, 1, 1, true);
  CHECK(f.mac == 6);
  CHECK(f.exp_ops == 1);
}

TEST_CASE("closed form: doubling n multiplies the n^2 terms by exactly 4") {
  const std::int64_t c = 32;
  for (std::int64_t n : {4, 8, 16}) {
    AsaFlops a = count_asa_flops(c, 4, n, true);
    AsaFlops b = count_asa_flops(c, 4, 2 * n, true);
    const std::uint64_t quad_a = a.mac - 4ULL * n * c * c;
    const std::uint64_t quad_b = b.mac - 4ULL * (2 * n) * c * c;
    CHECK(quad_b == 4 * quad_a);
  }
}

TEST_CASE("instrumented asa_forward matches the closed form exactly") {
  const std::int64_t c = 12, n = 5;
  const int H = 3;
  std::mt19937_64 rng(8);
  AttentionWeights w;
  w.w_q = Tensor::randn({c, c}, rng, 0.4);
  w.w_k = Tensor::randn({c, c}, rng, 0.4);
  w.w_v = Tensor::randn({c, c}, rng, 0.4);
  w.w_o = Tensor::randn({c, c}, rng, 0.4);
  w.n_heads = H;
  Tensor x = Tensor::randn({n, c}, rng, 1.0);
  OpCounters ops;
  asa_forward(x, w, true, &ops);
  AsaFlops f = count_asa_flops(c, H, n, true);
  CHECK(ops.mac == f.mac);
  CHECK(ops.exp_ops == f.exp_ops);
}

TEST_CASE("zero-spike trace: zero accumulates, zero SSA energy") {
  SpikeTrain as({3, 1, 2, 2});  // all zero
  SpikeTrain v({3, 2, 4});
  OpCounters ops;
  ssa_gather(as, v, 1, &ops);
  CHECK(ops.ac == 0);
  EnergyReport r = estimate(ops, count_asa_flops(4, 1, 2, true), {}, 1, 3,
                            ssa_dense_ops_per_step(4, 1, 2, true));
  CHECK(r.e_ssa_pj == 0.0);
}

TEST_CASE("saturated trains: gated accumulate count equals the dense count") {
  const std::int64_t T = 2, n = 3, c = 6;
  const int H = 2;
  SpikeTrain as = constant_train({T, H, n, n}, 1);
  SpikeTrain v = constant_train({T, n, c}, 1);
  OpCounters ops;
  ssa_gather(as, v, H, &ops);
  CHECK(ops.ac == static_cast<std::uint64_t>(T * H * n * n * (c / H)));

  SpikeTrain q = constant_train({T, n, c}, 1);
  SpikeTrain k = constant_train({T, n, c}, 1);
  OpCounters ops2;
  NeuronParams np;
  np.bipolar = false;
  ssa_scores(q, k, H, np, false, &ops2);
  CHECK(ops2.ac == static_cast<std::uint64_t>(T * H * n * n * (c / H)));
}

TEST_CASE("estimate: exact pricing identities") {
  OpCounters t;
  t.ac = 1000;
  AsaFlops f;
  f.mac = 1000;
  EnergyReport r = estimate(t, f, {}, 1, 1, 1);
  CHECK(r.e_asa_pj == 4.6 * 1000.0);
  CHECK(r.e_ssa_pj == 0.9 * 1000.0);
  CHECK(r.reduction == doctest::Approx(1.0 - 0.9 / 4.6).epsilon(1e-15));
}

TEST_CASE("E_SSA is monotone non-decreasing in the input spike rate") {
  const std::int64_t T = 12, n = 4, c = 8;
  const int H = 2;
  std::mt19937_64 wrng(5);
  AttentionWeights w;
  w.w_q = Tensor::randn({c, c}, wrng, 0.6);
  w.w_k = Tensor::randn({c, c}, wrng, 0.6);
  w.w_v = Tensor::randn({c, c}, wrng, 0.6);
  w.w_o = Tensor::randn({c, c}, wrng, 0.6);
  w.n_heads = H;
  NeuronParams np;
  NeuronParams np_as;
  np_as.bipolar = false;
  np_as.v_th = 2.0;

  std::uint64_t prev = 0;
  for (double density : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    // denser input train = higher input spike rate
    SpikeTrain s({T, n, c});
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& x : s.values) x = u(rng) < density ? 1 : 0;
    OpCounters ops;
    SsaQkv qkv = ssa_qkv(s, w, np, &ops);
    SsaScoresResult sc = ssa_scores(qkv.q, qkv.k, H, np_as, true, &ops);
    ssa_output(sc.as, qkv.v, w.w_o, H, &ops);
    CHECK(ops.ac >= prev);
    prev = ops.ac;
  }
}

TEST_CASE("spike-op estimate lands within 10% of the instrumented count on the toy") {
  // projection-dominated toy (d >> N) driven at a healthy rate
  const std::int64_t T = 8, n = 6, c = 64;
  const int H = 2;
  std::mt19937_64 wrng(23);
  AttentionWeights w;
  w.w_q = Tensor::randn({c, c}, wrng, 0.2);
  w.w_k = Tensor::randn({c, c}, wrng, 0.2);
  w.w_v = Tensor::randn({c, c}, wrng, 0.2);
  w.w_o = Tensor::randn({c, c}, wrng, 0.2);
  w.n_heads = H;
  SpikeTrain s({T, n, c});
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : s.values) {
    const double r = u(rng);
    x = r < 0.4 ? 1 : (r < 0.8 ? -1 : 0);
  }
  NeuronParams np;
  NeuronParams np_as;
  np_as.bipolar = false;
  np_as.v_th = std::sqrt(static_cast<double>(c / H));
  OpCounters ops;
  SsaQkv qkv = ssa_qkv(s, w, np, &ops);
  SsaScoresResult sc = ssa_scores(qkv.q, qkv.k, H, np_as, true, &ops);
  ssa_output(sc.as, qkv.v, w.w_o, H, &ops);

  SpikeOpCount c2 = count_spike_ops(ops, 1, T, ssa_dense_ops_per_step(c, H, n, true));
  CHECK(c2.ac_count == ops.ac);
  CHECK(c2.relative_gap <= 0.10);
}

TEST_CASE("report serialization carries the identities") {
  OpCounters t;
  t.ac = 500;
  t.spike_opportunities = 1000;
  t.spikes_emitted = 400;
  AsaFlops f{2000, 10};
  EnergyConstants ec;
  EnergyReport r = estimate(t, f, ec, 2, 4, 100);
  CHECK(r.to_json().find("\"reduction\"") != std::string::npos);
  CHECK(r.csv_row().find("9200") != std::string::npos);  // 4.6 * 2000
}

}  // TEST_SUITE
