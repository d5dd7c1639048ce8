#include "doctest.h"
#include "snnlm/config.hpp"
#include "snnlm/conversion.hpp"
#include "snnlm/finetune.hpp"
#include "support/test_util.hpp"

#include <numbers>
#include <random>

using namespace snnlm;

namespace {

struct ToySetup {
  ModelCheckpoint ann;
  ModelCheckpoint snn;
  Corpus corpus;
};

ToySetup make_toy(std::uint64_t seed, std::int64_t d_model = 16, std::int64_t heads = 2,
                  std::int64_t block = 12, std::int64_t T = 8, std::int64_t train_steps = 60) {
  ToySetup t;
  t.corpus = ingest_corpus_text(testsupport::make_play_corpus(30000, seed), 0.9);
  TransformerConfig cfg;
  cfg.n_layer = 1;
  cfg.n_head = heads;
  cfg.d_model = d_model;
  cfg.block_size = block;
  cfg.vocab_size = t.corpus.vocab.size();
  cfg.snn.time_window = T;
  TrainSettings ts;
  ts.steps = train_steps;
  ts.batch = 2;
  ts.seed = seed;
  ts.lr = 4e-3;
  t.ann = train_baseline(t.corpus.train_ids, t.corpus.val_ids, cfg, ts).ckpt;

  std::mt19937_64 rng(seed + 5);
  std::uniform_int_distribution<std::size_t> dist(0, t.corpus.train_ids.size() - block - 1);
  std::vector<std::vector<std::int32_t>> calib;
  for (int i = 0; i < 4; ++i) {
    const std::size_t off = dist(rng);
    calib.emplace_back(t.corpus.train_ids.begin() + static_cast<std::ptrdiff_t>(off),
                       t.corpus.train_ids.begin() + static_cast<std::ptrdiff_t>(off + block));
  }
  t.snn = convert(t.ann, calib).snn;
  return t;
}

}  // namespace

TEST_SUITE("finetune") {

TEST_CASE("alignment loss: identical scores give zero") {
  Tensor a({2, 3, 3});
  std::mt19937_64 rng(1);
  for (auto& v : a.raw()) v = std::uniform_real_distribution<double>(0, 1)(rng);
  CHECK(attention_alignment_loss(a, a, true) == 0.0);
}

TEST_CASE("alignment loss: unit disagreement on a single row") {
  Tensor asa({1, 1, 2}), ssa({1, 1, 2});
  asa.raw() = {1.0, 0.0};
  ssa.raw() = {0.0, 1.0};
  CHECK(attention_alignment_loss(asa, ssa, false) == 1.0);
}

TEST_CASE("alignment loss matches an elementwise recomputation to 1e-12") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor a({2, 4, 4}), b({2, 4, 4});
  for (auto& v : a.raw()) v = u(rng);
  for (auto& v : b.raw()) v = u(rng);
  double sum = 0;
  int count = 0;
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j <= i; ++j) {
        const double d = a.raw()[(h * 4 + i) * 4 + j] - b.raw()[(h * 4 + i) * 4 + j];
        sum += d * d;
        ++count;
      }
  CHECK(attention_alignment_loss(a, b, true) ==
        doctest::Approx(sum / count).epsilon(1e-12));
  CHECK_THROWS_AS(attention_alignment_loss(a, Tensor({2, 3, 3}), true), Error);
}

TEST_CASE("surrogate derivative: peak, tails, symmetry") {
  CHECK(surrogate_derivative(1.0, 1.0, 25.0, SurrogateKind::fast_sigmoid) == 1.0);
  CHECK(surrogate_derivative(100.0, 1.0, 25.0, SurrogateKind::fast_sigmoid) < 1e-6);
  CHECK(surrogate_derivative(-100.0, 1.0, 25.0, SurrogateKind::fast_sigmoid) < 1e-6);
  CHECK(surrogate_derivative(1.3, 1.0, 25.0, SurrogateKind::fast_sigmoid) ==
        doctest::Approx(surrogate_derivative(0.7, 1.0, 25.0, SurrogateKind::fast_sigmoid))
            .epsilon(1e-15));
  CHECK(surrogate_derivative(1.0, 1.0, 25.0, SurrogateKind::arctan) ==
        doctest::Approx(25.0 / std::numbers::pi).epsilon(1e-15));
  for (double v : {-3.0, 0.2, 1.0, 2.5})
    CHECK(surrogate_derivative(v, 1.0, 25.0, SurrogateKind::arctan) > 0.0);
}

TEST_CASE("relaxed gradient check: analytic vs central differences <= 1e-4") {
  CHECK(relaxed_grad_check_toy(1e-4, 7) <= 1e-4);
}

TEST_CASE("relaxed gradient check: doubling eps keeps the agreement order") {
  CHECK(relaxed_grad_check_toy(2e-4, 7) <= 1e-3);
}

TEST_CASE("zero input stream gives zero gradients") {
  const std::int64_t C = 8, n = 4, T = 4;
  std::mt19937_64 rng(3);
  SsaBlock block;
  block.wq = Tensor::randn({C, C}, rng, 0.4);
  block.bq = Tensor::zeros({C});
  block.wk = Tensor::randn({C, C}, rng, 0.4);
  block.bk = Tensor::zeros({C});
  block.n_heads = 2;
  block.np_as.bipolar = false;
  block.np_as.v_th = 2.0;
  Tensor z({T * n, C});
  Tensor teacher({2, n, n});
  SsaUnrollResult r = ssa_alignment_unroll(block, z, T, n, teacher, 25.0,
                                           SurrogateKind::fast_sigmoid, false, true);
  CHECK(r.loss == 0.0);
  for (double g : r.d_wq.raw()) CHECK(g == 0.0);
  for (double g : r.d_wk.raw()) CHECK(g == 0.0);
}

TEST_CASE("finetune_ssa: lr = 0 leaves the checkpoint unchanged with a flat curve") {
  ToySetup t = make_toy(31);
  FinetuneConfig fc;
  fc.lr = 0.0;
  fc.steps = 4;
  fc.batch = 1;
  fc.seed = 5;
  fc.time_window = 4;
  // single-window corpus: the only possible batch is the same window each step
  std::vector<std::int32_t> one_window(t.corpus.train_ids.begin(),
                                       t.corpus.train_ids.begin() + t.ann.config.block_size + 1);
  FinetuneResult r = finetune_ssa(t.snn, t.ann, one_window, fc);
  for (std::size_t i = 0; i < t.snn.tensors.size(); ++i)
    CHECK(r.ckpt.tensors[i].second.raw() == t.snn.tensors[i].second.raw());
  for (double l : r.loss_curve) CHECK(l == r.loss_curve.front());
}

TEST_CASE("finetune_ssa: toy alignment loss halves within 200 steps") {
  ToySetup t = make_toy(37, 16, 2, 12, 8, /*train_steps=*/600);
  FinetuneConfig fc;
  fc.lr = 0.2;
  fc.steps = 200;
  fc.batch = 2;
  fc.seed = 11;
  fc.time_window = 8;
  fc.slope_k = 2.0;  // wide surrogate: the toy operates far from threshold
  FinetuneResult r = finetune_ssa(t.snn, t.ann, t.corpus.train_ids, fc);
  CHECK(r.loss_curve.back() < 0.5 * r.loss_curve.front());
}

TEST_CASE("finetune_ssa: only the SSA projections change; everything else is frozen") {
  ToySetup t = make_toy(41);
  FinetuneConfig fc;
  fc.lr = 0.05;
  fc.steps = 10;
  fc.batch = 2;
  fc.seed = 13;
  fc.time_window = 4;
  const std::vector<std::string> ssa_names{"attn.w_q", "attn.w_k", "attn.w_v"};
  const std::uint64_t before = t.snn.checksum_excluding(ssa_names);
  FinetuneResult r = finetune_ssa(t.snn, t.ann, t.corpus.train_ids, fc);
  CHECK(r.ckpt.checksum_excluding(ssa_names) == before);
  // and the trained tensors did change
  bool changed = false;
  for (std::size_t i = 0; i < t.snn.tensors.size(); ++i)
    if (t.snn.tensors[i].first.find("attn.w_q") != std::string::npos &&
        r.ckpt.tensors[i].second.raw() != t.snn.tensors[i].second.raw())
      changed = true;
  CHECK(changed);
}

TEST_CASE("finetune_ssa is deterministic under a fixed seed") {
  ToySetup t = make_toy(43);
  FinetuneConfig fc;
  fc.lr = 0.02;
  fc.steps = 6;
  fc.batch = 2;
  fc.seed = 17;
  fc.time_window = 4;
  FinetuneResult a = finetune_ssa(t.snn, t.ann, t.corpus.train_ids, fc);
  FinetuneResult b = finetune_ssa(t.snn, t.ann, t.corpus.train_ids, fc);
  for (std::size_t i = 0; i < a.ckpt.tensors.size(); ++i)
    CHECK(a.ckpt.tensors[i].second.raw() == b.ckpt.tensors[i].second.raw());
  CHECK(a.loss_curve == b.loss_curve);
}

TEST_CASE("finetune_ssa aborts with a structured error when weights blow up") {
  ToySetup t = make_toy(47);
  FinetuneConfig fc;
  fc.lr = 1e40;
  fc.steps = 10;
  fc.batch = 1;
  fc.seed = 19;
  fc.time_window = 4;
  try {
    finetune_ssa(t.snn, t.ann, t.corpus.train_ids, fc);
    FAIL("expected a divergence error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::divergence);
    CHECK(std::string(e.what()).find("finetune.lr") != std::string::npos);
  }
}

TEST_CASE("finetune_ssa validates checkpoint kinds") {
  ToySetup t = make_toy(53);
  FinetuneConfig fc;
  CHECK_THROWS_AS(finetune_ssa(t.ann, t.ann, t.corpus.train_ids, fc), Error);
  CHECK_THROWS_AS(finetune_ssa(t.snn, t.snn, t.corpus.train_ids, fc), Error);
}

}  // TEST_SUITE
