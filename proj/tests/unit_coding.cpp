#include "doctest.h"
#include "snnlm/coding.hpp"

#include <random>

using namespace snnlm;

TEST_SUITE("coding") {

TEST_CASE("zero input encodes to the all-zero train") {
  EncodingConfig cfg;
  cfg.T = 12;
  Tensor x({2, 3});
  SpikeTrain s = rate_encode(x, cfg);
  for (auto v : s.values) CHECK(v == 0);
  Tensor r = decode_rates(s);
  for (double v : r.raw()) CHECK(v == 0.0);
}

TEST_CASE("x = clip saturates to rate 1") {
  EncodingConfig cfg;
  cfg.T = 9;
  cfg.clip = 2.5;
  Tensor x = Tensor::full({1, 2}, 2.5);
  SpikeTrain s = rate_encode(x, cfg);
  for (auto v : s.values) CHECK(v == 1);
}

TEST_CASE("x = 0.3 clip with T=10 emits exactly 3 positive spikes per element") {
  EncodingConfig cfg;
  cfg.T = 10;
  cfg.clip = 4.0;
  Tensor x = Tensor::full({3, 2}, 0.3 * 4.0);
  SpikeTrain s = rate_encode(x, cfg);
  for (std::size_t i = 0; i < s.frame_size(); ++i) {
    int count = 0;
    for (std::int64_t t = 0; t < 10; ++t) count += s.frame(t)[i];
    CHECK(count == 3);
  }
}

TEST_CASE("grid round trip: decode(encode(k/T)) == k/T exactly") {
  EncodingConfig cfg;
  cfg.T = 8;
  for (int k = -8; k <= 8; ++k) {
    Tensor x = Tensor::full({1, 1}, static_cast<double>(k) / 8.0);
    Tensor r = decode_rates(rate_encode(x, cfg));
    CHECK(r[0] == x[0]);  // exact equality on the grid
  }
}

TEST_CASE("decode is bounded and within 1/T of clamp(x/clip)") {
  EncodingConfig cfg;
  cfg.T = 32;
  cfg.clip = 1.5;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  Tensor x({4, 4});
  for (auto& v : x.raw()) v = u(rng);
  Tensor r = decode_rates(rate_encode(x, cfg));
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(std::abs(r[i]) <= 1.0);
    const double want = std::clamp(x[i] / cfg.clip, -1.0, 1.0);
    CHECK(std::abs(r[i] - want) <= 1.0 / 32.0 + 1e-12);
  }
}

TEST_CASE("decode trivia: all ones / alternating") {
  SpikeTrain s({4, 1});
  s.values = {1, 1, 1, 1};
  CHECK(decode_rates(s)[0] == 1.0);
  s.values = {1, 0, 1, 0};
  CHECK(decode_rates(s)[0] == 0.5);
}

TEST_CASE("structured errors") {
  EncodingConfig bad;
  bad.T = 0;
  Tensor x({1, 1});
  CHECK_THROWS_AS(rate_encode(x, bad), Error);
  EncodingConfig cfg;
  Tensor nan_x({1, 1});
  nan_x[0] = std::nan("");
  CHECK_THROWS_AS(rate_encode(nan_x, cfg), Error);
}

}  // TEST_SUITE
