#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "snnlm/common.hpp"

namespace snnlm {

// Dense row-major tensor of doubles. Checkpoints store float32 on disk, so
// tensors that live in checkpoints are kept float32-exact via snap_f32().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::int64_t> shape, double value);
  // Normal init snapped to float32 so fresh weights survive save/load bit-exactly.
  static Tensor randn(std::vector<std::int64_t> shape, std::mt19937_64& rng, double stddev);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors.
  std::int64_t rows() const { return shape_.at(0); }
  std::int64_t cols() const { return shape_.at(1); }
  double& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  double at(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  void fill(double v);
  bool all_finite() const;

  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

// out = A(m,k) * B(k,n). Accumulates if `accumulate` is true.
void matmul(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false);
// out = A^T(m,k->k,m) * B ... A is (k,m) stored, result (m,n) = A^T * B.
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false);
// out = A(m,k) * B^T where B is (n,k); result (m,n).
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false);

void snap_f32(Tensor& t);
double snap_f32(double v);

std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace snnlm
