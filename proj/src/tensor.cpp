#include "snnlm/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace snnlm {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

std::size_t shape_count(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) fail(Errc::invalid_argument, "negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), data_(shape_count(shape_), 0.0) {}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& x : t.data_) x = snap_f32(d(rng));
  return t;
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace {

void check_2d(const Tensor& t, const char* name) {
  if (t.ndim() != 2) fail(Errc::shape_mismatch, std::string(name) + ": expected 2-D tensor");
}

}  // namespace

void matmul(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate) {
  check_2d(a, "matmul lhs");
  check_2d(b, "matmul rhs");
  if (a.cols() != b.rows()) fail(Errc::shape_mismatch, "matmul: inner dimensions differ");
  if (out.ndim() != 2 || out.rows() != a.rows() || out.cols() != b.cols())
    out = Tensor({a.rows(), b.cols()});
  MapC ma(a.data(), a.rows(), a.cols());
  MapC mb(b.data(), b.rows(), b.cols());
  MapM mo(out.data(), out.rows(), out.cols());
  if (accumulate)
    mo.noalias() += ma * mb;
  else
    mo.noalias() = ma * mb;
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate) {
  check_2d(a, "matmul_tn lhs");
  check_2d(b, "matmul_tn rhs");
  if (a.rows() != b.rows()) fail(Errc::shape_mismatch, "matmul_tn: inner dimensions differ");
  if (out.ndim() != 2 || out.rows() != a.cols() || out.cols() != b.cols())
    out = Tensor({a.cols(), b.cols()});
  MapC ma(a.data(), a.rows(), a.cols());
  MapC mb(b.data(), b.rows(), b.cols());
  MapM mo(out.data(), out.rows(), out.cols());
  if (accumulate)
    mo.noalias() += ma.transpose() * mb;
  else
    mo.noalias() = ma.transpose() * mb;
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate) {
  check_2d(a, "matmul_nt lhs");
  check_2d(b, "matmul_nt rhs");
  if (a.cols() != b.cols()) fail(Errc::shape_mismatch, "matmul_nt: inner dimensions differ");
  if (out.ndim() != 2 || out.rows() != a.rows() || out.cols() != b.rows())
    out = Tensor({a.rows(), b.rows()});
  MapC ma(a.data(), a.rows(), a.cols());
  MapC mb(b.data(), b.rows(), b.cols());
  MapM mo(out.data(), out.rows(), out.cols());
  if (accumulate)
    mo.noalias() += ma * mb.transpose();
  else
    mo.noalias() = ma * mb.transpose();
}

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void snap_f32(Tensor& t) {
  for (auto& x : t.raw()) x = snap_f32(x);
}

std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double x : t.raw()) {
    float f = static_cast<float>(x);
    h = fnv1a64(&f, sizeof(f), h);
  }
  return h;
}

}  // namespace snnlm
