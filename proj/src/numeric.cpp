#include "cone/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace cone {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw DimensionError("Matrix: " + std::to_string(values_.size()) +
                         " values for shape " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector> &rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) m.set_row(r, rows[r]);
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  auto s = row(r);
  return {s.begin(), s.end()};
}

void Matrix::set_row(std::size_t r, std::span<const double> v) {
  if (v.size() != cols_) {
    throw DimensionError("set_row: expected " + std::to_string(cols_) +
                         " values, got " + std::to_string(v.size()));
  }
  std::copy(v.begin(), v.end(), row(r).begin());
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](double x) { return std::isfinite(x); });
}

FeatureVec FeatureVec::from_unit(Vector values, double tol) {
  double n = l2_norm(values);
  if (!(std::abs(n - 1.0) <= tol)) {
    throw std::invalid_argument("FeatureVec::from_unit: norm " + std::to_string(n) +
                                " is not 1");
  }
  return FeatureVec(std::move(values));
}

double SeededRng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededRng::below: n must be positive");
  // Largest multiple of n representable; draws at or above it are rejected.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose) {
  std::uint64_t z = root ^ fnv1a64(purpose);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Matrix matmul(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " times " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " times transpose of " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: sizes " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

FeatureVec l2_normalize(std::span<const double> v) {
  double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw std::domain_error("l2_normalize: vector norm is zero or non-finite");
  }
  Vector out(v.begin(), v.end());
  for (double &x : out) x /= n;
  return FeatureVec(std::move(out));
}

Vector stable_softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw std::invalid_argument("stable_softmax: empty input");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("stable_softmax: temperature must be positive");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - peak) / temperature);
    total += out[i];
  }
  for (double &p : out) p /= total;
  return out;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  const double peak = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (double xi : x) total += std::exp(xi - peak);
  return peak + std::log(total);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: dims " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  return std::clamp(dot(a, b), -1.0, 1.0);
}

double cosine_similarity(const FeatureVec &a, const FeatureVec &b) {
  return cosine_similarity(a.values(), b.values());
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace cone
