#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cone {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// A zero-row matrix is allowed so that an empty bank snapshot or an empty
/// dataset slice can be represented without a sentinel.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(const std::vector<Vector> &rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double &operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> v);

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  Matrix transpose() const;
  bool all_finite() const;

  bool operator==(const Matrix &) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// A vector known to have unit L2 norm. Only l2_normalize (and trusted
/// deserialization paths) produce one.
class FeatureVec {
 public:
  FeatureVec() = default;

  std::size_t dim() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  operator std::span<const double>() const { return values_; }

  /// Wraps values that are already unit-norm to within `tol`; throws otherwise.
  static FeatureVec from_unit(Vector values, double tol = 1e-9);

  bool operator==(const FeatureVec &) const = default;

 private:
  explicit FeatureVec(Vector v) : values_(std::move(v)) {}
  friend FeatureVec l2_normalize(std::span<const double> v);
  Vector values_;
};

/// Deterministic generator: std::mt19937_64 (its output sequence is fixed
/// by the C++ standard) with hand-written distributions layered on top, since
/// the std:: distributions are implementation-defined.
///
///   uniform()   : top 53 bits of one draw, scaled to [0, 1)
///   below(n)    : rejection sampling on the raw 64-bit draw
///   normal()    : Box-Muller, caching the second variate
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T> &items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Sub-seed for a named purpose ("init", "shuffle", ...) derived from a root
/// seed with splitmix64 over the FNV-1a hash of the purpose.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Matrix matmul(const Matrix &a, const Matrix &b);
/// a * b^T without materializing the transpose.
Matrix matmul_transposed(const Matrix &a, const Matrix &b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
FeatureVec l2_normalize(std::span<const double> v);

Vector stable_softmax(std::span<const double> logits, double temperature = 1.0);
double log_sum_exp(std::span<const double> x);

/// Dot product of two unit vectors, clamped to [-1, 1].
double cosine_similarity(const FeatureVec &a, const FeatureVec &b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> v);

}  // namespace cone
