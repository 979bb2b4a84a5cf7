#pragma once

#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cone/numeric.hpp"

namespace cone {

struct Dataset {
  Matrix samples;  // n x d
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return samples.cols(); }
  /// Throws if labels and samples disagree, a label is >= num_classes, or a
  /// sample is non-finite.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
  bool operator==(const Dataset &) const = default;
};

/// Error raised while parsing an input file; carries the 1-based line (or
/// record) number when one applies.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string &what, std::size_t line)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr std::size_t kMaxCenterAttempts = 100000;

struct MultimodeParams {
  std::size_t classes = 4;
  std::size_t modes_per_class = 2;
  std::size_t dim = 2;
  std::size_t n_per_mode = 250;
  double mode_separation = 10.0;
  double intra_mode_std = 1.0;
  std::size_t max_center_attempts = kMaxCenterAttempts;
};

/// Mode centers of every class, row c * modes_per_class + m.
///
/// Centers are drawn uniformly from the cube [-L, L]^d with
/// L = mode_separation * (classes * modes_per_class)^(1/d) and accepted only
/// if they sit at least mode_separation from every earlier center (across
/// classes as well as within one). After max_center_attempts draws in total
/// the generator gives up.
Matrix draw_mode_centers(const MultimodeParams &p, SeededRng &rng);

/// Gaussian samples around each mode center, in a deterministically shuffled
/// order. Throws std::runtime_error if the centers cannot be placed.
Dataset gen_multimode(const MultimodeParams &p, SeededRng &rng);

struct CsvOptions {
  bool has_header = false;
  /// 0 infers max(label) + 1.
  std::size_t num_classes = 0;
};

/// Layout: one sample per line, "label,f1,f2,...". Labels are non-negative
/// integers; features parse as doubles.
Dataset load_csv(const std::filesystem::path &path, const CsvOptions &options = {});

/// Writes the load_csv layout with a "label,f0,f1,..." header and
/// shortest round-trip formatting of every feature.
void write_csv(const Dataset &data, const std::filesystem::path &path);

/// IDX pair (big-endian): images magic 0x00000803 with dims [n, rows, cols]
/// and unsigned-byte pixels; labels magic 0x00000801 with dim [n]. Pixels are
/// scaled to [0, 1] and flattened row-major.
Dataset load_idx(const std::filesystem::path &images_path,
                 const std::filesystem::path &labels_path);

/// x + N(0, noise_std^2) per coordinate.
Vector augment_jitter(std::span<const double> x, double noise_std, SeededRng &rng);

/// Rows `indices` of `data`, in that order.
Dataset subset(const Dataset &data, std::span<const std::size_t> indices);

/// Seeded shuffle, then the first round(n * test_fraction) samples go to the
/// test split. Throws if a class is missing from either side.
std::pair<Dataset, Dataset> split(const Dataset &data, double test_fraction, SeededRng &rng);

}  // namespace cone
