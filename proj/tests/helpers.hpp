#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>

#include "cone/numeric.hpp"

namespace testing {

inline cone::Vector random_unit(std::size_t d, cone::SeededRng &rng) {
  cone::Vector v(d);
  for (auto &x : v) x = rng.normal();
  const double n = cone::l2_norm(v);
  for (auto &x : v) x /= n;
  return v;
}

inline cone::Matrix random_units(std::size_t rows, std::size_t d, cone::SeededRng &rng) {
  cone::Matrix m(rows, d);
  for (std::size_t r = 0; r < rows; ++r) m.set_row(r, random_unit(d, rng));
  return m;
}

inline cone::Vector central_difference(const std::function<double(const cone::Vector &)> &f,
                                       cone::Vector x, double h = 1e-6) {
  cone::Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::string slurp(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string &name)
      : path(std::filesystem::temp_directory_path() / ("cone_test_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string &leaf) const { return path / leaf; }
};

}  // namespace testing
