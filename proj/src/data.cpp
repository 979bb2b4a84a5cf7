#include "cone/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "format.hpp"

namespace cone {

void Dataset::validate() const {
  if (samples.rows() != labels.size()) {
    throw std::invalid_argument("Dataset: " + std::to_string(samples.rows()) + " samples but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("Dataset: label " + std::to_string(labels[i]) +
                                  " at row " + std::to_string(i) + " is not below " +
                                  std::to_string(num_classes));
    }
  }
  if (!samples.all_finite()) throw std::invalid_argument("Dataset: non-finite sample value");
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto y : labels) ++counts.at(y);
  return counts;
}

Matrix draw_mode_centers(const MultimodeParams &p, SeededRng &rng) {
  const std::size_t total = p.classes * p.modes_per_class;
  const double half_width =
      p.mode_separation * std::pow(static_cast<double>(total), 1.0 / static_cast<double>(p.dim));
  Matrix centers(total, p.dim);
  std::size_t attempts = 0;
  for (std::size_t k = 0; k < total; ++k) {
    for (;;) {
      if (++attempts > p.max_center_attempts) {
        throw std::runtime_error(
            "gen_multimode: could not place " + std::to_string(total) +
            " mode centers at separation " + std::to_string(p.mode_separation) +
            " within " + std::to_string(p.max_center_attempts) +
            " draws; try a smaller mode_separation, fewer modes or a larger attempt budget");
      }
      for (auto &x : centers.row(k)) x = rng.uniform(-half_width, half_width);
      bool ok = true;
      for (std::size_t j = 0; j < k && ok; ++j) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < p.dim; ++c) {
          const double diff = centers(k, c) - centers(j, c);
          d2 += diff * diff;
        }
        ok = std::sqrt(d2) >= p.mode_separation;
      }
      if (ok) break;
    }
  }
  return centers;
}

Dataset gen_multimode(const MultimodeParams &p, SeededRng &rng) {
  if (p.classes == 0 || p.modes_per_class == 0 || p.dim == 0 || p.n_per_mode == 0) {
    throw std::invalid_argument("gen_multimode: all counts must be positive");
  }
  if (!(p.mode_separation > 0.0) || !(p.intra_mode_std >= 0.0)) {
    throw std::invalid_argument("gen_multimode: separation must be positive, std non-negative");
  }
  const Matrix centers = draw_mode_centers(p, rng);
  const std::size_t n = centers.rows() * p.n_per_mode;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  Dataset d{Matrix(n, p.dim), std::vector<std::size_t>(n), p.classes};
  std::size_t i = 0;
  for (std::size_t mode = 0; mode < centers.rows(); ++mode) {
    for (std::size_t s = 0; s < p.n_per_mode; ++s, ++i) {
      const std::size_t row = order[i];
      for (std::size_t c = 0; c < p.dim; ++c)
        d.samples(row, c) = rng.normal(centers(mode, c), p.intra_mode_std);
      d.labels[row] = mode / p.modes_per_class;
    }
  }
  return d;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t'))
    s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

Dataset load_csv(const std::filesystem::path &path, const CsvOptions &options) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t width = 0;
  std::size_t line_no = 0;
  std::string line;
  auto fail = [&](const std::string &msg) {
    throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + msg, line_no);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && options.has_header) continue;
    std::string_view view = trim(line);
    if (view.empty()) continue;
    auto fields = split_fields(view);
    if (fields.size() < 2) fail("expected a label and at least one feature");
    if (width == 0) {
      width = fields.size() - 1;
    } else if (fields.size() - 1 != width) {
      fail("expected " + std::to_string(width) + " features, found " +
           std::to_string(fields.size() - 1));
    }

    std::size_t label = 0;
    auto lf = fields[0];
    auto [lp, lec] = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (lec != std::errc() || lp != lf.data() + lf.size()) {
      fail("label '" + std::string(lf) + "' is not a non-negative integer");
    }
    if (options.num_classes != 0 && label >= options.num_classes) {
      fail("label " + std::to_string(label) + " is not below num_classes " +
           std::to_string(options.num_classes));
    }
    labels.push_back(label);

    for (std::size_t f = 1; f < fields.size(); ++f) {
      double v = 0.0;
      auto s = fields[f];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
        fail("field " + std::to_string(f + 1) + " ('" + std::string(s) +
             "') is not a finite number");
      }
      values.push_back(v);
    }
  }
  if (labels.empty()) throw ParseError(path.string() + ": no data rows", line_no);

  Dataset d;
  d.samples = Matrix(labels.size(), width, std::move(values));
  d.labels = std::move(labels);
  d.num_classes = options.num_classes != 0
                      ? options.num_classes
                      : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

void write_csv(const Dataset &data, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "label";
  for (std::size_t c = 0; c < data.dim(); ++c) out << ",f" << c;
  out << '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    out << data.labels[r];
    for (double v : data.samples.row(r)) out << ',' << detail::format_double(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char> &b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path &images_path,
                 const std::filesystem::path &labels_path) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) {
    throw ParseError(images_path.string() + ": bad IDX image magic", 1);
  }
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) {
    throw ParseError(labels_path.string() + ": bad IDX label magic", 1);
  }
  const std::size_t n = be32(img, 4);
  const std::size_t rows = be32(img, 8);
  const std::size_t cols = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (n != n_labels) {
    throw ParseError("IDX count mismatch: " + std::to_string(n) + " images, " +
                     std::to_string(n_labels) + " labels", 0);
  }
  const std::size_t pixels = rows * cols;
  if (img.size() != 16 + n * pixels) {
    throw ParseError(images_path.string() + ": payload length does not match header", 0);
  }
  if (lab.size() != 8 + n) {
    throw ParseError(labels_path.string() + ": payload length does not match header", 0);
  }
  if (n == 0 || pixels == 0) throw ParseError("IDX files contain no samples", 0);

  Dataset d{Matrix(n, pixels), std::vector<std::size_t>(n), 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p)
      d.samples(i, p) = static_cast<double>(img[16 + i * pixels + p]) / 255.0;
    d.labels[i] = lab[8 + i];
  }
  d.num_classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

Vector augment_jitter(std::span<const double> x, double noise_std, SeededRng &rng) {
  if (!(noise_std >= 0.0)) throw std::invalid_argument("augment_jitter: noise_std < 0");
  Vector out(x.begin(), x.end());
  if (noise_std == 0.0) return out;
  for (double &v : out) v += rng.normal(0.0, noise_std);
  return out;
}

Dataset subset(const Dataset &data, std::span<const std::size_t> indices) {
  Dataset out{Matrix(indices.size(), data.dim()), {}, data.num_classes};
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.samples.set_row(i, data.samples.row(indices[i]));
    out.labels.push_back(data.labels.at(indices[i]));
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset &data, double test_fraction, SeededRng &rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split: test_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const auto n_test = static_cast<std::size_t>(
      std::llround(static_cast<double>(data.size()) * test_fraction));
  std::span<const std::size_t> all(order);
  Dataset test = subset(data, all.first(n_test));
  Dataset train = subset(data, all.subspan(n_test));

  auto train_counts = train.class_counts();
  auto test_counts = test.class_counts();
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    if (train_counts[c] == 0 || test_counts[c] == 0) {
      throw std::runtime_error("split: class " + std::to_string(c) +
                               " is missing from the " +
                               (train_counts[c] == 0 ? "train" : "test") +
                               " split; use a larger dataset");
    }
  }
  return {std::move(train), std::move(test)};
}

}  // namespace cone
