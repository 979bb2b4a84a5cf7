#include "cone/memory_bank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tensor_json.hpp"

namespace cone {

MemoryBank::MemoryBank(std::size_t capacity, std::size_t feature_dim, std::size_t num_classes)
    : capacity_(capacity), feature_dim_(feature_dim), num_classes_(num_classes) {
  if (capacity == 0 || feature_dim == 0 || num_classes == 0) {
    throw std::invalid_argument("MemoryBank: capacity and dimensions must be positive");
  }
  entries_.reserve(capacity);
}

void MemoryBank::push(BankEntry entry) {
  if (entry.feature.dim() != feature_dim_) {
    throw DimensionError("MemoryBank::push: feature dim " +
                         std::to_string(entry.feature.dim()) + ", bank expects " +
                         std::to_string(feature_dim_));
  }
  if (entry.class_dist.size() != num_classes_) {
    throw DimensionError("MemoryBank::push: class_dist has " +
                         std::to_string(entry.class_dist.size()) + " entries, bank expects " +
                         std::to_string(num_classes_));
  }
  if (entry.label >= num_classes_) {
    throw std::out_of_range("MemoryBank::push: label " + std::to_string(entry.label) +
                            " out of range");
  }
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(entry));
    ++count_;
    return;
  }
  entries_[head_] = std::move(entry);
  head_ = (head_ + 1) % capacity_;
}

void MemoryBank::push_batch(std::vector<BankEntry> entries) {
  for (auto &e : entries) push(std::move(e));
}

const BankEntry &MemoryBank::at(std::size_t pos) const {
  if (pos >= count_) throw std::out_of_range("MemoryBank::at: position out of range");
  return entries_[slot(pos)];
}

NeighborSet MemoryBank::query_neighbors(std::span<const double> z, std::size_t label,
                                        std::size_t top_n) const {
  if (z.size() != feature_dim_) {
    throw DimensionError("query_neighbors: query dim " + std::to_string(z.size()) +
                         ", bank dim " + std::to_string(feature_dim_));
  }
  struct Candidate {
    double sim;
    std::size_t pos;
  };
  std::vector<Candidate> same;
  NeighborSet out;
  for (std::size_t pos = 0; pos < count_; ++pos) {
    const BankEntry &e = entries_[slot(pos)];
    if (e.label == label) {
      same.push_back({cosine_similarity(z, e.feature.values()), pos});
    } else {
      out.negative_ids.push_back(pos);
    }
  }
  const std::size_t keep = std::min(top_n, same.size());
  std::partial_sort(same.begin(), same.begin() + static_cast<std::ptrdiff_t>(keep), same.end(),
                    [](const Candidate &a, const Candidate &b) {
                      return a.sim != b.sim ? a.sim > b.sim : a.pos > b.pos;
                    });

  out.positives = Matrix(keep, feature_dim_);
  for (std::size_t i = 0; i < keep; ++i) {
    out.positives.set_row(i, entries_[slot(same[i].pos)].feature.values());
    out.positive_ids.push_back(same[i].pos);
  }
  out.negatives = Matrix(out.negative_ids.size(), feature_dim_);
  for (std::size_t i = 0; i < out.negative_ids.size(); ++i)
    out.negatives.set_row(i, entries_[slot(out.negative_ids[i])].feature.values());
  return out;
}

bool MemoryBank::operator==(const MemoryBank &other) const {
  if (capacity_ != other.capacity_ || feature_dim_ != other.feature_dim_ ||
      num_classes_ != other.num_classes_ || count_ != other.count_)
    return false;
  for (std::size_t pos = 0; pos < count_; ++pos) {
    const BankEntry &a = at(pos);
    const BankEntry &b = other.at(pos);
    if (a.label != b.label || a.feature != b.feature || a.class_dist != b.class_dist)
      return false;
  }
  return true;
}

BankSnapshot MemoryBank::snapshot() const {
  BankSnapshot s{Matrix(count_, feature_dim_), Matrix(count_, num_classes_), {}};
  s.labels.reserve(count_);
  for (std::size_t pos = 0; pos < count_; ++pos) {
    const BankEntry &e = entries_[slot(pos)];
    s.features.set_row(pos, e.feature.values());
    s.dists.set_row(pos, e.class_dist);
    s.labels.push_back(e.label);
  }
  return s;
}

void save_bank(const MemoryBank &bank, const std::filesystem::path &path) {
  const BankSnapshot s = bank.snapshot();
  nlohmann::json doc = {
      {"magic", kBankMagic},
      {"version", kBankVersion},
      {"capacity", bank.capacity()},
      {"feature_dim", bank.feature_dim()},
      {"num_classes", bank.num_classes()},
      {"labels", s.labels},
      {"tensors",
       {detail::tensor_to_json("features", s.features.rows(), s.features.cols(),
                               s.features.values()),
        detail::tensor_to_json("class_dists", s.dists.rows(), s.dists.cols(),
                               s.dists.values())}}};
  detail::write_json_file(doc, path);
}

MemoryBank load_bank(const std::filesystem::path &path) {
  auto doc = detail::read_json_file(path);
  detail::check_magic(doc, kBankMagic, kBankVersion, path);
  try {
    MemoryBank bank(doc.at("capacity").get<std::size_t>(),
                    doc.at("feature_dim").get<std::size_t>(),
                    doc.at("num_classes").get<std::size_t>());
    auto labels = doc.at("labels").get<std::vector<std::size_t>>();
    const auto &tensors = doc.at("tensors");
    Matrix features = detail::tensor_from_json(tensors.at(0), "features");
    Matrix dists = detail::tensor_from_json(tensors.at(1), "class_dists");
    if (features.rows() != labels.size() || dists.rows() != labels.size() ||
        labels.size() > bank.capacity()) {
      throw std::runtime_error("entry counts disagree");
    }
    if (!labels.empty() && (features.cols() != bank.feature_dim() ||
                            dists.cols() != bank.num_classes())) {
      throw std::runtime_error("tensor widths disagree with the declared dims");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      bank.push({FeatureVec::from_unit(features.row_vector(i), 1e-9), dists.row_vector(i),
                 labels[i]});
    }
    return bank;
  } catch (const std::exception &e) {
    throw std::runtime_error(path.string() + ": malformed bank dump: " + e.what());
  }
}

}  // namespace cone
