#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "cone/losses.hpp"
#include "cone/numeric.hpp"

namespace cone {

struct BankEntry {
  FeatureVec feature;
  Vector class_dist;
  std::size_t label = 0;
};

struct BankSnapshot {
  Matrix features;  // count x feature_dim, oldest first
  Matrix dists;     // count x num_classes
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
};

/// Fixed-capacity FIFO of EMA features, their class distributions and labels.
///
/// Positions handed out by queries and snapshots are chronological: 0 is the
/// oldest entry currently held.
class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::size_t feature_dim, std::size_t num_classes);

  std::size_t capacity() const { return capacity_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }

  void push(BankEntry entry);
  void push_batch(std::vector<BankEntry> entries);

  /// Entry at chronological position `pos` (0 = oldest).
  const BankEntry &at(std::size_t pos) const;

  /// Top-n same-label entries by cosine similarity (ties go to the newer
  /// entry), plus every different-label entry in chronological order.
  NeighborSet query_neighbors(std::span<const double> z, std::size_t label,
                              std::size_t top_n) const;

  BankSnapshot snapshot() const;

  /// Same configuration and same entries in the same chronological order.
  bool operator==(const MemoryBank &other) const;

 private:
  std::size_t slot(std::size_t pos) const { return (head_ + pos) % capacity_; }

  std::size_t capacity_;
  std::size_t feature_dim_;
  std::size_t num_classes_;
  std::vector<BankEntry> entries_;
  std::size_t head_ = 0;  // slot of the oldest entry
  std::size_t count_ = 0;
};

/// Bank dump file, same conventions as the checkpoint:
///   { "magic": "CONE-BANK", "version": 1, "capacity", "feature_dim",
///     "num_classes", "labels": [...],
///     "tensors": [ features (count x d), class_dists (count x C) ] }
inline constexpr std::string_view kBankMagic = "CONE-BANK";
inline constexpr int kBankVersion = 1;

void save_bank(const MemoryBank &bank, const std::filesystem::path &path);
MemoryBank load_bank(const std::filesystem::path &path);

}  // namespace cone
