#pragma once

// Shared JSON layout for checkpoint and bank files: every tensor is
// {"name", "shape": [rows, cols], "values": [row-major doubles]}.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cone/numeric.hpp"

namespace cone::detail {

inline nlohmann::json tensor_to_json(const std::string &name, std::size_t rows,
                                     std::size_t cols, std::span<const double> values) {
  return {{"name", name},
          {"shape", {rows, cols}},
          {"values", std::vector<double>(values.begin(), values.end())}};
}

inline Matrix tensor_from_json(const nlohmann::json &j, const std::string &expected_name) {
  if (j.at("name").get<std::string>() != expected_name) {
    throw std::runtime_error("expected tensor '" + expected_name + "', found '" +
                             j.at("name").get<std::string>() + "'");
  }
  auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) {
    throw std::runtime_error("tensor '" + expected_name + "' must have a 2-entry shape");
  }
  return Matrix(shape[0], shape[1], j.at("values").get<std::vector<double>>());
}

inline void write_json_file(const nlohmann::json &doc, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void check_magic(const nlohmann::json &doc, std::string_view magic, int version,
                        const std::filesystem::path &path) {
  if (!doc.is_object() || doc.value("magic", std::string{}) != magic) {
    throw std::runtime_error(path.string() + ": missing magic '" + std::string(magic) + "'");
  }
  if (doc.value("version", -1) != version) {
    throw std::runtime_error(path.string() + ": unsupported version");
  }
}

}  // namespace cone::detail
