#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace stydesty {

/// One table row: an op (or composite graph) in one precision.
struct SuiteRow {
  std::string name;
  std::string kind;   // "op" or "composite"
  std::string dtype;  // "float32" or "float64"
  int geometries = 0;
  int passed = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  int probes = 0;
  int excluded = 0;
  bool pass = false;
};

struct SuiteReport {
  std::vector<SuiteRow> rows;
  std::string fault;
  double seconds = 0;
  bool pass = false;

  nlohmann::json to_json() const;
  std::string table() const;
};

struct SuiteOptions {
  /// "all", "ops", "composites", or one registered name.
  std::string scope = "all";
  /// Registered name whose analytic gradient is negated; empty for none.
  std::string inject_fault;
  int geometries = 20;
  int composite_geometries = 3;
  std::uint64_t seed = 2024;
};

std::vector<std::string> gradcheck_op_names();
std::vector<std::string> gradcheck_composite_names();

/// Throws std::invalid_argument for an unknown scope or fault name.
SuiteReport run_gradcheck_suite(const SuiteOptions& options);

}  // namespace stydesty
