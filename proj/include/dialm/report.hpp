#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace dialm {

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  std::vector<double> values;

  bool operator==(const MetricStat&) const = default;
};

struct MetricReport {
  std::string task;
  std::map<std::string, MetricStat> metrics;
  std::string config_fingerprint;
  std::vector<std::uint64_t> seeds;

  bool operator==(const MetricReport&) const = default;
};

using SeedMetrics = std::map<std::string, double>;

MetricStat summarize(const std::vector<double>& values);

/// One report from per-seed metric maps. Throws std::invalid_argument when the
/// list is empty, seeds and runs differ in count, or metric keys differ.
MetricReport aggregate_seeds(const std::string& task, const std::vector<SeedMetrics>& runs,
                             const std::vector<std::uint64_t>& seeds,
                             const std::string& fingerprint);

/// FNV-1a 64 over the canonical (key-sorted, compact) JSON dump, as 16 hex digits.
std::string config_fingerprint(const nlohmann::json& settings);

nlohmann::ordered_json report_to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);
void write_report(const std::filesystem::path& path, const MetricReport& r);
MetricReport read_report(const std::filesystem::path& path);

}  // namespace dialm
