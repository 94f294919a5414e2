#include "dialm/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dialm {

MetricStat summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  MetricStat s;
  s.values = values;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

MetricReport aggregate_seeds(const std::string& task, const std::vector<SeedMetrics>& runs,
                             const std::vector<std::uint64_t>& seeds,
                             const std::string& fingerprint) {
  if (runs.empty()) throw std::invalid_argument("aggregate_seeds: no runs");
  if (seeds.size() != runs.size()) {
    throw std::invalid_argument("aggregate_seeds: " + std::to_string(runs.size()) + " runs but " +
                                std::to_string(seeds.size()) + " seeds");
  }
  for (std::size_t i = 1; i < runs.size(); ++i) {
    bool same = runs[i].size() == runs[0].size();
    for (auto a = runs[0].begin(), b = runs[i].begin(); same && a != runs[0].end(); ++a, ++b) {
      same = a->first == b->first;
    }
    if (!same) {
      throw std::invalid_argument("aggregate_seeds: run " + std::to_string(i) +
                                  " reports different metric keys");
    }
  }
  MetricReport r;
  r.task = task;
  r.config_fingerprint = fingerprint;
  r.seeds = seeds;
  for (const auto& [name, _] : runs[0]) {
    std::vector<double> values;
    for (const SeedMetrics& run : runs) values.push_back(run.at(name));
    r.metrics[name] = summarize(values);
  }
  return r;
}

std::string config_fingerprint(const nlohmann::json& settings) {
  const std::string text = settings.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["config_fingerprint"] = r.config_fingerprint;
  j["seeds"] = r.seeds;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  for (const auto& [name, s] : r.metrics) {
    nlohmann::ordered_json m;
    m["mean"] = s.mean;
    m["std"] = s.std;
    m["values"] = s.values;
    metrics[name] = m;
  }
  j["metrics"] = metrics;
  return j;
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.task = j.at("task").get<std::string>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& [name, m] : j.at("metrics").items()) {
    MetricStat s;
    s.mean = m.at("mean").get<double>();
    s.std = m.at("std").get<double>();
    s.values = m.at("values").get<std::vector<double>>();
    r.metrics[name] = s;
  }
  return r;
}

void write_report(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << report_to_json(r).dump(2) << '\n';
}

MetricReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return report_from_json(nlohmann::json::parse(in));
}

}  // namespace dialm
