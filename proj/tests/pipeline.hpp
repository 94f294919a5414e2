#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dialm/cli.hpp"

namespace dialm::testing {

struct CliRun {
  int code = 0;
  std::string out, err;
};

inline CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  CliRun r;
  r.code = run_cli(args, o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Fresh directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dialm_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

/// Tiny encoder/training settings shared by the end-to-end runs.
inline std::string tiny_run_config(std::size_t steps) {
  return R"({"encoder": {"num_layers": 2, "num_heads": 4, "hidden": 32, "ffn_dim": 64, "max_positions": 128},
  "train": {"batch_size": 8, "max_len": 96, "lr0": 0.001, "total_steps": )" +
         std::to_string(steps) + R"(, "eval_every": 50, "patience": 5}})";
}

/// synth -> train-tokenizer -> pretrain -> finetune (intent) -> evaluate inside
/// `dir`. Returns the concatenated metric logs and reports; empty on failure.
inline std::string run_pipeline(const std::filesystem::path& dir, std::size_t pretrain_steps,
                                std::size_t finetune_steps, std::string* failure = nullptr) {
  const std::string d = dir.string();
  write_text(dir / "pre.json", tiny_run_config(pretrain_steps));
  write_text(dir / "ft.json", tiny_run_config(finetune_steps));
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--seed", "11", "--n", "60", "--out", d + "/train"},
      {"synth", "--seed", "12", "--n", "20", "--out", d + "/test"},
      {"train-tokenizer", "--corpus", d + "/train/corpus.jsonl", "--vocab-size", "300", "--out", d + "/tok"},
      {"pretrain", "--corpus", d + "/train/corpus.jsonl", "--tokenizer", d + "/tok/vocab.txt", "--config",
       d + "/pre.json", "--objectives", "mlm+rcl", "--seed", "3", "--out", d + "/pre"},
      {"finetune", "--task", "intent", "--encoder", d + "/pre/encoder.ckpt", "--tokenizer", d + "/tok/vocab.txt",
       "--train", d + "/train/corpus.jsonl", "--config", d + "/ft.json", "--seed", "4", "--out", d + "/ft"},
      {"evaluate", "--model", d + "/ft/model.ckpt", "--tokenizer", d + "/tok/vocab.txt", "--test",
       d + "/test/corpus.jsonl", "--out", d + "/eval"},
  };
  for (const auto& s : steps) {
    const CliRun r = cli(s);
    if (r.code != 0) {
      if (failure) *failure = s[0] + ": " + r.err;
      return {};
    }
  }
  return read_file(dir / "pre/metrics.jsonl") + read_file(dir / "ft/metrics.jsonl") +
         read_file(dir / "eval/report.json");
}

}  // namespace dialm::testing
