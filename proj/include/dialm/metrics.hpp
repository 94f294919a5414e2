#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"

namespace dialm {

struct IntentMetrics {
  double acc_all = 0.0;
  std::optional<double> acc_in;      // absent without in-scope golds
  double acc_out = 0.0;              // accuracy of the binary in/out-of-scope decision
  std::optional<double> recall_out;  // absent without out-of-scope golds
};

/// Throws std::invalid_argument on length mismatch or empty input.
IntentMetrics intent_metrics(const std::vector<std::string>& preds,
                             const std::vector<std::string>& golds,
                             const std::string& out_of_scope_label);

struct DstMetrics {
  double joint = 0.0;
  double slot = 0.0;
};

/// Both sides must cover the same (domain, slot) pairs on every turn; a pair
/// without a value is represented explicitly (e.g. "none").
DstMetrics dst_metrics(const std::vector<DialogueState>& preds,
                       const std::vector<DialogueState>& golds);

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
};

/// Per-label F1 is 2TP / (2TP + FP + FN) and 0 when TP = 0, including labels
/// that never occur. Micro F1 is 0 when nothing is predicted or gold.
F1Scores multilabel_f1(const std::vector<std::set<std::string>>& preds,
                       const std::vector<std::set<std::string>>& golds,
                       const std::vector<std::string>& label_space);

/// scorer(context_index, candidate_index) -> similarity.
using PairScorer = std::function<double(std::size_t, std::size_t)>;

inline constexpr std::size_t kRankBatch = 100;

/// For each seed: shuffle the pairs, cut full batches of 100 (the remainder is
/// dropped), rank each gold response among its batch's 100 responses with
/// ties counted against the gold. Returns hit rate per k, averaged over seeds.
std::map<std::size_t, double> k_of_100_many(const PairScorer& scorer, std::size_t num_pairs,
                                            const std::vector<std::size_t>& ks,
                                            std::size_t num_seeds, std::uint64_t seed);

double k_of_100(const PairScorer& scorer, std::size_t num_pairs, std::size_t k,
                std::size_t num_seeds = 5, std::uint64_t seed = 0);

struct FewShotSpec {
  enum class Mode { per_class_k, fraction };
  Mode mode = Mode::fraction;
  std::size_t k = 1;
  double fraction = 1.0;
  std::size_t num_seeds = 3;

  void validate() const;
};

/// Number of dialogues drawn in fraction mode: round(fraction * n), at least 1.
std::size_t fraction_count(double fraction, std::size_t n);

/// Exactly k indices per class (classes visited in sorted order), returned
/// ascending. Throws naming the first class with fewer than k members.
std::vector<std::size_t> sample_per_class(const std::vector<std::string>& labels, std::size_t k,
                                          std::uint64_t seed);

/// fraction_count(fraction, n) distinct indices, returned ascending.
std::vector<std::size_t> sample_fraction(std::size_t n, double fraction, std::uint64_t seed);

/// Dispatches on spec.mode. `labels` is required in per-class mode and its
/// size defines n; in fraction mode only n is used.
std::vector<std::size_t> few_shot_sample(std::size_t n, const std::vector<std::string>* labels,
                                         const FewShotSpec& spec, std::uint64_t seed);

}  // namespace dialm
