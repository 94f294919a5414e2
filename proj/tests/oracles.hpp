#pragma once

// Independent recounts of the evaluation metrics, written directly from their
// definitions, plus random instance generators.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"
#include "dialm/metrics.hpp"
#include "dialm/rng.hpp"

namespace dialm::testing {

struct IntentInstance {
  std::vector<std::string> preds, golds;
};

inline IntentInstance random_intent_instance(Rng& rng) {
  const std::vector<std::string> labels{"oos", "a", "b", "c"};
  IntentInstance in;
  const std::size_t n = 1 + rng.below(12);
  for (std::size_t i = 0; i < n; ++i) {
    in.golds.push_back(labels[rng.below(labels.size())]);
    in.preds.push_back(rng.uniform() < 0.5 ? in.golds.back() : labels[rng.below(labels.size())]);
  }
  return in;
}

inline IntentMetrics brute_intent(const IntentInstance& in, const std::string& oos) {
  double all = 0, in_hit = 0, in_n = 0, out_hit = 0, rec_hit = 0, rec_n = 0;
  for (std::size_t i = 0; i < in.golds.size(); ++i) {
    const bool gold_out = in.golds[i] == oos;
    const bool pred_out = in.preds[i] == oos;
    if (in.preds[i] == in.golds[i]) all += 1;
    if (gold_out == pred_out) out_hit += 1;
    if (gold_out) {
      rec_n += 1;
      if (pred_out) rec_hit += 1;
    } else {
      in_n += 1;
      if (in.preds[i] == in.golds[i]) in_hit += 1;
    }
  }
  const double n = static_cast<double>(in.golds.size());
  IntentMetrics m;
  m.acc_all = all / n;
  m.acc_out = out_hit / n;
  if (in_n > 0) m.acc_in = in_hit / in_n;
  if (rec_n > 0) m.recall_out = rec_hit / rec_n;
  return m;
}

struct DstInstance {
  std::vector<DialogueState> preds, golds;
};

inline DstInstance random_dst_instance(Rng& rng) {
  const std::vector<SlotKey> keys{{"hotel", "area"}, {"hotel", "stars"}, {"taxi", "dest"}};
  const std::vector<std::string> values{"none", "x", "y"};
  DstInstance in;
  const std::size_t turns = 1 + rng.below(8);
  const std::size_t slots = 1 + rng.below(keys.size());
  for (std::size_t t = 0; t < turns; ++t) {
    DialogueState p, g;
    for (std::size_t s = 0; s < slots; ++s) {
      g[keys[s]] = values[rng.below(3)];
      p[keys[s]] = rng.uniform() < 0.6 ? g[keys[s]] : values[rng.below(3)];
    }
    in.preds.push_back(p);
    in.golds.push_back(g);
  }
  return in;
}

inline DstMetrics brute_dst(const DstInstance& in) {
  double joint = 0, slot_hits = 0, slot_n = 0;
  for (std::size_t t = 0; t < in.golds.size(); ++t) {
    bool all = true;
    for (const auto& [k, v] : in.golds[t]) {
      const bool ok = in.preds[t].at(k) == v;
      slot_hits += ok;
      slot_n += 1;
      all = all && ok;
    }
    joint += all;
  }
  return {joint / static_cast<double>(in.golds.size()), slot_hits / slot_n};
}

struct F1Instance {
  std::vector<std::set<std::string>> preds, golds;
  std::vector<std::string> space;
};

inline F1Instance random_f1_instance(Rng& rng) {
  F1Instance in;
  const std::size_t labels = 1 + rng.below(5);
  for (std::size_t l = 0; l < labels; ++l) in.space.push_back("act" + std::to_string(l));
  const std::size_t n = 1 + rng.below(10);
  for (std::size_t i = 0; i < n; ++i) {
    std::set<std::string> p, g;
    for (const auto& l : in.space) {
      if (rng.uniform() < 0.3) g.insert(l);
      if (rng.uniform() < 0.3) p.insert(l);
    }
    in.preds.push_back(p);
    in.golds.push_back(g);
  }
  return in;
}

inline F1Scores brute_f1(const F1Instance& in) {
  double tp_all = 0, fp_all = 0, fn_all = 0, macro = 0;
  for (const auto& l : in.space) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < in.golds.size(); ++i) {
      const bool p = in.preds[i].count(l) > 0, g = in.golds[i].count(l) > 0;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    macro += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  F1Scores s;
  s.macro = macro / static_cast<double>(in.space.size());
  const double denom = 2 * tp_all + fp_all + fn_all;
  s.micro = denom > 0 ? 2 * tp_all / denom : 0.0;
  return s;
}

}  // namespace dialm::testing
