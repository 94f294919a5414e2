#include "dialm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dialm/rng.hpp"

namespace dialm {

IntentMetrics intent_metrics(const std::vector<std::string>& preds,
                             const std::vector<std::string>& golds,
                             const std::string& oos) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("intent_metrics: " + std::to_string(preds.size()) +
                                " predictions for " + std::to_string(golds.size()) + " golds");
  }
  if (golds.empty()) throw std::invalid_argument("intent_metrics: no samples");
  std::size_t correct = 0, in_total = 0, in_correct = 0, out_total = 0, out_hit = 0, binary = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool gold_out = golds[i] == oos;
    const bool pred_out = preds[i] == oos;
    if (preds[i] == golds[i]) ++correct;
    if (gold_out == pred_out) ++binary;
    if (gold_out) {
      ++out_total;
      if (pred_out) ++out_hit;
    } else {
      ++in_total;
      if (preds[i] == golds[i]) ++in_correct;
    }
  }
  const double n = static_cast<double>(golds.size());
  IntentMetrics m;
  m.acc_all = static_cast<double>(correct) / n;
  m.acc_out = static_cast<double>(binary) / n;
  if (in_total > 0) m.acc_in = static_cast<double>(in_correct) / static_cast<double>(in_total);
  if (out_total > 0) m.recall_out = static_cast<double>(out_hit) / static_cast<double>(out_total);
  return m;
}

DstMetrics dst_metrics(const std::vector<DialogueState>& preds,
                       const std::vector<DialogueState>& golds) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("dst_metrics: " + std::to_string(preds.size()) +
                                " predicted turns for " + std::to_string(golds.size()) + " gold turns");
  }
  if (golds.empty()) throw std::invalid_argument("dst_metrics: no turns");
  std::size_t joint = 0, slots = 0, slot_hits = 0;
  for (std::size_t t = 0; t < golds.size(); ++t) {
    const DialogueState& p = preds[t];
    const DialogueState& g = golds[t];
    bool all = true;
    if (p.size() != g.size()) {
      throw std::invalid_argument("dst_metrics: turn " + std::to_string(t) +
                                  " covers a different slot universe");
    }
    for (const auto& [key, value] : g) {
      auto it = p.find(key);
      if (it == p.end()) {
        throw std::invalid_argument("dst_metrics: turn " + std::to_string(t) +
                                    " has no prediction for '" + key.str() + "'");
      }
      ++slots;
      if (it->second == value) {
        ++slot_hits;
      } else {
        all = false;
      }
    }
    if (all) ++joint;
  }
  DstMetrics m;
  m.joint = static_cast<double>(joint) / static_cast<double>(golds.size());
  m.slot = slots == 0 ? 1.0 : static_cast<double>(slot_hits) / static_cast<double>(slots);
  return m;
}

F1Scores multilabel_f1(const std::vector<std::set<std::string>>& preds,
                       const std::vector<std::set<std::string>>& golds,
                       const std::vector<std::string>& space) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("multilabel_f1: length mismatch");
  }
  if (space.empty()) throw std::invalid_argument("multilabel_f1: empty label space");
  std::map<std::string, std::size_t> index;
  for (const std::string& l : space) {
    if (!index.emplace(l, index.size()).second) {
      throw std::invalid_argument("multilabel_f1: duplicate label '" + l + "'");
    }
  }
  std::vector<std::size_t> tp(space.size()), fp(space.size()), fn(space.size());
  auto lookup = [&](const std::string& l) {
    auto it = index.find(l);
    if (it == index.end()) throw std::invalid_argument("multilabel_f1: label '" + l + "' outside label space");
    return it->second;
  };
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (const std::string& l : preds[i]) {
      const std::size_t j = lookup(l);
      if (golds[i].count(l)) {
        ++tp[j];
      } else {
        ++fp[j];
      }
    }
    for (const std::string& l : golds[i]) {
      const std::size_t j = lookup(l);
      if (!preds[i].count(l)) ++fn[j];
    }
  }
  auto f1 = [](std::size_t t, std::size_t p, std::size_t n) {
    if (t == 0) return 0.0;
    return 2.0 * static_cast<double>(t) / static_cast<double>(2 * t + p + n);
  };
  std::size_t TP = 0, FP = 0, FN = 0;
  double macro = 0.0;
  for (std::size_t j = 0; j < space.size(); ++j) {
    TP += tp[j];
    FP += fp[j];
    FN += fn[j];
    macro += f1(tp[j], fp[j], fn[j]);
  }
  return {f1(TP, FP, FN), macro / static_cast<double>(space.size())};
}

std::map<std::size_t, double> k_of_100_many(const PairScorer& scorer, std::size_t n,
                                            const std::vector<std::size_t>& ks,
                                            std::size_t num_seeds, std::uint64_t seed) {
  if (n < kRankBatch) {
    throw std::invalid_argument("k_of_100 needs at least 100 pairs, got " + std::to_string(n));
  }
  if (num_seeds == 0) throw std::invalid_argument("k_of_100: num_seeds must be positive");
  for (std::size_t k : ks) {
    if (k < 1 || k >= kRankBatch) {
      throw std::invalid_argument("k_of_100: k must be in 1..99, got " + std::to_string(k));
    }
  }
  std::map<std::size_t, double> hits;
  for (std::size_t k : ks) hits[k] = 0.0;
  std::size_t examples = 0;
  const std::size_t batches = n / kRankBatch;
  for (std::size_t s = 0; s < num_seeds; ++s) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed({seed, s}));
    rng.shuffle(order);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t* batch = order.data() + b * kRankBatch;
      for (std::size_t i = 0; i < kRankBatch; ++i) {
        const double gold = scorer(batch[i], batch[i]);
        std::size_t rank = 1;
        for (std::size_t j = 0; j < kRankBatch; ++j) {
          if (j != i && scorer(batch[i], batch[j]) >= gold) ++rank;
        }
        for (auto& [k, h] : hits) {
          if (rank <= k) h += 1.0;
        }
        ++examples;
      }
    }
  }
  for (auto& [k, h] : hits) h /= static_cast<double>(examples);
  return hits;
}

double k_of_100(const PairScorer& scorer, std::size_t n, std::size_t k, std::size_t num_seeds,
                std::uint64_t seed) {
  return k_of_100_many(scorer, n, {k}, num_seeds, seed).at(k);
}

void FewShotSpec::validate() const {
  if (mode == Mode::per_class_k && k < 1) throw std::invalid_argument("few-shot k must be >= 1");
  if (mode == Mode::fraction && !(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("few-shot fraction must be in (0, 1]");
  }
  if (num_seeds < 3) throw std::invalid_argument("few-shot runs need at least 3 seeds");
}

std::size_t fraction_count(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("fraction must be in (0, 1]");
  }
  const auto c = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::min(n, std::max<std::size_t>(1, c));
}

std::vector<std::size_t> sample_per_class(const std::vector<std::string>& labels, std::size_t k,
                                          std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("few-shot k must be >= 1");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> out;
  for (auto& [label, members] : by_class) {
    if (members.size() < k) {
      throw std::invalid_argument("class '" + label + "' has " + std::to_string(members.size()) +
                                  " samples, fewer than k = " + std::to_string(k));
    }
    rng.shuffle(members);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> sample_fraction(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("cannot sample from an empty set");
  const std::size_t c = fraction_count(fraction, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(c);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> few_shot_sample(std::size_t n, const std::vector<std::string>* labels,
                                         const FewShotSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.mode == FewShotSpec::Mode::per_class_k) {
    if (!labels) throw std::invalid_argument("per-class sampling needs labels");
    return sample_per_class(*labels, spec.k, seed);
  }
  return sample_fraction(n, spec.fraction, seed);
}

}  // namespace dialm
