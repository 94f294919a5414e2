#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"
#include "dialm/encoder.hpp"
#include "dialm/metrics.hpp"
#include "dialm/objectives.hpp"
#include "dialm/tokenizer.hpp"
#include "dialm/trainer.hpp"
#include "json.hpp"

namespace dialm {

class LabelError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

enum class Task { intent, dst, act, rs };

std::string to_string(Task t);
/// Accepts "intent", "dst", "act", "rs".
Task parse_task(std::string_view name);

/// Ordered, duplicate-free label list; position is the class index.
class LabelSpace {
public:
  LabelSpace() = default;
  explicit LabelSpace(std::vector<std::string> labels);

  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& label(std::size_t i) const { return labels_.at(i); }
  std::optional<std::size_t> find(const std::string& label) const;
  /// Throws LabelError naming the label when it is not in the space.
  std::size_t index_of(const std::string& label) const;

  bool operator==(const LabelSpace&) const = default;

private:
  std::vector<std::string> labels_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr const char* kNoneValue = "none";

/// (domain, slot) pairs with their candidate values. Every value list contains
/// kNoneValue; value order defines the candidate index.
struct Ontology {
  std::vector<SlotKey> pairs;
  std::vector<std::vector<std::string>> values;

  /// Throws LabelError on duplicate pairs/values or a list without "none".
  void validate() const;
  /// Throws LabelError naming the pair.
  std::size_t pair_index(const SlotKey& key) const;
  /// Throws LabelError naming the value and pair.
  std::size_t value_index(std::size_t pair, const std::string& value) const;

  bool operator==(const Ontology&) const = default;
};

/// Pairs sorted; per pair "none" first, then observed values sorted.
Ontology build_ontology(const std::vector<Dialogue>& dialogues);

/// JSON object {"domain-slot": [values...]} in ontology order. Lists that lack
/// "none" get it prepended on load.
nlohmann::ordered_json ontology_to_json(const Ontology& o);
Ontology ontology_from_json(const nlohmann::ordered_json& j);
void save_ontology(const std::filesystem::path& path, const Ontology& o);
Ontology load_ontology(const std::filesystem::path& path);

/// logits = W cls + b with W (classes x hidden).
struct LinearClassifier {
  Matrix weight;  // classes x hidden
  Matrix bias;    // 1 x classes

  template <typename F>
  void for_each(F&& f) { f(std::string("weight"), weight); f(std::string("bias"), bias); }
  template <typename F>
  void for_each(F&& f) const { f(std::string("weight"), weight); f(std::string("bias"), bias); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  bool operator==(const LinearClassifier&) const = default;
};

/// A = sigmoid(W^T cls + b) with W (hidden x acts).
struct ActHead {
  Matrix weight;  // hidden x acts
  Matrix bias;    // 1 x acts

  template <typename F>
  void for_each(F&& f) { f(std::string("weight"), weight); f(std::string("bias"), bias); }
  template <typename F>
  void for_each(F&& f) const { f(std::string("weight"), weight); f(std::string("bias"), bias); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  bool operator==(const ActHead&) const = default;
};

/// One slot projection per ontology pair: proj_j = cls * G_j + b_j.
struct DstHead {
  std::vector<Matrix> proj_weight;  // hidden x hidden each
  std::vector<Matrix> proj_bias;    // 1 x hidden each

  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }
  std::size_t parameter_count() const;
  bool operator==(const DstHead&) const = default;

private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    for (std::size_t j = 0; j < self.proj_weight.size(); ++j) {
      f("pair" + std::to_string(j) + ".weight", self.proj_weight[j]);
      f("pair" + std::to_string(j) + ".bias", self.proj_bias[j]);
    }
  }
};

LinearClassifier init_linear_classifier(std::size_t classes, std::size_t hidden, std::uint64_t seed);
ActHead init_act_head(std::size_t acts, std::size_t hidden, std::uint64_t seed);
/// Projections start at the identity so the initial projected context is F(X).
DstHead init_dst_head(std::size_t pairs, std::size_t hidden);

/// Index of the maximum, lowest index on ties.
std::size_t argmax(std::span<const double> v);

std::vector<double> classifier_logits(const LinearClassifier& head, std::span<const double> cls);
/// Cross-entropy of softmax(W cls + b) against `label`. With `grads` set,
/// accumulates head gradients and adds d loss / d cls into dcls.
double classifier_loss(const LinearClassifier& head, std::span<const double> cls, std::size_t label,
                       LinearClassifier* grads, std::span<double> dcls);
/// Summed binary cross-entropy over all act labels against multi-hot targets.
double act_head_loss(const ActHead& head, std::span<const double> cls,
                     const std::vector<std::uint8_t>& targets, ActHead* grads,
                     std::span<double> dcls);
/// Per pair: softmax over cosine similarities to the value embeddings,
/// cross-entropy against the gold candidate; summed over pairs.
double dst_head_loss(const DstHead& head, std::span<const double> cls,
                     const std::vector<Matrix>& value_embeddings,
                     const std::vector<std::size_t>& gold, DstHead* grads, std::span<double> dcls);
std::vector<double> intent_probs(const LinearClassifier& head, std::span<const double> cls);
std::vector<double> act_logits(const ActHead& head, std::span<const double> cls);
std::vector<double> act_probs(const ActHead& head, std::span<const double> cls);
/// Indices with probability strictly above 0.5.
std::vector<std::size_t> triggered_acts(std::span<const double> probs);
std::vector<double> dst_project(const DstHead& head, std::size_t pair, std::span<const double> cls);
/// Per pair: cosine(proj_j, value embedding i) for every candidate i.
std::vector<std::vector<double>> dst_similarities(const DstHead& head, std::span<const double> cls,
                                                  const std::vector<Matrix>& value_embeddings);
/// Cosine of two encoded vectors.
double response_score(std::span<const double> context, std::span<const double> candidate);

/// [CLS] output in eval mode.
std::vector<double> encode_cls(const EncoderParams& params, const EncoderConfig& cfg,
                               const TokenSequence& seq);
/// One row per sequence.
Matrix encode_cls_batch(const EncoderParams& params, const EncoderConfig& cfg,
                        const std::vector<TokenSequence>& seqs);

std::vector<double> intent_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                   const LinearClassifier& head, const TokenSequence& utterance);
std::vector<std::vector<double>> dst_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                             const DstHead& head, const TokenSequence& history,
                                             const std::vector<Matrix>& value_embeddings);
std::vector<double> act_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                const ActHead& head, const TokenSequence& history);
double response_selection_score(const EncoderParams& params, const EncoderConfig& cfg,
                                const TokenSequence& context, const TokenSequence& candidate);

/// Per pair, an (values x hidden) matrix of [CLS] encodings of each value text.
std::vector<Matrix> compute_value_embeddings(const EncoderParams& params, const EncoderConfig& cfg,
                                             const Vocab& vocab, const Ontology& ontology,
                                             std::size_t max_len);

struct IntentExample {
  TokenSequence input;  // [CLS] [USR] utterance
  std::size_t label = 0;
};

struct DstExample {
  TokenSequence history;            // dialogue up to and including the user turn
  std::vector<std::size_t> values;  // candidate index per ontology pair
};

struct ActExample {
  TokenSequence history;                 // dialogue up to the turn before the system turn
  std::vector<std::uint8_t> targets;     // multi-hot over the act label space
};

/// Sorted intents of all user turns that carry one.
LabelSpace intent_label_space(const std::vector<Dialogue>& dialogues);
/// Sorted acts of all system turns with a preceding turn.
LabelSpace act_label_space(const std::vector<Dialogue>& dialogues);

std::vector<IntentExample> intent_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                           const LabelSpace& space, std::size_t max_len);
std::vector<DstExample> dst_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                     const Ontology& ontology, std::size_t max_len);
std::vector<ActExample> act_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                     const LabelSpace& space, std::size_t max_len);
/// Every valid (context, next system response) split; contexts keep the most
/// recent context_tokens tokens.
std::vector<ContrastivePair> rs_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                         std::size_t context_tokens, std::size_t max_len);

struct TaskModel {
  Task task = Task::intent;
  std::uint64_t seed = 0;
  EncoderConfig cfg;
  EncoderParams encoder;
  std::size_t max_len = 128;
  std::size_t rs_context_tokens = 256;
  std::string out_of_scope_label = "oos";
  LabelSpace labels;  // intent classes or act labels
  LinearClassifier intent;
  ActHead act;
  Ontology ontology;
  DstHead dst;
  std::vector<Matrix> value_embeddings;

  bool operator==(const TaskModel&) const = default;
};

void save_task_model(const std::filesystem::path& path, const TaskModel& model);
TaskModel load_task_model(const std::filesystem::path& path);

struct FinetuneOptions {
  Task task = Task::intent;
  TrainConfig train;
  /// Freeze the encoder and train only the task head.
  bool probe_only = false;
  std::size_t rs_context_tokens = 256;
  std::string out_of_scope_label = "oos";
  std::optional<LabelSpace> labels;
  std::optional<Ontology> ontology;
  /// Applied to the training data: per-class-k over intent examples,
  /// fraction over dialogues for the other tasks.
  std::optional<FewShotSpec> few_shot;
  std::optional<std::map<std::string, std::string>> act_map;
};

struct FinetuneResult {
  TaskModel model;
  std::vector<nlohmann::json> log;
  std::size_t trainable_parameters = 0;
  std::size_t train_examples = 0;
  double best_dev_loss = 0.0;
  std::size_t best_step = 0;
};

/// Trains encoder and head jointly (head only with probe_only) with the
/// shared AdamW/clipping/schedule/early-stopping loop; dev loss is the mean
/// per-example task loss. All randomness derives from opts.train.seed.
FinetuneResult finetune(const Vocab& vocab, const EncoderConfig& cfg, const EncoderParams& init,
                        const std::vector<Dialogue>& train, const std::vector<Dialogue>& dev,
                        const FinetuneOptions& opts);

struct EvalOptions {
  std::vector<std::size_t> ks{1, 3, 10};
  std::size_t num_seeds = 5;
  std::uint64_t seed = 0;
  std::optional<std::map<std::string, std::string>> act_map;
};

/// Task metrics on held-out dialogues. Metrics with an empty denominator are
/// omitted.
std::map<std::string, double> evaluate_task(const TaskModel& model, const Vocab& vocab,
                                            const std::vector<Dialogue>& test,
                                            const EvalOptions& opts = {});

}  // namespace dialm
