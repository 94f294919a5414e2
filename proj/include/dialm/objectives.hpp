#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"
#include "dialm/encoder.hpp"
#include "dialm/rng.hpp"
#include "dialm/tokenizer.hpp"

namespace dialm {

/// Label value for positions that were not selected for masking.
inline constexpr TokenId kIgnoreLabel = -1;

struct MaskingConfig {
  double rate = 0.15;
  double mask_prob = 0.8;    // selected -> [MASK]
  double random_prob = 0.1;  // selected -> random non-special id; remainder unchanged
};

struct MaskedSequence {
  TokenSequence input;
  std::vector<TokenId> labels;  // original id where selected, kIgnoreLabel elsewhere
  std::size_t mask_count = 0;
};

struct MaskedBatch {
  std::vector<MaskedSequence> sequences;
  std::size_t mask_count() const;
};

/// Independently selects each non-special position with probability `rate`.
/// Special tokens are never selected. Deterministic per seed.
MaskedSequence apply_dynamic_masking(const TokenSequence& seq, std::size_t vocab_size,
                                     const MaskingConfig& cfg, std::uint64_t seed);

/// Linear map from the final hidden state to vocabulary logits. With `tied`
/// set the token-embedding matrix is used as the weight and `weight` is empty.
struct MlmHead {
  Matrix weight;  // hidden x vocab
  Matrix bias;    // 1 x vocab
  bool tied = false;

  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  bool operator==(const MlmHead&) const = default;

private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    if (!self.tied) f(std::string("mlm.weight"), self.weight);
    f(std::string("mlm.bias"), self.bias);
  }
};

MlmHead init_mlm_head(const EncoderConfig& cfg, bool tied, std::uint64_t seed);
MlmHead zero_like(const MlmHead& head);

/// Vocabulary logits for one hidden vector.
std::vector<double> mlm_logits(const EncoderParams& params, const MlmHead& head,
                               std::span<const double> hidden);

struct MlmResult {
  double loss_sum = 0.0;   // -sum_m log P(x_m)
  double loss_mean = 0.0;  // loss_sum / M (0 when M = 0)
  std::size_t mask_count = 0;
  bool empty = false;      // M = 0: loss and gradients are zero
  EncoderParams encoder_grads;
  MlmHead head_grads;
};

/// Summed masked-token cross-entropy. Each sequence i runs with dropout seed
/// mix_seed({dropout_seed, i}). Gradients are skipped when compute_grads is false.
MlmResult mlm_loss(const EncoderParams& params, const MlmHead& head, const EncoderConfig& cfg,
                   const MaskedBatch& batch, bool train_mode = false,
                   std::uint64_t dropout_seed = 0, bool compute_grads = true);

struct ContrastivePair {
  TokenSequence context;   // [CLS] + turns before the response, front-truncated
  TokenSequence response;  // [CLS] [SYS] + one system utterance
  std::string dialogue_id;
  std::size_t response_turn = 0;
};

/// Indices of system turns that have at least one preceding turn.
std::vector<std::size_t> valid_response_turns(const Dialogue& d);

ContrastivePair make_contrastive_pair(const Vocab& v, const Dialogue& d, std::size_t response_turn,
                                      std::size_t max_len);

/// Chooses `b` indices from a pool of `pool_size` qualifying dialogues.
using DialogueSampler =
    std::function<std::vector<std::size_t>(std::size_t pool_size, std::size_t b, Rng& rng)>;

/// Uniform without replacement while b <= pool_size, with replacement beyond.
std::vector<std::size_t> random_dialogue_sampler(std::size_t pool_size, std::size_t b, Rng& rng);

/// Draws b dialogues that have a valid split point and splits each at a
/// uniformly chosen response turn. Dialogues are expected to be speaker-normalized.
std::vector<ContrastivePair> make_contrastive_batch(const Vocab& v,
                                                    const std::vector<Dialogue>& dialogues,
                                                    std::size_t b, std::uint64_t seed,
                                                    std::size_t max_len,
                                                    const DialogueSampler& sampler =
                                                        random_dialogue_sampler);

struct InBatchSoftmax {
  double loss = 0.0;  // -sum_i log softmax(row i)[i]
  Matrix probs;       // row-wise softmax
  Matrix dlogits;     // d loss / d logits
};

InBatchSoftmax in_batch_softmax_loss(const Matrix& logits);

struct RclResult {
  double loss_sum = 0.0;
  double loss_mean = 0.0;
  Matrix logits;      // C R^T
  Matrix similarity;  // row-wise softmax of logits
  EncoderParams grads;
};

/// Response contrastive loss: contexts and responses encoded separately by the
/// same encoder; pair i runs with dropout seeds mix_seed({dropout_seed, i, 0|1}).
RclResult rcl_loss(const EncoderParams& params, const EncoderConfig& cfg,
                   const std::vector<ContrastivePair>& pairs, bool train_mode = false,
                   std::uint64_t dropout_seed = 0, bool compute_grads = true);

struct LossWeights {
  double mlm = 1.0;
  double rcl = 1.0;
};

/// mlm * w.mlm + rcl * w.rcl; throws std::invalid_argument on non-finite input.
double combined_loss(double mlm, double rcl, LossWeights w = {});

}  // namespace dialm
