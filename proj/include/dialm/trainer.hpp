#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"
#include "dialm/encoder.hpp"
#include "dialm/objectives.hpp"
#include "dialm/tokenizer.hpp"
#include "json.hpp"

namespace dialm {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t max_len = 128;
  double lr0 = 5e-4;
  std::size_t total_steps = 2000;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t eval_every = 100;
  std::size_t patience = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One trainable tensor and its gradient buffer.
struct ParamSlot {
  std::string name;
  Matrix* value = nullptr;
  Matrix* grad = nullptr;
};

/// Layer-norm scales/offsets and biases are exempt from weight decay.
bool decay_exempt(std::string_view name);

/// Appends slots pairing `params` with `grads` (same structure), names prefixed.
template <typename P>
void append_slots(std::vector<ParamSlot>& slots, P& params, P& grads, const std::string& prefix) {
  std::vector<Matrix*> g;
  grads.for_each([&](const std::string&, Matrix& m) { g.push_back(&m); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix& m) {
    slots.push_back({prefix + name, &m, g[i++]});
  });
}

void zero_grads(std::span<const ParamSlot> slots);

struct OptimizerState {
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;
  std::uint64_t step = 0;

  bool operator==(const OptimizerState&) const = default;
};

/// Decoupled-weight-decay Adam with bias-corrected moments. Throws
/// std::runtime_error naming the tensor when a gradient is not finite
/// (before any parameter is touched).
void adamw_step(std::span<const ParamSlot> slots, OptimizerState& state, double lr,
                const TrainConfig& cfg);

/// Scales all gradients by clip_norm / norm when the global L2 norm exceeds
/// clip_norm. Returns the norm before clipping.
double clip_gradients(std::span<Matrix* const> grads, double clip_norm);
double clip_gradients(std::span<const ParamSlot> slots, double clip_norm);

/// lr0 * (1 - step / total_steps).
double lr_schedule(std::size_t step, const TrainConfig& cfg);

/// Progress of an early-stopped loop; everything needed to resume.
struct LoopState {
  std::size_t next_step = 0;
  bool initial_evaluated = false;
  double initial_score = 0.0;
  double best_score = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t evals_since_best = 0;
  bool stopped = false;

  bool operator==(const LoopState&) const = default;
};

struct LoopHooks {
  /// Fills the gradient buffers (already zeroed) for update `step`; returns
  /// named values for the metrics log.
  std::function<std::vector<std::pair<std::string, double>>(std::size_t step)> compute;
  /// Held-out score, lower is better.
  std::function<double()> evaluate;
  /// Called whenever the score improves (snapshot the current parameters).
  std::function<void()> on_improved;
  /// Receives one record per update and one for the initial evaluation.
  std::function<void(const nlohmann::json&)> log;
  std::string score_name = "dev_loss";
  /// Leaves the loop before this update index (simulates an interruption).
  std::optional<std::size_t> stop_before;
};

/// Evaluate, then per update: compute -> clip -> scheduled lr -> AdamW; evaluate
/// every eval_every updates and at the last one; stop after `patience`
/// evaluations without improvement.
void run_training(const TrainConfig& cfg, std::span<const ParamSlot> slots,
                  OptimizerState& opt, LoopState& loop, const LoopHooks& hooks);

struct PretrainObjectives {
  LossWeights weights{1.0, 0.0};  // MLM only by default
  MaskingConfig masking;
  bool tie_mlm_head = false;
  /// Fixed masking seed for the dev set so perplexities are comparable.
  std::uint64_t dev_mask_seed = 0x5EED;

  bool use_rcl() const { return weights.rcl != 0.0; }
};

struct PretrainState {
  EncoderParams params;
  MlmHead head;
  EncoderParams best_params;
  MlmHead best_head;
  OptimizerState optimizer;
  LoopState loop;
};

PretrainState init_pretrain_state(const EncoderConfig& cfg, const PretrainObjectives& obj,
                                  std::uint64_t seed);

struct PretrainResult {
  PretrainState state;
  std::vector<nlohmann::json> log;
  double initial_perplexity = 0.0;
  double best_perplexity = 0.0;
  std::size_t best_step = 0;
};

/// Dev masked-token perplexity exp(mean cross-entropy), eval mode.
double dev_perplexity(const EncoderParams& params, const MlmHead& head, const EncoderConfig& cfg,
                      const MaskedBatch& dev);

/// Flattens (front-truncated to max_len) and masks every dialogue with
/// seed mix_seed({seed, i}).
MaskedBatch build_masked_batch(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                               std::size_t max_len, const MaskingConfig& masking,
                               std::uint64_t seed);

/// Masked-LM (+ optional response-contrastive) pre-training with early
/// stopping on dev perplexity. Dialogues are speaker-normalized internally.
/// Pass `resume` to continue a stored state; all per-step randomness is
/// derived from (cfg.seed, step), so a resumed run matches an uninterrupted one.
PretrainResult pretrain(const std::vector<Dialogue>& train, const std::vector<Dialogue>& dev,
                        const Vocab& vocab, const EncoderConfig& enc_cfg,
                        const TrainConfig& train_cfg, const PretrainObjectives& obj,
                        std::optional<PretrainState> resume = std::nullopt,
                        std::optional<std::size_t> stop_before = std::nullopt);

/// Full resumable state (weights, best snapshot, moments, loop counters).
void save_pretrain_state(const std::filesystem::path& path, const PretrainState& state,
                         const EncoderConfig& cfg);
PretrainState load_pretrain_state(const std::filesystem::path& path, EncoderConfig& cfg);

/// Best encoder + MLM head, the artifact downstream commands load.
void save_encoder_checkpoint(const std::filesystem::path& path, const EncoderParams& params,
                             const MlmHead& head, const EncoderConfig& cfg,
                             const nlohmann::json& extra = nlohmann::json::object());
struct EncoderCheckpoint {
  EncoderConfig cfg;
  EncoderParams params;
  std::optional<MlmHead> head;
};
EncoderCheckpoint load_encoder_checkpoint(const std::filesystem::path& path);

}  // namespace dialm
