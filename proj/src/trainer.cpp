#include "dialm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dialm/checkpoint.hpp"
#include "dialm/rng.hpp"

namespace dialm {

namespace {

// Stream tags for per-step seeds.
constexpr std::uint64_t kSampleTag = 1;
constexpr std::uint64_t kMaskTag = 2;
constexpr std::uint64_t kMlmDropoutTag = 3;
constexpr std::uint64_t kPairTag = 4;
constexpr std::uint64_t kRclDropoutTag = 5;

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void add_head(MlmHead& dst, const MlmHead& src, double alpha) {
  std::vector<const Matrix*> s;
  src.for_each([&](const std::string&, const Matrix& m) { s.push_back(&m); });
  std::size_t i = 0;
  dst.for_each([&](const std::string&, Matrix& m) { axpy(alpha, *s[i++], m); });
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("train config: " + what);
  };
  if (batch_size == 0) fail("batch_size must be positive");
  if (max_len < 2) fail("max_len must be at least 2");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) fail("lr0 must be positive");
  if (total_steps == 0) fail("total_steps must be positive");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (eval_every == 0) fail("eval_every must be positive");
  if (patience == 0) fail("patience must be positive");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["max_len"] = c.max_len;
  j["lr0"] = c.lr0;
  j["total_steps"] = c.total_steps;
  j["clip_norm"] = c.clip_norm;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["eval_every"] = c.eval_every;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  return nlohmann::json::parse(j.dump());
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_len = j.value("max_len", c.max_len);
  c.lr0 = j.value("lr0", c.lr0);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  return c;
}

bool decay_exempt(std::string_view name) {
  return ends_with(name, ".bias") || ends_with(name, ".gamma") || ends_with(name, ".beta");
}

void zero_grads(std::span<const ParamSlot> slots) {
  for (const ParamSlot& s : slots) s.grad->fill(0.0);
}

void adamw_step(std::span<const ParamSlot> slots, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  for (const ParamSlot& s : slots) {
    if (!s.value->same_shape(*s.grad)) {
      throw std::runtime_error("gradient shape mismatch for tensor '" + s.name + "'");
    }
    for (double g : s.grad->values()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in tensor '" + s.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const ParamSlot& s : slots) {
    Matrix& m = state.first_moment[s.name];
    Matrix& v = state.second_moment[s.name];
    if (!m.same_shape(*s.value)) m = Matrix(s.value->rows(), s.value->cols());
    if (!v.same_shape(*s.value)) v = Matrix(s.value->rows(), s.value->cols());
    const double decay = decay_exempt(s.name) ? 0.0 : cfg.weight_decay;
    auto p = s.value->values();
    auto g = s.grad->values();
    auto mv = m.values();
    auto vv = v.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * decay;
      mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * g[i];
      vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + cfg.epsilon);
    }
  }
}

double clip_gradients(std::span<Matrix* const> grads, double clip_norm) {
  double sq = 0.0;
  for (const Matrix* g : grads) {
    for (double x : g->values()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (Matrix* g : grads) {
      for (double& x : g->values()) x *= scale;
    }
  }
  return norm;
}

double clip_gradients(std::span<const ParamSlot> slots, double clip_norm) {
  std::vector<Matrix*> grads;
  for (const ParamSlot& s : slots) grads.push_back(s.grad);
  return clip_gradients(grads, clip_norm);
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  const double frac = static_cast<double>(std::min(step, cfg.total_steps)) /
                      static_cast<double>(cfg.total_steps);
  return cfg.lr0 * (1.0 - frac);
}

void run_training(const TrainConfig& cfg, std::span<const ParamSlot> slots,
                  OptimizerState& opt, LoopState& loop, const LoopHooks& hooks) {
  cfg.validate();
  auto emit = [&](const nlohmann::json& rec) {
    if (hooks.log) hooks.log(rec);
  };
  if (!loop.initial_evaluated) {
    const double score = hooks.evaluate();
    loop.initial_evaluated = true;
    loop.initial_score = score;
    loop.best_score = score;
    loop.best_step = 0;
    loop.evals_since_best = 0;
    if (hooks.on_improved) hooks.on_improved();
    nlohmann::json rec;
    rec["step"] = 0;
    rec[hooks.score_name] = score;
    emit(rec);
  }
  for (std::size_t step = loop.next_step; step < cfg.total_steps && !loop.stopped; ++step) {
    if (hooks.stop_before && step >= *hooks.stop_before) return;
    zero_grads(slots);
    const auto values = hooks.compute(step);
    const double norm = clip_gradients(slots, cfg.clip_norm);
    const double lr = lr_schedule(step, cfg);
    adamw_step(slots, opt, lr, cfg);
    loop.next_step = step + 1;

    nlohmann::json rec;
    rec["step"] = step + 1;
    rec["lr"] = lr;
    for (const auto& [k, v] : values) rec[k] = v;
    rec["grad_norm"] = norm;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps) {
      const double score = hooks.evaluate();
      rec[hooks.score_name] = score;
      if (score < loop.best_score) {
        loop.best_score = score;
        loop.best_step = step + 1;
        loop.evals_since_best = 0;
        if (hooks.on_improved) hooks.on_improved();
      } else if (++loop.evals_since_best >= cfg.patience) {
        loop.stopped = true;
        rec["early_stop"] = true;
      }
    }
    emit(rec);
  }
}

PretrainState init_pretrain_state(const EncoderConfig& cfg, const PretrainObjectives& obj,
                                  std::uint64_t seed) {
  cfg.validate();
  PretrainState s;
  s.params = init_params(cfg, mix_seed({seed, 0}));
  s.head = init_mlm_head(cfg, obj.tie_mlm_head, mix_seed({seed, 1}));
  s.best_params = s.params;
  s.best_head = s.head;
  return s;
}

MaskedBatch build_masked_batch(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                               std::size_t max_len, const MaskingConfig& masking,
                               std::uint64_t seed) {
  MaskedBatch batch;
  batch.sequences.reserve(dialogues.size());
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    const TokenSequence seq = flatten_dialogue(vocab, dialogues[i], std::nullopt, max_len);
    batch.sequences.push_back(apply_dynamic_masking(seq, vocab.size(), masking, mix_seed({seed, i})));
  }
  return batch;
}

double dev_perplexity(const EncoderParams& params, const MlmHead& head, const EncoderConfig& cfg,
                      const MaskedBatch& dev) {
  const MlmResult r = mlm_loss(params, head, cfg, dev, false, 0, false);
  if (r.empty) throw std::invalid_argument("dev set has no masked tokens");
  return std::exp(r.loss_mean);
}

PretrainResult pretrain(const std::vector<Dialogue>& train_raw,
                        const std::vector<Dialogue>& dev_raw, const Vocab& vocab,
                        const EncoderConfig& enc_cfg, const TrainConfig& tc,
                        const PretrainObjectives& obj, std::optional<PretrainState> resume,
                        std::optional<std::size_t> stop_before) {
  enc_cfg.validate();
  tc.validate();
  if (enc_cfg.vocab_size != vocab.size()) {
    throw std::invalid_argument("encoder vocab_size " + std::to_string(enc_cfg.vocab_size) +
                                " does not match tokenizer size " + std::to_string(vocab.size()));
  }
  if (train_raw.empty()) throw std::invalid_argument("pretrain: empty training set");
  if (dev_raw.empty()) throw std::invalid_argument("pretrain: empty dev set");
  const std::size_t max_len = std::min(tc.max_len, enc_cfg.max_positions);

  std::vector<Dialogue> train, dev;
  for (const Dialogue& d : train_raw) train.push_back(normalize_speakers(d));
  for (const Dialogue& d : dev_raw) dev.push_back(normalize_speakers(d));
  const MaskedBatch dev_batch = build_masked_batch(vocab, dev, max_len, obj.masking, obj.dev_mask_seed);

  PretrainResult result;
  result.state = resume ? std::move(*resume) : init_pretrain_state(enc_cfg, obj, tc.seed);
  PretrainState& st = result.state;
  check_shapes(st.params, enc_cfg);
  if (st.head.tied != obj.tie_mlm_head) {
    throw std::invalid_argument("resumed state disagrees on MLM head tying");
  }

  EncoderParams enc_grads = zero_params(enc_cfg);
  MlmHead head_grads = zero_like(st.head);
  std::vector<ParamSlot> slots;
  append_slots(slots, st.params, enc_grads, "encoder.");
  append_slots(slots, st.head, head_grads, "");

  LoopHooks hooks;
  hooks.score_name = "dev_perplexity";
  hooks.stop_before = stop_before;
  hooks.compute = [&](std::size_t step) {
    std::vector<std::pair<std::string, double>> values;
    Rng rng(mix_seed({tc.seed, step, kSampleTag}));
    const auto picks = random_dialogue_sampler(train.size(), tc.batch_size, rng);
    MaskedBatch batch;
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const TokenSequence seq = flatten_dialogue(vocab, train[picks[i]], std::nullopt, max_len);
      batch.sequences.push_back(apply_dynamic_masking(seq, vocab.size(), obj.masking,
                                                      mix_seed({tc.seed, step, kMaskTag, i})));
    }
    double total_mlm = 0.0;
    double total_rcl = 0.0;
    if (obj.weights.mlm != 0.0) {
      const MlmResult m = mlm_loss(st.params, st.head, enc_cfg, batch, true,
                                   mix_seed({tc.seed, step, kMlmDropoutTag}), true);
      add_scaled(enc_grads, m.encoder_grads, obj.weights.mlm);
      add_head(head_grads, m.head_grads, obj.weights.mlm);
      total_mlm = m.loss_sum;
      values.emplace_back("mlm_loss", m.loss_sum);
      values.emplace_back("mlm_loss_mean", m.loss_mean);
      values.emplace_back("masked_tokens", static_cast<double>(m.mask_count));
    }
    if (obj.use_rcl()) {
      const auto pairs = make_contrastive_batch(vocab, train, tc.batch_size,
                                                mix_seed({tc.seed, step, kPairTag}), max_len);
      const RclResult r = rcl_loss(st.params, enc_cfg, pairs, true,
                                   mix_seed({tc.seed, step, kRclDropoutTag}), true);
      add_scaled(enc_grads, r.grads, obj.weights.rcl);
      total_rcl = r.loss_sum;
      values.emplace_back("rcl_loss", r.loss_sum);
      values.emplace_back("rcl_loss_mean", r.loss_mean);
    }
    values.emplace_back("loss", combined_loss(total_mlm, total_rcl, obj.weights));
    return values;
  };
  hooks.evaluate = [&] { return dev_perplexity(st.params, st.head, enc_cfg, dev_batch); };
  hooks.on_improved = [&] {
    st.best_params = st.params;
    st.best_head = st.head;
  };
  hooks.log = [&](const nlohmann::json& rec) { result.log.push_back(rec); };

  run_training(tc, slots, st.optimizer, st.loop, hooks);
  result.initial_perplexity = st.loop.initial_score;
  result.best_perplexity = st.loop.best_score;
  result.best_step = st.loop.best_step;
  return result;
}

namespace {

void put_head(TensorFile& f, const MlmHead& head, const std::string& prefix) {
  head.for_each([&](const std::string& name, const Matrix& m) { f.put(prefix + name, m); });
}

MlmHead take_head(const TensorFile& f, const EncoderConfig& cfg, bool tied, const std::string& prefix) {
  MlmHead h;
  h.tied = tied;
  h.bias = f.get(prefix + "mlm.bias");
  if (h.bias.rows() != 1 || h.bias.cols() != cfg.vocab_size) {
    throw CheckpointError("tensor '" + prefix + "mlm.bias' has shape " + shape_string(h.bias));
  }
  if (!tied) {
    h.weight = f.get(prefix + "mlm.weight");
    if (h.weight.rows() != cfg.hidden || h.weight.cols() != cfg.vocab_size) {
      throw CheckpointError("tensor '" + prefix + "mlm.weight' has shape " + shape_string(h.weight));
    }
  }
  return h;
}

}  // namespace

void save_pretrain_state(const std::filesystem::path& path, const PretrainState& s,
                         const EncoderConfig& cfg) {
  TensorFile f;
  f.metadata["kind"] = "pretrain-state";
  f.metadata["encoder"] = encoder_config_to_json(cfg);
  f.metadata["mlm_tied"] = s.head.tied;
  f.metadata["optimizer_step"] = s.optimizer.step;
  nlohmann::json loop;
  loop["next_step"] = s.loop.next_step;
  loop["initial_evaluated"] = s.loop.initial_evaluated;
  loop["initial_score"] = s.loop.initial_score;
  loop["best_score"] = s.loop.initial_evaluated ? nlohmann::json(s.loop.best_score) : nlohmann::json();
  loop["best_step"] = s.loop.best_step;
  loop["evals_since_best"] = s.loop.evals_since_best;
  loop["stopped"] = s.loop.stopped;
  f.metadata["loop"] = loop;
  put_encoder(f, s.params, "encoder.");
  put_head(f, s.head, "head.");
  put_encoder(f, s.best_params, "best.encoder.");
  put_head(f, s.best_head, "best.head.");
  for (const auto& [name, m] : s.optimizer.first_moment) f.put("adam.m." + name, m);
  for (const auto& [name, m] : s.optimizer.second_moment) f.put("adam.v." + name, m);
  save_tensor_file(path, f);
}

PretrainState load_pretrain_state(const std::filesystem::path& path, EncoderConfig& cfg) {
  const TensorFile f = load_tensor_file(path);
  if (f.metadata.value("kind", "") != "pretrain-state") {
    throw CheckpointError(path.string() + ": not a pre-training state file");
  }
  cfg = encoder_config_from_json(f.metadata.at("encoder"));
  const bool tied = f.metadata.at("mlm_tied").get<bool>();
  PretrainState s;
  s.params = take_encoder(f, cfg, "encoder.");
  s.head = take_head(f, cfg, tied, "head.");
  s.best_params = take_encoder(f, cfg, "best.encoder.");
  s.best_head = take_head(f, cfg, tied, "best.head.");
  s.optimizer.step = f.metadata.at("optimizer_step").get<std::uint64_t>();
  for (const auto& [name, m] : f.tensors) {
    if (name.starts_with("adam.m.")) s.optimizer.first_moment[name.substr(7)] = m;
    if (name.starts_with("adam.v.")) s.optimizer.second_moment[name.substr(7)] = m;
  }
  const auto& loop = f.metadata.at("loop");
  s.loop.next_step = loop.at("next_step").get<std::size_t>();
  s.loop.initial_evaluated = loop.at("initial_evaluated").get<bool>();
  s.loop.initial_score = loop.at("initial_score").get<double>();
  s.loop.best_score = loop.at("best_score").is_null() ? std::numeric_limits<double>::infinity()
                                                      : loop.at("best_score").get<double>();
  s.loop.best_step = loop.at("best_step").get<std::size_t>();
  s.loop.evals_since_best = loop.at("evals_since_best").get<std::size_t>();
  s.loop.stopped = loop.at("stopped").get<bool>();
  return s;
}

void save_encoder_checkpoint(const std::filesystem::path& path, const EncoderParams& params,
                             const MlmHead& head, const EncoderConfig& cfg,
                             const nlohmann::json& extra) {
  TensorFile f;
  f.metadata = extra.is_object() ? extra : nlohmann::json::object();
  f.metadata["kind"] = "encoder";
  f.metadata["encoder"] = encoder_config_to_json(cfg);
  f.metadata["mlm_tied"] = head.tied;
  put_encoder(f, params, "encoder.");
  put_head(f, head, "head.");
  save_tensor_file(path, f);
}

EncoderCheckpoint load_encoder_checkpoint(const std::filesystem::path& path) {
  const TensorFile f = load_tensor_file(path);
  const std::string kind = f.metadata.value("kind", "");
  if (kind != "encoder" && kind != "pretrain-state") {
    throw CheckpointError(path.string() + ": not an encoder checkpoint");
  }
  EncoderCheckpoint ck;
  ck.cfg = encoder_config_from_json(f.metadata.at("encoder"));
  const bool tied = f.metadata.value("mlm_tied", false);
  // A training state exposes its best snapshot.
  const std::string enc_prefix = kind == "encoder" ? "encoder." : "best.encoder.";
  const std::string head_prefix = kind == "encoder" ? "head." : "best.head.";
  ck.params = take_encoder(f, ck.cfg, enc_prefix);
  if (f.find(head_prefix + "mlm.bias")) ck.head = take_head(f, ck.cfg, tied, head_prefix);
  return ck;
}

}  // namespace dialm
