#include "dialm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dialm {

std::size_t MaskedBatch::mask_count() const {
  std::size_t m = 0;
  for (const auto& s : sequences) m += s.mask_count;
  return m;
}

MaskedSequence apply_dynamic_masking(const TokenSequence& seq, std::size_t vocab_size,
                                     const MaskingConfig& cfg, std::uint64_t seed) {
  if (!(cfg.rate >= 0.0 && cfg.rate <= 1.0)) {
    throw std::invalid_argument("masking rate must be in [0, 1]");
  }
  if (!(cfg.mask_prob >= 0.0 && cfg.random_prob >= 0.0 && cfg.mask_prob + cfg.random_prob <= 1.0)) {
    throw std::invalid_argument("masking replacement probabilities must be in [0, 1] and sum <= 1");
  }
  MaskedSequence out;
  out.input = seq;
  out.labels.assign(seq.size(), kIgnoreLabel);
  const bool can_randomize = vocab_size > kNumSpecials;
  Rng rng(seed);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const TokenId id = seq.ids[i];
    if (Vocab::is_special(id)) continue;
    if (!(rng.uniform() < cfg.rate)) continue;
    out.labels[i] = id;
    ++out.mask_count;
    const double branch = rng.uniform();
    if (branch < cfg.mask_prob) {
      out.input.ids[i] = id_of(Special::mask);
    } else if (branch < cfg.mask_prob + cfg.random_prob && can_randomize) {
      out.input.ids[i] = static_cast<TokenId>(kNumSpecials + rng.below(vocab_size - kNumSpecials));
    }
  }
  return out;
}

MlmHead init_mlm_head(const EncoderConfig& cfg, bool tied, std::uint64_t seed) {
  MlmHead head;
  head.tied = tied;
  head.bias = Matrix(1, cfg.vocab_size);
  if (!tied) {
    head.weight = Matrix(cfg.hidden, cfg.vocab_size);
    Rng rng(mix_seed({seed, 0x4D4C4D}));
    for (double& v : head.weight.values()) v = rng.truncated_normal(0.02);
  }
  return head;
}

MlmHead zero_like(const MlmHead& head) {
  MlmHead z;
  z.tied = head.tied;
  z.weight = Matrix(head.weight.rows(), head.weight.cols());
  z.bias = Matrix(head.bias.rows(), head.bias.cols());
  return z;
}

std::vector<double> mlm_logits(const EncoderParams& params, const MlmHead& head,
                               std::span<const double> hidden) {
  const std::size_t vocab = head.bias.cols();
  std::vector<double> logits(head.bias.values().begin(), head.bias.values().end());
  if (head.tied) {
    for (std::size_t v = 0; v < vocab; ++v) logits[v] += dot(hidden, params.token_embeddings.row(v));
  } else {
    for (std::size_t c = 0; c < hidden.size(); ++c) {
      const double h = hidden[c];
      auto w = head.weight.row(c);
      for (std::size_t v = 0; v < vocab; ++v) logits[v] += h * w[v];
    }
  }
  return logits;
}

MlmResult mlm_loss(const EncoderParams& params, const MlmHead& head, const EncoderConfig& cfg,
                   const MaskedBatch& batch, bool train_mode, std::uint64_t dropout_seed,
                   bool compute_grads) {
  MlmResult r;
  r.mask_count = batch.mask_count();
  r.empty = r.mask_count == 0;
  if (compute_grads) {
    r.encoder_grads = zero_params(cfg);
    r.head_grads = zero_like(head);
  }
  if (r.empty) return r;

  const std::size_t d = cfg.hidden;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    const MaskedSequence& ms = batch.sequences[s];
    if (ms.mask_count == 0) continue;
    EncoderTape tape;
    const EncoderOutput out = forward(params, cfg, ms.input, train_mode,
                                      mix_seed({dropout_seed, s}), compute_grads ? &tape : nullptr);
    Matrix upstream(ms.input.size(), d);
    for (std::size_t p = 0; p < ms.labels.size(); ++p) {
      const TokenId target = ms.labels[p];
      if (target == kIgnoreLabel) continue;
      auto h = out.hidden_states.row(p);
      std::vector<double> probs = mlm_logits(params, head, h);
      softmax_inplace(probs);
      r.loss_sum -= std::log(probs[static_cast<std::size_t>(target)]);
      if (!compute_grads) continue;

      probs[static_cast<std::size_t>(target)] -= 1.0;  // now d loss / d logits
      const std::vector<double>& dlogits = probs;
      for (std::size_t v = 0; v < dlogits.size(); ++v) r.head_grads.bias[v] += dlogits[v];
      auto dh = upstream.row(p);
      if (head.tied) {
        for (std::size_t v = 0; v < dlogits.size(); ++v) {
          auto e = params.token_embeddings.row(v);
          auto ge = r.encoder_grads.token_embeddings.row(v);
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] += dlogits[v] * e[c];
            ge[c] += dlogits[v] * h[c];
          }
        }
      } else {
        for (std::size_t c = 0; c < d; ++c) {
          auto w = head.weight.row(c);
          auto gw = r.head_grads.weight.row(c);
          double acc = 0.0;
          for (std::size_t v = 0; v < dlogits.size(); ++v) {
            acc += w[v] * dlogits[v];
            gw[v] += h[c] * dlogits[v];
          }
          dh[c] += acc;
        }
      }
    }
    if (compute_grads) backward(params, cfg, tape, upstream, r.encoder_grads);
  }
  r.loss_mean = r.loss_sum / static_cast<double>(r.mask_count);
  return r;
}

std::vector<std::size_t> valid_response_turns(const Dialogue& d) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < d.turns.size(); ++i) {
    if (d.turns[i].speaker == Speaker::system) out.push_back(i);
  }
  return out;
}

ContrastivePair make_contrastive_pair(const Vocab& v, const Dialogue& d, std::size_t response_turn,
                                      std::size_t max_len) {
  if (response_turn == 0 || response_turn >= d.turns.size() ||
      d.turns[response_turn].speaker != Speaker::system) {
    throw std::invalid_argument("turn " + std::to_string(response_turn) + " of dialogue '" + d.id +
                                "' is not a valid response turn");
  }
  ContrastivePair p;
  p.context = flatten_dialogue(v, d, response_turn - 1, max_len);
  p.response = encode_utterance(v, Speaker::system, d.turns[response_turn].text, max_len);
  p.dialogue_id = d.id;
  p.response_turn = response_turn;
  return p;
}

std::vector<std::size_t> random_dialogue_sampler(std::size_t pool_size, std::size_t b, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(b);
  while (out.size() < b) {
    std::vector<std::size_t> idx(pool_size);
    for (std::size_t i = 0; i < pool_size; ++i) idx[i] = i;
    const std::size_t take = std::min(pool_size, b - out.size());
    // Partial Fisher-Yates: the first `take` entries form a uniform sample.
    for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng.below(pool_size - i)]);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

std::vector<ContrastivePair> make_contrastive_batch(const Vocab& v,
                                                    const std::vector<Dialogue>& dialogues,
                                                    std::size_t b, std::uint64_t seed,
                                                    std::size_t max_len,
                                                    const DialogueSampler& sampler) {
  if (b == 0) throw std::invalid_argument("contrastive batch size must be >= 1");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    if (!valid_response_turns(dialogues[i]).empty()) pool.push_back(i);
  }
  if (pool.empty()) {
    throw std::invalid_argument("no dialogue has a system turn preceded by another turn");
  }
  Rng rng(mix_seed({seed, 0x52434C}));
  std::vector<ContrastivePair> pairs;
  pairs.reserve(b);
  for (std::size_t k : sampler(pool.size(), b, rng)) {
    const Dialogue& d = dialogues[pool.at(k)];
    const auto turns = valid_response_turns(d);
    pairs.push_back(make_contrastive_pair(v, d, turns[rng.below(turns.size())], max_len));
  }
  return pairs;
}

InBatchSoftmax in_batch_softmax_loss(const Matrix& logits) {
  if (logits.rows() != logits.cols()) throw std::invalid_argument("logits must be square");
  InBatchSoftmax r;
  r.probs = logits;
  r.dlogits = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    softmax_inplace(r.probs.row(i));
    // log-sum-exp form keeps -log M_ii accurate when M_ii is close to 1.
    double mx = logits(i, 0);
    for (double x : logits.row(i)) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : logits.row(i)) sum += std::exp(x - mx);
    r.loss += mx + std::log(sum) - logits(i, i);
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      r.dlogits(i, j) = r.probs(i, j) - (i == j ? 1.0 : 0.0);
    }
  }
  return r;
}

RclResult rcl_loss(const EncoderParams& params, const EncoderConfig& cfg,
                   const std::vector<ContrastivePair>& pairs, bool train_mode,
                   std::uint64_t dropout_seed, bool compute_grads) {
  const std::size_t b = pairs.size();
  if (b == 0) throw std::invalid_argument("rcl_loss needs at least one pair");
  const std::size_t d = cfg.hidden;
  std::vector<EncoderTape> ctx_tapes(compute_grads ? b : 0), resp_tapes(compute_grads ? b : 0);
  Matrix c(b, d), r(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    auto co = forward(params, cfg, pairs[i].context, train_mode, mix_seed({dropout_seed, i, 0}),
                      compute_grads ? &ctx_tapes[i] : nullptr);
    auto ro = forward(params, cfg, pairs[i].response, train_mode, mix_seed({dropout_seed, i, 1}),
                      compute_grads ? &resp_tapes[i] : nullptr);
    std::copy(co.cls.begin(), co.cls.end(), c.row(i).begin());
    std::copy(ro.cls.begin(), ro.cls.end(), r.row(i).begin());
  }

  RclResult out;
  out.logits = matmul_nt(c, r);
  InBatchSoftmax sm = in_batch_softmax_loss(out.logits);
  out.loss_sum = sm.loss;
  out.loss_mean = sm.loss / static_cast<double>(b);
  out.similarity = std::move(sm.probs);
  if (!compute_grads) return out;

  const Matrix dc = matmul(sm.dlogits, r);
  const Matrix dr = matmul_tn(sm.dlogits, c);
  out.grads = zero_params(cfg);
  for (std::size_t i = 0; i < b; ++i) {
    Matrix up_c(pairs[i].context.size(), d);
    std::copy(dc.row(i).begin(), dc.row(i).end(), up_c.row(0).begin());
    backward(params, cfg, ctx_tapes[i], up_c, out.grads);
    Matrix up_r(pairs[i].response.size(), d);
    std::copy(dr.row(i).begin(), dr.row(i).end(), up_r.row(0).begin());
    backward(params, cfg, resp_tapes[i], up_r, out.grads);
  }
  return out;
}

double combined_loss(double mlm, double rcl, LossWeights w) {
  if (!std::isfinite(mlm) || !std::isfinite(rcl)) {
    throw std::invalid_argument("combined_loss: non-finite loss term");
  }
  return mlm * w.mlm + rcl * w.rcl;
}

}  // namespace dialm
