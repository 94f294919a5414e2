#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dialm/tensor.hpp"
#include "dialm/tokenizer.hpp"

namespace dialm {

class EncoderError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t hidden = 128;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 128;
  std::size_t num_segments = 1;
  double dropout = 0.1;
  double layer_norm_eps = 1e-12;

  std::size_t head_dim() const { return hidden / num_heads; }

  /// Throws EncoderError when a count is zero, hidden % num_heads != 0 or
  /// dropout is outside [0, 1).
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct LayerParams {
  Matrix query_weight, query_bias;
  Matrix key_weight, key_bias;
  Matrix value_weight, value_bias;
  Matrix attn_out_weight, attn_out_bias;
  Matrix attn_ln_gamma, attn_ln_beta;
  Matrix ffn_in_weight, ffn_in_bias;
  Matrix ffn_out_weight, ffn_out_bias;
  Matrix ffn_ln_gamma, ffn_ln_beta;

  bool operator==(const LayerParams&) const = default;
};

/// All trainable encoder tensors. Weight matrices are laid out (in x out) and
/// applied as x * W. Gradients use the same type.
struct EncoderParams {
  Matrix token_embeddings;     // vocab_size x hidden
  Matrix position_embeddings;  // max_positions x hidden
  Matrix segment_embeddings;   // num_segments x hidden
  Matrix embed_ln_gamma, embed_ln_beta;
  std::vector<LayerParams> layers;

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t parameter_count() const;
  bool all_finite() const;
  bool operator==(const EncoderParams&) const = default;

private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("embeddings.token.weight"), self.token_embeddings);
    f(std::string("embeddings.position.weight"), self.position_embeddings);
    f(std::string("embeddings.segment.weight"), self.segment_embeddings);
    f(std::string("embeddings.ln.gamma"), self.embed_ln_gamma);
    f(std::string("embeddings.ln.beta"), self.embed_ln_beta);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      f(p + "attn.query.weight", l.query_weight);
      f(p + "attn.query.bias", l.query_bias);
      f(p + "attn.key.weight", l.key_weight);
      f(p + "attn.key.bias", l.key_bias);
      f(p + "attn.value.weight", l.value_weight);
      f(p + "attn.value.bias", l.value_bias);
      f(p + "attn.output.weight", l.attn_out_weight);
      f(p + "attn.output.bias", l.attn_out_bias);
      f(p + "attn.ln.gamma", l.attn_ln_gamma);
      f(p + "attn.ln.beta", l.attn_ln_beta);
      f(p + "ffn.in.weight", l.ffn_in_weight);
      f(p + "ffn.in.bias", l.ffn_in_bias);
      f(p + "ffn.out.weight", l.ffn_out_weight);
      f(p + "ffn.out.bias", l.ffn_out_bias);
      f(p + "ffn.ln.gamma", l.ffn_ln_gamma);
      f(p + "ffn.ln.beta", l.ffn_ln_beta);
    }
  }
};

/// Correctly shaped, all-zero tensors (layer-norm scales included).
EncoderParams zero_params(const EncoderConfig& cfg);

/// Truncated-normal(0.02) weights, zero biases, unit layer-norm scales.
EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed);

/// Throws EncoderError when a tensor's shape disagrees with cfg.
void check_shapes(const EncoderParams& params, const EncoderConfig& cfg);

/// dst += alpha * src over all tensors.
void add_scaled(EncoderParams& dst, const EncoderParams& src, double alpha);

struct EncoderOutput {
  Matrix hidden_states;     // L x hidden
  std::vector<double> cls;  // hidden_states row 0
};

struct LayerTape {
  Matrix input;
  Matrix query, key, value;
  std::vector<Matrix> probs;         // per head, softmax output before dropout
  std::vector<Matrix> prob_dropout;  // per head scale factors; empty in eval mode
  Matrix context;
  Matrix attn_dropout;
  Matrix attn_xhat;
  std::vector<double> attn_inv_std;
  Matrix attn_ln_out;
  Matrix ffn_pre;
  Matrix ffn_act;
  Matrix ffn_dropout;
  Matrix ffn_xhat;
  std::vector<double> ffn_inv_std;
};

/// Everything backward() needs to replay one forward pass.
struct EncoderTape {
  TokenSequence seq;
  Matrix embed_xhat;
  std::vector<double> embed_inv_std;
  Matrix embed_dropout;
  std::vector<LayerTape> layers;
};

/// Post-layer-norm Transformer encoder. Padding keys are excluded from
/// attention. Dropout (rate cfg.dropout) applies to the embedding output,
/// attention probabilities and both sublayer outputs when train_mode is set,
/// with masks derived from (dropout_seed, site, index) so a replay is exact.
EncoderOutput forward(const EncoderParams& params, const EncoderConfig& cfg,
                      const TokenSequence& seq, bool train_mode = false,
                      std::uint64_t dropout_seed = 0, EncoderTape* tape = nullptr);

/// Accumulates into `grads` the parameter gradients of the scalar whose
/// gradient w.r.t. the hidden states is `upstream` (L x hidden).
void backward(const EncoderParams& params, const EncoderConfig& cfg, const EncoderTape& tape,
              const Matrix& upstream, EncoderParams& grads);

/// Convenience: re-runs forward with a tape and returns fresh gradients.
EncoderParams backward(const EncoderParams& params, const EncoderConfig& cfg,
                       const TokenSequence& seq, const Matrix& upstream, bool train_mode = false,
                       std::uint64_t dropout_seed = 0);

/// Attention probabilities of one layer/head from a taped forward (for tests).
const Matrix& attention_probs(const EncoderTape& tape, std::size_t layer, std::size_t head);

}  // namespace dialm
