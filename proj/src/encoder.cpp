#include "dialm/encoder.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "dialm/rng.hpp"

namespace dialm {

namespace {

constexpr double kInitStd = 0.02;

// Dropout site ids; per layer the block starts at 1000 * (layer + 1).
constexpr std::uint64_t kSiteEmbedding = 0;
constexpr std::uint64_t kSiteAttnOut = 500;
constexpr std::uint64_t kSiteFfnOut = 501;

std::uint64_t layer_site(std::size_t layer, std::uint64_t offset) {
  return 1000 * (static_cast<std::uint64_t>(layer) + 1) + offset;
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate, std::uint64_t seed,
                    std::uint64_t site) {
  Matrix m(rows, cols);
  const std::uint64_t key = mix_seed({seed, site});
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = hash_uniform(key, i) < rate ? 0.0 : keep_scale;
  return m;
}

void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// y = gamma * (x - mean) / sqrt(var + eps) + beta, row-wise.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps,
                  Matrix& xhat, std::vector<double>& inv_std) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  xhat = Matrix(n, d);
  inv_std.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (row[c] - mean) * inv;
      y(r, c) = gamma[c] * xhat(r, c) + beta[c];
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat,
                           const std::vector<double>& inv_std, const Matrix& gamma,
                           Matrix& dgamma, Matrix& dbeta) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0, sum_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgamma[c] += dy(r, c) * xhat(r, c);
      dbeta[c] += dy(r, c);
      dxhat[c] = dy(r, c) * gamma[c];
      sum += dxhat[c];
      sum_xhat += dxhat[c] * xhat(r, c);
    }
    const double scale = inv_std[r] / static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = scale * (static_cast<double>(d) * dxhat[c] - sum - xhat(r, c) * sum_xhat);
    }
  }
  return dx;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = matmul(x, w);
  add_row_vector(y, b);
  return y;
}

// Accumulates dW += x^T dy, db += colsum(dy) and returns dx = dy W^T.
Matrix linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw,
                       Matrix& db) {
  gemm(x, true, dy, false, dw, 1.0, 1.0);
  accumulate_column_sums(dy, db);
  return matmul_nt(dy, w);
}

void check_sequence(const EncoderConfig& cfg, const TokenSequence& seq) {
  const std::size_t n = seq.size();
  if (n == 0) throw EncoderError("empty input sequence");
  if (seq.positions.size() != n || seq.segments.size() != n || seq.attention_mask.size() != n) {
    throw EncoderError("token sequence fields have different lengths");
  }
  if (n > cfg.max_positions) {
    throw EncoderError("sequence length " + std::to_string(n) + " exceeds max_positions " +
                       std::to_string(cfg.max_positions));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.ids[i] < 0 || static_cast<std::size_t>(seq.ids[i]) >= cfg.vocab_size) {
      throw EncoderError("token id " + std::to_string(seq.ids[i]) + " at position " +
                         std::to_string(i) + " out of range for vocab_size " +
                         std::to_string(cfg.vocab_size));
    }
    if (seq.positions[i] < 0 || static_cast<std::size_t>(seq.positions[i]) >= cfg.max_positions) {
      throw EncoderError("position id out of range at index " + std::to_string(i));
    }
    if (seq.segments[i] < 0 || static_cast<std::size_t>(seq.segments[i]) >= cfg.num_segments) {
      throw EncoderError("segment id out of range at index " + std::to_string(i));
    }
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || hidden == 0 || ffn_dim == 0 || vocab_size == 0 ||
      max_positions == 0 || num_segments == 0) {
    throw EncoderError("encoder config: all counts must be >= 1");
  }
  if (hidden % num_heads != 0) {
    throw EncoderError("encoder config: hidden " + std::to_string(hidden) +
                       " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw EncoderError("encoder config: dropout not in [0,1)");
  if (!(layer_norm_eps > 0.0)) throw EncoderError("encoder config: layer_norm_eps must be > 0");
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

bool EncoderParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Matrix& m) {
    for (double v : m.values()) ok = ok && std::isfinite(v);
  });
  return ok;
}

EncoderParams zero_params(const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden;
  EncoderParams p;
  p.token_embeddings = Matrix(cfg.vocab_size, d);
  p.position_embeddings = Matrix(cfg.max_positions, d);
  p.segment_embeddings = Matrix(cfg.num_segments, d);
  p.embed_ln_gamma = Matrix(1, d);
  p.embed_ln_beta = Matrix(1, d);
  p.layers.resize(cfg.num_layers);
  for (auto& l : p.layers) {
    l.query_weight = Matrix(d, d);
    l.query_bias = Matrix(1, d);
    l.key_weight = Matrix(d, d);
    l.key_bias = Matrix(1, d);
    l.value_weight = Matrix(d, d);
    l.value_bias = Matrix(1, d);
    l.attn_out_weight = Matrix(d, d);
    l.attn_out_bias = Matrix(1, d);
    l.attn_ln_gamma = Matrix(1, d);
    l.attn_ln_beta = Matrix(1, d);
    l.ffn_in_weight = Matrix(d, cfg.ffn_dim);
    l.ffn_in_bias = Matrix(1, cfg.ffn_dim);
    l.ffn_out_weight = Matrix(cfg.ffn_dim, d);
    l.ffn_out_bias = Matrix(1, d);
    l.ffn_ln_gamma = Matrix(1, d);
    l.ffn_ln_beta = Matrix(1, d);
  }
  return p;
}

EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderParams p = zero_params(cfg);
  std::uint64_t index = 0;
  p.for_each([&](const std::string& name, Matrix& m) {
    const std::uint64_t tensor_seed = mix_seed({seed, index++});
    if (name.ends_with(".gamma")) {
      m.fill(1.0);
    } else if (name.ends_with(".weight")) {
      Rng rng(tensor_seed);
      for (double& v : m.values()) v = rng.truncated_normal(kInitStd);
    }
  });
  return p;
}

void check_shapes(const EncoderParams& params, const EncoderConfig& cfg) {
  const EncoderParams ref = zero_params(cfg);
  if (params.layers.size() != ref.layers.size()) {
    throw EncoderError("parameter layer count " + std::to_string(params.layers.size()) +
                       " does not match config " + std::to_string(ref.layers.size()));
  }
  std::vector<const Matrix*> expected;
  ref.for_each([&](const std::string&, const Matrix& m) { expected.push_back(&m); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, const Matrix& m) {
    if (!m.same_shape(*expected[i])) {
      throw EncoderError("tensor " + name + " has shape " + shape_string(m) + ", expected " +
                         shape_string(*expected[i]));
    }
    ++i;
  });
}

void add_scaled(EncoderParams& dst, const EncoderParams& src, double alpha) {
  std::vector<const Matrix*> s;
  src.for_each([&](const std::string&, const Matrix& m) { s.push_back(&m); });
  std::size_t i = 0;
  dst.for_each([&](const std::string&, Matrix& m) { axpy(alpha, *s[i++], m); });
}

EncoderOutput forward(const EncoderParams& params, const EncoderConfig& cfg,
                      const TokenSequence& seq, bool train_mode, std::uint64_t dropout_seed,
                      EncoderTape* tape) {
  check_sequence(cfg, seq);
  const std::size_t n = seq.size();
  const std::size_t d = cfg.hidden;
  const std::size_t heads = cfg.num_heads;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool dropout = train_mode && cfg.dropout > 0.0;

  EncoderTape local;
  EncoderTape& t = tape ? *tape : local;
  t = EncoderTape{};
  t.seq = seq;
  t.layers.resize(cfg.num_layers);

  Matrix emb(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto tok = params.token_embeddings.row(static_cast<std::size_t>(seq.ids[i]));
    auto pos = params.position_embeddings.row(static_cast<std::size_t>(seq.positions[i]));
    auto seg = params.segment_embeddings.row(static_cast<std::size_t>(seq.segments[i]));
    for (std::size_t c = 0; c < d; ++c) emb(i, c) = tok[c] + pos[c] + seg[c];
  }
  Matrix x = layer_norm(emb, params.embed_ln_gamma, params.embed_ln_beta, cfg.layer_norm_eps,
                        t.embed_xhat, t.embed_inv_std);
  if (dropout) {
    t.embed_dropout = dropout_mask(n, d, cfg.dropout, dropout_seed, kSiteEmbedding);
    apply_mask(x, t.embed_dropout);
  }

  for (std::size_t li = 0; li < cfg.num_layers; ++li) {
    const LayerParams& lp = params.layers[li];
    LayerTape& lt = t.layers[li];
    lt.input = x;
    lt.query = linear(x, lp.query_weight, lp.query_bias);
    lt.key = linear(x, lp.key_weight, lp.key_bias);
    lt.value = linear(x, lp.value_weight, lp.value_bias);
    lt.context = Matrix(n, d);
    lt.probs.assign(heads, Matrix());
    lt.prob_dropout.assign(heads, Matrix());

    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      Matrix& p = lt.probs[h];
      p = Matrix(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (seq.attention_mask[j] == 0) {
            p(i, j) = -std::numeric_limits<double>::infinity();
            continue;
          }
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += lt.query(i, off + c) * lt.key(j, off + c);
          p(i, j) = s * scale;
        }
        softmax_inplace(p.row(i));
      }
      Matrix pd = p;
      if (dropout) {
        lt.prob_dropout[h] = dropout_mask(n, n, cfg.dropout, dropout_seed, layer_site(li, h));
        apply_mask(pd, lt.prob_dropout[h]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double w = pd(i, j);
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < hd; ++c) lt.context(i, off + c) += w * lt.value(j, off + c);
        }
      }
    }

    Matrix attn = linear(lt.context, lp.attn_out_weight, lp.attn_out_bias);
    if (dropout) {
      lt.attn_dropout = dropout_mask(n, d, cfg.dropout, dropout_seed, layer_site(li, kSiteAttnOut));
      apply_mask(attn, lt.attn_dropout);
    }
    axpy(1.0, x, attn);
    lt.attn_ln_out = layer_norm(attn, lp.attn_ln_gamma, lp.attn_ln_beta, cfg.layer_norm_eps,
                                lt.attn_xhat, lt.attn_inv_std);

    lt.ffn_pre = linear(lt.attn_ln_out, lp.ffn_in_weight, lp.ffn_in_bias);
    lt.ffn_act = lt.ffn_pre;
    for (double& v : lt.ffn_act.values()) v = gelu(v);
    Matrix ffn = linear(lt.ffn_act, lp.ffn_out_weight, lp.ffn_out_bias);
    if (dropout) {
      lt.ffn_dropout = dropout_mask(n, d, cfg.dropout, dropout_seed, layer_site(li, kSiteFfnOut));
      apply_mask(ffn, lt.ffn_dropout);
    }
    axpy(1.0, lt.attn_ln_out, ffn);
    x = layer_norm(ffn, lp.ffn_ln_gamma, lp.ffn_ln_beta, cfg.layer_norm_eps, lt.ffn_xhat,
                   lt.ffn_inv_std);
  }

  EncoderOutput out;
  out.cls.assign(x.row(0).begin(), x.row(0).end());
  out.hidden_states = std::move(x);
  return out;
}

void backward(const EncoderParams& params, const EncoderConfig& cfg, const EncoderTape& tape,
              const Matrix& upstream, EncoderParams& grads) {
  const TokenSequence& seq = tape.seq;
  const std::size_t n = seq.size();
  const std::size_t d = cfg.hidden;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (upstream.rows() != n || upstream.cols() != d) {
    throw EncoderError("upstream gradient shape " + shape_string(upstream) + " does not match " +
                       std::to_string(n) + "x" + std::to_string(d));
  }

  Matrix dx = upstream;
  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const LayerParams& lp = params.layers[li];
    LayerParams& lg = grads.layers[li];
    const LayerTape& lt = tape.layers[li];

    // Feed-forward block.
    Matrix dr2 = layer_norm_backward(dx, lt.ffn_xhat, lt.ffn_inv_std, lp.ffn_ln_gamma,
                                     lg.ffn_ln_gamma, lg.ffn_ln_beta);
    Matrix dffn = dr2;
    apply_mask(dffn, lt.ffn_dropout);
    Matrix dact = linear_backward(lt.ffn_act, lp.ffn_out_weight, dffn, lg.ffn_out_weight,
                                  lg.ffn_out_bias);
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(lt.ffn_pre[i]);
    Matrix dy = linear_backward(lt.attn_ln_out, lp.ffn_in_weight, dact, lg.ffn_in_weight,
                                lg.ffn_in_bias);
    axpy(1.0, dr2, dy);

    // Attention block.
    Matrix dr1 = layer_norm_backward(dy, lt.attn_xhat, lt.attn_inv_std, lp.attn_ln_gamma,
                                     lg.attn_ln_gamma, lg.attn_ln_beta);
    Matrix dattn = dr1;
    apply_mask(dattn, lt.attn_dropout);
    Matrix dctx = linear_backward(lt.context, lp.attn_out_weight, dattn, lg.attn_out_weight,
                                  lg.attn_out_bias);

    Matrix dq(n, d), dk(n, d), dv(n, d);
    Matrix dp(n, n);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const std::size_t off = h * hd;
      const Matrix& p = lt.probs[h];
      const Matrix& pmask = lt.prob_dropout[h];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double keep = pmask.empty() ? 1.0 : pmask(i, j);
          const double pd = p(i, j) * keep;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) {
            s += dctx(i, off + c) * lt.value(j, off + c);
            if (pd != 0.0) dv(j, off + c) += pd * dctx(i, off + c);
          }
          dp(i, j) = s * keep;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        double row_dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) row_dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = p(i, j) * (dp(i, j) - row_dot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < hd; ++c) {
            dq(i, off + c) += ds * lt.key(j, off + c);
            dk(j, off + c) += ds * lt.query(i, off + c);
          }
        }
      }
    }

    dx = dr1;
    axpy(1.0, linear_backward(lt.input, lp.query_weight, dq, lg.query_weight, lg.query_bias), dx);
    axpy(1.0, linear_backward(lt.input, lp.key_weight, dk, lg.key_weight, lg.key_bias), dx);
    axpy(1.0, linear_backward(lt.input, lp.value_weight, dv, lg.value_weight, lg.value_bias), dx);
  }

  apply_mask(dx, tape.embed_dropout);
  Matrix demb = layer_norm_backward(dx, tape.embed_xhat, tape.embed_inv_std,
                                    params.embed_ln_gamma, grads.embed_ln_gamma,
                                    grads.embed_ln_beta);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = demb.row(i);
    auto tok = grads.token_embeddings.row(static_cast<std::size_t>(seq.ids[i]));
    auto pos = grads.position_embeddings.row(static_cast<std::size_t>(seq.positions[i]));
    auto seg = grads.segment_embeddings.row(static_cast<std::size_t>(seq.segments[i]));
    for (std::size_t c = 0; c < d; ++c) {
      tok[c] += src[c];
      pos[c] += src[c];
      seg[c] += src[c];
    }
  }
}

EncoderParams backward(const EncoderParams& params, const EncoderConfig& cfg,
                       const TokenSequence& seq, const Matrix& upstream, bool train_mode,
                       std::uint64_t dropout_seed) {
  EncoderTape tape;
  forward(params, cfg, seq, train_mode, dropout_seed, &tape);
  EncoderParams grads = zero_params(cfg);
  backward(params, cfg, tape, upstream, grads);
  return grads;
}

const Matrix& attention_probs(const EncoderTape& tape, std::size_t layer, std::size_t head) {
  return tape.layers.at(layer).probs.at(head);
}

}  // namespace dialm
