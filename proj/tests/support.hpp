#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dialm/encoder.hpp"
#include "dialm/rng.hpp"
#include "dialm/synthetic.hpp"
#include "dialm/tensor.hpp"
#include "dialm/tokenizer.hpp"

namespace dialm::testing {

/// Small vocabulary learned from a fixed synthetic corpus.
inline const Vocab& small_vocab() {
  static const Vocab v = train_subword(corpus_texts(generate_synthetic(1, 40)), 160);
  return v;
}

inline EncoderConfig tiny_config(std::size_t vocab_size, std::size_t hidden = 16,
                                 std::size_t max_positions = 64) {
  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  cfg.hidden = hidden;
  cfg.ffn_dim = 2 * hidden;
  cfg.vocab_size = vocab_size;
  cfg.max_positions = max_positions;
  cfg.dropout = 0.1;
  return cfg;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Matrix m(r, c);
  Rng rng(seed);
  for (double& v : m.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return m;
}

inline constexpr double kFdFloor = 1e-4;

struct TensorError {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

/// Central differences over every element of every tensor of `params`.
/// Per tensor: ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, kFdFloor).
/// Below the floor a gradient is indistinguishable from zero at this step size
/// (e.g. attention key biases, whose gradient is exactly zero).
template <typename P>
std::vector<TensorError> finite_difference_check(P& params, const P& analytic,
                                                 const std::function<double()>& loss,
                                                 double h = 1e-4) {
  std::vector<const Matrix*> grads;
  analytic.for_each([&](const std::string&, const Matrix& g) { grads.push_back(&g); });
  std::vector<TensorError> out;
  std::size_t t = 0;
  params.for_each([&](const std::string& name, Matrix& m) {
    const Matrix& g = *grads[t++];
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double keep = m[i];
      m[i] = keep + h;
      const double up = loss();
      m[i] = keep - h;
      const double down = loss();
      m[i] = keep;
      const double num = (up - down) / (2.0 * h);
      diff += (num - g[i]) * (num - g[i]);
      na += g[i] * g[i];
      nn += num * num;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), kFdFloor});
    out.push_back({name, std::sqrt(diff) / denom, std::sqrt(na), std::sqrt(nn)});
  });
  return out;
}

/// Replaces every non-LayerNorm tensor with uniform values in [-scale, scale]
/// so that attention is far from uniform and all paths carry signal.
template <typename P>
void spread_weights(P& params, std::uint64_t seed, double scale = 0.3) {
  std::uint64_t i = 0;
  params.for_each([&](const std::string& name, Matrix& m) {
    ++i;
    if (name.find("ln.") == std::string::npos) m = random_matrix(m.rows(), m.cols(), mix_seed({seed, i}), scale);
  });
}

inline double max_error(const std::vector<TensorError>& errs) {
  double m = 0.0;
  for (const auto& e : errs) m = std::max(m, e.rel_error);
  return m;
}

}  // namespace dialm::testing
