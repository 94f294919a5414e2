#include <cmath>
#include <set>

#include "doctest.h"
#include "dialm/objectives.hpp"
#include "dialm/synthetic.hpp"
#include "support.hpp"

using namespace dialm;
using namespace dialm::testing;

namespace {

TokenSequence random_text_sequence(std::size_t vocab, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> ids{id_of(Special::cls), id_of(Special::usr)};
  while (ids.size() < len) ids.push_back(static_cast<TokenId>(kNumSpecials + rng.below(vocab - kNumSpecials)));
  return make_sequence(ids);
}

}  // namespace

TEST_CASE("masking never touches special tokens and is deterministic") {
  const TokenSequence seq = random_text_sequence(100, 60, 1);
  MaskingConfig cfg;
  cfg.rate = 0.9;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const MaskedSequence m = apply_dynamic_masking(seq, 100, cfg, s);
    CHECK(m.labels[0] == kIgnoreLabel);
    CHECK(m.labels[1] == kIgnoreLabel);
    CHECK(m.input.ids[0] == id_of(Special::cls));
    CHECK(m.input.ids[1] == id_of(Special::usr));
    std::size_t count = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (m.labels[i] == kIgnoreLabel) {
        CHECK(m.input.ids[i] == seq.ids[i]);
      } else {
        ++count;
        CHECK(m.labels[i] == seq.ids[i]);
        CHECK(!Vocab::is_special(m.input.ids[i]) == (m.input.ids[i] != id_of(Special::mask)));
      }
    }
    CHECK(count == m.mask_count);
    const MaskedSequence again = apply_dynamic_masking(seq, 100, cfg, s);
    CHECK(again.input == m.input);
    CHECK(again.labels == m.labels);
  }
}

TEST_CASE("masking rate zero and one") {
  const TokenSequence seq = random_text_sequence(100, 30, 2);
  MaskingConfig cfg;
  cfg.rate = 0.0;
  CHECK(apply_dynamic_masking(seq, 100, cfg, 1).mask_count == 0);
  cfg.rate = 1.0;
  CHECK(apply_dynamic_masking(seq, 100, cfg, 1).mask_count == 28);
  cfg.rate = 1.5;
  CHECK_THROWS_AS(apply_dynamic_masking(seq, 100, cfg, 1), std::invalid_argument);
}

TEST_CASE("mlm loss of a zero head is ln|V| per masked token") {
  const EncoderConfig cfg = tiny_config(80);
  const EncoderParams p = init_params(cfg, 1);
  MlmHead head = init_mlm_head(cfg, false, 2);
  head.weight.fill(0.0);
  MaskedBatch batch;
  for (std::uint64_t s = 0; s < 4; ++s) {
    batch.sequences.push_back(apply_dynamic_masking(random_text_sequence(80, 30, s), 80, {}, s));
  }
  const MlmResult r = mlm_loss(p, head, cfg, batch);
  REQUIRE(r.mask_count > 0);
  CHECK(r.loss_sum == doctest::Approx(r.mask_count * std::log(80.0)).epsilon(1e-12));
  CHECK(r.loss_mean == doctest::Approx(std::log(80.0)).epsilon(1e-12));
}

TEST_CASE("mlm loss with no masked tokens is zero and flagged empty") {
  const EncoderConfig cfg = tiny_config(80);
  const EncoderParams p = init_params(cfg, 1);
  const MlmHead head = init_mlm_head(cfg, false, 2);
  MaskedBatch batch;
  MaskingConfig none;
  none.rate = 0.0;
  batch.sequences.push_back(apply_dynamic_masking(random_text_sequence(80, 10, 1), 80, none, 1));
  const MlmResult r = mlm_loss(p, head, cfg, batch);
  CHECK(r.empty);
  CHECK(r.loss_sum == 0.0);
  double g = 0.0;
  r.encoder_grads.for_each([&](const std::string&, const Matrix& m) { for (double v : m.values()) g += std::abs(v); });
  CHECK(g == 0.0);
}

TEST_CASE("in-batch softmax loss values") {
  Matrix one(1, 1, 3.7);
  CHECK(in_batch_softmax_loss(one).loss == 0.0);
  Matrix equal(2, 2, 0.25);
  CHECK(in_batch_softmax_loss(equal).loss == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  Matrix diag(2, 2);
  diag(0, 0) = diag(1, 1) = 2.0;
  CHECK(in_batch_softmax_loss(diag).loss == doctest::Approx(2.0 * std::log1p(std::exp(-2.0))).epsilon(1e-12));
  const InBatchSoftmax r = in_batch_softmax_loss(diag);
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (double v : r.probs.row(i)) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(in_batch_softmax_loss(Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("rcl loss identities") {
  const Vocab& v = small_vocab();
  const EncoderConfig cfg = tiny_config(v.size());
  const EncoderParams p = init_params(cfg, 4);
  const auto ds = generate_synthetic(5, 3);
  const ContrastivePair a = make_contrastive_pair(v, ds[0], valid_response_turns(ds[0])[0], 64);
  CHECK(rcl_loss(p, cfg, {a}).loss_sum == 0.0);
  const RclResult two = rcl_loss(p, cfg, {a, a});
  CHECK(two.loss_sum == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
  CHECK(two.loss_mean == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("contrastive pairs split before a system turn") {
  const Vocab& v = small_vocab();
  const auto ds = generate_synthetic(6, 10);
  for (const auto& d : ds) {
    for (std::size_t r : valid_response_turns(d)) {
      CHECK(d.turns[r].speaker == Speaker::system);
      CHECK(r >= 1);
      const ContrastivePair p = make_contrastive_pair(v, d, r, 1000);
      CHECK(p.context == flatten_dialogue(v, d, r - 1, 1000));
      CHECK(p.response.ids[1] == id_of(Special::sys));
    }
  }
  CHECK_THROWS_AS(make_contrastive_pair(v, ds[0], 0, 64), std::invalid_argument);
  const auto batch = make_contrastive_batch(v, ds, 4, 3, 64);
  CHECK(batch.size() == 4);
  std::set<std::string> ids;
  for (const auto& p : batch) ids.insert(p.dialogue_id);
  CHECK(ids.size() == 4);
  CHECK(make_contrastive_batch(v, ds, 4, 3, 64).front().dialogue_id == batch.front().dialogue_id);

  Dialogue lonely;
  lonely.id = "x";
  lonely.turns.push_back({Speaker::user, "hello", {}, {}, {}});
  CHECK_THROWS_AS(make_contrastive_batch(v, {lonely}, 2, 1, 64), std::invalid_argument);
}

TEST_CASE("a custom sampler controls which dialogues are drawn") {
  const Vocab& v = small_vocab();
  const auto ds = generate_synthetic(6, 10);
  const DialogueSampler first_two = [](std::size_t, std::size_t, Rng&) { return std::vector<std::size_t>{0, 1}; };
  const auto batch = make_contrastive_batch(v, ds, 2, 1, 64, first_two);
  CHECK(batch[0].dialogue_id == ds[0].id);
  CHECK(batch[1].dialogue_id == ds[1].id);
}

TEST_CASE("combined loss adds weighted terms and rejects non-finite input") {
  CHECK(combined_loss(2.0, 3.0) == 5.0);
  CHECK(combined_loss(2.0, 3.0, {1.0, 0.0}) == 2.0);
  CHECK_THROWS_AS(combined_loss(std::nan(""), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(combined_loss(1.0, INFINITY), std::invalid_argument);
}

TEST_CASE("mlm and rcl gradients match central differences") {
  const Vocab& v = small_vocab();
  const EncoderConfig cfg = tiny_config(v.size(), 8, 48);
  EncoderParams p = init_params(cfg, 8);
  spread_weights(p, 8);
  MlmHead head = init_mlm_head(cfg, false, 9);
  spread_weights(head, 9);
  const auto ds = generate_synthetic(7, 4);
  MaskedBatch batch;
  for (std::size_t i = 0; i < 2; ++i) {
    MaskingConfig mc;
    mc.rate = 0.3;
    batch.sequences.push_back(apply_dynamic_masking(flatten_dialogue(v, ds[i], 2, 24), v.size(), mc, i));
  }
  std::vector<ContrastivePair> pairs;
  for (std::size_t i = 0; i < 3; ++i) pairs.push_back(make_contrastive_pair(v, ds[i], valid_response_turns(ds[i])[0], 16));

  const MlmResult m = mlm_loss(p, head, cfg, batch, true, 5);
  const auto head_errs = finite_difference_check(head, m.head_grads, [&] {
    return mlm_loss(p, head, cfg, batch, true, 5, false).loss_sum;
  });
  CHECK(max_error(head_errs) < 1e-5);

  const RclResult r = rcl_loss(p, cfg, pairs, true, 6);
  EncoderParams total = m.encoder_grads;
  add_scaled(total, r.grads, 1.0);
  const auto errs = finite_difference_check(p, total, [&] {
    return mlm_loss(p, head, cfg, batch, true, 5, false).loss_sum + rcl_loss(p, cfg, pairs, true, 6, false).loss_sum;
  });
  for (const auto& e : errs) {
    INFO(e.name, " analytic ", e.analytic_norm, " numeric ", e.numeric_norm);
    CHECK(e.rel_error < 1e-5);
  }
}

TEST_CASE("tied head shares the token embeddings") {
  const Vocab& v = small_vocab();
  const EncoderConfig cfg = tiny_config(v.size(), 8, 48);
  EncoderParams p = init_params(cfg, 8);
  spread_weights(p, 8);
  MlmHead head = init_mlm_head(cfg, true, 9);
  CHECK(head.weight.empty());
  MaskedBatch batch;
  MaskingConfig mc;
  mc.rate = 0.4;
  batch.sequences.push_back(apply_dynamic_masking(flatten_dialogue(v, generate_synthetic(2, 1)[0], 2, 20), v.size(), mc, 3));
  const MlmResult m = mlm_loss(p, head, cfg, batch);
  const auto errs = finite_difference_check(p, m.encoder_grads, [&] {
    return mlm_loss(p, head, cfg, batch, false, 0, false).loss_sum;
  });
  for (const auto& e : errs) {
    INFO(e.name, " analytic ", e.analytic_norm, " numeric ", e.numeric_norm);
    CHECK(e.rel_error < 1e-5);
  }
}
