#include <cmath>

#include "doctest.h"
#include "dialm/metrics.hpp"
#include "oracles.hpp"

using namespace dialm;
using namespace dialm::testing;

TEST_CASE("intent metrics on a worked example") {
  const std::vector<std::string> golds{"a", "b", "oos", "oos"};
  const std::vector<std::string> preds{"a", "c", "oos", "b"};
  const IntentMetrics m = intent_metrics(preds, golds, "oos");
  CHECK(m.acc_all == 0.5);
  CHECK(*m.acc_in == 0.5);
  CHECK(*m.recall_out == 0.5);
  CHECK(m.acc_out == 0.75);

  const IntentMetrics only_in = intent_metrics({"a"}, {"a"}, "oos");
  CHECK(!only_in.recall_out.has_value());
  CHECK_THROWS_AS(intent_metrics({}, {}, "oos"), std::invalid_argument);
  CHECK_THROWS_AS(intent_metrics({"a"}, {"a", "b"}, "oos"), std::invalid_argument);
}

TEST_CASE("dst metrics on a worked example") {
  const SlotKey area{"hotel", "area"}, stars{"hotel", "stars"};
  const std::vector<DialogueState> golds{{{area, "north"}, {stars, "none"}}, {{area, "north"}, {stars, "4"}}};
  const std::vector<DialogueState> preds{{{area, "north"}, {stars, "none"}}, {{area, "north"}, {stars, "3"}}};
  const DstMetrics m = dst_metrics(preds, golds);
  CHECK(m.joint == 0.5);
  CHECK(m.slot == 0.75);
  const std::vector<DialogueState> missing{{{area, "north"}}, {{area, "north"}}};
  CHECK_THROWS_AS(dst_metrics(missing, golds), std::invalid_argument);
}

TEST_CASE("multilabel f1 with absent labels counted as zero") {
  const std::vector<std::set<std::string>> golds{{"inform"}, {"inform", "request"}};
  const std::vector<std::set<std::string>> preds{{"inform"}, {"inform"}};
  const F1Scores s = multilabel_f1(preds, golds, {"inform", "request", "bye"});
  CHECK(s.micro == doctest::Approx(0.8));
  CHECK(s.macro == doctest::Approx(1.0 / 3.0));
  const F1Scores none = multilabel_f1({{}}, {{}}, {"x"});
  CHECK(none.micro == 0.0);
  CHECK(none.macro == 0.0);
  CHECK_THROWS_AS(multilabel_f1({{"nope"}}, {{}}, {"x"}), std::invalid_argument);
}

TEST_CASE("metrics agree exactly with brute-force recounts") {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const IntentInstance ii = random_intent_instance(rng);
    const IntentMetrics a = intent_metrics(ii.preds, ii.golds, "oos"), b = brute_intent(ii, "oos");
    CHECK(a.acc_all == b.acc_all);
    CHECK(a.acc_out == b.acc_out);
    CHECK(a.acc_in == b.acc_in);
    CHECK(a.recall_out == b.recall_out);

    const DstInstance di = random_dst_instance(rng);
    const DstMetrics d = dst_metrics(di.preds, di.golds), e = brute_dst(di);
    CHECK(d.joint == e.joint);
    CHECK(d.slot == e.slot);
    CHECK(d.joint <= d.slot);

    const F1Instance fi = random_f1_instance(rng);
    const F1Scores f = multilabel_f1(fi.preds, fi.golds, fi.space), g = brute_f1(fi);
    CHECK(f.micro == g.micro);
    CHECK(f.macro == g.macro);
    CHECK(f.micro >= 0.0);
    CHECK(f.micro <= 1.0);
  }
}

TEST_CASE("k-of-100 oracles") {
  const PairScorer perfect = [](std::size_t c, std::size_t r) { return c == r ? 1.0 : 0.0; };
  CHECK(k_of_100(perfect, 250, 1) == 1.0);
  const PairScorer constant = [](std::size_t, std::size_t) { return 0.5; };
  CHECK(k_of_100(constant, 100, 1) == 0.0);
  const PairScorer worst = [](std::size_t c, std::size_t r) { return c == r ? -1.0 : 0.0; };
  CHECK(k_of_100(worst, 100, 10) == 0.0);
  const PairScorer random = [](std::size_t c, std::size_t r) { return hash_uniform(mix_seed({c, r}), 0); };
  const auto many = k_of_100_many(random, 1000, {1, 3, 10}, 5, 7);
  CHECK(std::abs(many.at(1) - 0.01) <= 0.01);
  CHECK(many.at(1) <= many.at(3));
  CHECK(many.at(3) <= many.at(10));
  CHECK(std::abs(many.at(10) - 0.10) <= 0.02);
  CHECK_THROWS_AS(k_of_100(perfect, 99, 1), std::invalid_argument);
  CHECK_THROWS_AS(k_of_100(perfect, 100, 100), std::invalid_argument);
}

TEST_CASE("k-of-100 drops the partial last batch") {
  // 150 pairs give one full batch; the other 50 are never scored.
  std::size_t calls = 0;
  const PairScorer counting = [&](std::size_t c, std::size_t r) {
    ++calls;
    return c == r ? 1.0 : 0.0;
  };
  CHECK(k_of_100(counting, 150, 1, 1) == 1.0);
  CHECK(calls == 100 * 100);
}

TEST_CASE("few-shot counts") {
  CHECK(fraction_count(0.01, 8420) == 84);
  CHECK(fraction_count(1.0, 37) == 37);
  CHECK(fraction_count(0.001, 10) == 1);
  CHECK_THROWS_AS(fraction_count(0.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(fraction_count(1.5, 10), std::invalid_argument);

  std::vector<std::string> labels;
  for (int c = 0; c < 150; ++c) {
    for (int j = 0; j < 3; ++j) labels.push_back("class" + std::to_string(c));
  }
  const auto one = sample_per_class(labels, 1, 4);
  CHECK(one.size() == 150);
  std::set<std::string> seen;
  for (std::size_t i : one) seen.insert(labels[i]);
  CHECK(seen.size() == 150);
  CHECK(sample_per_class(labels, 1, 4) == one);
  CHECK(std::is_sorted(one.begin(), one.end()));

  labels.push_back("rare");
  try {
    sample_per_class(labels, 2, 1);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("rare") != std::string::npos);
  }

  const auto frac = sample_fraction(8420, 0.01, 3);
  CHECK(frac.size() == 84);
  CHECK(std::set<std::size_t>(frac.begin(), frac.end()).size() == 84);
  CHECK(sample_fraction(20, 1.0, 3).size() == 20);

  FewShotSpec spec;
  spec.num_seeds = 2;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.num_seeds = 3;
  spec.fraction = 0.1;
  CHECK(few_shot_sample(100, nullptr, spec, 1).size() == 10);
}
