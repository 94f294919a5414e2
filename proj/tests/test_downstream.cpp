#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dialm/downstream.hpp"
#include "dialm/synthetic.hpp"
#include "support.hpp"

using namespace dialm;
using namespace dialm::testing;

namespace {

Dialogue intent_dialogue(const std::string& id, const std::string& text, const std::string& intent) {
  Dialogue d;
  d.id = id;
  d.domains = {"restaurant"};
  Turn t;
  t.speaker = Speaker::user;
  t.text = text;
  t.intent = intent;
  d.turns.push_back(t);
  return d;
}

TrainConfig quick_train(std::size_t steps, std::uint64_t seed = 3) {
  TrainConfig tc;
  tc.batch_size = 8;
  tc.max_len = 48;
  tc.lr0 = 3e-3;
  tc.total_steps = steps;
  tc.eval_every = 10;
  tc.patience = 100;
  tc.seed = seed;
  return tc;
}

}  // namespace

TEST_CASE("intent head probabilities") {
  LinearClassifier head{Matrix(2, 1), Matrix(1, 2)};
  head.bias(0, 0) = 0.2;
  head.bias(0, 1) = 0.7;
  const std::vector<double> cls{0.0};
  const auto p = intent_probs(head, cls);
  CHECK(p[0] == doctest::Approx(0.3775).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.6225).epsilon(1e-4));
  CHECK(argmax(p) == 1);

  const std::vector<double> ties{0.5, 0.5, 0.1};
  CHECK(argmax(ties) == 0);

  const LinearClassifier r = init_linear_classifier(5, 4, 1);
  const std::vector<double> x{0.3, -0.2, 0.9, 0.1};
  const auto base = intent_probs(r, x);
  LinearClassifier shifted = r;
  for (double& b : shifted.bias.values()) b += 3.0;
  const auto moved = intent_probs(shifted, x);
  double total = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(moved[i] == doctest::Approx(base[i]).epsilon(1e-12));
    total += base[i];
  }
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("act head thresholds strictly above one half") {
  ActHead head{Matrix(1, 3), Matrix(1, 3)};
  head.bias(0, 1) = 1e-9;
  head.bias(0, 2) = -1e-9;
  const std::vector<double> cls{0.0};
  const auto p = act_probs(head, cls);
  CHECK(p[0] == 0.5);
  CHECK(triggered_acts(p) == std::vector<std::size_t>{1});
  // Monotone in each logit.
  double prev = -1.0;
  for (int k = -5; k <= 5; ++k) {
    head.bias(0, 0) = k;
    const double now = act_probs(head, cls)[0];
    CHECK(now > prev);
    prev = now;
  }
}

TEST_CASE("dst similarities are cosines in [-1, 1]") {
  const DstHead head = init_dst_head(2, 3);
  const std::vector<double> cls{1.0, 0.0, 0.0};
  Matrix v0(3, 3);
  v0(0, 0) = 2.0;   // same direction
  v0(1, 1) = 1.0;   // orthogonal
  v0(2, 0) = -1.0;  // opposite
  Matrix v1 = random_matrix(4, 3, 5);
  const auto sims = dst_similarities(head, cls, {v0, v1});
  CHECK(sims[0][0] == doctest::Approx(1.0));
  CHECK(sims[0][1] == doctest::Approx(0.0));
  CHECK(sims[0][2] == doctest::Approx(-1.0));
  for (double s : sims[1]) {
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
  CHECK(dst_project(head, 1, cls) == cls);
}

TEST_CASE("head gradients match central differences") {
  const std::size_t d = 6;
  const Matrix cls_m = random_matrix(1, d, 1);
  const std::vector<double> cls(cls_m.values().begin(), cls_m.values().end());

  SUBCASE("classifier") {
    LinearClassifier head = init_linear_classifier(4, d, 2);
    spread_weights(head, 3);
    LinearClassifier g{Matrix(4, d), Matrix(1, 4)};
    std::vector<double> dcls(d, 0.0);
    classifier_loss(head, cls, 2, &g, dcls);
    CHECK(max_error(finite_difference_check(head, g, [&] { return classifier_loss(head, cls, 2, nullptr, {}); })) < 1e-6);
  }
  SUBCASE("act") {
    ActHead head = init_act_head(5, d, 2);
    spread_weights(head, 4);
    const std::vector<std::uint8_t> targets{1, 0, 0, 1, 0};
    ActHead g{Matrix(d, 5), Matrix(1, 5)};
    std::vector<double> dcls(d, 0.0);
    act_head_loss(head, cls, targets, &g, dcls);
    CHECK(max_error(finite_difference_check(head, g, [&] { return act_head_loss(head, cls, targets, nullptr, {}); })) < 1e-6);
  }
  SUBCASE("dst") {
    DstHead head = init_dst_head(2, d);
    spread_weights(head, 5);
    const std::vector<Matrix> values{random_matrix(3, d, 6), random_matrix(4, d, 7)};
    const std::vector<std::size_t> gold{1, 3};
    DstHead g = init_dst_head(2, d);
    g.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
    std::vector<double> dcls(d, 0.0);
    dst_head_loss(head, cls, values, gold, &g, dcls);
    CHECK(max_error(finite_difference_check(head, g, [&] { return dst_head_loss(head, cls, values, gold, nullptr, {}); })) < 1e-6);
  }
}

TEST_CASE("response selection keeps the most recent context tokens") {
  const Vocab& v = small_vocab();
  Dialogue d;
  d.id = "long";
  std::string text;
  for (int i = 0; i < 400; ++i) text += "cheap ";
  d.turns.push_back({Speaker::user, text, {}, {}, {}});
  d.turns.push_back({Speaker::system, "ok", {}, {}, {}});
  const auto pairs = rs_examples(v, {d}, 256, 512);
  REQUIRE(pairs.size() == 1);
  const TokenSequence full = flatten_dialogue(v, d, 0, 10000);
  REQUIRE(full.size() > 300);
  CHECK(pairs[0].context.size() == 256);
  CHECK(pairs[0].context.ids[0] == id_of(Special::cls));
  CHECK(std::equal(pairs[0].context.ids.begin() + 1, pairs[0].context.ids.end(), full.ids.end() - 255));
}

TEST_CASE("labels outside the space are named in the error") {
  const LabelSpace space({"a", "b"});
  CHECK(space.index_of("b") == 1);
  try {
    space.index_of("zebra");
    FAIL("expected an error");
  } catch (const LabelError& e) {
    CHECK(std::string(e.what()).find("zebra") != std::string::npos);
  }
  const auto train = std::vector<Dialogue>{intent_dialogue("1", "hi", "a")};
  const auto test = std::vector<Dialogue>{intent_dialogue("2", "hi", "mystery_intent")};
  try {
    intent_examples(small_vocab(), test, intent_label_space(train), 32);
    FAIL("expected an error");
  } catch (const LabelError& e) {
    CHECK(std::string(e.what()).find("mystery_intent") != std::string::npos);
  }
}

TEST_CASE("ontology building and round trip") {
  const auto ds = generate_synthetic(3, 30);
  const Ontology o = build_ontology(ds);
  o.validate();
  REQUIRE(!o.pairs.empty());
  for (const auto& vals : o.values) CHECK(vals.front() == kNoneValue);
  CHECK(ontology_from_json(ontology_to_json(o)) == o);
  const auto path = std::filesystem::temp_directory_path() / "dialm_ontology.json";
  save_ontology(path, o);
  CHECK(load_ontology(path) == o);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(o.value_index(0, "not-a-value"), LabelError);

  nlohmann::ordered_json j;
  j["hotel-area"] = {"north"};
  const Ontology added = ontology_from_json(j);
  CHECK(added.values[0] == std::vector<std::string>{"none", "north"});
}

TEST_CASE("fine-tuning fits a separable two-class intent problem") {
  std::vector<Dialogue> train;
  for (int i = 0; i < 8; ++i) {
    train.push_back(intent_dialogue("a" + std::to_string(i), "i want a cheap restaurant", "find"));
    train.push_back(intent_dialogue("b" + std::to_string(i), "book a taxi please", "book"));
  }
  const Vocab& v = small_vocab();
  const EncoderConfig cfg = tiny_config(v.size());
  const EncoderParams init = init_params(cfg, 1);
  FinetuneOptions opts;
  opts.task = Task::intent;
  opts.train = quick_train(60);
  const FinetuneResult r = finetune(v, cfg, init, train, train, opts);
  const auto m = evaluate_task(r.model, v, train);
  CHECK(m.at("acc_all") == 1.0);

  FinetuneOptions probe = opts;
  probe.probe_only = true;
  const FinetuneResult p = finetune(v, cfg, init, train, train, probe);
  CHECK(p.trainable_parameters == (cfg.hidden + 1) * 2);
  CHECK(p.trainable_parameters < r.trainable_parameters);
  CHECK(p.model.encoder == init);

  const FinetuneResult again = finetune(v, cfg, init, train, train, opts);
  CHECK(again.log == r.log);
  CHECK(again.model == r.model);
}

TEST_CASE("task models round-trip for every task") {
  const Vocab& v = small_vocab();
  const EncoderConfig cfg = tiny_config(v.size());
  const EncoderParams init = init_params(cfg, 2);
  const auto train = generate_synthetic(8, 12);
  const auto dev = generate_synthetic(9, 30);
  for (Task t : {Task::intent, Task::dst, Task::act, Task::rs}) {
    INFO(to_string(t));
    FinetuneOptions opts;
    opts.task = t;
    opts.train = quick_train(3);
    const FinetuneResult r = finetune(v, cfg, init, train, dev, opts);
    const auto path = std::filesystem::temp_directory_path() / "dialm_task.ckpt";
    save_task_model(path, r.model);
    const TaskModel back = load_task_model(path);
    std::filesystem::remove(path);
    CHECK(back == r.model);
    EvalOptions eo;
    eo.num_seeds = 1;
    const auto a = evaluate_task(r.model, v, dev, eo);
    const auto b = evaluate_task(back, v, dev, eo);
    CHECK(a == b);
    CHECK(!a.empty());
  }
}

TEST_CASE("task names parse") {
  CHECK(parse_task("dst") == Task::dst);
  CHECK(to_string(Task::rs) == "rs");
  CHECK_THROWS(parse_task("summarize"));
}
