#include "dialm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dialm/adapters.hpp"
#include "dialm/checkpoint.hpp"
#include "dialm/corpus.hpp"
#include "dialm/downstream.hpp"
#include "dialm/metrics.hpp"
#include "dialm/probes.hpp"
#include "dialm/report.hpp"
#include "dialm/rng.hpp"
#include "dialm/synthetic.hpp"
#include "dialm/tokenizer.hpp"
#include "dialm/trainer.hpp"

namespace dialm {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kHoldoutTag = 31;
constexpr std::uint64_t kInitTag = 32;

// Settings that shape training; loaded from --config and overridden by flags.
struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
  MaskingConfig masking;
  bool tie_mlm_head = false;
};

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  reject_unknown(j, {"encoder", "train", "masking", "tie_mlm_head"}, path);
  if (j.contains("encoder")) {
    reject_unknown(j["encoder"], {"num_layers", "num_heads", "hidden", "ffn_dim", "vocab_size",
                                  "max_positions", "num_segments", "dropout", "layer_norm_eps"},
                   path + " encoder");
    rc.encoder = encoder_config_from_json(j["encoder"]);
  }
  if (j.contains("train")) {
    reject_unknown(j["train"], {"batch_size", "max_len", "lr0", "total_steps", "clip_norm",
                                "weight_decay", "beta1", "beta2", "epsilon", "eval_every",
                                "patience", "seed"},
                   path + " train");
    rc.train = train_config_from_json(j["train"]);
  }
  if (j.contains("masking")) {
    const auto& m = j["masking"];
    reject_unknown(m, {"rate", "mask_prob", "random_prob"}, path + " masking");
    rc.masking.rate = m.value("rate", rc.masking.rate);
    rc.masking.mask_prob = m.value("mask_prob", rc.masking.mask_prob);
    rc.masking.random_prob = m.value("random_prob", rc.masking.random_prob);
  }
  rc.tie_mlm_head = j.value("tie_mlm_head", false);
  return rc;
}

ojson masking_json(const MaskingConfig& m) {
  ojson j;
  j["rate"] = m.rate;
  j["mask_prob"] = m.mask_prob;
  j["random_prob"] = m.random_prob;
  return j;
}

ojson to_ordered(const nlohmann::json& j) { return ojson::parse(j.dump()); }

// Writes <dir>/config.json: the command, the settings that determine results
// (fingerprinted) and the file paths involved (not fingerprinted).
std::string write_resolved_config(const fs::path& dir, const std::string& command,
                                  const ojson& settings, const ojson& paths) {
  fs::create_directories(dir);
  const std::string fp = config_fingerprint(nlohmann::json::parse(settings.dump()));
  ojson j;
  j["command"] = command;
  j["fingerprint"] = fp;
  j["settings"] = settings;
  j["paths"] = paths;
  std::ofstream out(dir / "config.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  out << j.dump(2) << '\n';
  return fp;
}

void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

void write_json(const fs::path& path, const ojson& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Seeded 90/10 train/dev split used when no dev file is given.
std::pair<std::vector<Dialogue>, std::vector<Dialogue>> holdout_split(
    const std::vector<Dialogue>& all, std::uint64_t seed) {
  if (all.size() < 2) throw std::invalid_argument("need at least 2 dialogues to hold out a dev set");
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed({seed, kHoldoutTag}));
  rng.shuffle(idx);
  const std::size_t n_dev = std::max<std::size_t>(1, all.size() / 10);
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_dev));
  std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_dev), idx.end());
  std::vector<Dialogue> train, dev;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_dev ? dev : train).push_back(all[idx[i]]);
  return {train, dev};
}

std::string fmt_double(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Label for a system response: its first non-"general" act domain, or the
// joined act set.
std::optional<std::string> response_label(const Turn& t, const std::string& mode) {
  if (!t.acts || t.acts->empty()) return std::nullopt;
  if (mode == "act") {
    std::string s;
    for (const std::string& a : *t.acts) s += (s.empty() ? "" : "+") + a;
    return s;
  }
  for (const std::string& a : *t.acts) {
    const auto dash = a.find('-');
    const std::string dom = dash == std::string::npos ? a : a.substr(0, dash);
    if (dom != "general") return dom;
  }
  return std::string("general");
}

struct LabeledTurns {
  std::vector<TokenSequence> inputs;
  std::vector<std::string> labels;
};

LabeledTurns collect_turns(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                           Speaker speaker, const std::string& label_mode, std::size_t max_len) {
  LabeledTurns out;
  for (const Dialogue& raw : dialogues) {
    const Dialogue d = normalize_speakers(raw);
    for (const Turn& t : d.turns) {
      if (t.speaker != speaker) continue;
      std::optional<std::string> label;
      if (label_mode == "intent") {
        if (t.intent) label = *t.intent;
      } else {
        label = response_label(t, label_mode);
      }
      if (!label) continue;
      out.inputs.push_back(encode_utterance(vocab, speaker, t.text, max_len));
      out.labels.push_back(*label);
    }
  }
  return out;
}

EncoderCheckpoint load_encoder_for(const std::string& path, const Vocab& vocab) {
  EncoderCheckpoint ck = load_encoder_checkpoint(path);
  if (ck.cfg.vocab_size != vocab.size()) {
    throw std::invalid_argument("encoder " + path + " expects " + std::to_string(ck.cfg.vocab_size) +
                                " tokens but the tokenizer has " + std::to_string(vocab.size()));
  }
  return ck;
}

// ---- subcommands ----

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string out;
  std::vector<std::string> domains;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig sc;
  sc.domains = a.domains;
  const auto dialogues = generate_synthetic(a.seed, a.n, sc);
  if (a.out.empty()) {
    write_unified(out, dialogues);
    return 0;
  }
  ojson settings;
  settings["seed"] = a.seed;
  settings["n"] = a.n;
  settings["domains"] = a.domains;
  ojson paths;
  paths["corpus"] = (fs::path(a.out) / "corpus.jsonl").string();
  write_resolved_config(a.out, "synth", settings, paths);
  write_unified(fs::path(a.out) / "corpus.jsonl", dialogues);
  out << "wrote " << dialogues.size() << " dialogues to " << (fs::path(a.out) / "corpus.jsonl").string() << '\n';
  return 0;
}

struct StatsArgs {
  std::string corpus;
  bool json = false;
};

int cmd_stats(const StatsArgs& a, std::ostream& out) {
  const CorpusStats s = compute_stats(load_unified(a.corpus));
  if (a.json) {
    ojson j;
    j["dialogues"] = s.num_dialogues;
    j["utterances"] = s.num_utterances;
    j["avg_turns"] = s.avg_turns;
    j["domains"] = s.num_domains;
    out << j.dump() << '\n';
  } else {
    out << "dialogues " << s.num_dialogues << '\n'
        << "utterances " << s.num_utterances << '\n'
        << "avg_turns " << fmt_double(s.avg_turns, 1) << '\n'
        << "domains " << s.num_domains << '\n';
  }
  return 0;
}

struct UnifyArgs {
  std::string adapter;
  std::string input;
  std::string out;
  bool split = false;
  std::uint64_t seed = 0;
  std::vector<double> ratios{0.8, 0.1, 0.1};
};

int cmd_unify(const UnifyArgs& a, std::ostream& out) {
  const auto adapter = make_adapter(a.adapter);
  const auto dialogues = adapter->load(a.input);
  ojson settings;
  settings["adapter"] = a.adapter;
  settings["split"] = a.split;
  settings["seed"] = a.seed;
  settings["ratios"] = a.ratios;
  ojson paths;
  paths["input"] = a.input;
  paths["out"] = a.out;
  write_resolved_config(a.out, "unify", settings, paths);
  const fs::path dir(a.out);
  write_unified(dir / "corpus.jsonl", dialogues);
  if (a.split) {
    if (a.ratios.size() != 3) throw std::invalid_argument("--ratios takes three values");
    const CorpusSplit s = split_corpus(dialogues, {a.ratios[0], a.ratios[1], a.ratios[2]}, a.seed);
    write_unified(dir / "train.jsonl", s.train);
    write_unified(dir / "dev.jsonl", s.dev);
    write_unified(dir / "test.jsonl", s.test);
    out << "split " << s.train.size() << "/" << s.dev.size() << "/" << s.test.size() << '\n';
  }
  const CorpusStats st = compute_stats(dialogues);
  out << "unified " << st.num_dialogues << " dialogues, " << st.num_utterances << " utterances\n";
  return 0;
}

struct TokenizerArgs {
  std::vector<std::string> corpora;
  std::size_t vocab_size = 0;
  std::string out;
};

int cmd_train_tokenizer(const TokenizerArgs& a, std::ostream& out) {
  std::vector<std::string> texts;
  for (const std::string& c : a.corpora) {
    const auto t = corpus_texts(load_unified(c));
    texts.insert(texts.end(), t.begin(), t.end());
  }
  const Vocab v = train_subword(texts, a.vocab_size);
  ojson settings;
  settings["vocab_size"] = a.vocab_size;
  ojson paths;
  paths["corpora"] = a.corpora;
  paths["vocab"] = (fs::path(a.out) / "vocab.txt").string();
  write_resolved_config(a.out, "train-tokenizer", settings, paths);
  save_vocab(fs::path(a.out) / "vocab.txt", v);
  out << "vocabulary of " << v.size() << " tokens written to " << (fs::path(a.out) / "vocab.txt").string() << '\n';
  return 0;
}

struct PretrainArgs {
  std::string corpus;
  std::string dev;
  std::string tokenizer;
  std::string config;
  std::string objectives = "mlm";
  std::string out;
  std::string resume;
  std::uint64_t seed = 0;
  std::optional<std::size_t> steps;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  const Vocab vocab = load_vocab(a.tokenizer);
  rc.encoder.vocab_size = vocab.size();
  rc.train.seed = a.seed;
  if (a.steps) rc.train.total_steps = *a.steps;
  PretrainObjectives obj;
  obj.masking = rc.masking;
  obj.tie_mlm_head = rc.tie_mlm_head;
  obj.weights = a.objectives == "mlm+rcl" ? LossWeights{1.0, 1.0} : LossWeights{1.0, 0.0};

  std::vector<Dialogue> train = load_unified(a.corpus);
  std::vector<Dialogue> dev;
  if (a.dev.empty()) {
    std::tie(train, dev) = holdout_split(train, a.seed);
  } else {
    dev = load_unified(a.dev);
  }

  std::optional<PretrainState> resume;
  if (!a.resume.empty()) {
    EncoderConfig stored;
    resume = load_pretrain_state(a.resume, stored);
    if (!(stored == rc.encoder)) throw std::invalid_argument("resume state has a different encoder config");
  }

  ojson settings;
  settings["seed"] = a.seed;
  settings["objectives"] = a.objectives;
  settings["encoder"] = to_ordered(encoder_config_to_json(rc.encoder));
  settings["train"] = to_ordered(train_config_to_json(rc.train));
  settings["masking"] = masking_json(rc.masking);
  settings["tie_mlm_head"] = rc.tie_mlm_head;
  settings["dev_holdout"] = a.dev.empty();
  ojson paths;
  paths["corpus"] = a.corpus;
  paths["dev"] = a.dev;
  paths["tokenizer"] = a.tokenizer;
  paths["config"] = a.config;
  paths["resume"] = a.resume;
  const fs::path dir(a.out);
  const std::string fp = write_resolved_config(dir, "pretrain", settings, paths);

  PretrainResult r = pretrain(train, dev, vocab, rc.encoder, rc.train, obj, std::move(resume));
  write_jsonl(dir / "metrics.jsonl", r.log);
  save_pretrain_state(dir / "state.ckpt", r.state, rc.encoder);
  nlohmann::json extra;
  extra["fingerprint"] = fp;
  extra["best_step"] = r.best_step;
  save_encoder_checkpoint(dir / "encoder.ckpt", r.state.best_params, r.state.best_head, rc.encoder, extra);
  out << "dev perplexity " << fmt_double(r.initial_perplexity) << " -> " << fmt_double(r.best_perplexity)
      << " (best at step " << r.best_step << ")\n";
  return 0;
}

struct FinetuneArgs {
  std::string task;
  std::string encoder;
  std::string tokenizer;
  std::string train;
  std::string dev;
  std::string test;
  std::string config;
  std::string ontology;
  std::string out;
  std::uint64_t seed = 0;
  std::optional<std::size_t> steps;
  bool probe = false;
  bool strip_act_domains = false;
  std::optional<std::size_t> few_shot_k;
  std::optional<double> few_shot_fraction;
  std::size_t rs_context = 256;
};

std::optional<std::map<std::string, std::string>> act_map_for(bool strip,
                                                              const std::vector<Dialogue>& d) {
  if (!strip) return std::nullopt;
  return domain_stripping_act_map(d);
}

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  const Vocab vocab = load_vocab(a.tokenizer);
  rc.train.seed = a.seed;
  if (a.steps) rc.train.total_steps = *a.steps;

  EncoderConfig cfg = rc.encoder;
  EncoderParams init;
  if (!a.encoder.empty()) {
    EncoderCheckpoint ck = load_encoder_for(a.encoder, vocab);
    cfg = ck.cfg;
    init = std::move(ck.params);
  } else {
    cfg.vocab_size = vocab.size();
    init = init_params(cfg, mix_seed({a.seed, kInitTag}));
  }

  std::vector<Dialogue> train = load_unified(a.train);
  std::vector<Dialogue> dev;
  if (a.dev.empty()) {
    std::tie(train, dev) = holdout_split(train, a.seed);
  } else {
    dev = load_unified(a.dev);
  }

  FinetuneOptions opts;
  opts.task = parse_task(a.task);
  opts.train = rc.train;
  opts.probe_only = a.probe;
  opts.rs_context_tokens = a.rs_context;
  if (!a.ontology.empty()) opts.ontology = load_ontology(a.ontology);
  if (a.few_shot_k && a.few_shot_fraction) {
    throw std::invalid_argument("--few-shot-k and --few-shot-fraction are mutually exclusive");
  }
  if (a.few_shot_k) {
    opts.few_shot = FewShotSpec{FewShotSpec::Mode::per_class_k, *a.few_shot_k, 1.0, 3};
  } else if (a.few_shot_fraction) {
    opts.few_shot = FewShotSpec{FewShotSpec::Mode::fraction, 1, *a.few_shot_fraction, 3};
  }
  {
    std::vector<Dialogue> all = train;
    all.insert(all.end(), dev.begin(), dev.end());
    opts.act_map = act_map_for(a.strip_act_domains, all);
  }

  ojson settings;
  settings["task"] = a.task;
  settings["seed"] = a.seed;
  settings["encoder"] = to_ordered(encoder_config_to_json(cfg));
  settings["train"] = to_ordered(train_config_to_json(rc.train));
  settings["probe_only"] = a.probe;
  settings["pretrained"] = !a.encoder.empty();
  settings["strip_act_domains"] = a.strip_act_domains;
  settings["rs_context_tokens"] = a.rs_context;
  settings["few_shot_k"] = a.few_shot_k ? ojson(*a.few_shot_k) : ojson();
  settings["few_shot_fraction"] = a.few_shot_fraction ? ojson(*a.few_shot_fraction) : ojson();
  settings["dev_holdout"] = a.dev.empty();
  ojson paths;
  paths["encoder"] = a.encoder;
  paths["tokenizer"] = a.tokenizer;
  paths["train"] = a.train;
  paths["dev"] = a.dev;
  paths["test"] = a.test;
  paths["config"] = a.config;
  paths["ontology"] = a.ontology;
  const fs::path dir(a.out);
  const std::string fp = write_resolved_config(dir, "finetune", settings, paths);

  const FinetuneResult r = finetune(vocab, cfg, init, train, dev, opts);
  write_jsonl(dir / "metrics.jsonl", r.log);
  save_task_model(dir / "model.ckpt", r.model);
  ojson summary;
  summary["trainable_parameters"] = r.trainable_parameters;
  summary["train_examples"] = r.train_examples;
  summary["best_dev_loss"] = r.best_dev_loss;
  summary["best_step"] = r.best_step;
  write_json(dir / "summary.json", summary);
  out << "finetuned " << a.task << " on " << r.train_examples << " examples, "
      << r.trainable_parameters << " trainable parameters, best dev loss "
      << fmt_double(r.best_dev_loss) << " at step " << r.best_step << '\n';

  if (!a.test.empty()) {
    EvalOptions eo;
    eo.seed = a.seed;
    eo.act_map = opts.act_map;
    const auto metrics = evaluate_task(r.model, vocab, load_unified(a.test), eo);
    const MetricReport rep = aggregate_seeds(a.task, {metrics}, {a.seed}, fp);
    write_report(dir / "report.json", rep);
    for (const auto& [k, v] : metrics) out << k << ' ' << fmt_double(v) << '\n';
  }
  return 0;
}

struct EvaluateArgs {
  std::vector<std::string> models;
  std::string tokenizer;
  std::string test;
  std::string out;
  std::string metrics;
  std::uint64_t seed = 0;
  std::size_t num_seeds = 5;
  bool strip_act_domains = false;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const Vocab vocab = load_vocab(a.tokenizer);
  const std::vector<Dialogue> test = load_unified(a.test);
  std::set<std::string> wanted;
  {
    std::stringstream ss(a.metrics);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) wanted.insert(item);
    }
  }
  EvalOptions eo;
  eo.seed = a.seed;
  eo.num_seeds = a.num_seeds;
  eo.act_map = act_map_for(a.strip_act_domains, test);

  std::vector<SeedMetrics> runs;
  std::vector<std::uint64_t> seeds;
  std::optional<Task> task;
  for (const std::string& path : a.models) {
    const TaskModel m = load_task_model(path);
    if (task && *task != m.task) throw std::invalid_argument("models are trained for different tasks");
    task = m.task;
    if (m.cfg.vocab_size != vocab.size()) {
      throw std::invalid_argument("model " + path + " does not match the tokenizer");
    }
    SeedMetrics all = evaluate_task(m, vocab, test, eo);
    SeedMetrics kept;
    for (const auto& [k, v] : all) {
      if (wanted.empty() || wanted.count(k)) kept[k] = v;
    }
    for (const std::string& w : wanted) {
      if (!all.count(w)) throw std::invalid_argument("metric '" + w + "' is not reported for task " + to_string(m.task));
    }
    runs.push_back(std::move(kept));
    seeds.push_back(m.seed);
  }

  ojson settings;
  settings["task"] = to_string(*task);
  settings["seed"] = a.seed;
  settings["num_seeds"] = a.num_seeds;
  settings["metrics"] = std::vector<std::string>(wanted.begin(), wanted.end());
  settings["model_seeds"] = seeds;
  settings["strip_act_domains"] = a.strip_act_domains;
  ojson paths;
  paths["models"] = a.models;
  paths["tokenizer"] = a.tokenizer;
  paths["test"] = a.test;
  const fs::path dir(a.out);
  const std::string fp = write_resolved_config(dir, "evaluate", settings, paths);
  const MetricReport rep = aggregate_seeds(to_string(*task), runs, seeds, fp);
  write_report(dir / "report.json", rep);
  for (const auto& [k, s] : rep.metrics) {
    out << k << ' ' << fmt_double(s.mean) << " +- " << fmt_double(s.std) << '\n';
  }
  return 0;
}

struct ProbeArgs {
  std::string mode;
  std::string encoder;
  std::string tokenizer;
  std::string train;
  std::string test;
  std::string data;
  std::string config;
  std::string label = "domain";
  std::string norm = "sqrt";
  std::string out;
  std::uint64_t seed = 0;
  std::optional<std::size_t> k;
  std::optional<std::size_t> steps;
};

int cmd_probe(const ProbeArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_run_config(a.config);
  rc.train.seed = a.seed;
  if (a.steps) rc.train.total_steps = *a.steps;
  const Vocab vocab = load_vocab(a.tokenizer);
  const EncoderCheckpoint ck = load_encoder_for(a.encoder, vocab);
  const std::size_t max_len = std::min(rc.train.max_len, ck.cfg.max_positions);

  ojson settings;
  settings["mode"] = a.mode;
  settings["seed"] = a.seed;
  settings["encoder"] = to_ordered(encoder_config_to_json(ck.cfg));
  ojson paths;
  paths["encoder"] = a.encoder;
  paths["tokenizer"] = a.tokenizer;
  const fs::path dir(a.out);

  if (a.mode == "linear") {
    if (a.train.empty() || a.test.empty()) throw std::invalid_argument("linear probing needs --train and --test");
    const LabeledTurns tr = collect_turns(vocab, load_unified(a.train), Speaker::user, "intent", max_len);
    const LabeledTurns te = collect_turns(vocab, load_unified(a.test), Speaker::user, "intent", max_len);
    std::set<std::string> names(tr.labels.begin(), tr.labels.end());
    const LabelSpace space({names.begin(), names.end()});
    LabeledSequences trs{tr.inputs, {}, space.size()}, tes{te.inputs, {}, space.size()};
    for (const auto& l : tr.labels) trs.labels.push_back(space.index_of(l));
    for (const auto& l : te.labels) tes.labels.push_back(space.index_of(l));
    settings["train"] = to_ordered(train_config_to_json(rc.train));
    paths["train"] = a.train;
    paths["test"] = a.test;
    const std::string fp = write_resolved_config(dir, "probe", settings, paths);
    LinearProbeReport r = linear_probe(ck.params, ck.cfg, trs, tes, rc.train);
    r.report.config_fingerprint = fp;
    write_report(dir / "report.json", r.report);
    out << "linear probe accuracy " << fmt_double(r.report.metrics.at("accuracy").mean) << " with "
        << r.trainable_parameters << " trainable parameters\n";
    return 0;
  }
  if (a.mode != "cluster") throw std::invalid_argument("--mode must be linear or cluster");
  if (a.data.empty()) throw std::invalid_argument("cluster probing needs --data");
  const LabeledTurns turns = collect_turns(vocab, load_unified(a.data), Speaker::system, a.label, max_len);
  std::set<std::string> names(turns.labels.begin(), turns.labels.end());
  const LabelSpace space({names.begin(), names.end()});
  std::vector<std::size_t> labels;
  for (const auto& l : turns.labels) labels.push_back(space.index_of(l));
  const std::size_t k = a.k ? *a.k : space.size();
  settings["k"] = k;
  settings["label"] = a.label;
  settings["nmi_norm"] = a.norm;
  paths["data"] = a.data;
  const std::string fp = write_resolved_config(dir, "probe", settings, paths);
  const Matrix emb = encode_cls_batch(ck.params, ck.cfg, turns.inputs);
  const ClusteringResult cr = clustering_probe(emb, labels, k, a.seed,
                                               a.norm == "max" ? NmiNorm::max : NmiNorm::sqrt);
  if (cr.warning) err << "warning: " << *cr.warning << '\n';
  write_report(dir / "report.json", aggregate_seeds("cluster-probe", {{{"nmi", cr.nmi}}}, {a.seed}, fp));
  out << "nmi " << fmt_double(cr.nmi) << " over " << labels.size() << " responses, k = " << k << '\n';
  return 0;
}

struct ExportArgs {
  std::string encoder;
  std::string tokenizer;
  std::string corpus;
  std::string out;
  std::string speaker = "system";
  std::string label = "domain";
  std::size_t max_len = 128;
  bool pca = false;
};

int cmd_export(const ExportArgs& a, std::ostream& out) {
  const Vocab vocab = load_vocab(a.tokenizer);
  const EncoderCheckpoint ck = load_encoder_for(a.encoder, vocab);
  const Speaker speaker = a.speaker == "user" ? Speaker::user : Speaker::system;
  const LabeledTurns turns = collect_turns(vocab, load_unified(a.corpus), speaker, a.label,
                                           std::min(a.max_len, ck.cfg.max_positions));
  if (turns.inputs.empty()) throw std::invalid_argument("no labeled utterances to export");
  ojson settings;
  settings["speaker"] = a.speaker;
  settings["label"] = a.label;
  settings["max_len"] = a.max_len;
  settings["pca"] = a.pca;
  ojson paths;
  paths["encoder"] = a.encoder;
  paths["tokenizer"] = a.tokenizer;
  paths["corpus"] = a.corpus;
  const fs::path dir(a.out);
  write_resolved_config(dir, "export-embeddings", settings, paths);
  const Matrix emb = encode_cls_batch(ck.params, ck.cfg, turns.inputs);
  export_embeddings(dir / "embeddings.csv", emb, turns.labels, a.pca);
  out << "exported " << emb.rows() << " embeddings to " << (dir / "embeddings.csv").string() << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dialogue-adapted language model pre-training and evaluation", "dialm"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic annotated corpus");
  s_synth->add_option("--seed", synth.seed, "Random seed");
  s_synth->add_option("--n", synth.n, "Number of dialogues")->required();
  s_synth->add_option("--out", synth.out, "Output directory (stdout when omitted)");
  s_synth->add_option("--domains", synth.domains, "Restrict to these domains");

  StatsArgs stats;
  auto* s_stats = app.add_subcommand("stats", "Print corpus statistics");
  s_stats->add_option("--corpus,--in", stats.corpus, "Unified corpus file")->required();
  s_stats->add_flag("--json", stats.json, "Print as JSON");

  UnifyArgs unify;
  auto* s_unify = app.add_subcommand("unify", "Convert a source corpus to the unified format");
  s_unify->add_option("--adapter", unify.adapter, "Source format")->required()->check(CLI::IsMember(adapter_names()));
  s_unify->add_option("--input,--in", unify.input, "Source directory")->required();
  s_unify->add_option("--out", unify.out, "Output directory")->required();
  s_unify->add_flag("--split", unify.split, "Also write train/dev/test splits");
  s_unify->add_option("--ratios", unify.ratios, "Split ratios train dev test")->expected(3);
  s_unify->add_option("--seed", unify.seed, "Split seed");

  TokenizerArgs tok;
  auto* s_tok = app.add_subcommand("train-tokenizer", "Learn a subword vocabulary");
  s_tok->add_option("--corpus", tok.corpora, "Unified corpus file(s)")->required();
  s_tok->add_option("--vocab-size", tok.vocab_size, "Vocabulary size including specials")->required();
  s_tok->add_option("--out", tok.out, "Output directory")->required();

  PretrainArgs pre;
  auto* s_pre = app.add_subcommand("pretrain", "Pre-train the encoder");
  s_pre->add_option("--corpus", pre.corpus, "Training corpus")->required();
  s_pre->add_option("--dev", pre.dev, "Dev corpus (default: seeded 10% hold-out)");
  s_pre->add_option("--tokenizer", pre.tokenizer, "Vocabulary file")->required();
  s_pre->add_option("--config", pre.config, "JSON run config");
  s_pre->add_option("--objectives", pre.objectives, "mlm or mlm+rcl")->check(CLI::IsMember({"mlm", "mlm+rcl"}));
  s_pre->add_option("--out", pre.out, "Output directory")->required();
  s_pre->add_option("--resume", pre.resume, "Training state to continue from");
  s_pre->add_option("--seed", pre.seed, "Random seed");
  s_pre->add_option("--steps", pre.steps, "Override total_steps");

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune", "Fine-tune on a downstream task");
  s_ft->add_option("--task", ft.task, "intent|dst|act|rs")->required()->check(CLI::IsMember({"intent", "dst", "act", "rs"}));
  s_ft->add_option("--encoder", ft.encoder, "Encoder checkpoint (random init when omitted)");
  s_ft->add_option("--tokenizer", ft.tokenizer, "Vocabulary file")->required();
  s_ft->add_option("--train", ft.train, "Training corpus")->required();
  s_ft->add_option("--dev", ft.dev, "Dev corpus (default: seeded 10% hold-out)");
  s_ft->add_option("--test", ft.test, "Evaluate on this corpus after training");
  s_ft->add_option("--config", ft.config, "JSON run config");
  s_ft->add_option("--ontology", ft.ontology, "Ontology file for dst");
  s_ft->add_option("--out", ft.out, "Output directory")->required();
  s_ft->add_option("--seed", ft.seed, "Random seed");
  s_ft->add_option("--steps", ft.steps, "Override total_steps");
  s_ft->add_flag("--probe", ft.probe, "Freeze the encoder and train only the head");
  s_ft->add_flag("--strip-act-domains", ft.strip_act_domains, "Map domain-act labels to acts");
  s_ft->add_option("--few-shot-k", ft.few_shot_k, "Utterances per intent class");
  s_ft->add_option("--few-shot-fraction", ft.few_shot_fraction, "Fraction of training dialogues");
  s_ft->add_option("--rs-context", ft.rs_context, "Context tokens kept for response selection");

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "Evaluate task models and aggregate over seeds");
  s_ev->add_option("--model", ev.models, "Task model checkpoint(s)")->required();
  s_ev->add_option("--tokenizer", ev.tokenizer, "Vocabulary file")->required();
  s_ev->add_option("--test", ev.test, "Test corpus")->required();
  s_ev->add_option("--out", ev.out, "Output directory")->required();
  s_ev->add_option("--metrics", ev.metrics, "Comma-separated metric names to keep");
  s_ev->add_option("--seed", ev.seed, "Seed for k-of-100 batching");
  s_ev->add_option("--num-seeds", ev.num_seeds, "k-of-100 shuffles");
  s_ev->add_flag("--strip-act-domains", ev.strip_act_domains, "Map domain-act labels to acts");

  ProbeArgs pr;
  auto* s_pr = app.add_subcommand("probe", "Linear or clustering probe of a frozen encoder");
  s_pr->add_option("--mode", pr.mode, "linear|cluster")->required()->check(CLI::IsMember({"linear", "cluster"}));
  s_pr->add_option("--encoder", pr.encoder, "Encoder checkpoint")->required();
  s_pr->add_option("--tokenizer", pr.tokenizer, "Vocabulary file")->required();
  s_pr->add_option("--train", pr.train, "Training corpus (linear)");
  s_pr->add_option("--test", pr.test, "Test corpus (linear)");
  s_pr->add_option("--data", pr.data, "Corpus to cluster (cluster)");
  s_pr->add_option("--config", pr.config, "JSON run config");
  s_pr->add_option("--label", pr.label, "domain|act (cluster)")->check(CLI::IsMember({"domain", "act"}));
  s_pr->add_option("--nmi-norm", pr.norm, "sqrt|max")->check(CLI::IsMember({"sqrt", "max"}));
  s_pr->add_option("--k", pr.k, "Number of clusters (default: number of labels)");
  s_pr->add_option("--out", pr.out, "Output directory")->required();
  s_pr->add_option("--seed", pr.seed, "Random seed");
  s_pr->add_option("--steps", pr.steps, "Override total_steps (linear)");

  ExportArgs ex;
  auto* s_ex = app.add_subcommand("export-embeddings", "Write [CLS] embeddings as CSV");
  s_ex->add_option("--encoder", ex.encoder, "Encoder checkpoint")->required();
  s_ex->add_option("--tokenizer", ex.tokenizer, "Vocabulary file")->required();
  s_ex->add_option("--corpus", ex.corpus, "Unified corpus")->required();
  s_ex->add_option("--out", ex.out, "Output directory")->required();
  s_ex->add_option("--speaker", ex.speaker, "system|user")->check(CLI::IsMember({"system", "user"}));
  s_ex->add_option("--label", ex.label, "domain|act|intent")->check(CLI::IsMember({"domain", "act", "intent"}));
  s_ex->add_option("--max-len", ex.max_len, "Maximum tokens per utterance");
  s_ex->add_flag("--pca", ex.pca, "Append a 2-D PCA projection");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsageExit;
  }

  try {
    if (*s_synth) return cmd_synth(synth, out);
    if (*s_stats) return cmd_stats(stats, out);
    if (*s_unify) return cmd_unify(unify, out);
    if (*s_tok) return cmd_train_tokenizer(tok, out);
    if (*s_pre) return cmd_pretrain(pre, out);
    if (*s_ft) return cmd_finetune(ft, out);
    if (*s_ev) return cmd_evaluate(ev, out);
    if (*s_pr) return cmd_probe(pr, out, err);
    if (*s_ex) return cmd_export(ex, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return kUsageExit;
}

}  // namespace dialm
