#include "dialm/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "dialm/checkpoint.hpp"
#include "dialm/rng.hpp"

namespace dialm {

namespace {

constexpr std::uint64_t kHeadInitTag = 11;
constexpr std::uint64_t kFewShotTag = 12;
constexpr std::uint64_t kBatchTag = 13;
constexpr std::uint64_t kDropoutTag = 14;

constexpr double kHeadInitStd = 0.02;

Matrix truncated_normal_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (double& v : m.values()) v = rng.truncated_normal(kHeadInitStd);
  return m;
}

template <typename H>
void add_into(H& dst, const H& src) {
  std::vector<const Matrix*> s;
  src.for_each([&](const std::string&, const Matrix& m) { s.push_back(&m); });
  std::size_t i = 0;
  dst.for_each([&](const std::string&, Matrix& m) { axpy(1.0, *s[i++], m); });
}

template <typename H>
H zero_copy(const H& h) {
  H z = h;
  z.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

std::vector<Dialogue> prepare(const std::vector<Dialogue>& in,
                              const std::optional<std::map<std::string, std::string>>& act_map) {
  std::vector<Dialogue> out;
  out.reserve(in.size());
  for (const Dialogue& d : in) out.push_back(normalize_speakers(d));
  if (act_map) map_act_labels(out, *act_map);
  return out;
}

}  // namespace

double classifier_loss(const LinearClassifier& h, std::span<const double> cls, std::size_t label,
                   LinearClassifier* grads, std::span<double> dcls) {
  std::vector<double> p = classifier_logits(h, cls);
  softmax_inplace(p);
  const double loss = -std::log(p[label]);
  if (!grads) return loss;
  p[label] -= 1.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    grads->bias[k] += p[k];
    auto gw = grads->weight.row(k);
    auto w = h.weight.row(k);
    for (std::size_t c = 0; c < cls.size(); ++c) {
      gw[c] += p[k] * cls[c];
      dcls[c] += p[k] * w[c];
    }
  }
  return loss;
}

double act_head_loss(const ActHead& h, std::span<const double> cls, const std::vector<std::uint8_t>& t,
                ActHead* grads, std::span<double> dcls) {
  const std::vector<double> z = act_logits(h, cls);
  double loss = 0.0;
  std::vector<double> dz(z.size());
  for (std::size_t n = 0; n < z.size(); ++n) {
    const double y = t[n] ? 1.0 : 0.0;
    loss += std::max(z[n], 0.0) - z[n] * y + std::log1p(std::exp(-std::abs(z[n])));
    dz[n] = sigmoid(z[n]) - y;
  }
  if (!grads) return loss;
  for (std::size_t n = 0; n < z.size(); ++n) grads->bias[n] += dz[n];
  for (std::size_t c = 0; c < cls.size(); ++c) {
    auto w = h.weight.row(c);
    auto gw = grads->weight.row(c);
    double acc = 0.0;
    for (std::size_t n = 0; n < z.size(); ++n) {
      gw[n] += cls[c] * dz[n];
      acc += w[n] * dz[n];
    }
    dcls[c] += acc;
  }
  return loss;
}

double dst_head_loss(const DstHead& h, std::span<const double> cls, const std::vector<Matrix>& emb,
                const std::vector<std::size_t>& gold, DstHead* grads, std::span<double> dcls) {
  double loss = 0.0;
  const std::size_t d = cls.size();
  for (std::size_t j = 0; j < h.proj_weight.size(); ++j) {
    const std::vector<double> u = dst_project(h, j, cls);
    const Matrix& e = emb[j];
    std::vector<double> p(e.rows());
    for (std::size_t i = 0; i < e.rows(); ++i) p[i] = cosine(u, e.row(i));
    softmax_inplace(p);
    loss -= std::log(p[gold[j]]);
    if (!grads) continue;
    p[gold[j]] -= 1.0;
    std::vector<double> du(d, 0.0);
    for (std::size_t i = 0; i < e.rows(); ++i) cosine_grad_accumulate(u, e.row(i), p[i], du);
    Matrix& gw = grads->proj_weight[j];
    Matrix& gb = grads->proj_bias[j];
    const Matrix& w = h.proj_weight[j];
    for (std::size_t k = 0; k < d; ++k) gb[k] += du[k];
    for (std::size_t c = 0; c < d; ++c) {
      auto gwr = gw.row(c);
      auto wr = w.row(c);
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        gwr[k] += cls[c] * du[k];
        acc += wr[k] * du[k];
      }
      dcls[c] += acc;
    }
  }
  return loss;
}

namespace {

nlohmann::json ontology_to_plain_json(const Ontology& o) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t j = 0; j < o.pairs.size(); ++j) {
    arr.push_back({{"pair", o.pairs[j].str()}, {"values", o.values[j]}});
  }
  return arr;
}

Ontology ontology_from_plain_json(const nlohmann::json& arr) {
  Ontology o;
  for (const auto& e : arr) {
    o.pairs.push_back(SlotKey::parse(e.at("pair").get<std::string>()));
    o.values.push_back(e.at("values").get<std::vector<std::string>>());
  }
  o.validate();
  return o;
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::intent: return "intent";
    case Task::dst: return "dst";
    case Task::act: return "act";
    case Task::rs: return "rs";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "intent") return Task::intent;
  if (name == "dst") return Task::dst;
  if (name == "act") return Task::act;
  if (name == "rs") return Task::rs;
  throw std::invalid_argument("unknown task '" + std::string(name) + "' (expected intent|dst|act|rs)");
}

LabelSpace::LabelSpace(std::vector<std::string> labels) : labels_(std::move(labels)) {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (!index_.emplace(labels_[i], i).second) {
      throw LabelError("duplicate label '" + labels_[i] + "'");
    }
  }
}

std::optional<std::size_t> LabelSpace::find(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t LabelSpace::index_of(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) throw LabelError("label '" + label + "' is outside the label space");
  return it->second;
}

void Ontology::validate() const {
  if (pairs.size() != values.size()) throw LabelError("ontology pair/value list count mismatch");
  std::set<SlotKey> seen;
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    if (!seen.insert(pairs[j]).second) throw LabelError("duplicate ontology pair '" + pairs[j].str() + "'");
    if (values[j].empty()) throw LabelError("ontology pair '" + pairs[j].str() + "' has no values");
    std::set<std::string> vs(values[j].begin(), values[j].end());
    if (vs.size() != values[j].size()) {
      throw LabelError("ontology pair '" + pairs[j].str() + "' has duplicate values");
    }
    if (!vs.count(kNoneValue)) {
      throw LabelError("ontology pair '" + pairs[j].str() + "' lacks the \"none\" value");
    }
  }
}

std::size_t Ontology::pair_index(const SlotKey& key) const {
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    if (pairs[j] == key) return j;
  }
  throw LabelError("slot '" + key.str() + "' is not in the ontology");
}

std::size_t Ontology::value_index(std::size_t pair, const std::string& value) const {
  const auto& vs = values.at(pair);
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (vs[i] == value) return i;
  }
  throw LabelError("value '" + value + "' of slot '" + pairs[pair].str() +
                   "' is outside the ontology");
}

Ontology build_ontology(const std::vector<Dialogue>& dialogues) {
  std::map<SlotKey, std::set<std::string>> seen;
  for (const Dialogue& d : dialogues) {
    for (const Turn& t : d.turns) {
      if (!t.state) continue;
      for (const auto& [k, v] : *t.state) seen[k].insert(v);
    }
  }
  Ontology o;
  for (const auto& [k, vs] : seen) {
    o.pairs.push_back(k);
    std::vector<std::string> list{kNoneValue};
    for (const std::string& v : vs) {
      if (v != kNoneValue) list.push_back(v);
    }
    o.values.push_back(std::move(list));
  }
  return o;
}

nlohmann::ordered_json ontology_to_json(const Ontology& o) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t p = 0; p < o.pairs.size(); ++p) j[o.pairs[p].str()] = o.values[p];
  return j;
}

Ontology ontology_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw LabelError("ontology must be a JSON object");
  Ontology o;
  for (const auto& [key, vals] : j.items()) {
    o.pairs.push_back(SlotKey::parse(key));
    auto list = vals.get<std::vector<std::string>>();
    if (std::find(list.begin(), list.end(), kNoneValue) == list.end()) {
      list.insert(list.begin(), kNoneValue);
    }
    o.values.push_back(std::move(list));
  }
  o.validate();
  return o;
}

void save_ontology(const std::filesystem::path& path, const Ontology& o) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << ontology_to_json(o).dump(2) << '\n';
}

Ontology load_ontology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return ontology_from_json(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw LabelError(path.string() + ": " + e.what());
  }
}

std::size_t DstHead::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

LinearClassifier init_linear_classifier(std::size_t classes, std::size_t hidden, std::uint64_t seed) {
  return {truncated_normal_matrix(classes, hidden, seed), Matrix(1, classes)};
}

ActHead init_act_head(std::size_t acts, std::size_t hidden, std::uint64_t seed) {
  return {truncated_normal_matrix(hidden, acts, seed), Matrix(1, acts)};
}

DstHead init_dst_head(std::size_t pairs, std::size_t hidden) {
  DstHead h;
  for (std::size_t j = 0; j < pairs; ++j) {
    Matrix g(hidden, hidden);
    for (std::size_t i = 0; i < hidden; ++i) g(i, i) = 1.0;
    h.proj_weight.push_back(std::move(g));
    h.proj_bias.emplace_back(1, hidden);
  }
  return h;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::vector<double> classifier_logits(const LinearClassifier& h, std::span<const double> cls) {
  std::vector<double> z(h.weight.rows());
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = dot(h.weight.row(k), cls) + h.bias[k];
  return z;
}

std::vector<double> intent_probs(const LinearClassifier& h, std::span<const double> cls) {
  std::vector<double> p = classifier_logits(h, cls);
  softmax_inplace(p);
  return p;
}

std::vector<double> act_logits(const ActHead& h, std::span<const double> cls) {
  std::vector<double> z(h.bias.values().begin(), h.bias.values().end());
  for (std::size_t c = 0; c < cls.size(); ++c) {
    auto w = h.weight.row(c);
    for (std::size_t n = 0; n < z.size(); ++n) z[n] += cls[c] * w[n];
  }
  return z;
}

std::vector<double> act_probs(const ActHead& h, std::span<const double> cls) {
  std::vector<double> a = act_logits(h, cls);
  for (double& v : a) v = sigmoid(v);
  return a;
}

std::vector<std::size_t> triggered_acts(std::span<const double> probs) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.5) out.push_back(i);
  }
  return out;
}

std::vector<double> dst_project(const DstHead& h, std::size_t pair, std::span<const double> cls) {
  const Matrix& g = h.proj_weight.at(pair);
  std::vector<double> u(h.proj_bias[pair].values().begin(), h.proj_bias[pair].values().end());
  for (std::size_t c = 0; c < cls.size(); ++c) {
    auto row = g.row(c);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] += cls[c] * row[k];
  }
  return u;
}

std::vector<std::vector<double>> dst_similarities(const DstHead& h, std::span<const double> cls,
                                                  const std::vector<Matrix>& emb) {
  if (emb.size() != h.proj_weight.size()) {
    throw std::invalid_argument("value embeddings do not match the number of slot projections");
  }
  std::vector<std::vector<double>> out(emb.size());
  for (std::size_t j = 0; j < emb.size(); ++j) {
    if (emb[j].rows() == 0) throw LabelError("empty value list for pair " + std::to_string(j));
    const std::vector<double> u = dst_project(h, j, cls);
    for (std::size_t i = 0; i < emb[j].rows(); ++i) out[j].push_back(cosine(u, emb[j].row(i)));
  }
  return out;
}

double response_score(std::span<const double> context, std::span<const double> candidate) {
  return cosine(context, candidate);
}

std::vector<double> encode_cls(const EncoderParams& params, const EncoderConfig& cfg,
                               const TokenSequence& seq) {
  return forward(params, cfg, seq).cls;
}

Matrix encode_cls_batch(const EncoderParams& params, const EncoderConfig& cfg,
                        const std::vector<TokenSequence>& seqs) {
  Matrix out(seqs.size(), cfg.hidden);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::vector<double> c = encode_cls(params, cfg, seqs[i]);
    std::copy(c.begin(), c.end(), out.row(i).begin());
  }
  return out;
}

std::vector<double> intent_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                   const LinearClassifier& head, const TokenSequence& utterance) {
  return intent_probs(head, encode_cls(params, cfg, utterance));
}

std::vector<std::vector<double>> dst_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                             const DstHead& head, const TokenSequence& history,
                                             const std::vector<Matrix>& value_embeddings) {
  return dst_similarities(head, encode_cls(params, cfg, history), value_embeddings);
}

std::vector<double> act_forward(const EncoderParams& params, const EncoderConfig& cfg,
                                const ActHead& head, const TokenSequence& history) {
  return act_probs(head, encode_cls(params, cfg, history));
}

double response_selection_score(const EncoderParams& params, const EncoderConfig& cfg,
                                const TokenSequence& context, const TokenSequence& candidate) {
  return response_score(encode_cls(params, cfg, context), encode_cls(params, cfg, candidate));
}

std::vector<Matrix> compute_value_embeddings(const EncoderParams& params, const EncoderConfig& cfg,
                                             const Vocab& vocab, const Ontology& ontology,
                                             std::size_t max_len) {
  ontology.validate();
  std::vector<Matrix> out;
  for (const auto& values : ontology.values) {
    std::vector<TokenSequence> seqs;
    for (const std::string& v : values) seqs.push_back(encode_plain(vocab, v, max_len));
    out.push_back(encode_cls_batch(params, cfg, seqs));
  }
  return out;
}

LabelSpace intent_label_space(const std::vector<Dialogue>& dialogues) {
  std::set<std::string> labels;
  for (const Dialogue& d : dialogues) {
    for (const Turn& t : d.turns) {
      if (t.speaker == Speaker::user && t.intent) labels.insert(*t.intent);
    }
  }
  return LabelSpace({labels.begin(), labels.end()});
}

LabelSpace act_label_space(const std::vector<Dialogue>& dialogues) {
  std::set<std::string> labels;
  for (const Dialogue& raw : dialogues) {
    const Dialogue d = normalize_speakers(raw);
    for (std::size_t r : valid_response_turns(d)) {
      if (d.turns[r].acts) labels.insert(d.turns[r].acts->begin(), d.turns[r].acts->end());
    }
  }
  return LabelSpace({labels.begin(), labels.end()});
}

std::vector<IntentExample> intent_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                           const LabelSpace& space, std::size_t max_len) {
  std::vector<IntentExample> out;
  for (const Dialogue& d : dialogues) {
    for (const Turn& t : d.turns) {
      if (t.speaker != Speaker::user || !t.intent) continue;
      out.push_back({encode_utterance(vocab, Speaker::user, t.text, max_len), space.index_of(*t.intent)});
    }
  }
  return out;
}

std::vector<DstExample> dst_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                     const Ontology& ontology, std::size_t max_len) {
  std::vector<DstExample> out;
  for (const Dialogue& raw : dialogues) {
    const Dialogue d = normalize_speakers(raw);
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
      const Turn& t = d.turns[i];
      if (t.speaker != Speaker::user || !t.state) continue;
      DstExample ex;
      ex.history = flatten_dialogue(vocab, d, i, max_len);
      ex.values.assign(ontology.pairs.size(), 0);
      for (std::size_t j = 0; j < ontology.pairs.size(); ++j) {
        ex.values[j] = ontology.value_index(j, kNoneValue);
      }
      for (const auto& [key, value] : *t.state) {
        const std::size_t j = ontology.pair_index(key);
        ex.values[j] = ontology.value_index(j, value);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<ActExample> act_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                     const LabelSpace& space, std::size_t max_len) {
  std::vector<ActExample> out;
  for (const Dialogue& raw : dialogues) {
    const Dialogue d = normalize_speakers(raw);
    for (std::size_t r : valid_response_turns(d)) {
      if (!d.turns[r].acts) continue;
      ActExample ex;
      ex.history = flatten_dialogue(vocab, d, r - 1, max_len);
      ex.targets.assign(space.size(), 0);
      for (const std::string& a : *d.turns[r].acts) ex.targets[space.index_of(a)] = 1;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<ContrastivePair> rs_examples(const Vocab& vocab, const std::vector<Dialogue>& dialogues,
                                         std::size_t context_tokens, std::size_t max_len) {
  std::vector<ContrastivePair> out;
  for (const Dialogue& raw : dialogues) {
    const Dialogue d = normalize_speakers(raw);
    for (std::size_t r : valid_response_turns(d)) {
      ContrastivePair p = make_contrastive_pair(vocab, d, r, max_len);
      p.context = flatten_dialogue(vocab, d, r - 1, std::min(context_tokens, max_len));
      out.push_back(std::move(p));
    }
  }
  return out;
}

void save_task_model(const std::filesystem::path& path, const TaskModel& m) {
  TensorFile f;
  f.metadata["kind"] = "task-model";
  f.metadata["task"] = to_string(m.task);
  f.metadata["seed"] = m.seed;
  f.metadata["encoder"] = encoder_config_to_json(m.cfg);
  f.metadata["max_len"] = m.max_len;
  f.metadata["rs_context_tokens"] = m.rs_context_tokens;
  f.metadata["out_of_scope_label"] = m.out_of_scope_label;
  f.metadata["labels"] = m.labels.labels();
  f.metadata["ontology"] = ontology_to_plain_json(m.ontology);
  put_encoder(f, m.encoder, "encoder.");
  switch (m.task) {
    case Task::intent:
      m.intent.for_each([&](const std::string& n, const Matrix& t) { f.put("head." + n, t); });
      break;
    case Task::act:
      m.act.for_each([&](const std::string& n, const Matrix& t) { f.put("head." + n, t); });
      break;
    case Task::dst:
      m.dst.for_each([&](const std::string& n, const Matrix& t) { f.put("head." + n, t); });
      for (std::size_t j = 0; j < m.value_embeddings.size(); ++j) {
        f.put("values.pair" + std::to_string(j), m.value_embeddings[j]);
      }
      break;
    case Task::rs:
      break;
  }
  save_tensor_file(path, f);
}

TaskModel load_task_model(const std::filesystem::path& path) {
  const TensorFile f = load_tensor_file(path);
  if (f.metadata.value("kind", "") != "task-model") {
    throw CheckpointError(path.string() + ": not a task model");
  }
  TaskModel m;
  m.task = parse_task(f.metadata.at("task").get<std::string>());
  m.seed = f.metadata.at("seed").get<std::uint64_t>();
  m.cfg = encoder_config_from_json(f.metadata.at("encoder"));
  m.max_len = f.metadata.at("max_len").get<std::size_t>();
  m.rs_context_tokens = f.metadata.at("rs_context_tokens").get<std::size_t>();
  m.out_of_scope_label = f.metadata.at("out_of_scope_label").get<std::string>();
  m.labels = LabelSpace(f.metadata.at("labels").get<std::vector<std::string>>());
  m.ontology = ontology_from_plain_json(f.metadata.at("ontology"));
  m.encoder = take_encoder(f, m.cfg, "encoder.");
  auto load_head = [&](auto& head) {
    head.for_each([&](const std::string& n, Matrix& t) { t = f.get("head." + n); });
  };
  switch (m.task) {
    case Task::intent:
      m.intent = init_linear_classifier(m.labels.size(), m.cfg.hidden, 0);
      load_head(m.intent);
      break;
    case Task::act:
      m.act = init_act_head(m.labels.size(), m.cfg.hidden, 0);
      load_head(m.act);
      break;
    case Task::dst:
      m.dst = init_dst_head(m.ontology.pairs.size(), m.cfg.hidden);
      load_head(m.dst);
      for (std::size_t j = 0; j < m.ontology.pairs.size(); ++j) {
        m.value_embeddings.push_back(f.get("values.pair" + std::to_string(j)));
      }
      break;
    case Task::rs:
      break;
  }
  return m;
}

namespace {

std::vector<Dialogue> concat(const std::vector<Dialogue>& a, const std::vector<Dialogue>& b) {
  std::vector<Dialogue> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

template <typename T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace

FinetuneResult finetune(const Vocab& vocab, const EncoderConfig& cfg, const EncoderParams& init,
                        const std::vector<Dialogue>& train_raw,
                        const std::vector<Dialogue>& dev_raw, const FinetuneOptions& opts) {
  cfg.validate();
  const TrainConfig& tc = opts.train;
  tc.validate();
  check_shapes(init, cfg);
  if (cfg.vocab_size != vocab.size()) {
    throw std::invalid_argument("encoder vocab_size does not match the tokenizer");
  }
  if (opts.probe_only && opts.task == Task::rs) {
    throw std::invalid_argument("response selection has no head to probe");
  }
  const std::uint64_t seed = tc.seed;
  const std::size_t max_len = std::min(tc.max_len, cfg.max_positions);

  std::vector<Dialogue> train = prepare(train_raw, opts.act_map);
  const std::vector<Dialogue> dev = prepare(dev_raw, opts.act_map);
  if (train.empty()) throw std::invalid_argument("finetune: empty training set");

  FinetuneResult result;
  TaskModel& m = result.model;
  m.task = opts.task;
  m.seed = seed;
  m.cfg = cfg;
  m.encoder = init;
  m.max_len = max_len;
  m.rs_context_tokens = opts.rs_context_tokens;
  m.out_of_scope_label = opts.out_of_scope_label;

  // Label spaces are fixed from the full data before any few-shot subsampling.
  if (opts.task == Task::intent) {
    m.labels = opts.labels ? *opts.labels : intent_label_space(concat(train, dev));
    if (m.labels.size() < 2) throw LabelError("intent classification needs at least 2 classes");
  } else if (opts.task == Task::act) {
    m.labels = opts.labels ? *opts.labels : act_label_space(concat(train, dev));
    if (m.labels.size() < 1) throw LabelError("no dialogue act labels found");
  } else if (opts.task == Task::dst) {
    m.ontology = opts.ontology ? *opts.ontology : build_ontology(concat(train, dev));
    m.ontology.validate();
    if (m.ontology.pairs.empty()) throw LabelError("ontology has no slots");
  }

  const std::uint64_t few_seed = mix_seed({seed, kFewShotTag});
  if (opts.few_shot) {
    opts.few_shot->validate();
    if (opts.few_shot->mode == FewShotSpec::Mode::fraction) {
      train = select(train, sample_fraction(train.size(), opts.few_shot->fraction, few_seed));
    } else if (opts.task != Task::intent) {
      throw std::invalid_argument("per-class-k sampling applies to intent classification only");
    }
  }

  std::vector<IntentExample> intent_train, intent_dev;
  std::vector<DstExample> dst_train, dst_dev;
  std::vector<ActExample> act_train, act_dev;
  std::vector<ContrastivePair> rs_train, rs_dev;
  std::size_t n_train = 0, n_dev = 0;
  switch (opts.task) {
    case Task::intent: {
      intent_train = intent_examples(vocab, train, m.labels, max_len);
      intent_dev = intent_examples(vocab, dev, m.labels, max_len);
      if (opts.few_shot && opts.few_shot->mode == FewShotSpec::Mode::per_class_k) {
        std::vector<std::string> labels;
        for (const auto& ex : intent_train) labels.push_back(m.labels.label(ex.label));
        intent_train = select(intent_train, sample_per_class(labels, opts.few_shot->k, few_seed));
      }
      m.intent = init_linear_classifier(m.labels.size(), cfg.hidden, mix_seed({seed, kHeadInitTag}));
      n_train = intent_train.size();
      n_dev = intent_dev.size();
      break;
    }
    case Task::dst:
      dst_train = dst_examples(vocab, train, m.ontology, max_len);
      dst_dev = dst_examples(vocab, dev, m.ontology, max_len);
      m.dst = init_dst_head(m.ontology.pairs.size(), cfg.hidden);
      m.value_embeddings = compute_value_embeddings(init, cfg, vocab, m.ontology, max_len);
      n_train = dst_train.size();
      n_dev = dst_dev.size();
      break;
    case Task::act:
      act_train = act_examples(vocab, train, m.labels, max_len);
      act_dev = act_examples(vocab, dev, m.labels, max_len);
      m.act = init_act_head(m.labels.size(), cfg.hidden, mix_seed({seed, kHeadInitTag}));
      n_train = act_train.size();
      n_dev = act_dev.size();
      break;
    case Task::rs:
      rs_train = rs_examples(vocab, train, opts.rs_context_tokens, max_len);
      rs_dev = rs_examples(vocab, dev, opts.rs_context_tokens, max_len);
      n_train = rs_train.size();
      n_dev = rs_dev.size();
      break;
  }
  if (n_train == 0) throw std::invalid_argument("training data yields no " + to_string(opts.task) + " examples");
  if (n_dev == 0) throw std::invalid_argument("dev data yields no " + to_string(opts.task) + " examples");
  result.train_examples = n_train;

  EncoderParams enc_grads = zero_params(cfg);
  LinearClassifier intent_grads = zero_copy(m.intent);
  ActHead act_grads = zero_copy(m.act);
  DstHead dst_grads = zero_copy(m.dst);
  std::vector<ParamSlot> slots;
  if (!opts.probe_only) append_slots(slots, m.encoder, enc_grads, "encoder.");
  switch (opts.task) {
    case Task::intent: append_slots(slots, m.intent, intent_grads, "head."); break;
    case Task::act: append_slots(slots, m.act, act_grads, "head."); break;
    case Task::dst: append_slots(slots, m.dst, dst_grads, "head."); break;
    case Task::rs: break;
  }
  for (const ParamSlot& s : slots) result.trainable_parameters += s.value->size();

  const bool train_mode = !opts.probe_only;
  // Loss of one (non-rs) example; accumulates gradients when requested.
  auto example_loss = [&](std::size_t i, bool training, std::uint64_t dropout_seed) {
    const TokenSequence& seq = opts.task == Task::intent ? (training ? intent_train : intent_dev)[i].input
                               : opts.task == Task::dst ? (training ? dst_train : dst_dev)[i].history
                                                        : (training ? act_train : act_dev)[i].history;
    const bool grads = training;
    const bool need_tape = grads && !opts.probe_only;
    EncoderTape tape;
    const EncoderOutput out = forward(m.encoder, cfg, seq, training && train_mode, dropout_seed,
                                      need_tape ? &tape : nullptr);
    std::vector<double> dcls(cfg.hidden, 0.0);
    double loss = 0.0;
    switch (opts.task) {
      case Task::intent:
        loss = classifier_loss(m.intent, out.cls, (training ? intent_train : intent_dev)[i].label,
                           grads ? &intent_grads : nullptr, dcls);
        break;
      case Task::act:
        loss = act_head_loss(m.act, out.cls, (training ? act_train : act_dev)[i].targets,
                        grads ? &act_grads : nullptr, dcls);
        break;
      case Task::dst:
        loss = dst_head_loss(m.dst, out.cls, m.value_embeddings, (training ? dst_train : dst_dev)[i].values,
                        grads ? &dst_grads : nullptr, dcls);
        break;
      case Task::rs:
        break;
    }
    if (need_tape) {
      Matrix upstream(seq.size(), cfg.hidden);
      std::copy(dcls.begin(), dcls.end(), upstream.row(0).begin());
      backward(m.encoder, cfg, tape, upstream, enc_grads);
    }
    return loss;
  };

  TaskModel best = m;
  LoopHooks hooks;
  hooks.score_name = "dev_loss";
  hooks.compute = [&](std::size_t step) {
    Rng rng(mix_seed({seed, step, kBatchTag}));
    const auto picks = random_dialogue_sampler(n_train, tc.batch_size, rng);
    const std::uint64_t dseed = mix_seed({seed, step, kDropoutTag});
    double loss = 0.0;
    if (opts.task == Task::rs) {
      const RclResult r = rcl_loss(m.encoder, cfg, select(rs_train, picks), true, dseed, true);
      add_scaled(enc_grads, r.grads, 1.0);
      loss = r.loss_sum;
    } else {
      for (std::size_t b = 0; b < picks.size(); ++b) {
        loss += example_loss(picks[b], true, mix_seed({dseed, b}));
      }
    }
    return std::vector<std::pair<std::string, double>>{{"loss", loss}};
  };
  hooks.evaluate = [&] {
    double total = 0.0;
    if (opts.task == Task::rs) {
      for (std::size_t s = 0; s < n_dev; s += tc.batch_size) {
        const std::size_t e = std::min(n_dev, s + tc.batch_size);
        std::vector<ContrastivePair> chunk(rs_dev.begin() + static_cast<std::ptrdiff_t>(s),
                                           rs_dev.begin() + static_cast<std::ptrdiff_t>(e));
        total += rcl_loss(m.encoder, cfg, chunk, false, 0, false).loss_sum;
      }
    } else {
      for (std::size_t i = 0; i < n_dev; ++i) total += example_loss(i, false, 0);
    }
    return total / static_cast<double>(n_dev);
  };
  hooks.on_improved = [&] { best = m; };
  hooks.log = [&](const nlohmann::json& rec) { result.log.push_back(rec); };

  OptimizerState opt;
  LoopState loop;
  run_training(tc, slots, opt, loop, hooks);
  m = std::move(best);
  result.best_dev_loss = loop.best_score;
  result.best_step = loop.best_step;
  return result;
}

std::map<std::string, double> evaluate_task(const TaskModel& m, const Vocab& vocab,
                                            const std::vector<Dialogue>& test_raw,
                                            const EvalOptions& opts) {
  const std::vector<Dialogue> test = prepare(test_raw, opts.act_map);
  std::map<std::string, double> out;
  switch (m.task) {
    case Task::intent: {
      const auto ex = intent_examples(vocab, test, m.labels, m.max_len);
      if (ex.empty()) throw std::invalid_argument("test data has no intent examples");
      std::vector<std::string> preds, golds;
      for (const auto& e : ex) {
        preds.push_back(m.labels.label(argmax(intent_forward(m.encoder, m.cfg, m.intent, e.input))));
        golds.push_back(m.labels.label(e.label));
      }
      const IntentMetrics im = intent_metrics(preds, golds, m.out_of_scope_label);
      out["acc_all"] = im.acc_all;
      out["acc_out"] = im.acc_out;
      if (im.acc_in) out["acc_in"] = *im.acc_in;
      if (im.recall_out) out["recall_out"] = *im.recall_out;
      break;
    }
    case Task::dst: {
      const auto ex = dst_examples(vocab, test, m.ontology, m.max_len);
      if (ex.empty()) throw std::invalid_argument("test data has no state-annotated user turns");
      std::vector<DialogueState> preds, golds;
      for (const auto& e : ex) {
        const auto sims = dst_forward(m.encoder, m.cfg, m.dst, e.history, m.value_embeddings);
        DialogueState p, g;
        for (std::size_t j = 0; j < m.ontology.pairs.size(); ++j) {
          p[m.ontology.pairs[j]] = m.ontology.values[j][argmax(sims[j])];
          g[m.ontology.pairs[j]] = m.ontology.values[j][e.values[j]];
        }
        preds.push_back(std::move(p));
        golds.push_back(std::move(g));
      }
      const DstMetrics dm = dst_metrics(preds, golds);
      out["joint_goal_accuracy"] = dm.joint;
      out["slot_accuracy"] = dm.slot;
      break;
    }
    case Task::act: {
      const auto ex = act_examples(vocab, test, m.labels, m.max_len);
      if (ex.empty()) throw std::invalid_argument("test data has no act-annotated system turns");
      std::vector<std::set<std::string>> preds, golds;
      for (const auto& e : ex) {
        std::set<std::string> p, g;
        for (std::size_t i : triggered_acts(act_forward(m.encoder, m.cfg, m.act, e.history))) {
          p.insert(m.labels.label(i));
        }
        for (std::size_t i = 0; i < e.targets.size(); ++i) {
          if (e.targets[i]) g.insert(m.labels.label(i));
        }
        preds.push_back(std::move(p));
        golds.push_back(std::move(g));
      }
      const F1Scores f = multilabel_f1(preds, golds, m.labels.labels());
      out["micro_f1"] = f.micro;
      out["macro_f1"] = f.macro;
      break;
    }
    case Task::rs: {
      const auto pairs = rs_examples(vocab, test, m.rs_context_tokens, m.max_len);
      std::vector<TokenSequence> ctx, resp;
      for (const auto& p : pairs) {
        ctx.push_back(p.context);
        resp.push_back(p.response);
      }
      const Matrix c = encode_cls_batch(m.encoder, m.cfg, ctx);
      const Matrix r = encode_cls_batch(m.encoder, m.cfg, resp);
      const auto scores = k_of_100_many(
          [&](std::size_t i, std::size_t j) { return response_score(c.row(i), r.row(j)); },
          pairs.size(), opts.ks, opts.num_seeds, opts.seed);
      for (const auto& [k, v] : scores) out[std::to_string(k) + "_of_100"] = v;
      break;
    }
  }
  return out;
}

}  // namespace dialm
