#include "dialm/probes.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include "dialm/rng.hpp"

namespace dialm {

namespace {

constexpr std::uint64_t kProbeInitTag = 21;
constexpr std::uint64_t kProbeBatchTag = 22;

double entropy(const std::map<std::size_t, std::size_t>& counts, double n) {
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double nmi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b, NmiNorm norm) {
  if (a.size() != b.size()) throw std::invalid_argument("nmi: labelings differ in length");
  if (a.empty()) throw std::invalid_argument("nmi: empty labelings");
  const double n = static_cast<double>(a.size());
  std::map<std::size_t, std::size_t> ca, cb;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++ca[a[i]];
    ++cb[b[i]];
    ++joint[{a[i], b[i]}];
  }
  const double ha = entropy(ca, n);
  const double hb = entropy(cb, n);
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    const double pxy = static_cast<double>(c) / n;
    const double px = static_cast<double>(ca[key.first]) / n;
    const double py = static_cast<double>(cb[key.second]) / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  const double denom = norm == NmiNorm::sqrt ? std::sqrt(ha * hb) : std::max(ha, hb);
  return std::clamp(mi / denom, 0.0, 1.0);
}

KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const std::size_t n = x.rows();
  if (k < 2) throw std::invalid_argument("kmeans: k must be at least 2");
  if (n < k) {
    throw std::invalid_argument("kmeans: " + std::to_string(n) + " points for k = " + std::to_string(k));
  }
  Rng rng(seed);
  KMeansResult r;
  r.centers = Matrix(k, x.cols());
  std::vector<std::size_t> chosen{rng.below(n)};
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const auto last = x.row(chosen.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.row(i), last));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        if (u < d2[i]) {
          pick = i;
          break;
        }
        u -= d2[i];
      }
      while (d2[pick] <= 0.0) --pick;  // rounding fell off the end
    } else {
      // Fewer distinct points than clusters: reuse the first unchosen index.
      while (std::find(chosen.begin(), chosen.end(), pick) != chosen.end()) ++pick;
    }
    chosen.push_back(pick);
  }
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(x.row(chosen[c]).begin(), x.row(chosen[c]).end(), r.centers.row(c).begin());
  }

  r.assignment.assign(n, k);
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(x.row(i), r.centers.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double d = squared_distance(x.row(i), r.centers.row(c));
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed) {
      r.converged = true;
      break;
    }
    Matrix sums(k, x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(r.assignment[i]);
      auto p = x.row(i);
      for (std::size_t j = 0; j < p.size(); ++j) s[j] += p[j];
      ++counts[r.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto s = sums.row(c);
      auto ctr = r.centers.row(c);
      for (std::size_t j = 0; j < s.size(); ++j) ctr[j] = s[j] / static_cast<double>(counts[c]);
    }
  }
  return r;
}

ClusteringResult clustering_probe(const Matrix& emb, const std::vector<std::size_t>& labels,
                                  std::size_t k, std::uint64_t seed, NmiNorm norm,
                                  std::size_t max_iter) {
  if (emb.rows() != labels.size()) {
    throw std::invalid_argument("clustering_probe: " + std::to_string(emb.rows()) + " embeddings for " +
                                std::to_string(labels.size()) + " labels");
  }
  ClusteringResult r;
  bool identical = true;
  for (std::size_t i = 1; i < emb.rows() && identical; ++i) {
    identical = std::equal(emb.row(i).begin(), emb.row(i).end(), emb.row(0).begin());
  }
  if (identical) {
    if (emb.rows() < k || k < 2) {
      throw std::invalid_argument("clustering_probe: need k >= 2 and at least k points");
    }
    r.warning = "all embeddings are identical; clustering is degenerate";
    r.clusters.assignment.assign(emb.rows(), 0);
    r.nmi = 0.0;
    return r;
  }
  r.clusters = kmeans(emb, k, seed, max_iter);
  r.nmi = nmi(r.clusters.assignment, labels, norm);
  return r;
}

double probe_accuracy(const LinearClassifier& c, const Matrix& x, const std::vector<std::size_t>& y) {
  if (x.rows() != y.size() || y.empty()) throw std::invalid_argument("probe_accuracy: bad input sizes");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (argmax(classifier_logits(c, x.row(i))) == y[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

LinearProbeResult train_linear_probe(const Matrix& x, const std::vector<std::size_t>& y,
                                     std::size_t num_classes, const TrainConfig& cfg) {
  cfg.validate();
  if (x.rows() != y.size() || y.empty()) throw std::invalid_argument("linear probe: bad input sizes");
  if (num_classes < 2) throw std::invalid_argument("linear probe: need at least 2 classes");
  for (std::size_t label : y) {
    if (label >= num_classes) {
      throw LabelError("label " + std::to_string(label) + " is outside " + std::to_string(num_classes) +
                       " classes");
    }
  }
  LinearProbeResult r;
  r.classifier = init_linear_classifier(num_classes, x.cols(), mix_seed({cfg.seed, kProbeInitTag}));
  LinearClassifier grads = r.classifier;
  std::vector<ParamSlot> slots;
  append_slots(slots, r.classifier, grads, "probe.");
  for (const ParamSlot& s : slots) r.trainable_parameters += s.value->size();

  LinearClassifier best = r.classifier;
  std::vector<double> scratch(x.cols());
  LoopHooks hooks;
  hooks.score_name = "train_loss";
  hooks.compute = [&](std::size_t step) {
    Rng rng(mix_seed({cfg.seed, step, kProbeBatchTag}));
    double loss = 0.0;
    for (std::size_t i : random_dialogue_sampler(y.size(), cfg.batch_size, rng)) {
      loss += classifier_loss(r.classifier, x.row(i), y[i], &grads, scratch);
    }
    return std::vector<std::pair<std::string, double>>{{"loss", loss}};
  };
  hooks.evaluate = [&] {
    double loss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) loss += classifier_loss(r.classifier, x.row(i), y[i], nullptr, {});
    return loss / static_cast<double>(y.size());
  };
  hooks.on_improved = [&] { best = r.classifier; };
  hooks.log = [&](const nlohmann::json& rec) { r.log.push_back(rec); };
  OptimizerState opt;
  LoopState loop;
  run_training(cfg, slots, opt, loop, hooks);
  r.classifier = best;
  r.train_accuracy = probe_accuracy(r.classifier, x, y);
  return r;
}

LinearProbeReport linear_probe(const EncoderParams& encoder, const EncoderConfig& cfg,
                               const LabeledSequences& train, const LabeledSequences& test,
                               const TrainConfig& train_cfg) {
  if (train.inputs.size() != train.labels.size() || test.inputs.size() != test.labels.size()) {
    throw std::invalid_argument("linear_probe: inputs and labels differ in count");
  }
  const std::size_t classes = std::max(train.num_classes, test.num_classes);
  const Matrix xtr = encode_cls_batch(encoder, cfg, train.inputs);
  const Matrix xte = encode_cls_batch(encoder, cfg, test.inputs);
  LinearProbeResult p = train_linear_probe(xtr, train.labels, classes, train_cfg);
  LinearProbeReport out;
  out.trainable_parameters = p.trainable_parameters;
  out.classifier = p.classifier;
  const SeedMetrics m{{"accuracy", probe_accuracy(p.classifier, xte, test.labels)},
                      {"train_accuracy", p.train_accuracy}};
  out.report = aggregate_seeds("linear-probe", {m}, {train_cfg.seed},
                               config_fingerprint(train_config_to_json(train_cfg)));
  return out;
}

Matrix pca_2d(const Matrix& points) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (n == 0 || d == 0) throw std::invalid_argument("pca_2d: empty input");
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points(i, j);
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_2d: eigendecomposition failed");
  Matrix out(n, 2);
  const Eigen::Index dd = static_cast<Eigen::Index>(d);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, dd); ++c) {
    Eigen::VectorXd axis = solver.eigenvectors().col(dd - 1 - c);  // eigenvalues ascend
    Eigen::Index at = 0;
    axis.cwiseAbs().maxCoeff(&at);
    if (axis(at) < 0) axis = -axis;
    const Eigen::VectorXd proj = x * axis;
    for (std::size_t i = 0; i < n; ++i) out(i, static_cast<std::size_t>(c)) = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

void export_embeddings(std::ostream& out, const Matrix& emb, const std::vector<std::string>& labels,
                       bool with_pca) {
  if (emb.rows() != labels.size()) {
    throw std::invalid_argument("export_embeddings: " + std::to_string(emb.rows()) +
                                " embeddings for " + std::to_string(labels.size()) + " labels");
  }
  Matrix pcs;
  if (with_pca) pcs = pca_2d(emb);
  out << "label";
  for (std::size_t j = 0; j < emb.cols(); ++j) out << ",dim" << j;
  if (with_pca) out << ",pc1,pc2";
  out << '\n';
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    out << csv_field(labels[i]);
    for (double v : emb.row(i)) out << ',' << fmt(v);
    if (with_pca) out << ',' << fmt(pcs(i, 0)) << ',' << fmt(pcs(i, 1));
    out << '\n';
  }
  if (!out) throw std::runtime_error("export_embeddings: write failed");
}

void export_embeddings(const std::filesystem::path& path, const Matrix& emb,
                       const std::vector<std::string>& labels, bool with_pca) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  export_embeddings(out, emb, labels, with_pca);
}

}  // namespace dialm
