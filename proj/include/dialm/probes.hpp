#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dialm/downstream.hpp"
#include "dialm/encoder.hpp"
#include "dialm/report.hpp"
#include "dialm/tensor.hpp"
#include "dialm/trainer.hpp"

namespace dialm {

enum class NmiNorm { sqrt, max };

/// Normalized mutual information (natural logs) between two labelings.
/// 0 when either labeling has zero entropy.
double nmi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
           NmiNorm norm = NmiNorm::sqrt);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  Matrix centers;
  std::size_t iterations = 0;
  bool converged = false;
};

/// k-means++ seeding from Rng(seed), then Lloyd iterations until assignments
/// stop changing or max_iter. Nearest-center ties go to the lowest index;
/// an empty cluster keeps its previous center.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 300);

struct ClusteringResult {
  double nmi = 0.0;
  KMeansResult clusters;
  std::optional<std::string> warning;
};

/// Clusters embeddings (one per row) into k groups and scores them against
/// labels. All-identical points give NMI 0 with a warning.
ClusteringResult clustering_probe(const Matrix& embeddings, const std::vector<std::size_t>& labels,
                                  std::size_t k, std::uint64_t seed, NmiNorm norm = NmiNorm::sqrt,
                                  std::size_t max_iter = 300);

struct LinearProbeResult {
  LinearClassifier classifier;
  std::size_t trainable_parameters = 0;
  double train_accuracy = 0.0;
  std::vector<nlohmann::json> log;
};

double probe_accuracy(const LinearClassifier& c, const Matrix& features,
                      const std::vector<std::size_t>& labels);

/// Single linear layer with softmax cross-entropy on fixed features, trained by
/// the shared loop; early stopping on the mean training loss.
LinearProbeResult train_linear_probe(const Matrix& features, const std::vector<std::size_t>& labels,
                                     std::size_t num_classes, const TrainConfig& cfg);

struct LabeledSequences {
  std::vector<TokenSequence> inputs;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
};

struct LinearProbeReport {
  MetricReport report;  // "accuracy" and "train_accuracy"
  std::size_t trainable_parameters = 0;
  LinearClassifier classifier;
};

/// [CLS] features from the frozen encoder (eval mode), then train_linear_probe.
LinearProbeReport linear_probe(const EncoderParams& encoder, const EncoderConfig& cfg,
                               const LabeledSequences& train, const LabeledSequences& test,
                               const TrainConfig& train_cfg);

/// Projection of the centered rows onto the two leading principal axes. Each
/// axis is signed so that its largest-magnitude component is positive.
Matrix pca_2d(const Matrix& points);

/// CSV: header "label,dim0..dim{d-1}[,pc1,pc2]", one row per embedding.
void export_embeddings(std::ostream& out, const Matrix& embeddings,
                       const std::vector<std::string>& labels, bool with_pca);
void export_embeddings(const std::filesystem::path& path, const Matrix& embeddings,
                       const std::vector<std::string>& labels, bool with_pca);

}  // namespace dialm
