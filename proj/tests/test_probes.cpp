#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "dialm/probes.hpp"
#include "dialm/report.hpp"
#include "support.hpp"

using namespace dialm;
using namespace dialm::testing;

namespace {

/// Two well-separated Gaussian-ish blobs per class along distinct axes.
Matrix blobs(std::size_t per_class, std::size_t classes, std::size_t dim, std::uint64_t seed,
             std::vector<std::size_t>& labels) {
  Matrix x(per_class * classes, dim);
  Rng rng(seed);
  labels.clear();
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t j = 0; j < dim; ++j) x(r, j) = 0.1 * rng.normal();
      x(r, c % dim) += 5.0;
      labels.push_back(c);
    }
  }
  return x;
}

}  // namespace

TEST_CASE("nmi reference values") {
  CHECK(nmi({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(nmi({0, 0, 1, 1}, {0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(nmi({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(nmi({0, 0, 1, 1}, {0, 0, 0, 0}) == 0.0);
  CHECK(nmi({0, 0, 1, 1, 2, 2}, {5, 5, 9, 9, 7, 7}, NmiNorm::max) == doctest::Approx(1.0));
  CHECK_THROWS_AS(nmi({0, 1}, {0}), std::invalid_argument);
}

TEST_CASE("nmi stays in [0, 1] and is symmetric") {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<std::size_t> a(n), b(n);
    for (auto& v : a) v = rng.below(4);
    for (auto& v : b) v = rng.below(5);
    for (NmiNorm norm : {NmiNorm::sqrt, NmiNorm::max}) {
      const double s = nmi(a, b, norm);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      CHECK(s == doctest::Approx(nmi(b, a, norm)).epsilon(1e-12));
    }
  }
}

TEST_CASE("kmeans recovers separated clusters deterministically") {
  std::vector<std::size_t> labels;
  const Matrix x = blobs(20, 3, 4, 1, labels);
  const KMeansResult r = kmeans(x, 3, 7);
  CHECK(r.converged);
  CHECK(nmi(r.assignment, labels) == doctest::Approx(1.0));
  CHECK(kmeans(x, 3, 7).assignment == r.assignment);
  CHECK_THROWS_AS(kmeans(x, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(kmeans(x, 61, 1), std::invalid_argument);
}

TEST_CASE("clustering probe contracts") {
  std::vector<std::size_t> labels;
  const Matrix x = blobs(15, 4, 4, 2, labels);
  CHECK(clustering_probe(x, labels, 4, 1).nmi == doctest::Approx(1.0));
  // A clustering that puts every point in one cluster carries no information.
  CHECK(nmi(std::vector<std::size_t>(labels.size(), 0), labels) == 0.0);
  CHECK_THROWS_AS(clustering_probe(x, labels, 1, 1), std::invalid_argument);
  const ClusteringResult same = clustering_probe(Matrix(10, 3, 1.0), std::vector<std::size_t>(10, 0), 3, 1);
  CHECK(same.nmi == 0.0);
  CHECK(same.warning.has_value());
}

TEST_CASE("linear probe on separable features") {
  std::vector<std::size_t> labels;
  const Matrix x = blobs(10, 3, 5, 4, labels);
  TrainConfig tc;
  tc.batch_size = 10;
  tc.total_steps = 200;
  tc.lr0 = 0.05;
  tc.eval_every = 20;
  const LinearProbeResult r = train_linear_probe(x, labels, 3, tc);
  CHECK(r.trainable_parameters == (5 + 1) * 3);
  CHECK(r.train_accuracy == 1.0);
  CHECK(probe_accuracy(r.classifier, x, labels) == 1.0);
}

TEST_CASE("linear probe leaves the encoder untouched") {
  const EncoderConfig cfg = tiny_config(40);
  const EncoderParams enc = init_params(cfg, 3);
  const EncoderParams copy = enc;
  LabeledSequences train, test;
  Rng rng(5);
  for (std::size_t i = 0; i < 30; ++i) {
    const std::size_t label = i % 2;
    std::vector<TokenId> ids{id_of(Special::cls), static_cast<TokenId>(10 + label)};
    for (int j = 0; j < 4; ++j) ids.push_back(static_cast<TokenId>(20 + rng.below(20)));
    (i < 20 ? train : test).inputs.push_back(make_sequence(ids));
    (i < 20 ? train : test).labels.push_back(label);
  }
  train.num_classes = test.num_classes = 2;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.total_steps = 30;
  tc.eval_every = 10;
  const LinearProbeReport r = linear_probe(enc, cfg, train, test, tc);
  CHECK(enc == copy);
  CHECK(r.trainable_parameters == (cfg.hidden + 1) * 2);
  CHECK(r.report.metrics.count("accuracy") == 1);
}

TEST_CASE("pca preserves distances of planar points") {
  Matrix pts(12, 5);
  Rng rng(9);
  for (std::size_t i = 0; i < 12; ++i) {
    const double a = rng.normal(), b = rng.normal();
    for (std::size_t j = 0; j < 5; ++j) pts(i, j) = a * (j + 1.0) / 3.0 + b * (j % 2 ? 1.0 : -0.5) + 2.0;
  }
  const Matrix p = pca_2d(pts);
  REQUIRE(p.cols() == 2);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t k = i + 1; k < 12; ++k) {
      double d_full = 0, d_proj = 0;
      for (std::size_t j = 0; j < 5; ++j) d_full += std::pow(pts(i, j) - pts(k, j), 2);
      for (std::size_t j = 0; j < 2; ++j) d_proj += std::pow(p(i, j) - p(k, j), 2);
      CHECK(std::sqrt(d_proj) == doctest::Approx(std::sqrt(d_full)).epsilon(1e-9));
    }
  }
}

TEST_CASE("embedding export layout") {
  const Matrix e = random_matrix(4, 3, 2);
  std::ostringstream out;
  export_embeddings(out, e, {"a", "b", "a", "c"}, true);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "label,dim0,dim1,dim2,pc1,pc2");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 5);
  }
  CHECK(rows == 4);
  std::ostringstream plain;
  export_embeddings(plain, e, {"a", "b", "a", "c"}, false);
  CHECK(plain.str().substr(0, plain.str().find('\n')) == "label,dim0,dim1,dim2");
  CHECK_THROWS(export_embeddings(plain, e, {"a"}, false));
}

TEST_CASE("seed aggregation") {
  const MetricReport r = aggregate_seeds("intent", {{{"acc", 0.4}}, {{"acc", 0.6}}}, {1, 2}, "abc");
  CHECK(r.metrics.at("acc").mean == doctest::Approx(0.5));
  CHECK(r.metrics.at("acc").std == doctest::Approx(0.1414213562).epsilon(1e-9));
  CHECK(aggregate_seeds("x", {{{"acc", 0.3}}}, {0}, "f").metrics.at("acc").std == 0.0);
  CHECK_THROWS_AS(aggregate_seeds("x", {{{"acc", 0.3}}, {{"f1", 0.2}}}, {0, 1}, "f"), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_seeds("x", {{{"acc", 0.3}}}, {0, 1}, "f"), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_seeds("x", {}, {}, "f"), std::invalid_argument);

  const auto path = std::filesystem::temp_directory_path() / "dialm_report.json";
  write_report(path, r);
  CHECK(read_report(path) == r);
  std::filesystem::remove(path);
}

TEST_CASE("config fingerprints ignore key order") {
  const nlohmann::json a = nlohmann::json::parse(R"({"lr": 0.1, "steps": 5})");
  const nlohmann::json b = nlohmann::json::parse(R"({"steps": 5, "lr": 0.1})");
  CHECK(config_fingerprint(a) == config_fingerprint(b));
  CHECK(config_fingerprint(a).size() == 16);
  CHECK(config_fingerprint(a) != config_fingerprint(nlohmann::json::parse(R"({"lr": 0.2, "steps": 5})")));
}
