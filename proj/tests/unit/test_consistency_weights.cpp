#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cwmerge/consistency_weights.hpp"
#include "test_util.hpp"

using namespace cwmerge;

namespace {

const std::vector<std::string> kIds2{"q1", "q2"};

/// Two-query activation rows whose cosine is exactly representable as c.
Matrix rows_with_cosine(double c) { return Matrix::from_rows({{1.0, 0.0}, {c, std::sqrt(1.0 - c * c)}}); }

ActivationSet planted(const std::string& id, const std::vector<double>& cosines) {
  ActivationSet a;
  a.model_id = id;
  a.query_ids = kIds2;
  for (double c : cosines) a.layers.push_back(rows_with_cosine(c));
  return a;
}

SimilarityMatrix sim_from(const std::vector<std::vector<double>>& rows, std::vector<std::string> ids = {}) {
  return {Matrix::from_rows(rows), std::move(ids)};
}

}  // namespace

TEST(MaxPool, Examples) {
  EXPECT_EQ(max_pool_sequence(Matrix::from_rows({{1, 4}, {3, 2}})), (std::vector<double>{3, 4}));
  EXPECT_EQ(max_pool_sequence(Matrix::from_rows({{5, -1}})), (std::vector<double>{5, -1}));
  EXPECT_EQ(max_pool_sequence(Matrix::from_rows({{2, 7}, {2, 7}, {2, 7}})), (std::vector<double>{2, 7}));
  EXPECT_THROW(max_pool_sequence(Matrix(0, 3)), ValidationError);
}

TEST(Similarity, Examples) {
  const auto same = similarity_matrix(Matrix::from_rows({{1, 2}, {1, 2}}));
  for (double v : same.values.values) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_EQ(similarity_matrix(Matrix::from_rows({{1, 0}, {0, 1}})).values(0, 1), 0.0);
  EXPECT_EQ(similarity_matrix(Matrix::from_rows({{1, 0}, {-1, 0}})).values(0, 1), -1.0);
}

TEST(Similarity, RejectsZeroRowsAndSingleQuery) {
  EXPECT_THROW(similarity_matrix(Matrix::from_rows({{1, 0}, {0, 0}})), ValidationError);
  EXPECT_THROW(similarity_matrix(Matrix::from_rows({{1, 0}, {1e-13, 0}})), ValidationError);
  EXPECT_THROW(similarity_matrix(Matrix::from_rows({{1, 0}})), ValidationError);
}

TEST(Similarity, InvariantsOnRandomInput) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m(7, 5);
    for (double& v : m.values) v = n(gen);
    const auto s = similarity_matrix(m);
    Matrix scaled = m;
    for (std::size_t r = 0; r < m.rows; ++r) {
      const double f = scale(gen);
      for (double& v : scaled.row(r)) v *= f;
    }
    const auto s2 = similarity_matrix(scaled);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_EQ(s.values(i, i), 1.0);
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_EQ(s.values(i, j), s.values(j, i));
        EXPECT_LE(std::fabs(s.values(i, j)), 1.0);
        EXPECT_NEAR(s.values(i, j), s2.values(i, j), 1e-12);
      }
    }
  }
}

TEST(LayerDistance, Examples) {
  const auto a = sim_from({{1, 0.3}, {0.3, 1}});
  EXPECT_EQ(layer_distance(a, a), 0.0);
  EXPECT_NEAR(layer_distance(sim_from({{1, 0.2}, {0.2, 1}}), sim_from({{1, 0.8}, {0.8, 1}})), 0.6, 1e-15);
  const auto s3 = sim_from({{1, 0.1, 0.2}, {0.1, 1, 0.3}, {0.2, 0.3, 1}});
  const auto r3 = sim_from({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_NEAR(layer_distance(s3, r3), 0.2, 1e-15);
}

TEST(LayerDistance, QuerySetMismatch) {
  const auto a = sim_from({{1, 0}, {0, 1}}, {"x", "y"});
  const auto b = sim_from({{1, 0}, {0, 1}}, {"y", "x"});
  EXPECT_THROW(layer_distance(a, b), ValidationError);
  EXPECT_THROW(layer_distance(a, sim_from({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {"x", "y"})), ValidationError);
}

TEST(InvertNormalize, Examples) {
  const std::vector<double> d1{0.2, 0.6};
  const auto r1 = invert_normalize(d1);
  EXPECT_DOUBLE_EQ(r1[0], 1.0);
  EXPECT_DOUBLE_EQ(r1[1], 0.0);
  const std::vector<double> d2{0.3, 0.3, 0.3};
  EXPECT_EQ(invert_normalize(d2), (std::vector<double>(3, 1.0 / 3.0)));
  const std::vector<double> d3{0.0, 0.1, 0.3};
  const auto r3 = invert_normalize(d3);
  EXPECT_NEAR(r3[0], 0.6, 1e-15);
  EXPECT_NEAR(r3[1], 0.4, 1e-15);
  EXPECT_EQ(r3[2], 0.0);
  const std::vector<double> neg{-0.1, 0.2};
  EXPECT_THROW(invert_normalize(neg), ValidationError);
  EXPECT_THROW(invert_normalize(std::vector<double>{}), ValidationError);
}

TEST(SigmoidWeights, Examples) {
  const std::vector<double> zero{0.0};
  EXPECT_EQ(sigmoid_weights(zero, 1, 0)[0], 0.5);
  const std::vector<double> r{1.0, 0.0};
  const auto w = sigmoid_weights(r, 1, 0);
  EXPECT_NEAR(w[0], 0.7310585786300049, 1e-15);
  EXPECT_EQ(w[1], 0.5);
  const std::vector<double> many{0.0, 0.25, 1.0};
  for (double v : sigmoid_weights(many, 0.0, 0.7)) EXPECT_EQ(v, sigmoid(0.7));
  const std::vector<double> bad{1.5};
  EXPECT_THROW(sigmoid_weights(bad, 1, 0), ValidationError);
}

TEST(SigmoidWeights, StrictlyIncreasing) {
  std::vector<double> r(101);
  for (int i = 0; i <= 100; ++i) r[i] = i / 100.0;
  const auto w = sigmoid_weights(r, 4.0, -1.0);
  for (int i = 1; i <= 100; ++i) EXPECT_GT(w[i], w[i - 1]);
}

TEST(LayerWeightsTest, SingleModelGetsSigmoidOfAPlusB) {
  const auto ref = similarity_matrix(Matrix::from_rows({{1, 0}, {0, 1}}), kIds2);
  const std::vector<ActivationSet> acts{planted("m", {0.3, 0.9, -0.5})};
  const auto lw = compute_layer_weights(acts, ref, {2.0, -0.5});
  for (double w : lw.weights[0]) EXPECT_EQ(w, sigmoid(1.5));
}

TEST(LayerWeightsTest, PlantedDistancesMatchHandTable) {
  // Reference cosine 0, so each planted cosine is that model's distance.
  const auto ref = similarity_matrix(Matrix::from_rows({{1, 0}, {0, 1}}), kIds2);
  const std::vector<ActivationSet> acts{planted("m1", {0.1, 0.2, 0.6}), planted("m2", {0.3, 0.2, 0.0}),
                                        planted("m3", {0.5, 0.2, 0.3})};
  const auto lw = compute_layer_weights(acts, ref);
  // Layer 0: d=[.1,.3,.5] -> r=[2/3,1/3,0]; layer 1: all equal -> 1/3 each;
  // layer 2: d=[.6,0,.3] -> r=[0,2/3,1/3]. w = sigmoid(4 r).
  const double hi = 0.935030830871336, mid = 0.791391472673955, lo = 0.5;
  const std::vector<std::vector<double>> expected{{hi, mid, lo}, {mid, mid, hi}, {lo, mid, mid}};
  ASSERT_EQ(lw.model_count(), 3u);
  ASSERT_EQ(lw.layer_count(), 3u);
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) EXPECT_NEAR(lw.weights[k][l], expected[k][l], 1e-12) << k << "," << l;
  EXPECT_NEAR(lw.distances[0][2], 0.5, 1e-15);
  EXPECT_EQ(lw.models, (std::vector<std::string>{"m1", "m2", "m3"}));
}

TEST(LayerWeightsTest, ModelMatchingReferenceWinsEveryLayer) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
  Matrix emb(6, 4);
  for (double& v : emb.values) v = n(gen);
  const auto ref = similarity_matrix(emb, ids);

  ActivationSet exact{"exact", {}, ids}, other{"other", {}, ids};
  for (int l = 0; l < 3; ++l) {
    // Same row directions as the reference (different scales), so Sigma_k == Sigma_r.
    Matrix m = emb;
    for (std::size_t r = 0; r < m.rows; ++r)
      for (double& v : m.row(r)) v *= 0.5 + static_cast<double>(r + l);
    exact.layers.push_back(m);
    Matrix o(6, 4);
    for (double& v : o.values) v = n(gen);
    other.layers.push_back(o);
  }
  const std::vector<ActivationSet> acts{other, exact};
  const auto lw = compute_layer_weights(acts, ref);
  for (int l = 0; l < 3; ++l) {
    EXPECT_NEAR(lw.distances[l][1], 0.0, 1e-12);
    EXPECT_GT(lw.weights[1][l], lw.weights[0][l]);
  }
}

TEST(LayerWeightsTest, PermutationEquivariance) {
  const auto ref = similarity_matrix(Matrix::from_rows({{1, 0}, {0, 1}}), kIds2);
  std::vector<ActivationSet> acts{planted("m1", {0.1, 0.7}), planted("m2", {0.4, 0.2}), planted("m3", {0.9, 0.5})};
  const auto lw = compute_layer_weights(acts, ref);
  std::vector<std::size_t> perm{0, 1, 2};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<ActivationSet> p;
    for (auto i : perm) p.push_back(acts[i]);
    const auto lp = compute_layer_weights(p, ref);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(lp.weights[k], lw.weights[perm[k]]);
  }
}

TEST(LayerWeightsTest, RandomDistanceTableProperties) {
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<int> models(2, 6);
  std::uniform_real_distribution<double> dist(0.0, 1.0), shift(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(static_cast<std::size_t>(models(gen)));
    for (double& v : d) v = dist(gen);
    const auto r = invert_normalize(d);
    const auto w = sigmoid_weights(r, 4.0, 0.0);
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-12);
    EXPECT_EQ(std::min_element(d.begin(), d.end()) - d.begin(), std::max_element(w.begin(), w.end()) - w.begin());
    for (double v : w) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    const double c = shift(gen);
    std::vector<double> shifted = d;
    for (double& v : shifted) v += c;
    const auto r2 = invert_normalize(shifted);
    for (std::size_t k = 0; k < d.size(); ++k) EXPECT_NEAR(r2[k], r[k], 1e-9);
  }
}

TEST(LayerWeightsTest, MismatchedInputsRejected) {
  const auto ref = similarity_matrix(Matrix::from_rows({{1, 0}, {0, 1}}), kIds2);
  std::vector<ActivationSet> acts{planted("m1", {0.1, 0.7}), planted("m2", {0.4})};
  EXPECT_THROW(compute_layer_weights(acts, ref), ValidationError);
  acts[1] = planted("m2", {0.4, 0.1});
  acts[1].query_ids = {"q2", "q1"};
  EXPECT_THROW(compute_layer_weights(acts, ref), ValidationError);
  acts[1] = planted("m2", {0.4, 0.1});
  acts[1].layers[0](0, 0) = std::nan("");
  EXPECT_THROW(compute_layer_weights(acts, ref), ValidationError);
  EXPECT_THROW(compute_layer_weights(std::vector<ActivationSet>{}, ref), ValidationError);
}

TEST(LayerWeightsTest, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 gen(21);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("q" + std::to_string(i));
  Matrix emb(10, 6);
  for (double& v : emb.values) v = n(gen);
  const auto ref = similarity_matrix(emb, ids);
  std::vector<ActivationSet> acts;
  for (int k = 0; k < 3; ++k) {
    ActivationSet a{"m" + std::to_string(k), {}, ids};
    for (int l = 0; l < 8; ++l) {
      Matrix m(10, 5);
      for (double& v : m.values) v = n(gen);
      a.layers.push_back(m);
    }
    acts.push_back(a);
  }
  const auto one = compute_layer_weights(acts, ref, {}, 1);
  const auto many = compute_layer_weights(acts, ref, {}, 4);
  EXPECT_EQ(one.weights, many.weights);
  EXPECT_EQ(one.distances, many.distances);
}

TEST(ActivationFiles, RoundTripThroughContainer) {
  const auto dir = testutil::scratch_dir();
  ActivationSet a{"m", {Matrix::from_rows({{0.5, -0.25}, {1, 2}}), Matrix::from_rows({{3}, {4}})}, {"x", "y"}};
  write_container(activation_set_to_checkpoint(a), dir / "acts.st");
  const auto back = load_activation_set(dir / "acts.st", "m");
  EXPECT_EQ(back.query_ids, a.query_ids);
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_EQ(back.layers[0].values, a.layers[0].values);
  EXPECT_EQ(back.layers[1].values, a.layers[1].values);

  const EmbeddingTable t{{"x", "y"}, Matrix::from_rows({{1, 0}, {0.5, 0.5}})};
  write_container(embedding_table_to_checkpoint(t), dir / "ref.st");
  const auto tb = load_embedding_table(dir / "ref.st");
  EXPECT_EQ(tb.ids, t.ids);
  EXPECT_EQ(tb.vectors.values, t.vectors.values);
}

TEST(ActivationFiles, ExporterSchemaFeedsWeights) {
  const auto dir = std::filesystem::path(CWMERGE_SOURCE_DIR) / "tests" / "data";
  const auto acts = load_activation_set(dir / "exporter_activations.st", "exported");
  EXPECT_EQ(acts.query_ids, (std::vector<std::string>{"q1", "q2", "q3", "q4"}));
  ASSERT_EQ(acts.layers.size(), 2u);
  EXPECT_EQ(acts.layers[0].rows, 4u);
  EXPECT_EQ(acts.layers[0].cols, 8u);
  EXPECT_EQ(acts.layers[1].cols, 3u);
  const auto ref = reference_similarity(load_embedding_table(dir / "exporter_embeddings.st"));
  EXPECT_NEAR(ref.values(0, 2), std::sqrt(0.5), 1e-7);
  const auto lw = compute_layer_weights(std::vector<ActivationSet>{acts}, ref);
  EXPECT_EQ(lw.layer_count(), 2u);
}

TEST(ActivationFiles, SchemaViolationsRejected) {
  Checkpoint c;
  c.tensors.emplace("layer.0", testutil::tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_THROW(activation_set_from(c, "m"), ValidationError);  // no query_ids
  c.metadata["query_ids"] = R"(["a","b","c"])";
  EXPECT_THROW(activation_set_from(c, "m"), ValidationError);  // row count
  c.metadata["query_ids"] = R"(["a","b"])";
  EXPECT_NO_THROW(activation_set_from(c, "m"));
  c.tensors.emplace("layer.2", testutil::tensor({2, 1}, {1, 1}));
  EXPECT_THROW(activation_set_from(c, "m"), ValidationError);  // gap
  c.metadata["query_ids"] = "not json";
  EXPECT_THROW(activation_set_from(c, "m"), ValidationError);

  Checkpoint one;
  one.tensors.emplace("embeddings", testutil::tensor({1, 3}, {1, 2, 3}));
  one.metadata["query_ids"] = R"(["only"])";
  const auto tbl = embedding_table_from(one, "ref");
  EXPECT_THROW(reference_similarity(tbl), ValidationError);
}
