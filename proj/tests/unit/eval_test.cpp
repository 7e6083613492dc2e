#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ftpg/errors.hpp"
#include "ftpg/eval.hpp"
#include "ftpg/fedcore.hpp"
#include "helpers.hpp"

namespace ftpg {
namespace {

using testing::gaussian;
using testing::unit_rows;

TEST(HarmonicMean, ReportedTriples) {
  const double clip[] = {76.72, 70.52, 75.78};
  const double coop[] = {83.67, 71.49, 71.15};
  EXPECT_NEAR(harmonic_mean(clip), 74.24, 0.01);
  EXPECT_NEAR(harmonic_mean(coop), 75.01, 0.01);
}

TEST(HarmonicMean, PropertiesOnRandomInputs) {
  SplitMix64 rng(1);
  for (int t = 0; t < 500; ++t) {
    const int k = 1 + static_cast<int>(rng.below(5));
    std::vector<double> v;
    for (int i = 0; i < k; ++i) v.push_back(1e-3 + rng.uniform());
    const double hm = harmonic_mean(v);
    const double am = std::accumulate(v.begin(), v.end(), 0.0) / k;
    EXPECT_LE(hm, am * (1 + 1e-15));
    EXPECT_GE(hm, *std::min_element(v.begin(), v.end()) * (1 - 1e-15));
    const std::vector<double> same(static_cast<std::size_t>(k), v[0]);
    EXPECT_NEAR(harmonic_mean(same), v[0], 1e-15);
  }
}

TEST(HarmonicMean, DomainErrors) {
  const double zero[] = {0.5, 0.0, 0.7};
  const double negative[] = {-0.1, 0.3};
  EXPECT_THROW(harmonic_mean(zero), DomainError);
  EXPECT_THROW(harmonic_mean(negative), DomainError);
  EXPECT_THROW(harmonic_mean(std::span<const double>{}), DomainError);
}

TEST(Predict, OracleImagesAreAllCorrect) {
  SplitMix64 rng(2);
  const SurrogateEncoder enc(1, 4, 16);
  const Matrix prompts = gaussian(rng, 4, 16), tokens = unit_rows(rng, 9, 16);
  EvalSet set{3.0 * enc.encode(prompts, tokens), {}};
  set.labels.resize(9);
  std::iota(set.labels.begin(), set.labels.end(), 0);
  EXPECT_EQ(eval_accuracy(prompts, tokens, set, enc, {}), 1.0);
}

TEST(Predict, RandomEmbeddingsStayInBinomialBand) {
  SplitMix64 rng(3);
  const SurrogateEncoder enc(2, 4, 32);
  const int n = 5, count = 2000;
  const Matrix prompts = gaussian(rng, 4, 32), tokens = unit_rows(rng, n, 32);
  EvalSet set{gaussian(rng, count, 32), {}};
  for (int i = 0; i < count; ++i) set.labels.push_back(static_cast<int>(rng.below(n)));
  const double p = 1.0 / n;
  EXPECT_NEAR(eval_accuracy(prompts, tokens, set, enc, {}), p, 3.0 * std::sqrt(p * (1 - p) / count));
}

TEST(Predict, TiesGoToLowestIndex) {
  SplitMix64 rng(4);
  const SurrogateEncoder enc(3, 2, 8);
  const Matrix tokens = unit_rows(rng, 1, 8).replicate(4, 1);
  for (int label : predict(gaussian(rng, 2, 8), tokens, gaussian(rng, 10, 8), enc, {}))
    EXPECT_EQ(label, 0);
}

TEST(Accuracy, CountsAndErrors) {
  const std::vector<int> pred{0, 1, 2, 2}, truth{0, 1, 1, 2};
  EXPECT_DOUBLE_EQ(accuracy(pred, truth), 0.75);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), DataError);
  EXPECT_THROW(accuracy(pred, std::vector<int>{0}), ShapeError);
  const SurrogateEncoder enc(0, 2, 4);
  EXPECT_THROW(eval_accuracy(Matrix::Ones(2, 4), Matrix::Identity(2, 4), EvalSet{}, enc, {}), DataError);
}

struct Scene {
  EmbeddingStore store;
  SurrogateEncoder enc{0, 4, 16};
  Partition part;
};

Scene scene(double sigma, std::uint64_t seed = 0) {
  SynthConfig c;
  c.num_datasets = 3;
  c.classes_per_dataset = 12;
  c.eval_images_per_class = 5;
  c.dim = 16;
  c.noise_sigma = sigma;
  c.seed = seed;
  c.encoder_seed = seed + 1;
  Scene s{synth_world(c), SurrogateEncoder(c.encoder_seed, c.prompt_len, c.dim), {}};
  s.part = build_shards(s.store, ShardOptions{3, 4, seed, false});
  return s;
}

TEST(EvalProtocol, NoiseFreeZeroShotIsPerfect) {
  const Scene s = scene(0.0);
  const ModelSpec spec{Method::zeroshot, GeneratorShape{4, 16, 4}, 8.0};
  const Vector p0 = flatten(FixedPromptParams{handcrafted_prompts(s.enc)});
  const ProtocolResult r = eval_protocol(spec, p0, s.store, s.part.shards, s.enc, {});
  EXPECT_EQ(r.local, 1.0);
  EXPECT_EQ(r.base, 1.0);
  EXPECT_EQ(r.novel, 1.0);
  EXPECT_EQ(r.hm, 1.0);
}

TEST(EvalProtocol, AveragesDatasetsEquallyAndHmTerms) {
  const Scene s = scene(0.6, 3);
  const ModelSpec spec{Method::fedtpg, GeneratorShape{4, 16, 4}, 8.0};
  const Vector theta = flatten(init_prompt_gen(4, 16, 4, 5));
  const ProtocolResult r3 = eval_protocol(spec, theta, s.store, s.part.shards, s.enc, {});
  double base = 0.0, novel = 0.0;
  for (const auto& ds : s.store.datasets) {
    const ProtocolResult d = eval_dataset(spec, theta, ds, s.enc, {});
    base += d.base / 3.0;
    novel += d.novel / 3.0;
  }
  EXPECT_NEAR(r3.base, base, 1e-15);
  EXPECT_NEAR(r3.novel, novel, 1e-15);
  const double three[] = {r3.local, r3.base, r3.novel};
  EXPECT_DOUBLE_EQ(r3.hm, harmonic_mean(three));
  const ProtocolResult r2 = eval_protocol(spec, theta, s.store, s.part.shards, s.enc, {}, {2});
  const double two[] = {r2.base, r2.novel};
  EXPECT_DOUBLE_EQ(r2.hm, harmonic_mean(two));
  EXPECT_THROW(eval_protocol(spec, theta, s.store, s.part.shards, s.enc, {}, {4}), ConfigError);
}

TEST(EvalProtocol, HmIsZeroWhenAnAccuracyIsZero) {
  Scene s = scene(0.3);
  const Matrix p0 = handcrafted_prompts(s.enc);
  // every new-class eval image sits on the next new class's text embedding
  for (auto& ds : s.store.datasets) {
    std::vector<int> novel;
    for (std::size_t c = 0; c < ds.classes.size(); ++c)
      if (ds.classes[c].split == Split::novel) novel.push_back(static_cast<int>(c));
    const Matrix texts = s.enc.encode(p0, token_matrix(ds, novel));
    for (std::size_t i = 0; i < novel.size(); ++i) {
      auto& imgs = ds.classes[static_cast<std::size_t>(novel[i])].eval_images;
      imgs.rowwise() = texts.row(static_cast<Eigen::Index>((i + 1) % novel.size()));
    }
  }
  const ModelSpec spec{Method::zeroshot, GeneratorShape{4, 16, 4}, 8.0};
  const ProtocolResult r = eval_protocol(spec, flatten(FixedPromptParams{p0}), s.store,
                                         s.part.shards, s.enc, {});
  EXPECT_EQ(r.novel, 0.0);
  EXPECT_GT(r.base, 0.0);
  EXPECT_EQ(r.hm, 0.0);
}

TEST(EvalProtocol, CoopLocalWithSharedPromptsMatchesZeroShot) {
  const Scene s = scene(0.4, 2);
  const Vector p0 = flatten(FixedPromptParams{handcrafted_prompts(s.enc)});
  const ModelSpec zs{Method::zeroshot, GeneratorShape{4, 16, 4}, 8.0};
  const ModelSpec local{Method::coop_local, GeneratorShape{4, 16, 4}, 8.0};
  const Vector tiled = p0.replicate(static_cast<Eigen::Index>(s.part.shards.size()), 1);
  const ProtocolResult a = eval_protocol(zs, p0, s.store, s.part.shards, s.enc, {});
  const ProtocolResult b = eval_protocol(local, tiled, s.store, s.part.shards, s.enc, {});
  EXPECT_DOUBLE_EQ(a.local, b.local);
  EXPECT_DOUBLE_EQ(a.base, b.base);
  EXPECT_DOUBLE_EQ(a.novel, b.novel);
  EXPECT_THROW(eval_protocol(local, p0, s.store, s.part.shards, s.enc, {}), ShapeError);
}

TEST(EvalProtocol, GeneratorConditionsOnCandidateSet) {
  const Scene s = scene(0.3);
  const PromptGenParams g = init_prompt_gen(4, 16, 4, 1);
  const auto& ds = s.store.datasets[0];
  std::vector<int> base;
  for (std::size_t c = 0; c < ds.classes.size(); ++c)
    if (ds.classes[c].split == Split::base) base.push_back(static_cast<int>(c));
  const Matrix full = generate_prompts(g, token_matrix(ds, base));
  const Matrix client = generate_prompts(g, s.part.shards[0].tokens);
  EXPECT_GT((full - client).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(JacobiEigen, MatchesSelfAdjointSolver) {
  SplitMix64 rng(5);
  for (int t = 0; t < 30; ++t) {
    const int n = 1 + static_cast<int>(rng.below(12));
    const Matrix a = gaussian(rng, n, n);
    const Matrix sym = a + a.transpose();
    const SymmetricEigen mine = jacobi_eigen(sym);
    Eigen::SelfAdjointEigenSolver<Matrix> oracle(sym);
    for (int i = 0; i < n; ++i) {
      EXPECT_NEAR(mine.values(i), oracle.eigenvalues()(n - 1 - i), 1e-10);
      if (i > 0) EXPECT_LE(mine.values(i), mine.values(i - 1));
    }
    EXPECT_LE((sym * mine.vectors - mine.vectors * mine.values.asDiagonal()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((mine.vectors.transpose() * mine.vectors - Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-12);
    for (int c = 0; c < n; ++c) {
      Eigen::Index at = 0;
      mine.vectors.col(c).cwiseAbs().maxCoeff(&at);
      EXPECT_GT(mine.vectors(at, c), 0.0);
    }
  }
}

TEST(Pca, ComponentsMatchGramOracle) {
  SplitMix64 rng(6);
  for (int t = 0; t < 10; ++t) {
    const Matrix pts = gaussian(rng, 25, 10) * gaussian(rng, 10, 10).asDiagonal();
    const PcaResult r = pca_project(pts, 3);
    const Matrix centered = pts.rowwise() - pts.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Matrix> gram(centered * centered.transpose());
    for (int i = 0; i < 3; ++i) {
      const Eigen::Index col = gram.eigenvalues().size() - 1 - i;
      const double lambda = gram.eigenvalues()(col);
      const Vector dir = centered.transpose() * gram.eigenvectors().col(col) / std::sqrt(lambda);
      const Vector mine = r.components.row(i).transpose();
      const double sign = mine.dot(dir) < 0 ? -1.0 : 1.0;
      EXPECT_LE((mine - sign * dir).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(Pca, CenteredAndExplainedShares) {
  SplitMix64 rng(7);
  const PcaResult r = pca_project(gaussian(rng, 40, 6), 3);
  EXPECT_LE(r.coords.colwise().mean().cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GE(r.explained(0), r.explained(1));
  EXPECT_GE(r.explained(1), r.explained(2));
  EXPECT_LE(r.explained.sum(), 1.0 + 1e-9);
  EXPECT_EQ(r.rank, 3);
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Pca, AffineThreeSpaceReconstructs) {
  SplitMix64 rng(8);
  const Matrix basis = gaussian(rng, 3, 12);
  const Vector offset = gaussian(rng, 12, 1).reshaped();
  const Matrix pts = (gaussian(rng, 30, 3) * basis).rowwise() + offset.transpose();
  const PcaResult r = pca_project(pts, 3);
  const Matrix back = (r.coords * r.components).rowwise() + r.mean.transpose();
  EXPECT_LE((back - pts).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Pca, RankDeficientPadsAndWarns) {
  SplitMix64 rng(9);
  const Matrix line = gaussian(rng, 10, 1) * gaussian(rng, 1, 5);
  const PcaResult r = pca_project(line, 3);
  EXPECT_EQ(r.rank, 1);
  EXPECT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.components.row(1), RowVector::Zero(5));
  EXPECT_EQ(r.coords.col(2), Vector::Zero(10));
  EXPECT_THROW(pca_project(Matrix::Ones(3, 5), 3), DataError);
}

TEST(PromptCloud, LabelsEveryGeneratedRow) {
  const Scene s = scene(0.3);
  const ModelSpec spec{Method::fedtpg, GeneratorShape{4, 16, 4}, 8.0};
  const PromptCloud c = collect_prompt_vectors(spec, flatten(init_prompt_gen(4, 16, 4, 0)), s.store,
                                               s.part.shards);
  EXPECT_EQ(c.points.rows(), 3 * 2 * 4);
  EXPECT_EQ(c.labels.size(), 24u);
  EXPECT_EQ(c.labels[0].dataset, s.store.datasets[0].name);
  EXPECT_EQ(c.labels[4].split, "new");
  EXPECT_EQ(c.labels[7].vec_idx, 3);
}

TEST(Csv, MetricsFormat) {
  const MetricsRecord rec{25, Method::fedtpg, 2, 0.5, 1.0, 0.123456789, 0.25, 1.0 / 3.0};
  std::ostringstream out;
  write_metrics_csv(out, std::span<const MetricsRecord>(&rec, 1));
  EXPECT_EQ(out.str(),
            "round,method,seed,train_loss,local_acc,base_acc,new_acc,hm\n"
            "25,fedtpg,2,0.500000,1.000000,0.123457,0.250000,0.333333\n");
}

TEST(Csv, PcaFormat) {
  PromptCloud cloud;
  cloud.labels = {{"fedtpg", "ds0", "base", 0}, {"fedtpg", "ds1", "new", 3}};
  PcaResult r;
  r.coords = Matrix(2, 3);
  r.coords << 1, -2, 0.5, 0, 0, 1e-7;
  std::ostringstream out;
  write_pca_csv(out, cloud, r);
  EXPECT_EQ(out.str(),
            "method,dataset,split,vec_idx,pc1,pc2,pc3\n"
            "fedtpg,ds0,base,0,1.000000,-2.000000,0.500000\n"
            "fedtpg,ds1,new,3,0.000000,0.000000,0.000000\n");
}

}  // namespace
}  // namespace ftpg
