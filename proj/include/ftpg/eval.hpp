#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ftpg/encoders.hpp"
#include "ftpg/models.hpp"
#include "ftpg/partition.hpp"

namespace ftpg {

/// One evaluation row. Accuracies are fractions in [0, 1].
struct MetricsRecord {
  int round = 0;
  Method method = Method::fedtpg;
  std::uint64_t seed = 0;
  double train_loss = 0.0;
  double local_acc = 0.0;
  double base_acc = 0.0;
  double new_acc = 0.0;
  double hm = 0.0;
};

/// k / sum(1 / v_i); every value must be > 0.
double harmonic_mean(std::span<const double> values);

/// Eval images of the chosen classes with labels indexing that class list.
struct EvalSet {
  Matrix images;
  std::vector<int> labels;
};

EvalSet eval_set(const DatasetEntry& dataset, const std::vector<int>& class_indices);

/// Argmax of the class logits per image; ties resolve to the lowest index.
std::vector<int> predict(const Matrix& prompts, const Matrix& tokens, const Matrix& images,
                         const SurrogateEncoder& enc, const PredictConfig& cfg);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

double eval_accuracy(const Matrix& prompts, const Matrix& tokens, const EvalSet& set,
                     const SurrogateEncoder& enc, const PredictConfig& cfg);

struct ProtocolResult {
  double local = 0.0;
  double base = 0.0;
  double novel = 0.0;
  double hm = 0.0;
};

struct ProtocolOptions {
  int hm_terms = 3;  // 3: local/base/new, 2: base/new
};

/// Local accuracy averaged over clients; base and new averaged over datasets.
/// For coop_local, `params` holds one prompt block per shard, in shard order.
ProtocolResult eval_protocol(const ModelSpec& spec, const Vector& params,
                             const EmbeddingStore& store, const std::vector<ClientShard>& shards,
                             const SurrogateEncoder& enc, const PredictConfig& cfg,
                             const ProtocolOptions& opts = {});

/// Base and new accuracies of one dataset (the unseen-dataset protocol).
ProtocolResult eval_dataset(const ModelSpec& spec, const Vector& params, const DatasetEntry& ds,
                            const SurrogateEncoder& enc, const PredictConfig& cfg);

/// Symmetric eigendecomposition by cyclic Jacobi rotations; eigenvalues descending,
/// eigenvectors in columns with their largest-magnitude entry positive.
struct SymmetricEigen {
  Vector values;
  Matrix vectors;
};

SymmetricEigen jacobi_eigen(const Matrix& symmetric, int max_sweeps = 100);

struct PcaResult {
  Matrix coords;      // N x k
  Matrix components;  // k x d, zero rows past the available rank
  Vector mean;        // d
  Vector explained;   // k variance shares
  int rank = 0;
  std::vector<std::string> warnings;
};

PcaResult pca_project(const Matrix& points, int k = 3);

struct PcaLabel {
  std::string method;
  std::string dataset;
  std::string split;
  int vec_idx = 0;
};

struct PromptCloud {
  Matrix points;
  std::vector<PcaLabel> labels;
};

/// Every prompt row a model produces for each dataset's base and new token sets.
PromptCloud collect_prompt_vectors(const ModelSpec& spec, const Vector& params,
                                   const EmbeddingStore& store,
                                   const std::vector<ClientShard>& shards);

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records);
void write_pca_csv(std::ostream& out, const PromptCloud& cloud, const PcaResult& pca);

}  // namespace ftpg
