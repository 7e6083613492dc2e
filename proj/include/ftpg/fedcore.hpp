#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ftpg/encoders.hpp"
#include "ftpg/eval.hpp"
#include "ftpg/models.hpp"
#include "ftpg/partition.hpp"
#include "ftpg/random.hpp"

namespace ftpg {

struct FederationConfig {
  int rounds = 500;
  int local_steps = 1;
  double participation = 1.0;
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int batch_size = 200;
  std::uint64_t seed = 0;
  int eval_every = 25;  // 0 disables intermediate evaluation; the final round is always evaluated
  int threads = 1;
};

void validate(const FederationConfig& cfg, std::size_t num_clients);

/// lr0 * (1 + cos(pi r / R)) / 2 for 0 <= r < R.
double cosine_lr(int round, int rounds, double lr0);

/// Uniform subset of size max(1, round(rate * N)) without replacement, in
/// ascending id order. rate == 1 returns every client in the given order.
std::vector<int> sample_clients(SplitMix64& rng, std::span<const int> client_ids, double rate);

/// The minibatch indices a client uses at a given round and local step.
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, int client_id, int round);
  std::vector<int> next(int shard_size, int batch_size);

 private:
  SplitMix64 rng_;
};

Batch gather_batch(const ClientShard& shard, std::span<const int> indices);

struct LocalResult {
  Vector params;
  double mean_loss = 0.0;  // mean over the K local steps, before each update
};

/// K SGD-with-momentum steps from `global` on one client's shard. The
/// velocity starts at zero every call.
LocalResult local_train(const ModelSpec& spec, const Vector& global, const ClientShard& shard,
                        double lr, int round, const FederationConfig& cfg,
                        const SurrogateEncoder& enc, const PredictConfig& predict,
                        const Matrix* handcrafted = nullptr);

struct ClientUpdate {
  int client_id = 0;
  Vector params;
};

/// Coordinate-wise uniform mean, reduced in ascending client id order. The sum is
/// carried in double-double, so identical updates average back to themselves exactly
/// and the mean of two is correctly rounded.
Vector aggregate(std::vector<ClientUpdate> updates);

/// Mean over clients of the loss on each full shard (each client's own block for coop_local).
double mean_shard_loss(const ModelSpec& spec, const Vector& params,
                       const std::vector<ClientShard>& shards, const SurrogateEncoder& enc,
                       const PredictConfig& predict, const Matrix* handcrafted = nullptr);

struct FederationResult {
  ModelSnapshot final_model;
  std::vector<MetricsRecord> records;
};

/// Initial parameters for a method: a seeded generator for fedtpg, the
/// handcrafted prompts (one block per client for coop_local) otherwise.
Vector initial_params(const ModelSpec& spec, const SurrogateEncoder& enc, std::size_t num_clients,
                      std::uint64_t seed);

FederationResult run_federation(const FederationConfig& cfg, const ModelSpec& spec,
                                const EmbeddingStore& store,
                                const std::vector<ClientShard>& shards,
                                const SurrogateEncoder& enc, const PredictConfig& predict,
                                const ProtocolOptions& eval_opts = {});

}  // namespace ftpg
