#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ftpg/config.hpp"

namespace ftpg {

/// Store, encoder and client shards an experiment runs on.
struct World {
  EmbeddingStore store;
  SurrogateEncoder enc;
  Partition partition;
};

/// Loads `cfg.store` (relative to out_dir) or synthesizes a world, then shards it.
World build_world(const ExperimentConfig& cfg, const std::filesystem::path& out_dir = {});

/// Worker count after FTPG_THREADS; cfg.fed.threads == 0 means one per core.
int effective_threads(int configured);

FederationResult train(const ExperimentConfig& cfg, const World& world);

/// Scores a trained model; train_loss is the mean full-shard loss.
MetricsRecord evaluate(const ExperimentConfig& cfg, const World& world, const ModelSnapshot& snap,
                       int round);

PromptCloud prompt_cloud(const ExperimentConfig& cfg, const World& world,
                         const ModelSnapshot& snap);

void write_manifest(const std::filesystem::path& path, const ExperimentConfig& cfg);

/// Command-line entry: gen-data, train, eval, export-pca, sweep.
/// Returns 0 on success, 1 on configuration errors, 2 on I/O errors.
int run_experiment(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ftpg
