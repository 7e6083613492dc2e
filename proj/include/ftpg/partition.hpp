#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ftpg/encoders.hpp"

namespace ftpg {

/// Global class id: position of a class when all datasets are laid end to end.
struct ClassRef {
  int dataset = 0;
  int index = 0;  // within the dataset
};

std::vector<ClassRef> class_refs(const EmbeddingStore& store);

/// One client's private training data. Local label j refers to class_ids[j].
struct ClientShard {
  int client_id = 0;
  std::string dataset_name;
  std::vector<int> class_ids;       // global ids
  std::vector<ClassRef> classes;    // same order as class_ids
  Matrix tokens;                    // n x d
  Matrix train_images;              // (n * shots) x d
  std::vector<int> train_labels;    // local labels
  int shots = 0;
};

/// Flags the first ceil(C/2) classes of each dataset as base, the rest novel.
EmbeddingStore split_base_new(EmbeddingStore store);

struct ShardOptions {
  int classes_per_client = 20;
  int shots = 8;
  std::uint64_t seed = 0;
  bool allow_mixed_shards = false;
};

struct Partition {
  std::vector<ClientShard> shards;
  std::vector<int> unassigned;  // global ids of base classes no client owns
};

/// Disjoint few-shot client shards over the base classes.
Partition build_shards(const EmbeddingStore& store, const ShardOptions& opts);

}  // namespace ftpg
