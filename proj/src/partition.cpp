#include "ftpg/partition.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "ftpg/random.hpp"

namespace ftpg {

std::vector<ClassRef> class_refs(const EmbeddingStore& store) {
  std::vector<ClassRef> refs;
  for (std::size_t k = 0; k < store.datasets.size(); ++k)
    for (std::size_t c = 0; c < store.datasets[k].classes.size(); ++c)
      refs.push_back({static_cast<int>(k), static_cast<int>(c)});
  return refs;
}

EmbeddingStore split_base_new(EmbeddingStore store) {
  for (auto& ds : store.datasets) {
    const std::size_t count = ds.classes.size();
    if (count < 2)
      throw ConfigError("split_base_new: dataset '" + ds.name + "' has fewer than 2 classes");
    const std::size_t base = (count + 1) / 2;
    for (std::size_t c = 0; c < count; ++c)
      ds.classes[c].split = c < base ? Split::base : Split::novel;
  }
  return store;
}

namespace {

ClientShard make_shard(const EmbeddingStore& store, const std::vector<ClassRef>& classes,
                       const std::vector<int>& ids, int client_id, const ShardOptions& opts) {
  ClientShard shard;
  shard.client_id = client_id;
  shard.class_ids = ids;
  shard.classes = classes;
  shard.shots = opts.shots;
  const Eigen::Index n = static_cast<Eigen::Index>(classes.size());
  const Eigen::Index d = store.dim;
  shard.tokens.resize(n, d);
  shard.train_images.resize(n * opts.shots, d);
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < n; ++j) {
    const ClassRef ref = classes[static_cast<std::size_t>(j)];
    const auto& ds = store.datasets[static_cast<std::size_t>(ref.dataset)];
    const auto& cls = ds.classes[static_cast<std::size_t>(ref.index)];
    if (std::find(names.begin(), names.end(), ds.name) == names.end()) names.push_back(ds.name);
    shard.tokens.row(j) = cls.token.transpose();
    const Eigen::Index pool = cls.train_images.rows();
    if (opts.shots > pool)
      throw DataError("build_shards: class '" + cls.name + "' has " + std::to_string(pool) +
                      " train images, " + std::to_string(opts.shots) + " shots requested");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(pool));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    auto rng = make_stream(opts.seed, Stream::shard_shots,
                           {static_cast<std::uint64_t>(ids[static_cast<std::size_t>(j)])});
    rng.shuffle(std::span<Eigen::Index>(order));
    for (int s = 0; s < opts.shots; ++s) {
      shard.train_images.row(j * opts.shots + s) = cls.train_images.row(order[static_cast<std::size_t>(s)]);
      shard.train_labels.push_back(static_cast<int>(j));
    }
  }
  for (const auto& nm : names) shard.dataset_name += (shard.dataset_name.empty() ? "" : "+") + nm;
  return shard;
}

}  // namespace

Partition build_shards(const EmbeddingStore& store, const ShardOptions& opts) {
  if (opts.classes_per_client < 1) throw ConfigError("build_shards: classes per client must be >= 1");
  if (opts.shots < 1) throw ConfigError("build_shards: shots must be >= 1");

  // Global id offsets per dataset.
  std::vector<int> offset(store.datasets.size() + 1, 0);
  for (std::size_t k = 0; k < store.datasets.size(); ++k)
    offset[k + 1] = offset[k] + static_cast<int>(store.datasets[k].classes.size());

  std::size_t total_base = 0;
  for (const auto& ds : store.datasets)
    for (const auto& c : ds.classes) total_base += c.split == Split::base;
  if (total_base < static_cast<std::size_t>(opts.classes_per_client))
    throw ConfigError("build_shards: " + std::to_string(total_base) + " base classes, fewer than n=" +
                      std::to_string(opts.classes_per_client));

  const auto n = static_cast<std::size_t>(opts.classes_per_client);
  Partition part;
  std::vector<ClassRef> leftover;
  auto emit = [&](const std::vector<ClassRef>& classes) {
    std::vector<int> ids;
    for (const ClassRef& r : classes) ids.push_back(offset[static_cast<std::size_t>(r.dataset)] + r.index);
    const int id = static_cast<int>(part.shards.size());
    part.shards.push_back(make_shard(store, classes, ids, id, opts));
  };

  for (std::size_t k = 0; k < store.datasets.size(); ++k) {
    std::vector<ClassRef> base;
    const auto& ds = store.datasets[k];
    for (std::size_t c = 0; c < ds.classes.size(); ++c)
      if (ds.classes[c].split == Split::base) base.push_back({static_cast<int>(k), static_cast<int>(c)});
    auto rng = make_stream(opts.seed, Stream::shard_classes, {k});
    rng.shuffle(std::span<ClassRef>(base));
    const std::size_t full = base.size() / n;
    for (std::size_t s = 0; s < full; ++s)
      emit(std::vector<ClassRef>(base.begin() + static_cast<std::ptrdiff_t>(s * n),
                                 base.begin() + static_cast<std::ptrdiff_t>((s + 1) * n)));
    leftover.insert(leftover.end(), base.begin() + static_cast<std::ptrdiff_t>(full * n), base.end());
  }

  if (opts.allow_mixed_shards) {
    const std::size_t extra = leftover.size() / n;
    for (std::size_t s = 0; s < extra; ++s)
      emit(std::vector<ClassRef>(leftover.begin() + static_cast<std::ptrdiff_t>(s * n),
                                 leftover.begin() + static_cast<std::ptrdiff_t>((s + 1) * n)));
    leftover.erase(leftover.begin(), leftover.begin() + static_cast<std::ptrdiff_t>(extra * n));
  }
  for (const ClassRef& r : leftover)
    part.unassigned.push_back(offset[static_cast<std::size_t>(r.dataset)] + r.index);
  std::sort(part.unassigned.begin(), part.unassigned.end());
  if (part.shards.empty())
    throw ConfigError("build_shards: no dataset has n=" + std::to_string(n) +
                      " base classes (enable allow_mixed_shards to span datasets)");
  return part;
}

}  // namespace ftpg
