#include "ftpg/fedcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <numeric>
#include <thread>

namespace ftpg {

void validate(const FederationConfig& cfg, std::size_t num_clients) {
  if (cfg.rounds < 1) throw ConfigError("fed: rounds must be >= 1");
  if (cfg.local_steps < 1) throw ConfigError("fed: local_steps must be >= 1");
  if (!(cfg.participation > 0.0 && cfg.participation <= 1.0))
    throw ConfigError("fed: participation must be in (0, 1]");
  if (num_clients == 0) throw ConfigError("fed: no clients");
  if (cfg.participation * static_cast<double>(num_clients) < 1.0)
    throw ConfigError("fed: participation * clients must be >= 1");
  if (!(cfg.lr >= 0.0)) throw ConfigError("fed: lr must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("fed: batch_size must be >= 1");
  if (cfg.eval_every < 0) throw ConfigError("fed: eval_every must be >= 0");
  if (cfg.threads < 1) throw ConfigError("fed: threads must be >= 1");
}

double cosine_lr(int round, int rounds, double lr0) {
  if (rounds < 1 || round < 0 || round >= rounds)
    throw RangeError("cosine_lr: round " + std::to_string(round) + " outside [0, " +
                     std::to_string(rounds) + ")");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * round / rounds));
}

std::vector<int> sample_clients(SplitMix64& rng, std::span<const int> client_ids, double rate) {
  if (client_ids.empty()) throw ConfigError("sample_clients: empty client list");
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sample_clients: rate must be in (0, 1]");
  if (rate == 1.0) return {client_ids.begin(), client_ids.end()};
  const std::size_t n = client_ids.size();
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))), 1, n);
  std::vector<int> pool(client_ids.begin(), client_ids.end());
  for (std::size_t i = 0; i < want; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(want);
  std::sort(pool.begin(), pool.end());
  return pool;
}

BatchSampler::BatchSampler(std::uint64_t seed, int client_id, int round)
    : rng_(make_stream(seed, Stream::client_batch,
                       {static_cast<std::uint64_t>(client_id), static_cast<std::uint64_t>(round)})) {}

std::vector<int> BatchSampler::next(int shard_size, int batch_size) {
  std::vector<int> idx(static_cast<std::size_t>(shard_size));
  std::iota(idx.begin(), idx.end(), 0);
  if (shard_size <= batch_size) return idx;
  for (int i = 0; i < batch_size; ++i) {
    const auto j = i + static_cast<int>(rng_.below(static_cast<std::uint64_t>(shard_size - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(batch_size));
  return idx;
}

Batch gather_batch(const ClientShard& shard, std::span<const int> indices) {
  Batch b;
  b.images.resize(static_cast<Eigen::Index>(indices.size()), shard.train_images.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    b.images.row(static_cast<Eigen::Index>(i)) = shard.train_images.row(indices[i]);
    b.labels.push_back(shard.train_labels[static_cast<std::size_t>(indices[i])]);
  }
  return b;
}

LocalResult local_train(const ModelSpec& spec, const Vector& global, const ClientShard& shard,
                        double lr, int round, const FederationConfig& cfg,
                        const SurrogateEncoder& enc, const PredictConfig& predict,
                        const Matrix* handcrafted) {
  if (shard.train_labels.empty()) throw DataError("local_train: client has no labeled examples");
  const SgdHyper hyper{lr, cfg.momentum, cfg.weight_decay};
  BatchSampler sampler(cfg.seed, shard.client_id, round);
  LocalResult out;
  out.params = global;
  Vector velocity = Vector::Zero(global.size());
  double loss_sum = 0.0;
  for (int k = 0; k < cfg.local_steps; ++k) {
    const auto idx = sampler.next(static_cast<int>(shard.train_labels.size()), cfg.batch_size);
    const Batch batch = gather_batch(shard, idx);
    const LossGrad lg = loss_and_grad(spec, out.params, batch, shard.tokens, enc, predict, handcrafted);
    loss_sum += lg.loss;
    out.params = sgd_momentum_step(out.params, lg.grads, velocity, hyper);
  }
  out.mean_loss = loss_sum / cfg.local_steps;
  return out;
}

Vector aggregate(std::vector<ClientUpdate> updates) {
  if (updates.empty()) throw ShapeError("aggregate: no updates");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  const Eigen::Index len = updates.front().params.size();
  for (const auto& u : updates)
    if (u.params.size() != len)
      throw ShapeError("aggregate: update of client " + std::to_string(u.client_id) + " has length " +
                       std::to_string(u.params.size()) + ", expected " + std::to_string(len));
  if (updates.size() == 1) return updates.front().params;

  // Double-double running sum, then a residual-corrected division.
  Eigen::ArrayXd hi = updates.front().params.array();
  Eigen::ArrayXd lo = Eigen::ArrayXd::Zero(len);
  for (std::size_t i = 1; i < updates.size(); ++i) {
    const Eigen::ArrayXd x = updates[i].params.array();
    const Eigen::ArrayXd s = hi + x;
    const Eigen::ArrayXd b = s - hi;
    lo += (hi - (s - b)) + (x - b);
    hi = s;
  }
  const double k = static_cast<double>(updates.size());
  Vector mean(len);
  for (Eigen::Index j = 0; j < len; ++j) {
    const double q = hi[j] / k;
    const double r = std::fma(-q, k, hi[j]) + lo[j];
    mean[j] = r == 0.0 ? q : q + r / k;
  }
  return mean;
}

Vector initial_params(const ModelSpec& spec, const SurrogateEncoder& enc, std::size_t num_clients,
                      std::uint64_t seed) {
  if (spec.method == Method::fedtpg)
    return flatten(init_prompt_gen(spec.shape.prompt_len, spec.shape.dim, spec.shape.heads, seed));
  if (enc.prompt_len() != static_cast<std::uint32_t>(spec.shape.prompt_len) ||
      enc.dim() != static_cast<std::uint32_t>(spec.shape.dim))
    throw ConfigError("model shape does not match the encoder");
  const Vector p0 = flatten(FixedPromptParams{handcrafted_prompts(enc)});
  if (spec.method != Method::coop_local) return p0;
  return p0.replicate(static_cast<Eigen::Index>(num_clients), 1);
}

namespace {

template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < count; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

double mean_shard_loss(const ModelSpec& spec, const Vector& params,
                       const std::vector<ClientShard>& shards, const SurrogateEncoder& enc,
                       const PredictConfig& predict, const Matrix* handcrafted) {
  if (shards.empty()) throw DataError("mean_shard_loss: no shards");
  const Eigen::Index block = static_cast<Eigen::Index>(spec.shape.prompt_len) * spec.shape.dim;
  ModelSpec single = spec;
  if (spec.method == Method::coop_local) single.method = Method::fedcoop;
  double total = 0.0;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const auto& s = shards[i];
    Batch b{s.train_images, s.train_labels};
    const Vector own = spec.method == Method::coop_local
                           ? Vector(params.segment(static_cast<Eigen::Index>(i) * block, block))
                           : params;
    total += loss_value(single, own, b, s.tokens, enc, predict,
                        spec.method == Method::fedkgcoop ? handcrafted : nullptr);
  }
  return total / static_cast<double>(shards.size());
}

FederationResult run_federation(const FederationConfig& cfg, const ModelSpec& spec,
                                const EmbeddingStore& store,
                                const std::vector<ClientShard>& shards,
                                const SurrogateEncoder& enc, const PredictConfig& predict,
                                const ProtocolOptions& eval_opts) {
  validate(cfg, shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i)
    if (shards[i].client_id != static_cast<int>(i))
      throw DataError("run_federation: shard client ids must be 0..N-1 in order");

  const Matrix handcrafted = handcrafted_prompts(enc);
  FederationResult result;
  result.final_model.method = spec.method;
  Vector global = initial_params(spec, enc, shards.size(), cfg.seed);

  auto record = [&](int round, double loss) {
    const auto r = eval_protocol(spec, global, store, shards, enc, predict, eval_opts);
    result.records.push_back(
        MetricsRecord{round, spec.method, cfg.seed, loss, r.local, r.base, r.novel, r.hm});
  };

  if (spec.method == Method::zeroshot) {
    record(0, mean_shard_loss(spec, global, shards, enc, predict, &handcrafted));
    result.final_model.values = global;
    return result;
  }

  std::vector<int> ids(shards.size());
  std::iota(ids.begin(), ids.end(), 0);
  const Eigen::Index block = static_cast<Eigen::Index>(spec.shape.prompt_len) * spec.shape.dim;
  const Matrix* anchor = spec.method == Method::fedkgcoop ? &handcrafted : nullptr;

  for (int r = 0; r < cfg.rounds; ++r) {
    const double lr = cosine_lr(r, cfg.rounds, cfg.lr);
    auto sampling = make_stream(cfg.seed, Stream::client_sampling, {static_cast<std::uint64_t>(r)});
    const std::vector<int> chosen = sample_clients(sampling, ids, cfg.participation);

    std::vector<LocalResult> locals(chosen.size());
    parallel_for(chosen.size(), cfg.threads, [&](std::size_t i) {
      const auto& shard = shards[static_cast<std::size_t>(chosen[i])];
      if (spec.method == Method::coop_local) {
        const Vector mine = global.segment(static_cast<Eigen::Index>(chosen[i]) * block, block);
        ModelSpec single = spec;
        single.method = Method::fedcoop;
        locals[i] = local_train(single, mine, shard, lr, r, cfg, enc, predict, nullptr);
      } else {
        locals[i] = local_train(spec, global, shard, lr, r, cfg, enc, predict, anchor);
      }
    });

    double loss = 0.0;
    for (const auto& l : locals) loss += l.mean_loss;
    loss /= static_cast<double>(locals.size());

    if (spec.method == Method::coop_local) {
      for (std::size_t i = 0; i < chosen.size(); ++i)
        global.segment(static_cast<Eigen::Index>(chosen[i]) * block, block) = locals[i].params;
    } else {
      std::vector<ClientUpdate> updates;
      updates.reserve(chosen.size());
      for (std::size_t i = 0; i < chosen.size(); ++i)
        updates.push_back(ClientUpdate{chosen[i], std::move(locals[i].params)});
      global = aggregate(std::move(updates));
    }

    const int done = r + 1;
    if (done == cfg.rounds || (cfg.eval_every > 0 && done % cfg.eval_every == 0)) record(done, loss);
  }
  result.final_model.values = global;
  return result;
}

}  // namespace ftpg
