#include "ftpg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace ftpg {

double harmonic_mean(std::span<const double> values) {
  if (values.empty()) throw DomainError("harmonic_mean: no values");
  double inv = 0.0;
  for (double v : values) {
    if (!(v > 0.0)) throw DomainError("harmonic_mean: values must be > 0, got " + std::to_string(v));
    inv += 1.0 / v;
  }
  return static_cast<double>(values.size()) / inv;
}

EvalSet eval_set(const DatasetEntry& dataset, const std::vector<int>& class_indices) {
  EvalSet set;
  Eigen::Index rows = 0, d = 0;
  for (int c : class_indices) {
    const auto& cls = dataset.classes.at(static_cast<std::size_t>(c));
    rows += cls.eval_images.rows();
    d = cls.token.size();
  }
  set.images.resize(rows, d);
  Eigen::Index at = 0;
  for (std::size_t j = 0; j < class_indices.size(); ++j) {
    const auto& imgs = dataset.classes[static_cast<std::size_t>(class_indices[j])].eval_images;
    set.images.middleRows(at, imgs.rows()) = imgs;
    at += imgs.rows();
    set.labels.insert(set.labels.end(), static_cast<std::size_t>(imgs.rows()), static_cast<int>(j));
  }
  return set;
}

std::vector<int> predict(const Matrix& prompts, const Matrix& tokens, const Matrix& images,
                         const SurrogateEncoder& enc, const PredictConfig& cfg) {
  if (tokens.rows() < 2) throw DataError("predict: need at least two candidate classes");
  if (!(cfg.temperature > 0.0)) throw ParameterError("predict: temperature must be > 0");
  const Matrix logits = cosine_rows(images, enc.encode(prompts, tokens)) / cfg.temperature;
  std::vector<int> out(static_cast<std::size_t>(images.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw DataError("accuracy: empty evaluation set");
  if (predicted.size() != labels.size()) throw ShapeError("accuracy: prediction/label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double eval_accuracy(const Matrix& prompts, const Matrix& tokens, const EvalSet& set,
                     const SurrogateEncoder& enc, const PredictConfig& cfg) {
  if (set.labels.empty()) throw DataError("eval_accuracy: empty evaluation set");
  return accuracy(predict(prompts, tokens, set.images, enc, cfg), set.labels);
}

namespace {

std::vector<int> classes_with(const DatasetEntry& ds, Split split) {
  std::vector<int> out;
  for (std::size_t c = 0; c < ds.classes.size(); ++c)
    if (ds.classes[c].split == split) out.push_back(static_cast<int>(c));
  return out;
}

double split_accuracy(const ModelSpec& spec, const Vector& params, const DatasetEntry& ds,
                      Split split, const SurrogateEncoder& enc, const PredictConfig& cfg) {
  const auto classes = classes_with(ds, split);
  if (classes.size() < 2)
    throw DataError("eval: dataset '" + ds.name + "' has fewer than two " +
                    (split == Split::base ? "base" : "new") + " classes");
  const Matrix tokens = token_matrix(ds, classes);
  return eval_accuracy(prompts_for(spec, params, tokens), tokens, eval_set(ds, classes), enc, cfg);
}

double local_accuracy(const ModelSpec& spec, const Vector& params, const EmbeddingStore& store,
                      const ClientShard& shard, const SurrogateEncoder& enc,
                      const PredictConfig& cfg) {
  EvalSet set;
  Eigen::Index rows = 0;
  for (const ClassRef& r : shard.classes)
    rows += store.datasets[static_cast<std::size_t>(r.dataset)].classes[static_cast<std::size_t>(r.index)].eval_images.rows();
  set.images.resize(rows, store.dim);
  Eigen::Index at = 0;
  for (std::size_t j = 0; j < shard.classes.size(); ++j) {
    const ClassRef r = shard.classes[j];
    const auto& imgs = store.datasets[static_cast<std::size_t>(r.dataset)].classes[static_cast<std::size_t>(r.index)].eval_images;
    set.images.middleRows(at, imgs.rows()) = imgs;
    at += imgs.rows();
    set.labels.insert(set.labels.end(), static_cast<std::size_t>(imgs.rows()), static_cast<int>(j));
  }
  return eval_accuracy(prompts_for(spec, params, shard.tokens), shard.tokens, set, enc, cfg);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double summary_hm(const ProtocolResult& r, int terms) {
  std::vector<double> parts;
  if (terms == 3) parts.push_back(r.local);
  parts.push_back(r.base);
  parts.push_back(r.novel);
  for (double p : parts)
    if (!(p > 0.0)) return 0.0;
  return harmonic_mean(parts);
}

bool shard_touches(const ClientShard& shard, int dataset) {
  return std::any_of(shard.classes.begin(), shard.classes.end(),
                     [&](const ClassRef& r) { return r.dataset == dataset; });
}

}  // namespace

ProtocolResult eval_dataset(const ModelSpec& spec, const Vector& params, const DatasetEntry& ds,
                            const SurrogateEncoder& enc, const PredictConfig& cfg) {
  ProtocolResult r;
  r.base = split_accuracy(spec, params, ds, Split::base, enc, cfg);
  r.novel = split_accuracy(spec, params, ds, Split::novel, enc, cfg);
  r.hm = summary_hm(r, 2);
  return r;
}

ProtocolResult eval_protocol(const ModelSpec& spec, const Vector& params,
                             const EmbeddingStore& store, const std::vector<ClientShard>& shards,
                             const SurrogateEncoder& enc, const PredictConfig& cfg,
                             const ProtocolOptions& opts) {
  if (opts.hm_terms != 2 && opts.hm_terms != 3)
    throw ConfigError("eval: hm terms must be 2 or 3");
  if (shards.empty()) throw DataError("eval: no client shards");
  ProtocolResult r;
  std::vector<double> local, base, novel;

  if (spec.method == Method::coop_local) {
    const Eigen::Index block = static_cast<Eigen::Index>(spec.shape.prompt_len) * spec.shape.dim;
    if (params.size() != block * static_cast<Eigen::Index>(shards.size()))
      throw ShapeError("eval: coop_local snapshot does not hold one prompt block per client");
    ModelSpec single = spec;
    single.method = Method::fedcoop;
    auto client_params = [&](std::size_t i) -> Vector {
      return params.segment(static_cast<Eigen::Index>(i) * block, block);
    };
    for (std::size_t i = 0; i < shards.size(); ++i)
      local.push_back(local_accuracy(single, client_params(i), store, shards[i], enc, cfg));
    for (std::size_t k = 0; k < store.datasets.size(); ++k) {
      std::vector<std::size_t> owners;
      for (std::size_t i = 0; i < shards.size(); ++i)
        if (shard_touches(shards[i], static_cast<int>(k))) owners.push_back(i);
      if (owners.empty())
        for (std::size_t i = 0; i < shards.size(); ++i) owners.push_back(i);
      std::vector<double> b, n;
      for (std::size_t i : owners) {
        b.push_back(split_accuracy(single, client_params(i), store.datasets[k], Split::base, enc, cfg));
        n.push_back(split_accuracy(single, client_params(i), store.datasets[k], Split::novel, enc, cfg));
      }
      base.push_back(mean(b));
      novel.push_back(mean(n));
    }
  } else {
    for (const auto& shard : shards) local.push_back(local_accuracy(spec, params, store, shard, enc, cfg));
    for (const auto& ds : store.datasets) {
      base.push_back(split_accuracy(spec, params, ds, Split::base, enc, cfg));
      novel.push_back(split_accuracy(spec, params, ds, Split::novel, enc, cfg));
    }
  }
  r.local = mean(local);
  r.base = mean(base);
  r.novel = mean(novel);
  r.hm = summary_hm(r, opts.hm_terms);
  return r;
}

SymmetricEigen jacobi_eigen(const Matrix& symmetric, int max_sweeps) {
  const Eigen::Index n = symmetric.rows();
  if (symmetric.cols() != n) throw ShapeError("jacobi_eigen: matrix is not square");
  Matrix a = symmetric;
  Matrix v = Matrix::Identity(n, n);
  const double scale = a.squaredNorm();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * scale || off == 0.0) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = order[static_cast<std::size_t>(i)];
    out.values(i) = a(src, src);
    Vector col = v.col(src);
    Eigen::Index peak = 0;
    col.cwiseAbs().maxCoeff(&peak);
    if (col(peak) < 0.0) col = -col;
    out.vectors.col(i) = col;
  }
  return out;
}

PcaResult pca_project(const Matrix& points, int k) {
  if (k < 1) throw ParameterError("pca_project: k must be >= 1");
  if (points.rows() < k + 1)
    throw DataError("pca_project: need at least " + std::to_string(k + 1) + " points");
  PcaResult r;
  r.mean = points.colwise().mean().transpose();
  const Matrix centered = points.rowwise() - r.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(points.rows() - 1);
  const SymmetricEigen eig = jacobi_eigen(cov);

  const double total = std::max(eig.values.sum(), 0.0);
  const double tol = 1e-12 * std::max(eig.values.cwiseAbs().maxCoeff(), 1e-300);
  const Eigen::Index avail = std::min<Eigen::Index>(k, eig.values.size());
  r.components = Matrix::Zero(k, points.cols());
  r.explained = Vector::Zero(k);
  for (Eigen::Index i = 0; i < avail; ++i) {
    if (!(eig.values(i) > tol)) break;
    r.components.row(i) = eig.vectors.col(i).transpose();
    r.explained(i) = total > 0.0 ? eig.values(i) / total : 0.0;
    ++r.rank;
  }
  if (r.rank < k)
    r.warnings.push_back("pca_project: data rank " + std::to_string(r.rank) + " < k=" +
                         std::to_string(k) + ", padding with zero components");
  r.coords = centered * r.components.transpose();
  return r;
}

PromptCloud collect_prompt_vectors(const ModelSpec& spec, const Vector& params,
                                   const EmbeddingStore& store,
                                   const std::vector<ClientShard>& shards) {
  PromptCloud cloud;
  std::vector<Matrix> blocks;
  const std::string method(method_name(spec.method));
  auto append = [&](const Matrix& p, const std::string& ds, const std::string& split) {
    blocks.push_back(p);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      cloud.labels.push_back(PcaLabel{method, ds, split, static_cast<int>(i)});
  };
  if (spec.method == Method::coop_local) {
    const Eigen::Index block = static_cast<Eigen::Index>(spec.shape.prompt_len) * spec.shape.dim;
    if (params.size() != block * static_cast<Eigen::Index>(shards.size()))
      throw ShapeError("export: coop_local snapshot does not hold one prompt block per client");
    for (std::size_t i = 0; i < shards.size(); ++i)
      append(unflatten_fixed(params.segment(static_cast<Eigen::Index>(i) * block, block),
                             spec.shape.prompt_len, spec.shape.dim).prompts,
             shards[i].dataset_name, "base");
  } else {
    for (const auto& ds : store.datasets) {
      for (Split split : {Split::base, Split::novel}) {
        const auto classes = classes_with(ds, split);
        if (classes.empty()) continue;
        append(prompts_for(spec, params, token_matrix(ds, classes)), ds.name,
               split == Split::base ? "base" : "new");
      }
    }
  }
  Eigen::Index rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  cloud.points.resize(rows, store.dim);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    cloud.points.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return cloud;
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << "round,method,seed,train_loss,local_acc,base_acc,new_acc,hm\n";
  for (const auto& r : records) {
    out << r.round << ',' << method_name(r.method) << ',' << r.seed << ',' << fixed6(r.train_loss)
        << ',' << fixed6(r.local_acc) << ',' << fixed6(r.base_acc) << ',' << fixed6(r.new_acc)
        << ',' << fixed6(r.hm) << '\n';
  }
}

void write_pca_csv(std::ostream& out, const PromptCloud& cloud, const PcaResult& pca) {
  out << "method,dataset,split,vec_idx,pc1,pc2,pc3\n";
  for (std::size_t i = 0; i < cloud.labels.size(); ++i) {
    const auto& l = cloud.labels[i];
    out << l.method << ',' << l.dataset << ',' << l.split << ',' << l.vec_idx;
    for (Eigen::Index c = 0; c < 3; ++c)
      out << ',' << fixed6(c < pca.coords.cols() ? pca.coords(static_cast<Eigen::Index>(i), c) : 0.0);
    out << '\n';
  }
}

}  // namespace ftpg
