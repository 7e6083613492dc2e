#include "ftpg/models.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "ftpg/random.hpp"

namespace ftpg {

namespace {

constexpr std::array<char, 8> kSnapshotMagic = {'F', 'T', 'P', 'G', 'S', 'N', 'P', '1'};
constexpr std::uint32_t kSnapshotVersion = 1;

Matrix gaussian_matrix(SplitMix64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.gaussian() * stddev;
  return m;
}

template <typename Fn>
void for_each_param(PromptGenParams& p, Fn&& fn) {
  fn(p.query);
  fn(p.w_key);
  fn(p.w_value);
  fn(p.w_out);
  fn(p.ln_gamma);
  fn(p.ln_beta);
  fn(p.w1);
  fn(p.b1);
  fn(p.w2);
  fn(p.b2);
}

template <typename Fn>
void for_each_param(const PromptGenParams& p, Fn&& fn) {
  for_each_param(const_cast<PromptGenParams&>(p), [&](Matrix& m) { fn(static_cast<const Matrix&>(m)); });
}

std::array<Var, 10> as_array(const PromptGenVars& v) {
  return {v.query, v.w_key, v.w_value, v.w_out, v.ln_gamma, v.ln_beta, v.w1, v.b1, v.w2, v.b2};
}

void check_shape(const GeneratorShape& s) {
  if (s.prompt_len < 1 || s.dim < 1 || s.heads < 1)
    throw ConfigError("prompt generator: m, d and heads must be >= 1");
  if (s.dim % s.heads != 0)
    throw ConfigError("prompt generator: d=" + std::to_string(s.dim) +
                      " is not divisible by heads=" + std::to_string(s.heads));
}

// Records the forward pass for one batch and returns (loss, parameter vars).
struct Recorded {
  Var loss;
  std::vector<Var> params;
};

Recorded record_loss(GradTape& tape, const ModelSpec& spec, const Vector& params,
                     const Batch& batch, const Matrix& tokens, const SurrogateEncoder& enc,
                     const PredictConfig& cfg, const Matrix* handcrafted) {
  if (batch.images.rows() == 0 || batch.labels.empty()) throw DataError("loss: empty batch");
  if (!(cfg.temperature > 0.0)) throw ParameterError("loss: temperature must be > 0");
  const int n = static_cast<int>(tokens.rows());
  for (int y : batch.labels)
    if (y < 0 || y >= n)
      throw DataError("loss: label " + std::to_string(y) + " outside the " + std::to_string(n) +
                      " local classes");

  Recorded rec;
  Var prompts;
  if (uses_fixed_prompts(spec.method)) {
    const auto fixed = unflatten_fixed(params, spec.shape.prompt_len, spec.shape.dim);
    prompts = tape.parameter(fixed.prompts);
    rec.params.push_back(prompts);
  } else {
    const auto gen = unflatten_prompt_gen(params, spec.shape);
    const auto vars = record_parameters(tape, gen);
    const auto arr = as_array(vars);
    rec.params.assign(arr.begin(), arr.end());
    prompts = generate_prompts(tape, vars, spec.shape.heads, tape.constant(tokens));
  }
  const Var texts = enc.encode(tape, prompts, tokens);
  const Var cos = tape.cosine_rows(tape.constant(batch.images), texts);
  Var loss = tape.cross_entropy(tape.scale(cos, 1.0 / cfg.temperature), batch.labels);
  if (spec.method == Method::fedkgcoop) {
    if (handcrafted == nullptr) throw ConfigError("fedkgcoop: handcrafted prompts required");
    const Var anchor = tape.constant(enc.encode(*handcrafted, tokens));
    const Var penalty =
        tape.scale(tape.sum_squares(tape.sub(texts, anchor)), 1.0 / static_cast<double>(n));
    loss = tape.add(loss, tape.scale(penalty, spec.kg_lambda));
  }
  rec.loss = loss;
  return rec;
}

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::zeroshot: return "zeroshot";
    case Method::coop_local: return "coop_local";
    case Method::fedcoop: return "fedcoop";
    case Method::fedkgcoop: return "fedkgcoop";
    case Method::fedtpg: return "fedtpg";
  }
  throw ConfigError("unknown method id " + std::to_string(static_cast<std::uint32_t>(m)));
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::zeroshot, Method::coop_local, Method::fedcoop, Method::fedkgcoop,
                   Method::fedtpg})
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method '" + std::string(name) +
                    "' (expected fedtpg, fedcoop, coop_local, fedkgcoop or zeroshot)");
}

bool bitwise_equal(const ModelSnapshot& a, const ModelSnapshot& b) {
  return a.method == b.method && a.values.size() == b.values.size() &&
         (a.values.size() == 0 ||
          std::memcmp(a.values.data(), b.values.data(), sizeof(double) * a.values.size()) == 0);
}

void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes little-endian host");
  const std::uint32_t header[3] = {kSnapshotVersion, static_cast<std::uint32_t>(snap.method),
                                   static_cast<std::uint32_t>(snap.values.size())};
  out.write(kSnapshotMagic.data(), kSnapshotMagic.size());
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(snap.values.data()),
            static_cast<std::streamsize>(sizeof(double) * snap.values.size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 8) throw IoError("truncated snapshot", static_cast<std::uint64_t>(in.gcount()));
  if (magic != kSnapshotMagic) throw FormatError(path.string() + ": bad magic, not an FTPGSNP1 snapshot");
  std::uint32_t header[3];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (in.gcount() != sizeof(header))
    throw IoError("truncated snapshot", 8 + static_cast<std::uint64_t>(in.gcount()));
  if (header[0] != kSnapshotVersion)
    throw FormatError(path.string() + ": unsupported snapshot version " + std::to_string(header[0]));
  ModelSnapshot snap;
  snap.method = static_cast<Method>(header[1]);
  (void)method_name(snap.method);
  snap.values.resize(header[2]);
  const auto bytes = static_cast<std::streamsize>(sizeof(double) * header[2]);
  in.read(reinterpret_cast<char*>(snap.values.data()), bytes);
  if (in.gcount() != bytes)
    throw IoError("truncated snapshot", 20 + static_cast<std::uint64_t>(in.gcount()));
  return snap;
}

Eigen::Index GeneratorShape::param_count() const {
  const Eigen::Index m = prompt_len, d = dim;
  return m * d + 3 * d * d + 2 * d + 2 * (d * d + d);
}

PromptGenParams init_prompt_gen(int prompt_len, int dim, int heads, std::uint64_t seed) {
  PromptGenParams p;
  p.shape = GeneratorShape{prompt_len, dim, heads};
  check_shape(p.shape);
  auto rng = make_stream(seed, Stream::model_init);
  const double wstd = 1.0 / std::sqrt(static_cast<double>(dim));
  p.query = gaussian_matrix(rng, prompt_len, dim, 0.02);
  p.w_key = gaussian_matrix(rng, dim, dim, wstd);
  p.w_value = gaussian_matrix(rng, dim, dim, wstd);
  p.w_out = gaussian_matrix(rng, dim, dim, wstd);
  p.ln_gamma = Matrix::Ones(1, dim);
  p.ln_beta = Matrix::Zero(1, dim);
  p.w1 = gaussian_matrix(rng, dim, dim, wstd);
  p.b1 = Matrix::Zero(1, dim);
  p.w2 = gaussian_matrix(rng, dim, dim, wstd);
  p.b2 = Matrix::Zero(1, dim);
  return p;
}

Vector flatten(const PromptGenParams& p) {
  Vector out(p.shape.param_count());
  Eigen::Index at = 0;
  for_each_param(p, [&](const Matrix& m) {
    out.segment(at, m.size()) = m.reshaped<Eigen::RowMajor>();
    at += m.size();
  });
  return out;
}

PromptGenParams unflatten_prompt_gen(const Vector& values, const GeneratorShape& shape) {
  check_shape(shape);
  if (values.size() != shape.param_count())
    throw ShapeError("prompt generator snapshot has " + std::to_string(values.size()) +
                     " values, expected " + std::to_string(shape.param_count()));
  const Eigen::Index m = shape.prompt_len, d = shape.dim;
  PromptGenParams p;
  p.shape = shape;
  p.query.resize(m, d);
  p.w_key.resize(d, d);
  p.w_value.resize(d, d);
  p.w_out.resize(d, d);
  p.ln_gamma.resize(1, d);
  p.ln_beta.resize(1, d);
  p.w1.resize(d, d);
  p.b1.resize(1, d);
  p.w2.resize(d, d);
  p.b2.resize(1, d);
  Eigen::Index at = 0;
  for_each_param(p, [&](Matrix& mat) {
    mat.reshaped<Eigen::RowMajor>() = values.segment(at, mat.size());
    at += mat.size();
  });
  return p;
}

Vector flatten(const FixedPromptParams& p) { return p.prompts.reshaped<Eigen::RowMajor>(); }

FixedPromptParams unflatten_fixed(const Vector& values, int prompt_len, int dim) {
  if (values.size() != static_cast<Eigen::Index>(prompt_len) * dim)
    throw ShapeError("fixed prompt snapshot has " + std::to_string(values.size()) +
                     " values, expected " + std::to_string(prompt_len * dim));
  FixedPromptParams p;
  p.prompts = values.reshaped<Eigen::RowMajor>(prompt_len, dim);
  return p;
}

PromptGenVars record_parameters(GradTape& tape, const PromptGenParams& params) {
  PromptGenVars v;
  v.query = tape.parameter(params.query);
  v.w_key = tape.parameter(params.w_key);
  v.w_value = tape.parameter(params.w_value);
  v.w_out = tape.parameter(params.w_out);
  v.ln_gamma = tape.parameter(params.ln_gamma);
  v.ln_beta = tape.parameter(params.ln_beta);
  v.w1 = tape.parameter(params.w1);
  v.b1 = tape.parameter(params.b1);
  v.w2 = tape.parameter(params.w2);
  v.b2 = tape.parameter(params.b2);
  return v;
}

Var generate_prompts(GradTape& tape, const PromptGenVars& vars, int heads, Var tokens) {
  const Eigen::Index d = tape.value(vars.query).cols();
  if (tape.value(tokens).rows() < 1) throw DataError("generate_prompts: empty token set");
  if (tape.value(tokens).cols() != d)
    detail::throw_shape("generate_prompts(tokens)", tape.value(tokens), tape.value(vars.w_key));
  const Eigen::Index head_dim = d / heads;
  const double scale = std::sqrt(static_cast<double>(head_dim));

  const Var keys = tape.matmul(tokens, vars.w_key);
  const Var values = tape.matmul(tokens, vars.w_value);
  std::vector<Var> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index start = h * head_dim;
    const Var q = tape.col_block(vars.query, start, head_dim);
    const Var k = tape.col_block(keys, start, head_dim);
    const Var v = tape.col_block(values, start, head_dim);
    const Var attention = tape.row_softmax(tape.matmul_nt(q, k), scale);
    head_outputs.push_back(tape.matmul(attention, v));
  }
  const Var merged = tape.matmul(tape.concat_cols(head_outputs), vars.w_out);
  const Var normed = tape.layer_norm(tape.add(vars.query, merged), vars.ln_gamma, vars.ln_beta,
                                     kLayerNormEps);
  const Var hidden = tape.relu(tape.add_row(tape.matmul(normed, vars.w1), vars.b1));
  return tape.add_row(tape.matmul(hidden, vars.w2), vars.b2);
}

Matrix generate_prompts(const PromptGenParams& params, const Matrix& tokens) {
  check_shape(params.shape);
  GradTape tape;
  const auto vars = record_parameters(tape, params);
  return tape.value(generate_prompts(tape, vars, params.shape.heads, tape.constant(tokens)));
}

Vector class_probs(const Matrix& prompts, const Matrix& tokens, const Vector& image,
                   const SurrogateEncoder& enc, const PredictConfig& cfg) {
  if (tokens.rows() < 2) throw DataError("class_probs: need at least two candidate classes");
  if (!(cfg.temperature > 0.0)) throw ParameterError("class_probs: temperature must be > 0");
  const Matrix texts = enc.encode(prompts, tokens);
  const Matrix cos = cosine_rows(Matrix(image.transpose()), texts);
  return row_softmax(cos, cfg.temperature).row(0).transpose();
}

LossGrad loss_and_grad(const ModelSpec& spec, const Vector& params, const Batch& batch,
                       const Matrix& tokens, const SurrogateEncoder& enc,
                       const PredictConfig& cfg, const Matrix* handcrafted) {
  GradTape tape;
  const Recorded rec = record_loss(tape, spec, params, batch, tokens, enc, cfg, handcrafted);
  tape.backward(rec.loss);
  LossGrad out;
  out.loss = tape.scalar(rec.loss);
  out.grads.resize(params.size());
  Eigen::Index at = 0;
  for (Var v : rec.params) {
    const Matrix g = tape.grad(v);
    out.grads.segment(at, g.size()) = g.reshaped<Eigen::RowMajor>();
    at += g.size();
  }
  return out;
}

double loss_value(const ModelSpec& spec, const Vector& params, const Batch& batch,
                  const Matrix& tokens, const SurrogateEncoder& enc, const PredictConfig& cfg,
                  const Matrix* handcrafted) {
  GradTape tape;
  return tape.scalar(record_loss(tape, spec, params, batch, tokens, enc, cfg, handcrafted).loss);
}

PenaltyGrad kg_penalty(const Matrix& prompts, const Matrix& handcrafted, const Matrix& tokens,
                       const SurrogateEncoder& enc) {
  if (prompts.rows() != handcrafted.rows() || prompts.cols() != handcrafted.cols())
    detail::throw_shape("kg_penalty", prompts, handcrafted);
  if (tokens.rows() < 1) throw DataError("kg_penalty: empty token set");
  GradTape tape;
  const Var p = tape.parameter(prompts);
  const Var texts = enc.encode(tape, p, tokens);
  const Var anchor = tape.constant(enc.encode(handcrafted, tokens));
  const Var penalty = tape.scale(tape.sum_squares(tape.sub(texts, anchor)),
                                 1.0 / static_cast<double>(tokens.rows()));
  tape.backward(penalty);
  return PenaltyGrad{tape.scalar(penalty), tape.grad(p)};
}

Matrix prompts_for(const ModelSpec& spec, const Vector& params, const Matrix& tokens) {
  if (uses_fixed_prompts(spec.method))
    return unflatten_fixed(params, spec.shape.prompt_len, spec.shape.dim).prompts;
  return generate_prompts(unflatten_prompt_gen(params, spec.shape), tokens);
}

}  // namespace ftpg
