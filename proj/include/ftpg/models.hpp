#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "ftpg/encoders.hpp"
#include "ftpg/tape.hpp"
#include "ftpg/tensor.hpp"

namespace ftpg {

enum class Method : std::uint32_t {
  zeroshot = 0,
  coop_local = 1,
  fedcoop = 2,
  fedkgcoop = 3,
  fedtpg = 4,
};

std::string_view method_name(Method m);
Method parse_method(std::string_view name);

/// True for every method that learns a single m x d prompt block directly.
inline bool uses_fixed_prompts(Method m) { return m != Method::fedtpg; }

/// Flat, ordered parameter vector for any method.
struct ModelSnapshot {
  Method method = Method::fedtpg;
  Vector values;
};

bool bitwise_equal(const ModelSnapshot& a, const ModelSnapshot& b);

void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

struct GeneratorShape {
  int prompt_len = 4;
  int dim = 32;
  int heads = 4;

  /// m*d + 3 d^2 (keys, values, output) + 2d (layer norm) + 2 (d^2 + d) (MLP).
  Eigen::Index param_count() const;
};

/// Trainable state of the cross-attention prompt generator.
struct PromptGenParams {
  GeneratorShape shape;
  Matrix query;     // m x d
  Matrix w_key;     // d x d
  Matrix w_value;   // d x d
  Matrix w_out;     // d x d, applied to the concatenated head outputs
  Matrix ln_gamma;  // 1 x d
  Matrix ln_beta;   // 1 x d
  Matrix w1;        // d x d
  Matrix b1;        // 1 x d
  Matrix w2;        // d x d
  Matrix b2;        // 1 x d
};

/// Directly learned prompt vectors (CoOp family).
struct FixedPromptParams {
  Matrix prompts;  // m x d
};

struct PredictConfig {
  double temperature = 0.01;
};

inline constexpr double kLayerNormEps = 1e-5;

PromptGenParams init_prompt_gen(int prompt_len, int dim, int heads, std::uint64_t seed);

Vector flatten(const PromptGenParams& p);
PromptGenParams unflatten_prompt_gen(const Vector& values, const GeneratorShape& shape);
Vector flatten(const FixedPromptParams& p);
FixedPromptParams unflatten_fixed(const Vector& values, int prompt_len, int dim);

/// Prompt block generated from the class-token rows T (n x d).
Matrix generate_prompts(const PromptGenParams& params, const Matrix& tokens);

/// Tape handles for every generator parameter.
struct PromptGenVars {
  Var query, w_key, w_value, w_out, ln_gamma, ln_beta, w1, b1, w2, b2;
};

PromptGenVars record_parameters(GradTape& tape, const PromptGenParams& params);
Var generate_prompts(GradTape& tape, const PromptGenVars& vars, int heads, Var tokens);

/// Softmax over cos(image, text_j) / temperature for the n candidate classes.
Vector class_probs(const Matrix& prompts, const Matrix& tokens, const Vector& image,
                   const SurrogateEncoder& enc, const PredictConfig& cfg);

/// Labeled image embeddings; labels index the candidate token rows.
struct Batch {
  Matrix images;
  std::vector<int> labels;
};

struct LossGrad {
  double loss = 0.0;
  Vector grads;
};

/// Everything needed to rebuild a model from its snapshot.
struct ModelSpec {
  Method method = Method::fedtpg;
  GeneratorShape shape;
  double kg_lambda = 8.0;
};

/// Mean cross-entropy of the batch (plus the knowledge-guided penalty for
/// fedkgcoop) and its gradient w.r.t. every snapshot coordinate.
/// `handcrafted` is only read by fedkgcoop.
LossGrad loss_and_grad(const ModelSpec& spec, const Vector& params, const Batch& batch,
                       const Matrix& tokens, const SurrogateEncoder& enc,
                       const PredictConfig& cfg, const Matrix* handcrafted = nullptr);

/// Loss only; same arithmetic as loss_and_grad.
double loss_value(const ModelSpec& spec, const Vector& params, const Batch& batch,
                  const Matrix& tokens, const SurrogateEncoder& enc, const PredictConfig& cfg,
                  const Matrix* handcrafted = nullptr);

struct PenaltyGrad {
  double penalty = 0.0;
  Matrix grad;  // w.r.t. prompts
};

/// Mean over classes of ||enc(P, t_j) - enc(P0, t_j)||^2.
PenaltyGrad kg_penalty(const Matrix& prompts, const Matrix& handcrafted, const Matrix& tokens,
                       const SurrogateEncoder& enc);

/// Prompts a model uses for a given candidate token set.
Matrix prompts_for(const ModelSpec& spec, const Vector& params, const Matrix& tokens);

}  // namespace ftpg
