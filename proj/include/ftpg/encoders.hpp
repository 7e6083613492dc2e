#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ftpg/tape.hpp"
#include "ftpg/tensor.hpp"

namespace ftpg {

enum class Split : std::uint8_t { base = 0, novel = 1 };

struct ClassEntry {
  std::string name;
  Split split = Split::base;
  Vector token;          // unit-norm class-name embedding
  Matrix train_images;   // one embedding per row
  Matrix eval_images;
};

struct DatasetEntry {
  std::string name;
  std::vector<ClassEntry> classes;
};

/// The frozen world every client and evaluator reads from.
///
/// Embeddings are held as doubles but are always exactly representable in
/// 32 bits, so an in-memory store equals its on-disk image bit for bit.
struct EmbeddingStore {
  std::uint32_t dim = 0;
  std::uint32_t prompt_len = 0;
  std::uint64_t encoder_seed = 0;
  std::vector<DatasetEntry> datasets;

  std::size_t num_classes() const;
  std::size_t num_train_images() const;
  std::size_t num_eval_images() const;
};

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b);

/// Validates the structural invariants; throws FormatError / DataError.
void validate_store(const EmbeddingStore& store, double norm_tolerance = 1e-6);

struct SynthConfig {
  int num_datasets = 6;
  int classes_per_dataset = 40;
  int train_shots = 8;
  int eval_images_per_class = 20;
  double noise_sigma = 0.3;
  double dataset_context_spread = 0.5;
  // Weight of the per-dataset shared image offset inside the sigma-scaled noise.
  double domain_shift = 2.0;
  std::uint32_t dim = 32;
  std::uint32_t prompt_len = 4;
  std::uint64_t seed = 0;
  std::uint64_t encoder_seed = 0;
};

void validate(const SynthConfig& cfg);

/// Frozen affine stand-in for the text encoder applied to [v_1 .. v_m; token].
class SurrogateEncoder {
 public:
  // Gain applied to the prompt columns; the token block is norm-preserving.
  static constexpr double kPromptGain = 0.1;

  SurrogateEncoder(std::uint64_t seed, std::uint32_t prompt_len, std::uint32_t dim);

  std::uint32_t prompt_len() const noexcept { return m_; }
  std::uint32_t dim() const noexcept { return d_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// d x (m+1)d
  const Matrix& weight() const noexcept { return weight_; }
  /// 1 x d
  const RowVector& bias() const noexcept { return bias_; }

  /// d x md, the columns acting on the flattened prompt rows.
  const Matrix& prompt_block() const noexcept { return prompt_block_; }
  /// d x d, the columns acting on the class token.
  const Matrix& token_block() const noexcept { return token_block_; }

  /// Encodes every row of tokens with the shared prompt block: n x d.
  Matrix encode(const Matrix& prompts, const Matrix& tokens) const;

  /// Differentiable w.r.t. prompts only; tokens and the encoder are frozen.
  Var encode(GradTape& tape, Var prompts, const Matrix& tokens) const;

 private:
  void check_prompts(const Matrix& prompts) const;

  std::uint64_t seed_;
  std::uint32_t m_;
  std::uint32_t d_;
  Matrix weight_;
  RowVector bias_;
  Matrix prompt_block_;
  Matrix token_block_;
};

/// W_e concat(P rows, token) + b_e for a single token.
Vector surrogate_encode(const SurrogateEncoder& enc, const Matrix& prompts, const Vector& token);

/// The fixed "a photo of a" analog: m unit-norm gaussian rows from the encoder seed.
Matrix handcrafted_prompts(const SurrogateEncoder& enc);

EmbeddingStore synth_world(const SynthConfig& cfg);

/// Token embeddings of the given classes stacked as rows.
Matrix token_matrix(const DatasetEntry& dataset, const std::vector<int>& class_indices);

void save_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore load_store(const std::filesystem::path& path);

/// Exact byte size of the serialized store.
std::uint64_t store_file_size(const EmbeddingStore& store);

/// Rounds every entry through 32-bit float.
Matrix round_to_float(const Matrix& m);
Vector round_to_float(const Vector& v);

}  // namespace ftpg
