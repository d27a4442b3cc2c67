#pragma once

// The in-context learner: feature and label embeddings, a test-masked
// transformer encoder, and three heads (mixture block, dense softmax,
// Gaussian).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "aptab/checkpoint.hpp"
#include "aptab/prior.hpp"
#include "aptab/tensor.hpp"

namespace aptab {

enum class EmbeddingKind { kDense, kPatch };
enum class HeadKind { kMixture, kDense };
// kSample: binary Concrete gates with logistic noise. kDeterministic:
// sigmoid(logit / lambda). kOpen: every gate is 1.
enum class GateMode { kSample, kDeterministic, kOpen };

std::string_view to_string(EmbeddingKind kind);
std::string_view to_string(HeadKind kind);
EmbeddingKind parse_embedding_kind(std::string_view text);
HeadKind parse_head_kind(std::string_view text);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t blocks = 3;
  std::size_t heads = 2;
  std::size_t ff_width = 128;
  // Dense mode pads or truncates rows to this width; patch mode uses it as
  // the patch width.
  std::size_t feature_width = 100;
  EmbeddingKind embedding = EmbeddingKind::kDense;
  HeadKind head = HeadKind::kMixture;
  Real gate_temperature = 0.1;
  std::size_t max_classes = 10;  // dense head only
  Real layer_norm_eps = 1e-5;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Rows [0, split) are the training context, rows [split, n) are queries.
struct Episode {
  Dataset data;
  std::size_t split = 0;

  std::size_t train_rows() const { return split; }
  std::size_t test_rows() const { return data.rows() - split; }
};

struct Prediction {
  TaskKind task = TaskKind::kClassification;
  std::vector<int> classes;  // label of each probability column
  Tensor probs;              // [m, C]
  Tensor mean;               // [m]
  Tensor stddev;             // [m]
  std::size_t fallback_rows = 0;

  std::size_t rows() const { return task == TaskKind::kClassification ? probs.dim(0) : mean.numel(); }
  // Probability column of a label, or -1 when the label is not predicted.
  std::ptrdiff_t column_of(int label) const;
};

inline constexpr Real kGatedMassFloor = 1e-9;
inline constexpr Real kSigmaFloor = 1e-4;

struct ForwardOptions {
  GateMode gates = GateMode::kDeterministic;
  std::uint64_t gate_seed = 0;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Deep copy of every parameter.
  Model clone() const;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // Fixed order; names are stable across runs and used by checkpoints.
  const std::vector<NamedTensor>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // FNV-1a over the parameter bytes.
  std::uint64_t checksum() const;
  void set_requires_grad(bool flag);

  // x: [n, d] -> [n, d_model].
  Tensor embed_features(const Tensor& x) const;
  // Patch path for one or more rows: [n, d] -> [n, d_model].
  Tensor patch_embed(const Tensor& x) const;
  // Feature tokens for all rows plus the label embedding on the first
  // `split` rows; y_train is [split].
  Tensor embed(const Tensor& x, const Tensor& y_train, std::size_t split) const;
  // Every token attends only to the first `split` tokens.
  Tensor encode(const Tensor& tokens, std::size_t split) const;

  Prediction mixture_block(const Tensor& test, const Tensor& train, std::span<const int> labels,
                           const ForwardOptions& options) const;
  Prediction dense_head(const Tensor& test, std::size_t classes) const;
  Prediction gaussian_head(const Tensor& test) const;

  Prediction forward(const Episode& episode, const ForwardOptions& options = {}) const;

  Bundle to_bundle() const;
  static Model from_bundle(const Bundle& bundle);
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  Model(ModelConfig config, std::uint64_t seed, std::vector<NamedTensor> params);
  const Tensor& param(const std::string& name) const;
  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor attention(const Tensor& x, std::size_t split, const std::string& prefix) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<NamedTensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace aptab
