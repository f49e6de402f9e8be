#pragma once

#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlm/rng.hpp"
#include "trojanlm/tensor.hpp"

namespace trojanlm::models {

enum class Mode { Encoder, Causal };

struct TransformerConfig {
  int layers = 2;
  int heads = 2;
  int dim = 64;
  int ffn = 128;
  int vocab = 0;
  int max_len = 128;

  void validate() const;
  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
  bool operator==(const TransformerConfig&) const = default;
};

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

struct BlockCache {
  LayerNormCache ln1;
  Matrix a;  // ln1 output
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, n x n
  Matrix o;                   // concatenated head outputs
  LayerNormCache ln2;
  Matrix b;  // ln2 output
  Matrix h_pre, h_act;
};

/// Activations kept for the backward pass of one sequence.
struct ForwardCache {
  Mode mode = Mode::Encoder;
  std::vector<int> ids;  // empty when the input came as embeddings
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  Matrix states;  // n x d
  int length() const { return states.rows; }
};

/// Inference surface of a bidirectional encoder.
class EncoderLM {
 public:
  virtual ~EncoderLM() = default;
  /// Per-token states (n x d).
  virtual Matrix encode(std::span<const int> ids) const = 0;
  /// Mean of the per-token states (1 x d).
  virtual Matrix pooled_embedding(std::span<const int> ids) const;
  virtual int dim() const = 0;
};

/// Inference surface of a causal language model.
class CausalLM {
 public:
  virtual ~CausalLM() = default;
  /// Logits over the vocabulary for the token following prefix.
  virtual std::vector<double> next_logits(std::span<const int> prefix) const = 0;
  virtual int vocab_size() const = 0;
  virtual int max_length() const = 0;
};

/// Pre-LN transformer with learned positions and an output layer tied to the
/// input embedding table. Runs bidirectionally (encoder) or with a causal mask.
class TinyTransformer : public EncoderLM, public CausalLM {
 public:
  TinyTransformer(const TransformerConfig& cfg, Rng& rng);
  /// Wraps existing parameters (layout must match cfg).
  TinyTransformer(const TransformerConfig& cfg, ParameterSet params);

  const TransformerConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const Matrix& embedding_table() const { return params_[emb_]; }
  size_t embedding_index() const { return emb_; }

  ForwardCache forward(std::span<const int> ids, Mode mode) const;
  /// Input given as token embeddings (n x d, without positions).
  ForwardCache forward_embeddings(const Matrix& token_embeds, Mode mode) const;

  /// Mean over rows of the final states.
  static Matrix mean_pool(const ForwardCache& cache);
  /// Tied-output logits for the selected positions (rows.size() x V).
  Matrix logits(const ForwardCache& cache, std::span<const int> rows) const;
  /// Gradient of loss w.r.t. states given d_logits for selected rows; the
  /// embedding-table gradient of the output layer is accumulated into grads.
  Matrix logits_backward(const ForwardCache& cache, std::span<const int> rows, const Matrix& d_logits,
                         ParameterSet* grads) const;

  /// Back-propagates d_states through the network. Parameter gradients are
  /// accumulated into grads (if given); returns the gradient w.r.t. the token
  /// embeddings. When the cache came from ids, embedding rows are updated too.
  Matrix backward(const ForwardCache& cache, const Matrix& d_states, ParameterSet* grads) const;

  Matrix encode(std::span<const int> ids) const override;
  int dim() const override { return cfg_.dim; }
  std::vector<double> next_logits(std::span<const int> prefix) const override;
  int vocab_size() const override { return cfg_.vocab; }
  int max_length() const override { return cfg_.max_len; }

 private:
  struct BlockIndex {
    size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  void build_layout();
  ForwardCache run(Matrix x, Mode mode) const;

  TransformerConfig cfg_;
  ParameterSet params_;
  size_t emb_ = 0, pos_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<BlockIndex> blocks_;
};

/// One fully connected layer: out = x W + b.
class LinearHead {
 public:
  LinearHead(int in, int out, Rng& rng);
  LinearHead(int in, int out, ParameterSet params);

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Matrix forward(const Matrix& x) const;
  /// Accumulates weight gradients; returns d x.
  Matrix backward(const Matrix& x, const Matrix& d_out, ParameterSet* grads) const;

 private:
  int in_, out_;
  ParameterSet params_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment update. Parameters are rounded to float32 after each step.
class Adam {
 public:
  Adam(const ParameterSet& layout, AdamConfig cfg);
  void step(ParameterSet& params, const ParameterSet& grads);
  const AdamConfig& config() const { return cfg_; }
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  ParameterSet m_, v_;
  long t_ = 0;
};

/// Softmax cross-entropy of one logit row against target; writes d logits.
double softmax_cross_entropy(std::span<const double> logits, int target, std::span<double> d_logits);

// --- checkpoints -----------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<Tensor> tensors;
};

/// Binary container: magic, version, json header, float32 LE tensors, SHA-256
/// trailer. Written to a temp file and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws CheckpointError("corrupt checkpoint") on digest mismatch or
/// truncation and CheckpointError("unsupported checkpoint version N").
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const uint8_t> bytes);

/// Tensors of a parameter set with a name prefix.
void append_tensors(Checkpoint& ckpt, const ParameterSet& params, const std::string& prefix);
/// Rebuilds a parameter set from prefixed tensors in the checkpoint.
ParameterSet extract_tensors(const Checkpoint& ckpt, const std::string& prefix);

// --- gradient check --------------------------------------------------------

struct GradcheckResult {
  double max_relative_error = 0.0;
  double max_abs_analytic = 0.0;
  size_t coordinates = 0;
};

/// loss(grads) returns the loss and, when grads is non-null, accumulates the
/// analytic gradient into it. Compares against central differences on
/// n_coords random coordinates; relative error is |a-n| / max(|a|+|n|, 1e-8).
GradcheckResult finite_difference_gradcheck(ParameterSet& params,
                                            const std::function<double(ParameterSet*)>& loss,
                                            size_t n_coords, double epsilon, Rng& rng);

}  // namespace trojanlm::models
