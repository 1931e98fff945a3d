#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl {

/// Joint multi-task bag transformer: linear projection of patch features
/// into the model dimension, a Transformer encoder over the bag, a decoder
/// that cross-attends one learnable classification token plus one learnable
/// regression token per auxiliary task, and per-token fully connected heads.
struct ModelConfig {
  int input_dim = 768;   // patch feature dimension d_z
  int model_dim = 384;   // latent dimension (the exported embedding width)
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 8;
  int ff_dim = 768;
  int aux_tasks = 0;     // K_aux
  double dropout = 0.0;
  std::uint64_t seed = 0;

  int num_tasks() const { return 1 + aux_tasks; }
  void validate() const;  // throws ConfigError
};

struct LinearParams {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)
};

struct AttentionParams {
  LinearParams query, key, value, out;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams norm1;
  LinearParams ff1, ff2;
  LayerNormParams norm2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams norm1;
  AttentionParams cross_attn;
  LayerNormParams norm2;
  LinearParams ff1, ff2;
  LayerNormParams norm3;
};

/// All learnable tensors. The shared set (projection + encoder + decoder)
/// and the per-task sets (task token + task head) partition the parameters;
/// gradient-based balancing touches only the shared set.
///
/// Canonical flatten order (used by the optimizer, the balancers and the
/// checkpoint format): projection (weight, bias); encoder layers in order
/// (attention q/k/v/out weight+bias, norm1, ff1, ff2, norm2); decoder layers
/// in order (self-attention, norm1, cross-attention, norm2, ff1, ff2,
/// norm3); then per task its token followed by its head (task 0 =
/// classification, tasks 1..K = regression).
struct ModelParams {
  ModelConfig config;
  LinearParams projection;
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor cls_token;                  // (1, model_dim)
  std::vector<Tensor> rgr_tokens;    // aux_tasks x (1, model_dim)
  LinearParams cls_head;             // model_dim -> 2
  std::vector<LinearParams> rgr_heads;  // model_dim -> 1

  std::vector<Tensor> shared_params() const;
  std::vector<Tensor> task_params(int task) const;  // 0 = classification
  std::vector<Tensor> all_params() const;
  ModelParams clone() const;
};

/// Deterministic initialization: linear weights and biases drawn from
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), layer-norm gains 1 / biases 0,
/// tokens from N(0, 0.02^2). Draw order equals the canonical flatten order.
ModelParams init_params(const ModelConfig& cfg);

struct ForwardOutput {
  Tensor logits;                  // (1, 2)
  std::vector<Tensor> aux_preds;  // aux_tasks x (1, 1)
  Tensor cls_embedding;           // (1, model_dim), the classification head input
};

/// Runs the model on a bag (n x input_dim leaf tensor, n >= 1). Bags are
/// unordered sets: rows are canonicalized internally, so the outputs are
/// invariant under row permutation. Pass dropout_rng during training to
/// enable (seeded) dropout; inference leaves it null.
ForwardOutput forward(const ModelParams& params, const Tensor& bag,
                      Rng* dropout_rng = nullptr);

/// Scaled dot-product attention over pre-projected inputs: columns are
/// split into heads, each head computes softmax(Q Kᵀ / sqrt(d_head)) V, and
/// the head outputs are concatenated. The surrounding layer applies the
/// four linear projections.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int heads);

/// Checkpoint: magic "MTLP", u32 version, config fields, then all
/// parameters in flatten order as 64-bit little-endian floats.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace mtl
