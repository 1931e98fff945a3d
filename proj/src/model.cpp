#include "mtl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace mtl {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kCheckpointMagic[4] = {'M', 'T', 'L', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor linear(const Tensor& x, const LinearParams& p) {
  return add_rowvec(matmul(x, p.weight), p.bias);
}

void push_linear(std::vector<Tensor>& out, const LinearParams& p) {
  out.push_back(p.weight);
  out.push_back(p.bias);
}

void push_attention(std::vector<Tensor>& out, const AttentionParams& p) {
  push_linear(out, p.query);
  push_linear(out, p.key);
  push_linear(out, p.value);
  push_linear(out, p.out);
}

void push_norm(std::vector<Tensor>& out, const LayerNormParams& p) {
  out.push_back(p.gain);
  out.push_back(p.bias);
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
  if (model_dim < 1) throw ConfigError("model: model_dim must be >= 1");
  if (heads < 1 || model_dim % heads != 0)
    throw ConfigError("model: model_dim " + std::to_string(model_dim) +
                      " must be divisible by heads " + std::to_string(heads));
  if (encoder_layers < 1 || decoder_layers < 1)
    throw ConfigError("model: encoder/decoder need at least one layer");
  if (ff_dim < 1) throw ConfigError("model: ff_dim must be >= 1");
  if (aux_tasks < 0) throw ConfigError("model: aux_tasks must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ConfigError("model: dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace {

LinearParams zero_linear(int in, int out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

AttentionParams zero_attention(int dim) {
  return {zero_linear(dim, dim), zero_linear(dim, dim), zero_linear(dim, dim),
          zero_linear(dim, dim)};
}

LayerNormParams zero_norm(int dim) {
  return {Tensor::zeros({dim}, true), Tensor::zeros({dim}, true)};
}

ModelParams zero_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  p.projection = zero_linear(cfg.input_dim, cfg.model_dim);
  for (int l = 0; l < cfg.encoder_layers; ++l)
    p.encoder.push_back({zero_attention(cfg.model_dim), zero_norm(cfg.model_dim),
                         zero_linear(cfg.model_dim, cfg.ff_dim),
                         zero_linear(cfg.ff_dim, cfg.model_dim),
                         zero_norm(cfg.model_dim)});
  for (int l = 0; l < cfg.decoder_layers; ++l)
    p.decoder.push_back({zero_attention(cfg.model_dim), zero_norm(cfg.model_dim),
                         zero_attention(cfg.model_dim), zero_norm(cfg.model_dim),
                         zero_linear(cfg.model_dim, cfg.ff_dim),
                         zero_linear(cfg.ff_dim, cfg.model_dim),
                         zero_norm(cfg.model_dim)});
  p.cls_token = Tensor::zeros({1, cfg.model_dim}, true);
  for (int k = 0; k < cfg.aux_tasks; ++k)
    p.rgr_tokens.push_back(Tensor::zeros({1, cfg.model_dim}, true));
  p.cls_head = zero_linear(cfg.model_dim, 2);
  for (int k = 0; k < cfg.aux_tasks; ++k)
    p.rgr_heads.push_back(zero_linear(cfg.model_dim, 1));
  return p;
}

void init_linear(LinearParams& p, Rng& rng) {
  const int fan_in = p.weight.dim(0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.weight.mutable_values()) v = rng.uniform(-bound, bound);
  for (double& v : p.bias.mutable_values()) v = rng.uniform(-bound, bound);
}

void init_attention(AttentionParams& p, Rng& rng) {
  init_linear(p.query, rng);
  init_linear(p.key, rng);
  init_linear(p.value, rng);
  init_linear(p.out, rng);
}

void init_norm(LayerNormParams& p, Rng& /*rng*/) {
  std::fill(p.gain.mutable_values().begin(), p.gain.mutable_values().end(), 1.0);
  std::fill(p.bias.mutable_values().begin(), p.bias.mutable_values().end(), 0.0);
}

void init_token(Tensor& t, Rng& rng) {
  for (double& v : t.mutable_values()) v = rng.normal(0.0, 0.02);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
  ModelParams p = zero_params(cfg);
  Rng rng(mix_seed(cfg.seed, 0x696e6974ull));  // "init"
  init_linear(p.projection, rng);
  for (auto& l : p.encoder) {
    init_attention(l.self_attn, rng);
    init_norm(l.norm1, rng);
    init_linear(l.ff1, rng);
    init_linear(l.ff2, rng);
    init_norm(l.norm2, rng);
  }
  for (auto& l : p.decoder) {
    init_attention(l.self_attn, rng);
    init_norm(l.norm1, rng);
    init_attention(l.cross_attn, rng);
    init_norm(l.norm2, rng);
    init_linear(l.ff1, rng);
    init_linear(l.ff2, rng);
    init_norm(l.norm3, rng);
  }
  init_token(p.cls_token, rng);
  for (auto& t : p.rgr_tokens) init_token(t, rng);
  init_linear(p.cls_head, rng);
  for (auto& h : p.rgr_heads) init_linear(h, rng);
  return p;
}

std::vector<Tensor> ModelParams::shared_params() const {
  std::vector<Tensor> out;
  push_linear(out, projection);
  for (const auto& l : encoder) {
    push_attention(out, l.self_attn);
    push_norm(out, l.norm1);
    push_linear(out, l.ff1);
    push_linear(out, l.ff2);
    push_norm(out, l.norm2);
  }
  for (const auto& l : decoder) {
    push_attention(out, l.self_attn);
    push_norm(out, l.norm1);
    push_attention(out, l.cross_attn);
    push_norm(out, l.norm2);
    push_linear(out, l.ff1);
    push_linear(out, l.ff2);
    push_norm(out, l.norm3);
  }
  return out;
}

std::vector<Tensor> ModelParams::task_params(int task) const {
  if (task < 0 || task > config.aux_tasks)
    throw ValueError("task_params: task " + std::to_string(task) +
                     " out of range [0," + std::to_string(config.aux_tasks) +
                     "]");
  std::vector<Tensor> out;
  if (task == 0) {
    out.push_back(cls_token);
    push_linear(out, cls_head);
  } else {
    out.push_back(rgr_tokens[static_cast<std::size_t>(task - 1)]);
    push_linear(out, rgr_heads[static_cast<std::size_t>(task - 1)]);
  }
  return out;
}

std::vector<Tensor> ModelParams::all_params() const {
  std::vector<Tensor> out = shared_params();
  for (int t = 0; t <= config.aux_tasks; ++t) {
    auto tp = task_params(t);
    out.insert(out.end(), tp.begin(), tp.end());
  }
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy = zero_params(config);
  unflatten_values(copy.all_params(), flatten_values(all_params()));
  return copy;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("attention: rank-2 inputs required");
  const int dim = q.dim(1);
  if (k.dim(1) != dim || v.dim(1) != dim)
    throw ShapeError("attention: column mismatch " + shape_str(q.shape()) +
                     ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (k.dim(0) != v.dim(0))
    throw ShapeError("attention: key/value row mismatch " +
                     shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  if (heads < 1 || dim % heads != 0)
    throw ShapeError("attention: dim " + std::to_string(dim) +
                     " not divisible by heads " + std::to_string(heads));
  const int dh = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor weights = softmax(scores, 1);
    outs.push_back(matmul(weights, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

namespace {

Tensor attention_block(const AttentionParams& p, const Tensor& q_in,
                       const Tensor& kv_in, int heads) {
  Tensor q = linear(q_in, p.query);
  Tensor k = linear(kv_in, p.key);
  Tensor v = linear(kv_in, p.value);
  return linear(multihead_attention(q, k, v, heads), p.out);
}

Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  return (rng != nullptr && rate > 0.0) ? dropout(x, rate, *rng) : x;
}

Tensor encoder_layer(const EncoderLayerParams& l, Tensor x, int heads,
                     double drop, Rng* rng) {
  Tensor att = maybe_dropout(attention_block(l.self_attn, x, x, heads), drop, rng);
  x = layer_norm(add(x, att), l.norm1.gain, l.norm1.bias, kLayerNormEps);
  Tensor ff = maybe_dropout(linear(relu(linear(x, l.ff1)), l.ff2), drop, rng);
  return layer_norm(add(x, ff), l.norm2.gain, l.norm2.bias, kLayerNormEps);
}

Tensor decoder_layer(const DecoderLayerParams& l, Tensor t, const Tensor& memory,
                     int heads, double drop, Rng* rng) {
  Tensor att = maybe_dropout(attention_block(l.self_attn, t, t, heads), drop, rng);
  t = layer_norm(add(t, att), l.norm1.gain, l.norm1.bias, kLayerNormEps);
  Tensor cross =
      maybe_dropout(attention_block(l.cross_attn, t, memory, heads), drop, rng);
  t = layer_norm(add(t, cross), l.norm2.gain, l.norm2.bias, kLayerNormEps);
  Tensor ff = maybe_dropout(linear(relu(linear(t, l.ff1)), l.ff2), drop, rng);
  return layer_norm(add(t, ff), l.norm3.gain, l.norm3.bias, kLayerNormEps);
}

/// Bags are sets: rows are sorted lexicographically so any permutation of
/// the same patches yields bit-identical outputs.
Tensor canonicalize_rows(const Tensor& bag) {
  const int n = bag.dim(0), d = bag.dim(1);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto& v = bag.values();
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double* ra = &v[static_cast<std::size_t>(a) * d];
    const double* rb = &v[static_cast<std::size_t>(b) * d];
    return std::lexicographical_compare(ra, ra + d, rb, rb + d);
  });
  std::vector<double> sorted(v.size());
  for (int r = 0; r < n; ++r)
    std::copy(&v[static_cast<std::size_t>(order[r]) * d],
              &v[static_cast<std::size_t>(order[r]) * d] + d,
              &sorted[static_cast<std::size_t>(r) * d]);
  return Tensor::from({n, d}, std::move(sorted));
}

}  // namespace

ForwardOutput forward(const ModelParams& params, const Tensor& bag,
                      Rng* dropout_rng) {
  const ModelConfig& cfg = params.config;
  if (!bag.defined() || bag.rank() != 2 || bag.dim(0) < 1)
    throw ValueError("forward: bag must contain at least one patch row");
  if (bag.dim(1) != cfg.input_dim)
    throw ShapeError("forward: bag width " + std::to_string(bag.dim(1)) +
                     " != input_dim " + std::to_string(cfg.input_dim));

  Tensor x = linear(canonicalize_rows(bag), params.projection);
  for (const auto& l : params.encoder)
    x = encoder_layer(l, x, cfg.heads, cfg.dropout, dropout_rng);

  std::vector<Tensor> token_rows{params.cls_token};
  for (const auto& t : params.rgr_tokens) token_rows.push_back(t);
  Tensor t = token_rows.size() == 1 ? token_rows[0] : concat_rows(token_rows);
  for (const auto& l : params.decoder)
    t = decoder_layer(l, t, x, cfg.heads, cfg.dropout, dropout_rng);

  ForwardOutput out;
  out.cls_embedding = slice_rows(t, 0, 1);
  out.logits = linear(out.cls_embedding, params.cls_head);
  for (int k = 0; k < cfg.aux_tasks; ++k)
    out.aux_preds.push_back(
        linear(slice_rows(t, 1 + k, 1), params.rgr_heads[static_cast<std::size_t>(k)]));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

std::uint32_t get_u32(const std::vector<unsigned char>& b, std::size_t& off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  off += 4;
  return v;
}

std::uint64_t get_u64(const std::vector<unsigned char>& b, std::size_t& off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  off += 8;
  return v;
}

double get_f64(const std::vector<unsigned char>& b, std::size_t& off) {
  const std::uint64_t bits = get_u64(b, off);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  const ModelConfig& c = params.config;
  put_u32(out, static_cast<std::uint32_t>(c.input_dim));
  put_u32(out, static_cast<std::uint32_t>(c.model_dim));
  put_u32(out, static_cast<std::uint32_t>(c.encoder_layers));
  put_u32(out, static_cast<std::uint32_t>(c.decoder_layers));
  put_u32(out, static_cast<std::uint32_t>(c.heads));
  put_u32(out, static_cast<std::uint32_t>(c.ff_dim));
  put_u32(out, static_cast<std::uint32_t>(c.aux_tasks));
  put_f64(out, c.dropout);
  put_u64(out, c.seed);
  for (double v : flatten_values(params.all_params())) put_f64(out, v);
  std::ofstream of(path, std::ios::binary | std::ios::trunc);
  if (!of) throw FormatError("cannot write " + path);
  of.write(reinterpret_cast<const char*>(out.data()),
           static_cast<std::streamsize>(out.size()));
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(in), {});
  if (bytes.size() < 8 + 7 * 4 + 8 + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(path + ": not an MTLP checkpoint");
  std::size_t off = 4;
  const std::uint32_t version = get_u32(bytes, off);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  ModelConfig cfg;
  cfg.input_dim = static_cast<int>(get_u32(bytes, off));
  cfg.model_dim = static_cast<int>(get_u32(bytes, off));
  cfg.encoder_layers = static_cast<int>(get_u32(bytes, off));
  cfg.decoder_layers = static_cast<int>(get_u32(bytes, off));
  cfg.heads = static_cast<int>(get_u32(bytes, off));
  cfg.ff_dim = static_cast<int>(get_u32(bytes, off));
  cfg.aux_tasks = static_cast<int>(get_u32(bytes, off));
  cfg.dropout = get_f64(bytes, off);
  cfg.seed = get_u64(bytes, off);
  ModelParams params = zero_params(cfg);
  auto all = params.all_params();
  const std::size_t expect = off + 8 * param_count(all);
  if (bytes.size() != expect)
    throw FormatError(path + ": checkpoint length " +
                      std::to_string(bytes.size()) + " != expected " +
                      std::to_string(expect));
  std::vector<double> flat;
  flat.reserve(param_count(all));
  while (off < bytes.size()) flat.push_back(get_f64(bytes, off));
  unflatten_values(all, flat);
  return params;
}

}  // namespace mtl
