// wsasr: convolutional transformer encoder-decoder.
//
// Encoder: two [conv2d -> layer_norm -> relu -> maxpool 2x2] blocks over
// time x frequency (so the time axis shrinks by 4), flattened and projected
// to the model dimension, then pre-LN transformer blocks. The decoder embeds
// tokens, applies causal 1-D convolutions, then pre-LN blocks with causal
// self-attention and cross-attention over the encoder output. Position
// information comes entirely from the convolutional frontends; there is no
// additive positional encoding.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsasr/ops.hpp"
#include "wsasr/optim.hpp"

namespace wsasr {

struct ModelConfig {
  int feature_dim = 16;       // input feature dimension        (reference scale: 80)
  int model_dim = 32;         // transformer width d            (reference scale: 1000)
  int num_heads = 4;          // attention heads H              (reference scale: 16)
  int ffn_dim = 64;           // feed-forward projection        (reference scale: 4000)
  int enc_blocks = 2;         // encoder transformer blocks     (reference scale: 10)
  int dec_blocks = 1;         // decoder transformer blocks     (reference scale: 2)
  int dec_conv_layers = 2;    // causal 1-D conv layers         (reference scale: 4)
  int dec_conv_channels = 32; // 1-D conv output features       (reference scale: 256)
  int embed_dim = 32;         // token embedding width
  int conv_channels1 = 4;     // first 2-D conv block channels  (reference scale: 64)
  int conv_channels2 = 8;     // second 2-D conv block channels (reference scale: 128)
  int conv_kernel = 3;
  double dropout = 0.15;
  int vocab_size = 200;       // subword vocabulary             (reference scale: 5000)
  bool ctc_adapter_block = true;  // extra encoder block in front of the CTC head

  int head_dim() const { return model_dim / num_heads; }
  int freq_after_pool1() const { return (feature_dim + 1) / 2; }
  int freq_after_pool2() const { return (freq_after_pool1() + 1) / 2; }

  void validate() const {
    require(model_dim >= 1 && num_heads >= 1 && model_dim % num_heads == 0,
            "config: model_dim must be a positive multiple of num_heads");
    require(feature_dim >= 1 && ffn_dim >= 1 && vocab_size > 4, "config: dims must be positive");
    require(enc_blocks >= 0 && dec_blocks >= 1 && dec_conv_layers >= 1, "config: block counts");
    require(conv_kernel % 2 == 1, "config: conv kernel must be odd");
  }

  uint64_t hash() const {
    int64_t fields[] = {feature_dim, model_dim, num_heads, ffn_dim, enc_blocks, dec_blocks,
                        dec_conv_layers, dec_conv_channels, embed_dim, conv_channels1,
                        conv_channels2, conv_kernel, int64_t(dropout * 1e6), vocab_size,
                        ctc_adapter_block ? 1 : 0};
    return fnv1a(fields, sizeof(fields));
  }
};

// Reserved token ids shared across the project.
struct SpecialIds {
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int unk = 3;
};

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void fill_xavier(Tensor<T>& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  for (auto& v : t.data) v = T(rng.uniform(-limit, limit));
}

template <typename T>
struct ParamBuilder {
  NamedTensors<T> params;

  void dense(const std::string& name, int64_t in, int64_t out) {
    params[name + ".w"] = Tensor<T>({in, out});
    params[name + ".b"] = Tensor<T>({out});
  }
  void norm(const std::string& name, int64_t d) {
    params[name + ".g"] = Tensor<T>({d});
    params[name + ".b"] = Tensor<T>({d});
  }
  void conv2(const std::string& name, int64_t k, int64_t cin, int64_t cout) {
    params[name + ".k"] = Tensor<T>({k, k, cin, cout});
    params[name + ".b"] = Tensor<T>({cout});
  }
  void conv1(const std::string& name, int64_t k, int64_t cin, int64_t cout) {
    params[name + ".k"] = Tensor<T>({k, cin, cout});
    params[name + ".b"] = Tensor<T>({cout});
  }
  void attention(const std::string& name, int heads, int64_t d, int64_t dh) {
    for (int h = 0; h < heads; ++h) {
      params[name + ".q" + std::to_string(h)] = Tensor<T>({d, dh});
      params[name + ".k" + std::to_string(h)] = Tensor<T>({d, dh});
      params[name + ".v" + std::to_string(h)] = Tensor<T>({d, dh});
    }
    params[name + ".o"] = Tensor<T>({int64_t(heads) * dh, d});
  }
  void block(const std::string& name, const ModelConfig& cfg, bool with_cross) {
    int64_t d = cfg.model_dim;
    norm(name + ".ln_self", d);
    attention(name + ".self", cfg.num_heads, d, cfg.head_dim());
    if (with_cross) {
      norm(name + ".ln_cross", d);
      attention(name + ".cross", cfg.num_heads, d, cfg.head_dim());
    }
    norm(name + ".ln_ffn", d);
    dense(name + ".ffn.fc1", d, cfg.ffn_dim);
    dense(name + ".ffn.fc2", cfg.ffn_dim, d);
  }
};

// Fills tensors deterministically in name order so initialization does not
// depend on registration order.
template <typename T>
void fill_params(NamedTensors<T>& params, uint64_t seed) {
  for (auto& [name, t] : params) {
    Rng rng(hash_combine(seed, fnv1a(name)));
    bool is_norm_gain = name.size() > 2 && name.substr(name.size() - 2) == ".g";
    bool is_bias = name.size() > 2 && name.substr(name.size() - 2) == ".b";
    if (is_norm_gain) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (is_bias) {
      std::fill(t.data.begin(), t.data.end(), T(0));
    } else if (t.ndim() == 2) {
      fill_xavier(t, t.dim(0), t.dim(1), rng);
    } else if (t.ndim() == 3) {
      fill_xavier(t, t.dim(0) * t.dim(1), t.dim(0) * t.dim(2), rng);
    } else if (t.ndim() == 4) {
      fill_xavier(t, t.dim(0) * t.dim(1) * t.dim(2), t.dim(0) * t.dim(1) * t.dim(3), rng);
    } else {
      std::fill(t.data.begin(), t.data.end(), T(0));
    }
  }
}

}  // namespace detail

template <typename T>
NamedTensors<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  detail::ParamBuilder<T> b;
  int64_t d = cfg.model_dim;
  b.conv2("enc.front.conv1", cfg.conv_kernel, 1, cfg.conv_channels1);
  b.norm("enc.front.ln1", int64_t(cfg.feature_dim) * cfg.conv_channels1);
  b.conv2("enc.front.conv2", cfg.conv_kernel, cfg.conv_channels1, cfg.conv_channels2);
  b.norm("enc.front.ln2", int64_t(cfg.freq_after_pool1()) * cfg.conv_channels2);
  b.dense("enc.front.proj", int64_t(cfg.freq_after_pool2()) * cfg.conv_channels2, d);
  for (int i = 0; i < cfg.enc_blocks; ++i)
    b.block("enc.blk" + std::to_string(i), cfg, /*with_cross=*/false);
  b.params["dec.embed"] = Tensor<T>({cfg.vocab_size, cfg.embed_dim});
  for (int i = 0; i < cfg.dec_conv_layers; ++i) {
    int64_t cin = i == 0 ? cfg.embed_dim : cfg.dec_conv_channels;
    b.conv1("dec.front.conv" + std::to_string(i), cfg.conv_kernel, cin, cfg.dec_conv_channels);
  }
  b.dense("dec.front.proj", cfg.dec_conv_channels, d);
  for (int i = 0; i < cfg.dec_blocks; ++i)
    b.block("dec.blk" + std::to_string(i), cfg, /*with_cross=*/true);
  b.dense("dec.out", d, cfg.vocab_size);
  detail::fill_params(b.params, seed);
  return b.params;
}

// CTC head tensors: optional extra encoder-style block plus a projection to
// vocab_size + 1 classes where class 0 is the blank.
template <typename T>
NamedTensors<T> init_ctc_head(const ModelConfig& cfg, uint64_t seed) {
  detail::ParamBuilder<T> b;
  if (cfg.ctc_adapter_block) b.block("ctc.adapter", cfg, /*with_cross=*/false);
  b.dense("ctc.out", cfg.model_dim, int64_t(cfg.vocab_size) + 1);
  detail::fill_params(b.params, seed);
  return b.params;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename T>
using ParamValues = std::map<std::string, Value<T>>;

template <typename T>
ParamValues<T> lift_params(Tape<T>& tp, const NamedTensors<T>& params) {
  ParamValues<T> out;
  for (const auto& [name, t] : params) out[name] = tp.leaf(t, "param");
  return out;
}

namespace detail {

template <typename T>
Value<T> pv(const ParamValues<T>& p, const std::string& name) {
  auto it = p.find(name);
  require(it != p.end(), "missing parameter: " + name);
  return it->second;
}

}  // namespace detail

// Scaled dot-product attention for one head:
// Dropout(Softmax(Q K^T / sqrt(d))) V, with optional causal/key masking.
template <typename T>
Value<T> self_attention(Tape<T>& tp, Value<T> q, Value<T> k, Value<T> v, bool causal,
                        double dropout_p, const std::vector<uint8_t>* key_valid = nullptr) {
  require(tp.val(q).cols() == tp.val(k).cols(), "attention: Q/K dim mismatch");
  require(tp.val(k).rows() == tp.val(v).rows(), "attention: K/V length mismatch");
  T scale = T(1.0 / std::sqrt(double(tp.val(q).cols())));
  auto scores = mul_scalar(tp, matmul(tp, q, transpose(tp, k)), scale);
  auto weights = attention_softmax(tp, scores, causal, key_valid);
  weights = dropout(tp, weights, dropout_p);
  return matmul(tp, weights, v);
}

// Heads are projected separately, attended, concatenated, and projected back.
template <typename T>
Value<T> multi_head_attention(Tape<T>& tp, const ParamValues<T>& p, const std::string& name,
                              int heads, Value<T> q_in, Value<T> kv_in, bool causal,
                              double dropout_p, const std::vector<uint8_t>* key_valid = nullptr) {
  using detail::pv;
  std::vector<Value<T>> head_out;
  head_out.reserve(size_t(heads));
  for (int h = 0; h < heads; ++h) {
    std::string hs = std::to_string(h);
    auto q = matmul(tp, q_in, pv(p, name + ".q" + hs));
    auto k = matmul(tp, kv_in, pv(p, name + ".k" + hs));
    auto v = matmul(tp, kv_in, pv(p, name + ".v" + hs));
    head_out.push_back(self_attention(tp, q, k, v, causal, dropout_p, key_valid));
  }
  auto cat = heads == 1 ? head_out[0] : concat_cols(tp, head_out);
  return matmul(tp, cat, pv(p, name + ".o"));
}

// Pre-LN residual block: x += MHA(LN(x)); optionally x += CrossMHA(LN(x));
// x += FFN(LN(x)) with FFN = linear -> relu -> linear.
template <typename T>
Value<T> transformer_block(Tape<T>& tp, const ParamValues<T>& p, const std::string& name,
                           const ModelConfig& cfg, Value<T> x, bool causal_self,
                           std::optional<Value<T>> enc_out = std::nullopt) {
  using detail::pv;
  bool has_cross = p.count(name + ".ln_cross.g") > 0;
  require(!has_cross || enc_out.has_value(), "decoder block requires encoder state");
  auto h = layer_norm(tp, x, pv(p, name + ".ln_self.g"), pv(p, name + ".ln_self.b"));
  x = add(tp, x, multi_head_attention(tp, p, name + ".self", cfg.num_heads, h, h, causal_self,
                                      cfg.dropout));
  if (has_cross) {
    auto c = layer_norm(tp, x, pv(p, name + ".ln_cross.g"), pv(p, name + ".ln_cross.b"));
    x = add(tp, x, multi_head_attention(tp, p, name + ".cross", cfg.num_heads, c, *enc_out,
                                        /*causal=*/false, cfg.dropout));
  }
  auto f = layer_norm(tp, x, pv(p, name + ".ln_ffn.g"), pv(p, name + ".ln_ffn.b"));
  auto ffn = linear(tp, relu(tp, linear(tp, f, pv(p, name + ".ffn.fc1.w"), pv(p, name + ".ffn.fc1.b"))),
                    pv(p, name + ".ffn.fc2.w"), pv(p, name + ".ffn.fc2.b"));
  return add(tp, x, ffn);
}

// Convolutional frontend: T x F features -> ceil(T/4) x model_dim.
template <typename T>
Value<T> encoder_frontend(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                          const Tensor<T>& features) {
  using detail::pv;
  require(features.ndim() == 2, "encoder_frontend: features must be T x F");
  int64_t frames = features.dim(0);
  require(frames >= 4, "encoder_frontend: need at least 4 frames");
  require(features.dim(1) == cfg.feature_dim, "encoder_frontend: feature dim mismatch");

  Tensor<T> x3 = features;
  x3.shape = {frames, cfg.feature_dim, 1};
  auto x = tp.constant(std::move(x3), "features");

  auto conv_block = [&](Value<T> in, const std::string& conv, const std::string& ln) {
    auto c = conv2d_same(tp, in, pv(p, conv + ".k"), pv(p, conv + ".b"));
    int64_t t = tp.val(c).dim(0), f = tp.val(c).dim(1), ch = tp.val(c).dim(2);
    auto flat = reshape(tp, c, {t, f * ch});
    auto n = layer_norm(tp, flat, pv(p, ln + ".g"), pv(p, ln + ".b"));
    auto r = relu(tp, reshape(tp, n, {t, f, ch}));
    return maxpool2x2_ceil(tp, r);
  };
  x = conv_block(x, "enc.front.conv1", "enc.front.ln1");
  x = conv_block(x, "enc.front.conv2", "enc.front.ln2");
  int64_t tau = tp.val(x).dim(0);
  auto flat = reshape(tp, x, {tau, tp.val(x).dim(1) * tp.val(x).dim(2)});
  return linear(tp, flat, pv(p, "enc.front.proj.w"), pv(p, "enc.front.proj.b"));
}

template <typename T>
Value<T> encoder_forward(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                         const Tensor<T>& features) {
  auto x = encoder_frontend(tp, p, cfg, features);
  for (int i = 0; i < cfg.enc_blocks; ++i)
    x = transformer_block(tp, p, "enc.blk" + std::to_string(i), cfg, x, /*causal_self=*/false);
  return x;
}

// Token embedding followed by causal 1-D convolutions, projected to d.
template <typename T>
Value<T> decoder_frontend(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                          const std::vector<int>& prefix) {
  using detail::pv;
  require(!prefix.empty(), "decoder_frontend: empty token sequence");
  require(prefix.front() == SpecialIds::bos, "decoder_frontend: prefix must start with BOS");
  auto x = embedding(tp, pv(p, "dec.embed"), prefix);
  for (int i = 0; i < cfg.dec_conv_layers; ++i) {
    std::string name = "dec.front.conv" + std::to_string(i);
    x = relu(tp, conv1d_causal(tp, x, pv(p, name + ".k"), pv(p, name + ".b")));
  }
  return linear(tp, x, pv(p, "dec.front.proj.w"), pv(p, "dec.front.proj.b"));
}

template <typename T>
Value<T> decoder_forward(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                         Value<T> enc_out, const std::vector<int>& prefix) {
  using detail::pv;
  auto x = decoder_frontend(tp, p, cfg, prefix);
  for (int i = 0; i < cfg.dec_blocks; ++i)
    x = transformer_block(tp, p, "dec.blk" + std::to_string(i), cfg, x, /*causal_self=*/true,
                          enc_out);
  return linear(tp, x, pv(p, "dec.out.w"), pv(p, "dec.out.b"));
}

// Full forward pass: position i of the returned logits depends only on
// prefix[0..i] and the whole feature sequence.
template <typename T>
Value<T> model_forward(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                       const Tensor<T>& features, const std::vector<int>& prefix) {
  auto enc = encoder_forward(tp, p, cfg, features);
  return decoder_forward(tp, p, cfg, enc, prefix);
}

// Encoder-only path used for CTC: optional adapter block, then projection to
// vocab_size + 1 classes and log-softmax.
template <typename T>
Value<T> ctc_head_forward(Tape<T>& tp, const ParamValues<T>& p, const ModelConfig& cfg,
                          const Tensor<T>& features) {
  using detail::pv;
  auto x = encoder_forward(tp, p, cfg, features);
  if (p.count("ctc.adapter.ln_self.g"))
    x = transformer_block(tp, p, "ctc.adapter", cfg, x, /*causal_self=*/false);
  auto logits = linear(tp, x, pv(p, "ctc.out.w"), pv(p, "ctc.out.b"));
  return log_softmax_rows(tp, logits);
}

// Mean token cross-entropy; targets must end with EOS, pad positions are
// excluded from the mean.
template <typename T>
Value<T> seq_cross_entropy(Tape<T>& tp, Value<T> logits, const std::vector<int>& targets,
                           int pad_id = SpecialIds::pad) {
  int last = -1;
  for (int t : targets)
    if (t != pad_id) last = t;
  require(last == SpecialIds::eos, "seq_cross_entropy: targets must end with EOS");
  return cross_entropy_mean(tp, logits, targets, pad_id);
}

// Teacher forcing: tokens (no BOS/EOS) -> decoder input prefix and targets.
inline std::pair<std::vector<int>, std::vector<int>> teacher_forcing(const std::vector<int>& tokens) {
  std::vector<int> prefix{SpecialIds::bos};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  std::vector<int> targets = tokens;
  targets.push_back(SpecialIds::eos);
  return {prefix, targets};
}

}  // namespace wsasr
