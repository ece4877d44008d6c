#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnkit/attention.hpp"
#include "attnkit/autodiff.hpp"
#include "attnkit/tensor.hpp"
#include "attnkit/tensor_io.hpp"

namespace attnkit {

// Named leaf variables in a stable insertion order. The order fixes both
// RNG consumption at init and file layout in checkpoints, so a seed fully
// determines a model.
template <class Scalar>
class ParamSet {
 public:
  ag::Var<Scalar>& add(const std::string& name, Tensor<Scalar> value) {
    if (vars_.count(name)) throw config_error(msg("parameter ", name, " registered twice"));
    order_.push_back(name);
    auto [it, inserted] = vars_.emplace(name, ag::leaf(std::move(value)));
    return it->second;
  }

  ag::Var<Scalar>& at(const std::string& name) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range(msg("no parameter named ", name));
    return it->second;
  }
  const ag::Var<Scalar>& at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range(msg("no parameter named ", name));
    return it->second;
  }

  bool has(const std::string& name) const { return vars_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += static_cast<std::size_t>(at(name).value().numel());
    return n;
  }

  void zero_grads() {
    for (const auto& name : order_) at(name).zero_grad();
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, ag::Var<Scalar>> vars_;
};

enum class AttentionMode { dense, dilated };

inline const char* attention_mode_name(AttentionMode m) { return m == AttentionMode::dense ? "dense" : "dilated"; }

// Geometry and width of the toy image encoder. Two named scales exist:
// full-size presets mirroring the reference training setup, and desk
// presets small enough for exhaustive checking.
struct EncoderConfig {
  Index image_size = 32;
  Index patch_size = 4;
  Index channels = 1;
  Index embed_dim = 64;   // D
  int num_layers = 2;     // L
  int num_heads = 4;      // h
  double mlp_ratio = 4.0;
  AttentionMode attention_mode = AttentionMode::dense;
  Index segment_len = 0;  // dilated only
  Index interval = 1;     // dilated only
  Kernel kernel = Kernel::naive;
  Index tile_size = 1;

  Index grid() const { return image_size / patch_size; }
  Index num_tokens() const { return grid() * grid(); }
  Index patch_dim() const { return patch_size * patch_size * channels; }
  Index head_dim() const { return embed_dim / num_heads; }
  Index mlp_hidden() const { return static_cast<Index>(static_cast<double>(embed_dim) * mlp_ratio); }

  AttentionConfig attention_config() const {
    AttentionConfig a;
    a.seq_len = num_tokens();
    a.segment_len = attention_mode == AttentionMode::dense ? num_tokens() : segment_len;
    a.interval = attention_mode == AttentionMode::dense ? 1 : interval;
    a.num_heads = num_heads;
    a.head_dim = head_dim();
    a.head_offsets = AttentionConfig::spread_offsets(num_heads, a.interval);
    a.kernel = kernel;
    a.tile_size = tile_size;
    return a;
  }

  void validate() const {
    if (image_size < 1 || patch_size < 1 || channels < 1)
      throw config_error("encoder: image_size, patch_size, channels must be positive");
    if (image_size % patch_size != 0)
      throw config_error(msg("encoder: patch size ", patch_size, " does not divide image size ", image_size));
    if (embed_dim < 1 || num_heads < 1 || num_layers < 0) throw config_error("encoder: bad width or depth");
    if (embed_dim % num_heads != 0)
      throw config_error(msg("encoder: embed dim ", embed_dim, " not divisible by ", num_heads, " heads"));
    if (mlp_ratio <= 0 || mlp_hidden() < 1) throw config_error("encoder: mlp_ratio must yield a positive width");
    attention_config().validate(attention_mode == AttentionMode::dilated);
  }

  // 64x64 grayscale, 64 tokens, the reference student width.
  static EncoderConfig paper_student() {
    EncoderConfig c;
    c.image_size = 64;
    c.patch_size = 8;
    c.embed_dim = 384;
    c.num_layers = 6;
    c.num_heads = 6;
    c.attention_mode = AttentionMode::dilated;
    c.segment_len = 16;
    c.interval = 2;
    return c;
  }

  // Dense stand-in for the large teacher at the same token count.
  static EncoderConfig paper_teacher() {
    EncoderConfig c;
    c.image_size = 64;
    c.patch_size = 8;
    c.embed_dim = 768;
    c.num_layers = 12;
    c.num_heads = 12;
    return c;
  }

  // 32x32 grayscale, 64 tokens, narrow enough for finite differences.
  static EncoderConfig desk_student() {
    EncoderConfig c;
    c.embed_dim = 64;
    c.num_layers = 2;
    c.num_heads = 4;
    c.attention_mode = AttentionMode::dilated;
    c.segment_len = 16;
    c.interval = 2;
    return c;
  }

  static EncoderConfig desk_teacher() {
    EncoderConfig c;
    c.embed_dim = 64;
    c.num_layers = 4;
    c.num_heads = 4;
    return c;
  }
};

// Non-overlapping patches flattened row-major over (y, x, channel).
// Pure data movement; gradients never reach the raw image.
template <class Scalar>
Tensor<Scalar> extract_patches(const Tensor<Scalar>& image, const EncoderConfig& cfg) {
  if (image.rank() != 3 || image.shape()[0] != cfg.image_size || image.shape()[1] != cfg.image_size ||
      image.shape()[2] != cfg.channels)
    throw dimension_error(msg("extract_patches: image ", shape_str(image.shape()), ", expected [", cfg.image_size,
                              "x", cfg.image_size, "x", cfg.channels, "]"));
  const Index p = cfg.patch_size, g = cfg.grid(), ch = cfg.channels, w = cfg.image_size;
  Tensor<Scalar> out({g * g, cfg.patch_dim()});
  for (Index gy = 0; gy < g; ++gy)
    for (Index gx = 0; gx < g; ++gx) {
      const Index token = gy * g + gx;
      for (Index py = 0; py < p; ++py)
        for (Index px = 0; px < p; ++px)
          for (Index c = 0; c < ch; ++c)
            out(token, (py * p + px) * ch + c) = image[((gy * p + py) * w + (gx * p + px)) * ch + c];
    }
  return out;
}

namespace detail {

inline std::string block_prefix(int i) { return msg("block", i, "."); }

// Attention sublayer on the tape. Dense mode scores all token pairs; the
// dilated mode slices each head's offset grid per segment, attends inside
// the slice, and scatters the rows back, head by head.
template <class Scalar>
ag::Var<Scalar> attention_mix(const ag::Var<Scalar>& x, ParamSet<Scalar>& p, const std::string& prefix,
                              const EncoderConfig& cfg) {
  const AttentionConfig acfg = cfg.attention_config();
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.head_dim()));
  std::vector<ag::Var<Scalar>> heads;
  for (int j = 0; j < cfg.num_heads; ++j) {
    auto q = ag::matmul(x, p.at(msg(prefix, "attn.wq", j)));
    auto k = ag::matmul(x, p.at(msg(prefix, "attn.wk", j)));
    auto v = ag::matmul(x, p.at(msg(prefix, "attn.wv", j)));
    if (cfg.attention_mode == AttentionMode::dense) {
      auto scores = ag::scale(ag::matmul(q, ag::transpose(k)), sc);
      heads.push_back(ag::matmul(ag::softmax_rows(scores), v));
      continue;
    }
    const Index gamma = acfg.head_offsets[static_cast<std::size_t>(j)];
    ag::Var<Scalar> head;
    bool first = true;
    for (Index s = 0; s < acfg.num_segments(); ++s) {
      const auto view = make_segment_view(acfg.seq_len, acfg.segment_len, acfg.interval, s, gamma);
      const auto m = static_cast<Index>(view.row_indices.size());
      if (m == 0) continue;
      auto qs = ag::slice_rows_strided(q, view.row_indices.front(), acfg.interval, m);
      auto ks = ag::slice_rows_strided(k, view.row_indices.front(), acfg.interval, m);
      auto vs = ag::slice_rows_strided(v, view.row_indices.front(), acfg.interval, m);
      auto scores = ag::scale(ag::matmul(qs, ag::transpose(ks)), sc);
      auto placed = ag::scatter_rows(ag::matmul(ag::softmax_rows(scores), vs), view.row_indices, acfg.seq_len);
      head = first ? placed : ag::add(head, placed);
      first = false;
    }
    heads.push_back(head);
  }
  auto cat = heads.size() == 1 ? heads.front() : ag::concat_cols(heads);
  return ag::add_rowvec(ag::matmul(cat, p.at(prefix + "attn.wo")), p.at(prefix + "attn.bo"));
}

}  // namespace detail

template <class Scalar>
struct EncoderTape {
  ag::Var<Scalar> output;
  std::vector<ag::Var<Scalar>> features;  // post-block residual streams, length L
};

// Pre-norm transformer forward pass, recorded on the tape so every
// parameter is reachable by backward(). features[i] is block i's residual
// stream output; the returned output adds a final layer norm on top.
template <class Scalar>
EncoderTape<Scalar> encoder_forward(const Tensor<Scalar>& image, ParamSet<Scalar>& params,
                                    const EncoderConfig& cfg) {
  cfg.validate();
  auto patches = ag::leaf(extract_patches(image, cfg));
  auto x = ag::add(ag::add_rowvec(ag::matmul(patches, params.at("patch.w")), params.at("patch.b")),
                   params.at("pos"));
  EncoderTape<Scalar> tape;
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string b = detail::block_prefix(i);
    auto normed = ag::layer_norm(x, params.at(b + "ln1.g"), params.at(b + "ln1.b"));
    x = ag::add(x, detail::attention_mix(normed, params, b, cfg));
    auto normed2 = ag::layer_norm(x, params.at(b + "ln2.g"), params.at(b + "ln2.b"));
    auto hidden = ag::gelu(ag::add_rowvec(ag::matmul(normed2, params.at(b + "mlp.w1")), params.at(b + "mlp.b1")));
    auto mixed = ag::add_rowvec(ag::matmul(hidden, params.at(b + "mlp.w2")), params.at(b + "mlp.b2"));
    x = ag::add(x, mixed);
    tape.features.push_back(x);
  }
  tape.output = ag::layer_norm(x, params.at("final.g"), params.at("final.b"));
  return tape;
}

template <class Scalar>
struct EncoderValues {
  Tensor<Scalar> output;
  std::vector<Tensor<Scalar>> features;
};

// Forward pass with the tape discarded; for teachers and inference.
template <class Scalar>
EncoderValues<Scalar> encoder_infer(const Tensor<Scalar>& image, ParamSet<Scalar>& params,
                                    const EncoderConfig& cfg) {
  auto tape = encoder_forward(image, params, cfg);
  EncoderValues<Scalar> out;
  out.output = tape.output.value();
  for (auto& f : tape.features) out.features.push_back(f.value());
  return out;
}

// Truncated normal (sigma 0.02) for projections and position table, ones
// for norm gains, zeros for every bias. Insertion order is the RNG
// consumption order; keep it in sync with the forward pass naming.
template <class Scalar>
ParamSet<Scalar> init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const Scalar sigma = Scalar(0.02);
  const Index d_model = cfg.embed_dim, d_head = cfg.head_dim(), hidden = cfg.mlp_hidden();
  ParamSet<Scalar> p;
  p.add("patch.w", trunc_normal<Scalar>({cfg.patch_dim(), d_model}, rng, sigma));
  p.add("patch.b", Tensor<Scalar>::zeros({d_model}));
  p.add("pos", trunc_normal<Scalar>({cfg.num_tokens(), d_model}, rng, sigma));
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string b = detail::block_prefix(i);
    p.add(b + "ln1.g", Tensor<Scalar>::full({d_model}, Scalar(1)));
    p.add(b + "ln1.b", Tensor<Scalar>::zeros({d_model}));
    for (int j = 0; j < cfg.num_heads; ++j) {
      p.add(msg(b, "attn.wq", j), trunc_normal<Scalar>({d_model, d_head}, rng, sigma));
      p.add(msg(b, "attn.wk", j), trunc_normal<Scalar>({d_model, d_head}, rng, sigma));
      p.add(msg(b, "attn.wv", j), trunc_normal<Scalar>({d_model, d_head}, rng, sigma));
    }
    p.add(b + "attn.wo", trunc_normal<Scalar>({d_model, d_model}, rng, sigma));
    p.add(b + "attn.bo", Tensor<Scalar>::zeros({d_model}));
    p.add(b + "ln2.g", Tensor<Scalar>::full({d_model}, Scalar(1)));
    p.add(b + "ln2.b", Tensor<Scalar>::zeros({d_model}));
    p.add(b + "mlp.w1", trunc_normal<Scalar>({d_model, hidden}, rng, sigma));
    p.add(b + "mlp.b1", Tensor<Scalar>::zeros({hidden}));
    p.add(b + "mlp.w2", trunc_normal<Scalar>({hidden, d_model}, rng, sigma));
    p.add(b + "mlp.b2", Tensor<Scalar>::zeros({d_model}));
  }
  p.add("final.g", Tensor<Scalar>::full({d_model}, Scalar(1)));
  p.add("final.b", Tensor<Scalar>::zeros({d_model}));
  return p;
}

// Fresh leaves with copied values; the clone shares no graph nodes with
// the original, so stepping one leaves the other untouched.
template <class Scalar>
ParamSet<Scalar> clone_params(const ParamSet<Scalar>& params) {
  ParamSet<Scalar> out;
  for (const auto& name : params.names()) out.add(name, params.at(name).value());
  return out;
}

// Checkpoint layout: one DTNSR1 file per tensor plus manifest.json mapping
// names to files and shapes. Parameter names never contain path
// separators, so name + ".tnsr" is a safe flat layout.
template <class Scalar>
void save_params(const std::filesystem::path& dir, const ParamSet<Scalar>& params) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io_error(msg("cannot create checkpoint directory ", dir.string(), ": ", ec.message()));
  nlohmann::json manifest;
  manifest["format"] = "attnkit-checkpoint-v1";
  manifest["dtype"] = dtype_name(dtype_of<Scalar>());
  manifest["order"] = params.names();
  for (const auto& name : params.names()) {
    if (name.find('/') != std::string::npos || name.find('\\') != std::string::npos)
      throw io_error(msg("parameter name ", name, " would escape the checkpoint directory"));
    const std::string file = name + ".tnsr";
    const auto& value = params.at(name).value();
    save_tensor(dir / file, value);
    manifest["tensors"][name] = {{"file", file}, {"shape", value.shape()}};
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw io_error(msg("cannot write ", (dir / "manifest.json").string()));
  out << manifest.dump(2) << "\n";
}

template <class Scalar>
ParamSet<Scalar> load_params(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw io_error(msg("cannot open ", (dir / "manifest.json").string()));
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(msg("malformed checkpoint manifest: ", e.what()));
  }
  if (!manifest.contains("order") || !manifest.contains("tensors"))
    throw io_error("checkpoint manifest lacks order/tensors entries");
  ParamSet<Scalar> p;
  for (const auto& name : manifest["order"].get<std::vector<std::string>>()) {
    const auto& entry = manifest["tensors"].at(name);
    Tensor<Scalar> value = load_tensor<Scalar>(dir / entry.at("file").get<std::string>());
    const auto expect = entry.at("shape").get<std::vector<Index>>();
    if (value.shape() != expect)
      throw io_error(msg("checkpoint tensor ", name, " is ", shape_str(value.shape()), ", manifest says ",
                         shape_str(expect)));
    p.add(name, std::move(value));
  }
  return p;
}

}  // namespace attnkit
