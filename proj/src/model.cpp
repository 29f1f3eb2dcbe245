#include "relab/model.hpp"

#include <algorithm>
#include <cstring>

#include "relab/surgery.hpp"

namespace relab {

void ModelConfig::validate() const {
  if (num_layers < 1) throw InvalidArgument("model config: num_layers must be >= 1");
  if (num_heads == 0 || hidden_size % num_heads != 0) {
    throw InvalidArgument("model config: hidden_size " + std::to_string(hidden_size) +
                          " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (intermediate_size == 0 || max_seq_len == 0 || type_vocab_size == 0) {
    throw InvalidArgument("model config: sizes must be positive");
  }
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw InvalidArgument("model config: vocab_size must exceed the " + std::to_string(kNumSpecialTokens) +
                          " special tokens");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"hidden_size", c.hidden_size},
                     {"num_heads", c.num_heads},
                     {"intermediate_size", c.intermediate_size},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"type_vocab_size", c.type_vocab_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_layers = j.value("num_layers", d.num_layers);
  c.hidden_size = j.value("hidden_size", d.hidden_size);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.intermediate_size = j.value("intermediate_size", d.intermediate_size);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.type_vocab_size = j.value("type_vocab_size", d.type_vocab_size);
}

namespace {

constexpr const char* kLayerSuffixes[] = {
    "attn.query.weight",         "attn.query.bias",         "attn.key.weight",        "attn.key.bias",
    "attn.value.weight",         "attn.value.bias",         "attn.output.weight",     "attn.output.bias",
    "attn.ln.gamma",             "attn.ln.beta",            "ffn.intermediate.weight", "ffn.intermediate.bias",
    "ffn.output.weight",         "ffn.output.bias",         "ffn.ln.gamma",           "ffn.ln.beta",
};

constexpr const char* kEmbeddingNames[] = {"embed.token", "embed.position", "embed.type", "embed.ln.gamma",
                                           "embed.ln.beta"};

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<std::string> layer_param_names(std::size_t layer) {
  std::vector<std::string> names;
  const std::string prefix = "layer." + std::to_string(layer) + ".";
  for (const char* s : kLayerSuffixes) names.push_back(prefix + s);
  return names;
}

std::vector<std::string> canonical_names(const ModelConfig& config) {
  std::vector<std::string> names(std::begin(kEmbeddingNames), std::end(kEmbeddingNames));
  for (std::size_t i = 1; i <= config.num_layers; ++i) {
    auto layer = layer_param_names(i);
    names.insert(names.end(), layer.begin(), layer.end());
  }
  return names;
}

bool is_embedding_param(const std::string& name) { return name.rfind("embed.", 0) == 0; }

bool is_layer_norm_param(const std::string& name) {
  return ends_with(name, ".ln.gamma") || ends_with(name, ".ln.beta");
}

std::size_t layer_of(const std::string& name) {
  if (name.rfind("layer.", 0) != 0) return 0;
  return std::stoul(name.substr(6, name.find('.', 6) - 6));
}

std::string with_layer(const std::string& name, std::size_t to) {
  const auto dot = name.find('.', 6);
  return "layer." + std::to_string(to) + name.substr(dot);
}

Shape canonical_shape(const ModelConfig& c, const std::string& name) {
  const std::size_t h = c.hidden_size, f = c.intermediate_size;
  if (name == "embed.token") return {c.vocab_size, h};
  if (name == "embed.position") return {c.max_seq_len, h};
  if (name == "embed.type") return {c.type_vocab_size, h};
  if (is_layer_norm_param(name)) return {h};
  if (ends_with(name, "ffn.intermediate.weight")) return {h, f};
  if (ends_with(name, "ffn.intermediate.bias")) return {f};
  if (ends_with(name, "ffn.output.weight")) return {f, h};
  if (ends_with(name, ".weight")) return {h, h};
  if (ends_with(name, ".bias")) return {h};
  throw InvalidArgument("unknown parameter name " + name);
}

std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t h = c.hidden_size, f = c.intermediate_size;
  const std::size_t embeddings = (c.vocab_size + c.max_seq_len + c.type_vocab_size) * h + 2 * h;
  const std::size_t per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
  return embeddings + c.num_layers * per_layer;
}

void Checkpoint::validate() const {
  config.validate();
  const auto names = canonical_names(config);
  if (params.size() != names.size()) {
    throw InvalidArgument("checkpoint has " + std::to_string(params.size()) + " tensors, expected " +
                          std::to_string(names.size()));
  }
  for (const auto& name : names) {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidArgument("checkpoint is missing parameter " + name);
    const auto want = canonical_shape(config, name);
    if (it->second.shape() != want) {
      throw ShapeError("parameter " + name + " has shape " + shape_to_string(it->second.shape()) + ", expected " +
                       shape_to_string(want));
    }
  }
}

std::size_t Checkpoint::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
  if (!(a.config == b.config) || a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || !bit_equal(t, it->second)) return false;
  }
  return true;
}

std::uint64_t checksum(const Checkpoint& checkpoint) {
  std::uint64_t h = fnv1a64(nlohmann::json(checkpoint.config).dump());
  for (const auto& name : canonical_names(checkpoint.config)) {
    auto it = checkpoint.params.find(name);
    if (it == checkpoint.params.end()) continue;
    h = fnv1a64(name, h);
    const auto bytes = it->second.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size() * sizeof(float)), h);
  }
  return h;
}

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint ck{config, {}};
  Rng rng(seed);
  const ReinitDistribution dist;
  for (const auto& name : canonical_names(config)) {
    const auto shape = canonical_shape(config, name);
    if (ends_with(name, ".ln.gamma")) {
      ck.params.emplace(name, Tensor<float>::filled(shape, 1.0f));
    } else if (ends_with(name, ".ln.beta")) {
      ck.params.emplace(name, Tensor<float>(shape));
    } else {
      ck.params.emplace(name, sample_truncated_normal(dist, shape, rng));
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Encoder

PackedBatch pack_batch(std::span<const SequenceView> sequences, const ModelConfig& config, bool trim_padding) {
  PackedBatch batch;
  bool any_padding_kept = false;
  for (const auto& seq : sequences) {
    if (seq.tokens.size() != seq.types.size()) {
      throw ShapeError("pack_batch: " + std::to_string(seq.tokens.size()) + " token ids but " +
                       std::to_string(seq.types.size()) + " type ids");
    }
    if (seq.tokens.size() > config.max_seq_len) {
      throw InvalidArgument("sequence length " + std::to_string(seq.tokens.size()) + " exceeds max_seq_len " +
                            std::to_string(config.max_seq_len));
    }
    std::size_t content = seq.tokens.size();
    while (content > 0 && seq.tokens[content - 1] == kPadId) --content;
    if (content == 0) throw InvalidArgument("pack_batch: sequence contains only padding");
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
      const auto id = seq.tokens[i];
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw InvalidArgument("token id " + std::to_string(id) + " at position " + std::to_string(i) +
                              " out of range for vocab_size " + std::to_string(config.vocab_size));
      }
      if (id == kPadId && i < content) {
        throw InvalidArgument("padding token at position " + std::to_string(i) + " precedes content");
      }
      const auto ty = seq.types[i];
      if (ty < 0 || static_cast<std::size_t>(ty) >= config.type_vocab_size) {
        throw InvalidArgument("type id " + std::to_string(ty) + " at position " + std::to_string(i) +
                              " out of range for type_vocab_size " + std::to_string(config.type_vocab_size));
      }
    }
    const std::size_t kept = trim_padding ? content : seq.tokens.size();
    const std::size_t offset = batch.tokens.size();
    batch.segments.push_back({offset, kept});
    batch.pool_segments.push_back({offset, content});
    for (std::size_t i = 0; i < kept; ++i) {
      batch.tokens.push_back(seq.tokens[i]);
      batch.types.push_back(seq.types[i]);
      batch.positions.push_back(static_cast<std::int32_t>(i));
    }
    any_padding_kept = any_padding_kept || kept != content;
  }
  if (any_padding_kept) {
    batch.key_valid.reserve(batch.tokens.size());
    for (auto id : batch.tokens) batch.key_valid.push_back(id != kPadId ? 1 : 0);
  }
  return batch;
}

template <typename T>
std::vector<Var<T>> encode_packed(const ParamVars<T>& p, const ModelConfig& config,
                                  const PackedBatch& batch, std::vector<Tensor<T>>* attention_probs) {
  auto at = [&p](const std::string& name) -> Var<T> {
    auto it = p.find(name);
    if (it == p.end()) throw InvalidArgument("encoder: missing parameter " + name);
    return it->second;
  };
  constexpr T eps = T(1e-12);
  std::vector<Var<T>> hidden;
  hidden.reserve(config.num_layers + 1);

  auto x = add(add(embedding_lookup(at("embed.token"), std::span<const std::int32_t>(batch.tokens)),
                   embedding_lookup(at("embed.position"), std::span<const std::int32_t>(batch.positions))),
               embedding_lookup(at("embed.type"), std::span<const std::int32_t>(batch.types)));
  x = layer_norm(x, at("embed.ln.gamma"), at("embed.ln.beta"), eps);
  hidden.push_back(x);

  for (std::size_t i = 1; i <= config.num_layers; ++i) {
    const std::string l = "layer." + std::to_string(i) + ".";
    auto linear = [&](Var<T> in, const std::string& name) {
      return add(matmul(in, at(l + name + ".weight")), at(l + name + ".bias"));
    };
    auto q = linear(x, "attn.query");
    auto k = linear(x, "attn.key");
    auto v = linear(x, "attn.value");
    auto ctx = attention(q, k, v, std::span<const Segment>(batch.segments), config.num_heads,
                         std::span<const std::uint8_t>(batch.key_valid), attention_probs);
    auto attn_out = linear(ctx, "attn.output");
    x = layer_norm(add(x, attn_out), at(l + "attn.ln.gamma"), at(l + "attn.ln.beta"), eps);
    auto inter = gelu(linear(x, "ffn.intermediate"));
    auto ffn_out = linear(inter, "ffn.output");
    x = layer_norm(add(x, ffn_out), at(l + "ffn.ln.gamma"), at(l + "ffn.ln.beta"), eps);
    hidden.push_back(x);
  }
  return hidden;
}

template std::vector<Var<float>> encode_packed(const ParamVars<float>&, const ModelConfig&,
                                               const PackedBatch&, std::vector<Tensor<float>>*);
template std::vector<Var<double>> encode_packed(const ParamVars<double>&, const ModelConfig&,
                                                const PackedBatch&, std::vector<Tensor<double>>*);

EncoderOutput encode(const Checkpoint& checkpoint, std::span<const std::int32_t> token_ids,
                     std::span<const std::int32_t> type_ids, bool keep_attention) {
  const SequenceView view{token_ids, type_ids};
  const auto batch = pack_batch(std::span<const SequenceView>(&view, 1), checkpoint.config, false);
  Tape<float> tape;
  const auto params = bind_params(tape, checkpoint.params, false);
  EncoderOutput out;
  const auto hidden =
      encode_packed(params, checkpoint.config, batch, keep_attention ? &out.attention_probs : nullptr);
  for (const auto& h : hidden) out.hidden_states.push_back(h.value());
  return out;
}

}  // namespace relab
