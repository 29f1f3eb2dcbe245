#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relab/adam.hpp"
#include "relab/autodiff.hpp"

namespace relab {

// Reserved token ids shared by the model and the data generators.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kSepId = 2;
inline constexpr std::int32_t kMaskId = 3;
inline constexpr std::int32_t kNumSpecialTokens = 4;

struct ModelConfig {
  std::size_t num_layers = 6;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 4;
  std::size_t intermediate_size = 128;
  std::size_t vocab_size = 68;
  std::size_t max_seq_len = 32;
  std::size_t type_vocab_size = 2;

  // Throws InvalidArgument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Canonical parameter names in storage order: embeddings first, then layers 1..L.
std::vector<std::string> canonical_names(const ModelConfig& config);
// Names belonging to layer `layer` (1-based), in canonical order.
std::vector<std::string> layer_param_names(std::size_t layer);
Shape canonical_shape(const ModelConfig& config, const std::string& name);
bool is_embedding_param(const std::string& name);
bool is_layer_norm_param(const std::string& name);
// 1-based layer index of a layer parameter, 0 for embeddings.
std::size_t layer_of(const std::string& name);
// Renames `layer.<i>.rest` to `layer.<to>.rest`.
std::string with_layer(const std::string& name, std::size_t to);
std::size_t expected_param_count(const ModelConfig& config);

struct Checkpoint {
  ModelConfig config;
  ParamMap<float> params;

  // Throws unless every canonical name is present once with the canonical shape.
  void validate() const;
  std::size_t param_count() const;
};

bool bit_equal(const Checkpoint& a, const Checkpoint& b);
// FNV-1a over config and every parameter's bytes in canonical order.
std::uint64_t checksum(const Checkpoint& checkpoint);

template <typename T>
ParamMap<T> cast_params(const ParamMap<float>& params) {
  ParamMap<T> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<T>());
  return out;
}

// All weights and biases from the truncated-normal initializer; layer norms
// at gamma = 1, beta = 0.
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Encoder

struct SequenceView {
  std::span<const std::int32_t> tokens;
  std::span<const std::int32_t> types;
};

// Several sequences packed row-wise. Padding may only trail a sequence.
struct PackedBatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> types;
  std::vector<std::int32_t> positions;
  std::vector<Segment> segments;       // attention extent (includes kept padding)
  std::vector<Segment> pool_segments;  // non-padding rows of each sequence
  std::vector<std::uint8_t> key_valid; // empty when no padding rows are kept
};

// Validates ids against `config`. With `trim_padding`, trailing [PAD] rows are
// dropped entirely, which leaves non-padding outputs unchanged.
PackedBatch pack_batch(std::span<const SequenceView> sequences, const ModelConfig& config, bool trim_padding = true);

template <typename T>
using ParamVars = std::map<std::string, Var<T>>;

// Registers params on the tape: trainable ones as named parameters, the rest
// as constants.
template <typename T>
ParamVars<T> bind_params(Tape<T>& tape, const ParamMap<T>& params, bool trainable) {
  ParamVars<T> vars;
  for (const auto& [name, value] : params) {
    vars.emplace(name, trainable ? tape.parameter(name, value) : tape.constant(value));
  }
  return vars;
}

// Post-layer-norm BERT encoder. Returns L+1 packed hidden states: the
// embedding output followed by each layer's output.
template <typename T>
std::vector<Var<T>> encode_packed(const ParamVars<T>& params, const ModelConfig& config,
                                  const PackedBatch& batch, std::vector<Tensor<T>>* attention_probs = nullptr);

struct EncoderOutput {
  std::vector<Tensor<float>> hidden_states;  // L+1 tensors of [seq_len, hidden]
  std::vector<Tensor<float>> attention_probs; // filled on request, layer-major then head
};

EncoderOutput encode(const Checkpoint& checkpoint, std::span<const std::int32_t> token_ids,
                     std::span<const std::int32_t> type_ids, bool keep_attention = false);

}  // namespace relab
