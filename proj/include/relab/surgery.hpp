#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relab/model.hpp"
#include "relab/rng.hpp"

namespace relab {

// N(mu, sigma^2) conditioned on the open interval (lower, upper).
struct ReinitDistribution {
  double mu = 0.0;
  double sigma = 0.02;
  double lower = -0.04;
  double upper = 0.04;

  void validate() const;
};

// Rejection sampling: out-of-range draws are redrawn.
Tensor<float> sample_truncated_normal(const ReinitDistribution& dist, const Shape& shape, Rng& rng);

enum class SurgeryKind { identity, progressive, block_reinit, block_preserve, single_layer, permute };

std::string to_string(SurgeryKind kind);
SurgeryKind surgery_kind_from_string(const std::string& s);

struct SurgeryPlan {
  SurgeryKind kind = SurgeryKind::identity;
  std::size_t k = 0;       // progressive: keep layers 1..k; single_layer: the layer to reset
  std::size_t start = 1;   // block kinds, 1-based first layer of the block
  std::size_t length = 3;  // block kinds
  // permute: permutation[i - 1] is the new (1-based) position of layer i.
  std::vector<std::size_t> permutation;
  bool preserve_layer_norm = false;
  bool zero_biases = false;
  std::uint64_t seed = 0;

  static SurgeryPlan identity() { return {}; }
  static SurgeryPlan progressive(std::size_t k, std::uint64_t seed = 0);
  static SurgeryPlan block_reinit(std::size_t start, std::uint64_t seed = 0, std::size_t length = 3);
  static SurgeryPlan block_preserve(std::size_t start, std::uint64_t seed = 0, std::size_t length = 3);
  static SurgeryPlan single_layer(std::size_t k, std::uint64_t seed = 0);
  static SurgeryPlan permute(std::vector<std::size_t> permutation);

  void validate(std::size_t num_layers) const;
  // Whether layer `layer` (1-based) is resampled under this plan.
  bool reinitializes(std::size_t layer) const;
};

void to_json(nlohmann::json& j, const SurgeryPlan& p);
void from_json(const nlohmann::json& j, SurgeryPlan& p);

// Every parameter name of the output checkpoint appears in exactly one list.
// `moved` pairs are (source name, destination name).
struct SurgeryReport {
  std::vector<std::string> reinitialized;
  std::vector<std::string> preserved;
  std::vector<std::pair<std::string, std::string>> moved;
};

void to_json(nlohmann::json& j, const SurgeryReport& r);

struct SurgeryResult {
  Checkpoint checkpoint;
  SurgeryReport report;
};

// Embeddings are never touched. Reinitialised layers get fresh truncated-normal
// weights and biases (zeros with zero_biases) and layer norms reset to (1, 0)
// unless preserve_layer_norm. Layers are visited in order 1..L and parameters
// in canonical order, all drawing from one stream seeded by plan.seed.
SurgeryResult apply_surgery(const Checkpoint& checkpoint, const SurgeryPlan& plan);

// Fisher-Yates over 1..L seeded by derive_seed(master_seed, "perm/<run_index>").
// Task-independent, so the nth run of every task shares a permutation.
std::vector<std::size_t> derive_permutation(std::uint64_t master_seed, std::uint64_t run_index,
                                            std::size_t num_layers);

std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& permutation);

// Block starts 1, 1 + stride, ... while the block fits in L layers.
std::vector<std::size_t> block_starts(std::size_t num_layers, std::size_t length = 3, std::size_t stride = 1);

}  // namespace relab
