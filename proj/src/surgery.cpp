#include "relab/surgery.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace relab {

void ReinitDistribution::validate() const {
  if (!(sigma > 0.0)) throw InvalidArgument("reinit distribution: sigma must be positive");
  if (!(lower < mu && mu < upper)) throw InvalidArgument("reinit distribution: need lower < mu < upper");
}

Tensor<float> sample_truncated_normal(const ReinitDistribution& dist, const Shape& shape, Rng& rng) {
  dist.validate();
  Tensor<float> out(shape);
  for (auto& x : out.data()) {
    float v;
    do {
      v = static_cast<float>(dist.mu + dist.sigma * rng.normal());
    } while (!(v > dist.lower && v < dist.upper));
    x = v;
  }
  return out;
}

std::string to_string(SurgeryKind kind) {
  switch (kind) {
    case SurgeryKind::identity: return "identity";
    case SurgeryKind::progressive: return "progressive";
    case SurgeryKind::block_reinit: return "block_reinit";
    case SurgeryKind::block_preserve: return "block_preserve";
    case SurgeryKind::single_layer: return "single_layer";
    case SurgeryKind::permute: return "permute";
  }
  return "unknown";
}

SurgeryKind surgery_kind_from_string(const std::string& s) {
  for (auto k : {SurgeryKind::identity, SurgeryKind::progressive, SurgeryKind::block_reinit,
                 SurgeryKind::block_preserve, SurgeryKind::single_layer, SurgeryKind::permute}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown surgery kind \"" + s + "\"");
}

SurgeryPlan SurgeryPlan::progressive(std::size_t k, std::uint64_t seed) {
  SurgeryPlan p;
  p.kind = SurgeryKind::progressive;
  p.k = k;
  p.seed = seed;
  return p;
}

SurgeryPlan SurgeryPlan::block_reinit(std::size_t start, std::uint64_t seed, std::size_t length) {
  SurgeryPlan p;
  p.kind = SurgeryKind::block_reinit;
  p.start = start;
  p.length = length;
  p.seed = seed;
  return p;
}

SurgeryPlan SurgeryPlan::block_preserve(std::size_t start, std::uint64_t seed, std::size_t length) {
  auto p = block_reinit(start, seed, length);
  p.kind = SurgeryKind::block_preserve;
  return p;
}

SurgeryPlan SurgeryPlan::single_layer(std::size_t k, std::uint64_t seed) {
  SurgeryPlan p;
  p.kind = SurgeryKind::single_layer;
  p.k = k;
  p.seed = seed;
  return p;
}

SurgeryPlan SurgeryPlan::permute(std::vector<std::size_t> permutation) {
  SurgeryPlan p;
  p.kind = SurgeryKind::permute;
  p.permutation = std::move(permutation);
  return p;
}

void SurgeryPlan::validate(std::size_t num_layers) const {
  const auto L = std::to_string(num_layers);
  switch (kind) {
    case SurgeryKind::identity: break;
    case SurgeryKind::progressive:
      if (k > num_layers) throw InvalidArgument("progressive: k=" + std::to_string(k) + " outside 0.." + L);
      break;
    case SurgeryKind::single_layer:
      if (k < 1 || k > num_layers) {
        throw InvalidArgument("single_layer: k=" + std::to_string(k) + " outside 1.." + L);
      }
      break;
    case SurgeryKind::block_reinit:
    case SurgeryKind::block_preserve:
      if (length < 1 || length > num_layers || start < 1 || start > num_layers - length + 1) {
        throw InvalidArgument(to_string(kind) + ": block start=" + std::to_string(start) + " length=" +
                              std::to_string(length) + " does not fit in " + L + " layers");
      }
      break;
    case SurgeryKind::permute: {
      if (permutation.size() != num_layers) {
        throw InvalidArgument("permute: permutation has " + std::to_string(permutation.size()) +
                              " entries for " + L + " layers");
      }
      std::vector<std::size_t> sorted = permutation;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < num_layers; ++i) {
        if (sorted[i] != i + 1) throw InvalidArgument("permute: not a bijection on 1.." + L);
      }
      break;
    }
  }
}

bool SurgeryPlan::reinitializes(std::size_t layer) const {
  switch (kind) {
    case SurgeryKind::progressive: return layer > k;
    case SurgeryKind::block_reinit: return layer >= start && layer < start + length;
    case SurgeryKind::block_preserve: return !(layer >= start && layer < start + length);
    case SurgeryKind::single_layer: return layer == k;
    case SurgeryKind::identity:
    case SurgeryKind::permute: return false;
  }
  return false;
}

void to_json(nlohmann::json& j, const SurgeryPlan& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)}};
  switch (p.kind) {
    case SurgeryKind::progressive:
    case SurgeryKind::single_layer: j["k"] = p.k; break;
    case SurgeryKind::block_reinit:
    case SurgeryKind::block_preserve:
      j["start"] = p.start;
      j["length"] = p.length;
      break;
    case SurgeryKind::permute: j["permutation"] = p.permutation; break;
    case SurgeryKind::identity: break;
  }
  j["preserve_layer_norm"] = p.preserve_layer_norm;
  j["zero_biases"] = p.zero_biases;
  j["seed"] = p.seed;
}

void from_json(const nlohmann::json& j, SurgeryPlan& p) {
  static const std::set<std::string> known = {"kind",        "k",           "start",       "length",
                                              "permutation", "preserve_layer_norm", "zero_biases", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw InvalidArgument("surgery plan: unknown field \"" + key + "\"");
  }
  p = SurgeryPlan{};
  p.kind = surgery_kind_from_string(j.at("kind").get<std::string>());
  p.k = j.value("k", std::size_t{0});
  p.start = j.value("start", std::size_t{1});
  p.length = j.value("length", std::size_t{3});
  p.permutation = j.value("permutation", std::vector<std::size_t>{});
  p.preserve_layer_norm = j.value("preserve_layer_norm", false);
  p.zero_biases = j.value("zero_biases", false);
  p.seed = j.value("seed", std::uint64_t{0});
}

void to_json(nlohmann::json& j, const SurgeryReport& r) {
  nlohmann::json moved = nlohmann::json::array();
  for (const auto& [from, to] : r.moved) moved.push_back({{"from", from}, {"to", to}});
  j = nlohmann::json{{"reinitialized", r.reinitialized}, {"preserved", r.preserved}, {"moved", moved}};
}

SurgeryResult apply_surgery(const Checkpoint& checkpoint, const SurgeryPlan& plan) {
  const std::size_t L = checkpoint.config.num_layers;
  plan.validate(L);
  SurgeryResult result{checkpoint, {}};
  auto& out = result.checkpoint.params;
  auto& report = result.report;

  for (const auto& name : canonical_names(checkpoint.config)) {
    if (is_embedding_param(name)) report.preserved.push_back(name);
  }

  if (plan.kind == SurgeryKind::permute) {
    for (std::size_t i = 1; i <= L; ++i) {
      const std::size_t to = plan.permutation[i - 1];
      for (const auto& name : layer_param_names(i)) {
        if (to == i) {
          report.preserved.push_back(name);
          continue;
        }
        const auto dest = with_layer(name, to);
        out.at(dest) = checkpoint.params.at(name);
        report.moved.emplace_back(name, dest);
      }
    }
    return result;
  }

  Rng rng(plan.seed);
  const ReinitDistribution dist;
  for (std::size_t i = 1; i <= L; ++i) {
    const bool reset = plan.reinitializes(i);
    for (const auto& name : layer_param_names(i)) {
      if (!reset) {
        report.preserved.push_back(name);
        continue;
      }
      auto& t = out.at(name);
      if (is_layer_norm_param(name)) {
        if (plan.preserve_layer_norm) {
          report.preserved.push_back(name);
          continue;
        }
        const bool gamma = name.ends_with(".gamma");
        t = Tensor<float>::filled(t.shape(), gamma ? 1.0f : 0.0f);
      } else if (plan.zero_biases && name.ends_with(".bias")) {
        t = Tensor<float>(t.shape());
      } else {
        t = sample_truncated_normal(dist, t.shape(), rng);
      }
      report.reinitialized.push_back(name);
    }
  }
  return result;
}

std::vector<std::size_t> derive_permutation(std::uint64_t master_seed, std::uint64_t run_index,
                                            std::size_t num_layers) {
  std::vector<std::size_t> perm(num_layers);
  std::iota(perm.begin(), perm.end(), std::size_t{1});
  Rng rng(derive_seed(master_seed, "perm/" + std::to_string(run_index)));
  rng.shuffle(perm);
  return perm;
}

std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& permutation) {
  std::vector<std::size_t> inv(permutation.size());
  for (std::size_t i = 0; i < permutation.size(); ++i) inv[permutation[i] - 1] = i + 1;
  return inv;
}

std::vector<std::size_t> block_starts(std::size_t num_layers, std::size_t length, std::size_t stride) {
  std::vector<std::size_t> starts;
  if (length == 0 || stride == 0 || length > num_layers) return starts;
  for (std::size_t s = 1; s + length - 1 <= num_layers; s += stride) starts.push_back(s);
  return starts;
}

}  // namespace relab
