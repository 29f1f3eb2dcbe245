#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relab/data.hpp"
#include "relab/model.hpp"
#include "relab/surgery.hpp"

namespace relab {

struct Metrics {
  double accuracy = 0.0;
  double matthews = 0.0;
};

// Accuracy and Matthews correlation for binary labels. MCC is 0 whenever one
// of the four marginal counts is 0.
Metrics evaluate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels);

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
};
double matthews(const ConfusionCounts& c);

// ---------------------------------------------------------------------------
// Masked-LM pretraining

struct PretrainOptions {
  std::size_t steps = 8000;
  std::size_t batch_size = 32;
  double learning_rate = 5e-4;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
};

// One sequence after BERT masking: `inputs` has selected positions replaced
// (80% [MASK], 10% random token, 10% unchanged); `targets` holds the original
// ids at `positions`.
struct MaskedSequence {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> targets;
};

// Only non-special tokens are eligible for masking.
MaskedSequence mask_tokens(std::span<const std::int32_t> tokens, std::size_t vocab_size, double mask_prob, Rng& rng);

struct PretrainResult {
  Checkpoint checkpoint;
  ParamMap<float> mlm_head;          // transform, layer norm and decoder bias
  std::vector<double> step_losses;
};

PretrainResult pretrain_mlm(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                            const PretrainOptions& options);
// Convenience form returning only the encoder. steps == 0 returns init_model(config, seed).
Checkpoint pretrain_mlm(const ModelConfig& config, const std::vector<TokenSequence>& corpus, std::size_t steps,
                        std::uint64_t seed);

// Masked-token accuracy on `corpus` under masking seeded by `seed`.
double mlm_accuracy(const PretrainResult& model, const std::vector<TokenSequence>& corpus, std::uint64_t seed);
// Accuracy of always predicting the most frequent eligible token of `train`,
// scored on the masked positions of `eval` under the same masking as mlm_accuracy.
double unigram_baseline_accuracy(const std::vector<TokenSequence>& train, const std::vector<TokenSequence>& eval,
                                 std::size_t vocab_size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Finetuning and probing

struct FinetuneHyper {
  std::size_t batch_size = 8;
  double learning_rate = 2e-5;
  std::size_t epochs = 3;
  double reinit_lr_multiplier = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 64;
};

// Epochs actually run: raised to at least 5 when the train split has exactly 500 examples.
std::size_t effective_epochs(const FinetuneHyper& hyper, std::size_t train_size);

struct ProbeHyper {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
  double validation_matthews = 0.0;
};

struct TrialRecord {
  std::string kind;  // "finetune" or "probe"
  std::string task;
  std::size_t size = 0;  // training examples used
  std::string cell;
  std::size_t trial_index = 0;
  nlohmann::json plan;   // surgery plan, or {"probe_layer": k}
  std::optional<std::size_t> layer;
  std::vector<EpochRecord> epochs;
  double accuracy = 0.0;
  double matthews = 0.0;
  double base_learning_rate = 0.0;
  double reinit_learning_rate = 0.0;
  std::size_t reinitialized_params = 0;
  std::map<std::string, std::uint64_t> seeds;
  double wall_clock_seconds = 0.0;

  // Throws InvalidArgument when a metric is out of range or epochs are missing.
  void validate(std::size_t expected_epochs) const;
};

// Wall-clock time is not serialised, so records of identical runs are byte-identical.
void to_json(nlohmann::json& j, const TrialRecord& r);
void from_json(const nlohmann::json& j, TrialRecord& r);

// Classification head: mean over non-padding positions of the final hidden
// state, then linear + softmax. Head weights come from the truncated normal,
// bias zero. All encoder parameters train; the learning rate of parameters in
// report.reinitialized is multiplied by hyper.reinit_lr_multiplier. Data order
// is reshuffled every epoch; the final short batch is kept.
TrialRecord finetune(const Checkpoint& checkpoint, const SurgeryReport& report, const TaskDataset& dataset,
                     const FinetuneHyper& hyper);

// Mean-pooled hidden states of every layer (L+1 tensors of [examples, hidden]).
std::vector<Tensor<float>> pooled_features(const Checkpoint& checkpoint, const std::vector<LabeledExample>& examples);

struct ProbeFeatures {
  std::vector<Tensor<float>> train;       // per layer
  std::vector<Tensor<float>> validation;  // per layer
  std::vector<std::int32_t> train_labels;
  std::vector<std::int32_t> validation_labels;
};

ProbeFeatures probe_features(const Checkpoint& checkpoint, const TaskDataset& dataset);

// Linear probe on frozen layer-`layer` features; the encoder is checksummed
// before and after and must be unchanged.
TrialRecord probe(const Checkpoint& checkpoint, std::size_t layer, const TaskDataset& dataset, std::uint64_t seed,
                  const ProbeHyper& hyper = {});
// Same, reusing precomputed features.
TrialRecord probe_with_features(const ProbeFeatures& features, std::size_t layer, Task task, std::uint64_t seed,
                                const ProbeHyper& hyper = {});

}  // namespace relab
