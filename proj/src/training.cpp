#include "relab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace relab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename Ex>
PackedBatch pack_examples(const std::vector<Ex>& examples, std::span<const std::size_t> order,
                          const ModelConfig& config) {
  std::vector<SequenceView> views;
  views.reserve(order.size());
  for (auto i : order) views.push_back(examples[i].view());
  return pack_batch(views, config);
}

std::vector<std::int32_t> argmax_rows(const Tensor<float>& logits) {
  std::vector<std::int32_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

void check_rate(double rate, const char* what) {
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    throw InvalidArgument(std::string(what) + ": learning rate must be positive and finite");
  }
}

// ---- classification head ----

constexpr const char* kHeadWeight = "head.weight";
constexpr const char* kHeadBias = "head.bias";
constexpr std::size_t kNumClasses = 2;

ParamMap<float> init_head(std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  ParamMap<float> head;
  head.emplace(kHeadWeight, sample_truncated_normal(ReinitDistribution{}, {hidden, kNumClasses}, rng));
  head.emplace(kHeadBias, Tensor<float>({kNumClasses}));
  return head;
}

Var<float> head_logits(const ParamVars<float>& vars, Var<float> pooled) {
  return add(matmul(pooled, vars.at(kHeadWeight)), vars.at(kHeadBias));
}

struct EvalResult {
  double loss = 0.0;
  Metrics metrics;
};

// Forward-only pass over a split with encoder + head.
EvalResult evaluate_classifier(const ParamMap<float>& params, const ModelConfig& config,
                               const std::vector<LabeledExample>& examples, std::size_t batch_size) {
  std::vector<std::int32_t> predictions, labels;
  double total = 0.0;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < examples.size(); b += batch_size) {
    const std::size_t e = std::min(examples.size(), b + batch_size);
    std::span<const std::size_t> idx(order.data() + b, e - b);
    auto batch = pack_examples(examples, idx, config);
    std::vector<std::int32_t> y;
    for (auto i : idx) y.push_back(examples[i].label);
    Tape<float> tape;
    auto vars = bind_params(tape, params, false);
    auto hidden = encode_packed(vars, config, batch);
    auto logits = head_logits(vars, segment_mean(hidden.back(), batch.pool_segments));
    auto loss = cross_entropy(logits, y);
    total += static_cast<double>(loss.value().item()) * static_cast<double>(y.size());
    auto p = argmax_rows(logits.value());
    predictions.insert(predictions.end(), p.begin(), p.end());
    labels.insert(labels.end(), y.begin(), y.end());
  }
  return {total / static_cast<double>(examples.size()), evaluate(predictions, labels)};
}

// ---- MLM head ----

constexpr const char* kMlmTransformWeight = "mlm.transform.weight";
constexpr const char* kMlmTransformBias = "mlm.transform.bias";
constexpr const char* kMlmLnGamma = "mlm.ln.gamma";
constexpr const char* kMlmLnBeta = "mlm.ln.beta";
constexpr const char* kMlmDecoderBias = "mlm.decoder.bias";

ParamMap<float> init_mlm_head(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const auto h = config.hidden_size;
  ParamMap<float> p;
  p.emplace(kMlmTransformWeight, sample_truncated_normal(ReinitDistribution{}, {h, h}, rng));
  p.emplace(kMlmTransformBias, Tensor<float>({h}));
  p.emplace(kMlmLnGamma, Tensor<float>::filled({h}, 1.0f));
  p.emplace(kMlmLnBeta, Tensor<float>({h}));
  p.emplace(kMlmDecoderBias, Tensor<float>({config.vocab_size}));
  return p;
}

// Logits over the vocabulary for the packed rows listed in `rows`. The decoder
// matrix is the transposed token embedding.
Var<float> mlm_logits(const ParamVars<float>& vars, Var<float> final_hidden, std::span<const std::int32_t> rows) {
  auto picked = embedding_lookup(final_hidden, rows);
  auto t = gelu(add(matmul(picked, vars.at(kMlmTransformWeight)), vars.at(kMlmTransformBias)));
  t = layer_norm(t, vars.at(kMlmLnGamma), vars.at(kMlmLnBeta));
  return add(matmul(t, transpose(vars.at("embed.token"))), vars.at(kMlmDecoderBias));
}

struct MaskedBatch {
  PackedBatch packed;
  std::vector<std::int32_t> rows;     // packed row of each target
  std::vector<std::int32_t> targets;
};

MaskedBatch mask_batch(const std::vector<TokenSequence>& corpus, std::span<const std::size_t> idx,
                       const ModelConfig& config, double mask_prob, Rng& rng) {
  std::vector<MaskedSequence> masked;
  masked.reserve(idx.size());
  for (auto i : idx) masked.push_back(mask_tokens(corpus[i].tokens, config.vocab_size, mask_prob, rng));
  std::vector<SequenceView> views;
  for (std::size_t j = 0; j < idx.size(); ++j) views.push_back({masked[j].inputs, corpus[idx[j]].types});
  MaskedBatch out;
  out.packed = pack_batch(views, config);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto offset = static_cast<std::int32_t>(out.packed.segments[j].offset);
    for (std::size_t m = 0; m < masked[j].positions.size(); ++m) {
      out.rows.push_back(offset + masked[j].positions[m]);
      out.targets.push_back(masked[j].targets[m]);
    }
  }
  return out;
}

bool is_maskable(std::int32_t token) { return token >= kNumSpecialTokens; }

}  // namespace

// ---------------------------------------------------------------------------

double matthews(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

Metrics evaluate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
  if (predictions.size() != labels.size()) {
    throw InvalidArgument("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw InvalidArgument("evaluate: no examples");
  ConfusionCounts c;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = predictions[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) throw InvalidArgument("evaluate: labels must be 0 or 1");
    correct += p == y;
    if (p == 1 && y == 1) ++c.tp;
    if (p == 1 && y == 0) ++c.fp;
    if (p == 0 && y == 0) ++c.tn;
    if (p == 0 && y == 1) ++c.fn;
  }
  return {static_cast<double>(correct) / static_cast<double>(labels.size()), matthews(c)};
}

MaskedSequence mask_tokens(std::span<const std::int32_t> tokens, std::size_t vocab_size, double mask_prob, Rng& rng) {
  MaskedSequence out;
  out.inputs.assign(tokens.begin(), tokens.end());
  const auto range = vocab_size - static_cast<std::size_t>(kNumSpecialTokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!is_maskable(tokens[i]) || !rng.bernoulli(mask_prob)) continue;
    out.positions.push_back(static_cast<std::int32_t>(i));
    out.targets.push_back(tokens[i]);
    const double u = rng.uniform();
    if (u < 0.8) {
      out.inputs[i] = kMaskId;
    } else if (u < 0.9) {
      out.inputs[i] = kNumSpecialTokens + static_cast<std::int32_t>(rng.uniform_int(range));
    }
  }
  return out;
}

PretrainResult pretrain_mlm(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                            const PretrainOptions& options) {
  config.validate();
  PretrainResult result{init_model(config, options.seed), init_mlm_head(config, derive_seed(options.seed, "mlm-head")),
                        {}};
  if (options.steps == 0) return result;
  if (corpus.empty()) throw InvalidArgument("pretrain_mlm: empty corpus");
  if (options.batch_size == 0) throw InvalidArgument("pretrain_mlm: batch_size must be positive");
  check_rate(options.learning_rate, "pretrain_mlm");

  ParamMap<float> params = result.checkpoint.params;
  params.insert(result.mlm_head.begin(), result.mlm_head.end());
  AdamState<float> adam;
  adam.default_learning_rate = options.learning_rate;

  Rng order_rng(derive_seed(options.seed, "mlm-order"));
  Rng mask_rng(derive_seed(options.seed, "mlm-mask"));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < options.batch_size) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto mb = mask_batch(corpus, idx, config, options.mask_prob, mask_rng);
    if (mb.targets.empty()) {
      result.step_losses.push_back(0.0);
      continue;
    }
    Tape<float> tape;
    auto vars = bind_params(tape, params, true);
    auto hidden = encode_packed(vars, config, mb.packed);
    auto loss = cross_entropy(mlm_logits(vars, hidden.back(), mb.rows), mb.targets);
    result.step_losses.push_back(loss.value().item());
    adam_step(params, tape.backward(loss), adam);
  }

  for (auto& [name, value] : params) {
    if (result.mlm_head.count(name)) {
      result.mlm_head.at(name) = std::move(value);
    } else {
      result.checkpoint.params.at(name) = std::move(value);
    }
  }
  return result;
}

Checkpoint pretrain_mlm(const ModelConfig& config, const std::vector<TokenSequence>& corpus, std::size_t steps,
                        std::uint64_t seed) {
  PretrainOptions options;
  options.steps = steps;
  options.seed = seed;
  return pretrain_mlm(config, corpus, options).checkpoint;
}

double mlm_accuracy(const PretrainResult& model, const std::vector<TokenSequence>& corpus, std::uint64_t seed) {
  const auto& config = model.checkpoint.config;
  ParamMap<float> params = model.checkpoint.params;
  params.insert(model.mlm_head.begin(), model.mlm_head.end());
  Rng rng(seed);
  std::size_t correct = 0, total = 0;
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < corpus.size(); b += kBatch) {
    std::span<const std::size_t> idx(order.data() + b, std::min(corpus.size(), b + kBatch) - b);
    auto mb = mask_batch(corpus, idx, config, 0.15, rng);
    if (mb.targets.empty()) continue;
    Tape<float> tape;
    auto vars = bind_params(tape, params, false);
    auto hidden = encode_packed(vars, config, mb.packed);
    auto pred = argmax_rows(mlm_logits(vars, hidden.back(), mb.rows).value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == mb.targets[i];
    total += pred.size();
  }
  if (total == 0) throw InvalidArgument("mlm_accuracy: no masked positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double unigram_baseline_accuracy(const std::vector<TokenSequence>& train, const std::vector<TokenSequence>& eval,
                                 std::size_t vocab_size, std::uint64_t seed) {
  std::vector<std::size_t> counts(vocab_size, 0);
  for (const auto& s : train) {
    for (auto t : s.tokens) {
      if (is_maskable(t)) ++counts.at(static_cast<std::size_t>(t));
    }
  }
  const auto best = static_cast<std::int32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  Rng rng(seed);
  std::size_t correct = 0, total = 0;
  // Same draw sequence as mlm_accuracy, so both score the same positions.
  for (const auto& s : eval) {
    auto m = mask_tokens(s.tokens, vocab_size, 0.15, rng);
    for (auto t : m.targets) correct += t == best;
    total += m.targets.size();
  }
  if (total == 0) throw InvalidArgument("unigram_baseline_accuracy: no masked positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------

std::size_t effective_epochs(const FinetuneHyper& hyper, std::size_t train_size) {
  return train_size == 500 ? std::max<std::size_t>(hyper.epochs, 5) : hyper.epochs;
}

void TrialRecord::validate(std::size_t expected_epochs) const {
  if (kind != "finetune" && kind != "probe") throw InvalidArgument("trial record: unknown kind \"" + kind + "\"");
  if (epochs.size() != expected_epochs) {
    throw InvalidArgument("trial record: " + std::to_string(epochs.size()) + " epochs, expected " +
                          std::to_string(expected_epochs));
  }
  auto in_range = [](double x, double lo, double hi) { return std::isfinite(x) && x >= lo && x <= hi; };
  if (!in_range(accuracy, 0.0, 1.0)) throw InvalidArgument("trial record: accuracy out of range");
  if (!in_range(matthews, -1.0, 1.0)) throw InvalidArgument("trial record: matthews out of range");
  for (const auto& e : epochs) {
    if (!std::isfinite(e.train_loss) || !std::isfinite(e.validation_loss)) {
      throw InvalidArgument("trial record: non-finite loss");
    }
  }
}

void to_json(nlohmann::json& j, const TrialRecord& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"validation_loss", e.validation_loss},
                      {"validation_accuracy", e.validation_accuracy},
                      {"validation_matthews", e.validation_matthews}});
  }
  j = nlohmann::json{{"kind", r.kind},
                     {"task", r.task},
                     {"size", r.size},
                     {"cell", r.cell},
                     {"trial_index", r.trial_index},
                     {"plan", r.plan},
                     {"layer", r.layer ? nlohmann::json(*r.layer) : nlohmann::json(nullptr)},
                     {"epochs", epochs},
                     {"accuracy", r.accuracy},
                     {"matthews", r.matthews},
                     {"learning_rate", {{"base", r.base_learning_rate}, {"reinitialized", r.reinit_learning_rate}}},
                     {"reinitialized_params", r.reinitialized_params},
                     {"seeds", r.seeds}};
}

void from_json(const nlohmann::json& j, TrialRecord& r) {
  r = TrialRecord{};
  r.kind = j.at("kind").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.size = j.at("size").get<std::size_t>();
  r.cell = j.at("cell").get<std::string>();
  r.trial_index = j.at("trial_index").get<std::size_t>();
  r.plan = j.at("plan");
  if (!j.at("layer").is_null()) r.layer = j.at("layer").get<std::size_t>();
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("validation_loss").get<double>(), e.at("validation_accuracy").get<double>(),
                        e.at("validation_matthews").get<double>()});
  }
  r.accuracy = j.at("accuracy").get<double>();
  r.matthews = j.at("matthews").get<double>();
  r.base_learning_rate = j.at("learning_rate").at("base").get<double>();
  r.reinit_learning_rate = j.at("learning_rate").at("reinitialized").get<double>();
  r.reinitialized_params = j.at("reinitialized_params").get<std::size_t>();
  r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
}

TrialRecord finetune(const Checkpoint& checkpoint, const SurgeryReport& report, const TaskDataset& dataset,
                     const FinetuneHyper& hyper) {
  const auto start = Clock::now();
  checkpoint.validate();
  const auto& config = checkpoint.config;
  if (dataset.train.empty() || dataset.validation.empty()) throw InvalidArgument("finetune: empty split");
  if (hyper.batch_size == 0 || hyper.eval_batch_size == 0) throw InvalidArgument("finetune: batch size must be positive");
  if (hyper.epochs == 0) throw InvalidArgument("finetune: epochs must be positive");
  check_rate(hyper.learning_rate, "finetune");
  if (!(hyper.reinit_lr_multiplier > 0.0)) throw InvalidArgument("finetune: reinit_lr_multiplier must be positive");

  TrialRecord rec;
  rec.kind = "finetune";
  rec.task = task_name(dataset.task);
  rec.size = dataset.train.size();
  rec.base_learning_rate = hyper.learning_rate;
  rec.reinit_learning_rate = hyper.learning_rate * hyper.reinit_lr_multiplier;
  rec.reinitialized_params = report.reinitialized.size();
  rec.seeds = {{"trial", hyper.seed},
               {"head", derive_seed(hyper.seed, "head")},
               {"order", derive_seed(hyper.seed, "order")}};

  ParamMap<float> params = checkpoint.params;
  auto head = init_head(config.hidden_size, rec.seeds.at("head"));
  params.insert(head.begin(), head.end());

  AdamState<float> adam;
  adam.default_learning_rate = hyper.learning_rate;
  for (const auto& name : report.reinitialized) {
    if (!params.count(name)) throw InvalidArgument("finetune: report names unknown parameter " + name);
    adam.learning_rate[name] = rec.reinit_learning_rate;
  }

  Rng order_rng(rec.seeds.at("order"));
  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t epochs = effective_epochs(hyper, dataset.train.size());
  std::vector<std::int32_t> y;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += hyper.batch_size) {
      std::span<const std::size_t> idx(order.data() + b, std::min(order.size(), b + hyper.batch_size) - b);
      auto batch = pack_examples(dataset.train, idx, config);
      y.clear();
      for (auto i : idx) y.push_back(dataset.train[i].label);
      Tape<float> tape;
      auto vars = bind_params(tape, params, true);
      auto hidden = encode_packed(vars, config, batch);
      auto loss = cross_entropy(head_logits(vars, segment_mean(hidden.back(), batch.pool_segments)), y);
      total += static_cast<double>(loss.value().item()) * static_cast<double>(idx.size());
      adam_step(params, tape.backward(loss), adam);
    }
    auto ev = evaluate_classifier(params, config, dataset.validation, hyper.eval_batch_size);
    rec.epochs.push_back({epoch, total / static_cast<double>(order.size()), ev.loss, ev.metrics.accuracy,
                          ev.metrics.matthews});
  }
  rec.accuracy = rec.epochs.back().validation_accuracy;
  rec.matthews = rec.epochs.back().validation_matthews;
  rec.wall_clock_seconds = seconds_since(start);
  return rec;
}

std::vector<Tensor<float>> pooled_features(const Checkpoint& checkpoint, const std::vector<LabeledExample>& examples) {
  const auto& config = checkpoint.config;
  const std::size_t h = config.hidden_size;
  std::vector<Tensor<float>> out(config.num_layers + 1, Tensor<float>({examples.size(), h}));
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < examples.size(); b += kBatch) {
    std::span<const std::size_t> idx(order.data() + b, std::min(examples.size(), b + kBatch) - b);
    auto batch = pack_examples(examples, idx, config);
    Tape<float> tape;
    auto vars = bind_params(tape, checkpoint.params, false);
    auto hidden = encode_packed(vars, config, batch);
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      auto pooled = segment_mean(hidden[l], batch.pool_segments);
      const auto src = pooled.value().data();
      std::copy(src.begin(), src.end(), out[l].data().begin() + static_cast<std::ptrdiff_t>(b * h));
    }
  }
  return out;
}

ProbeFeatures probe_features(const Checkpoint& checkpoint, const TaskDataset& dataset) {
  ProbeFeatures f;
  f.train = pooled_features(checkpoint, dataset.train);
  f.validation = pooled_features(checkpoint, dataset.validation);
  for (const auto& e : dataset.train) f.train_labels.push_back(e.label);
  for (const auto& e : dataset.validation) f.validation_labels.push_back(e.label);
  return f;
}

namespace {

Tensor<float> gather_rows(const Tensor<float>& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  Tensor<float> out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(rows[i], j);
  }
  return out;
}

}  // namespace

TrialRecord probe_with_features(const ProbeFeatures& features, std::size_t layer, Task task, std::uint64_t seed,
                                const ProbeHyper& hyper) {
  const auto start = Clock::now();
  if (layer >= features.train.size()) {
    throw InvalidArgument("probe: layer " + std::to_string(layer) + " outside 0.." +
                          std::to_string(features.train.size() - 1));
  }
  if (hyper.epochs == 0 || hyper.batch_size == 0) throw InvalidArgument("probe: epochs and batch size must be positive");
  check_rate(hyper.learning_rate, "probe");
  const auto& x = features.train[layer];
  const auto& xv = features.validation[layer];
  if (x.rows() == 0 || xv.rows() == 0) throw InvalidArgument("probe: empty split");

  TrialRecord rec;
  rec.kind = "probe";
  rec.task = task_name(task);
  rec.size = x.rows();
  rec.layer = layer;
  rec.plan = {{"probe_layer", layer}};
  rec.base_learning_rate = hyper.learning_rate;
  rec.reinit_learning_rate = hyper.learning_rate;
  rec.seeds = {{"trial", seed}, {"head", derive_seed(seed, "head")}, {"order", derive_seed(seed, "order")}};

  ParamMap<float> head = init_head(x.cols(), rec.seeds.at("head"));
  AdamState<float> adam;
  adam.default_learning_rate = hyper.learning_rate;
  Rng order_rng(rec.seeds.at("order"));
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::int32_t> y;

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += hyper.batch_size) {
      std::span<const std::size_t> idx(order.data() + b, std::min(order.size(), b + hyper.batch_size) - b);
      y.clear();
      for (auto i : idx) y.push_back(features.train_labels[i]);
      Tape<float> tape;
      auto vars = bind_params(tape, head, true);
      auto loss = cross_entropy(head_logits(vars, tape.constant(gather_rows(x, idx))), y);
      total += static_cast<double>(loss.value().item()) * static_cast<double>(idx.size());
      adam_step(head, tape.backward(loss), adam);
    }
    Tape<float> tape;
    auto vars = bind_params(tape, head, false);
    auto logits = head_logits(vars, tape.constant(xv));
    auto vloss = cross_entropy(logits, features.validation_labels);
    auto m = evaluate(argmax_rows(logits.value()), features.validation_labels);
    rec.epochs.push_back({epoch, total / static_cast<double>(order.size()),
                          static_cast<double>(vloss.value().item()), m.accuracy, m.matthews});
  }
  rec.accuracy = rec.epochs.back().validation_accuracy;
  rec.matthews = rec.epochs.back().validation_matthews;
  rec.wall_clock_seconds = seconds_since(start);
  return rec;
}

TrialRecord probe(const Checkpoint& checkpoint, std::size_t layer, const TaskDataset& dataset, std::uint64_t seed,
                  const ProbeHyper& hyper) {
  checkpoint.validate();
  if (layer > checkpoint.config.num_layers) {
    throw InvalidArgument("probe: layer " + std::to_string(layer) + " outside 0.." +
                          std::to_string(checkpoint.config.num_layers));
  }
  const auto before = checksum(checkpoint);
  auto features = probe_features(checkpoint, dataset);
  auto rec = probe_with_features(features, layer, dataset.task, seed, hyper);
  if (checksum(checkpoint) != before) throw NumericError("probe: encoder parameters changed during probing");
  return rec;
}

}  // namespace relab
