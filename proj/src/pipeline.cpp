#include "rticket/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rticket/checkpoint.hpp"
#include "rticket/errors.hpp"
#include "rticket/optimizer.hpp"
#include "rticket/rng.hpp"

namespace rticket {

namespace {

EpochRecord epoch_record(const std::string& stage, int epoch, double loss) {
  EpochRecord r;
  r.stage = stage;
  r.epoch = epoch;
  r.loss = loss;
  return r;
}

enum : std::uint64_t {
  kTagMlmMask = 11,
  kTagDropout = 12,
  kTagGateInit = 13,
  kTagGateSample = 14,
  kTagPerturbation = 15,
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::size_t batch_count(std::size_t n, int batch_size) {
  return (n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
}

void check_finite(double loss, const std::string& stage, int epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(stage + " diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                          std::to_string(step));
  }
}

bool is_classifier(const TensorSlot& s) { return s.name.rfind("classifier.", 0) == 0; }

void fill_eval(EpochRecord& rec, const MaskedModel& model, const EpochEval& eval) {
  if (eval.corpus == nullptr || eval.corpus->empty()) {
    return;
  }
  if (eval.table != nullptr) {
    const auto rep = evaluate_attack(ModelClassifier(model), *eval.corpus, *eval.table, eval.max_examples);
    rec.clean_acc = rep.clean_acc;
    rec.aua = rep.aua;
  } else {
    rec.clean_acc = accuracy(model, *eval.corpus, {}, eval.max_examples);
  }
}

}  // namespace

void PretrainConfig::validate() const {
  require(epochs >= 0, "pretrain.epochs must be >= 0");
  require(lr > 0.0, "pretrain.lr must be positive");
  require(weight_decay >= 0.0, "pretrain.weight_decay must be >= 0");
  require(batch_size >= 1, "pretrain.batch_size must be >= 1");
  require(mask_prob > 0.0 && mask_prob < 1.0, "pretrain.mask_prob must be in (0, 1)");
}

void FinetuneConfig::validate() const {
  require(epochs >= 0, "finetune.epochs must be >= 0");
  require(lr > 0.0, "finetune.lr must be positive");
  require(weight_decay >= 0.0, "finetune.weight_decay must be >= 0");
  require(batch_size >= 1, "finetune.batch_size must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "finetune.dropout must be in [0, 1)");
}

void MaskTrainConfig::validate() const {
  require(lambda >= 0.0, "mask.lambda must be >= 0, got " + std::to_string(lambda));
  require(mask_lr > 0.0, "mask.mask_lr must be positive");
  require(epochs >= 0, "mask.epochs must be >= 0");
  require(weight_decay >= 0.0, "mask.weight_decay must be >= 0");
  require(batch_size >= 1, "mask.batch_size must be >= 1");
  require(beta > 0.0, "mask.beta must be positive");
  require(init_std >= 0.0, "mask.init_std must be >= 0");
  adv.validate();
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"stage", r.stage}, {"epoch", r.epoch}, {"loss", r.loss}};
  if (r.l0) j["l0"] = *r.l0;
  if (r.polarization) j["polarization"] = *r.polarization;
  if (r.clean_acc) j["clean_acc"] = *r.clean_acc;
  if (r.aua) j["aua"] = *r.aua;
}

double accuracy(const MaskedModel& model, const Corpus& corpus, std::span<const double> mask_values,
                std::size_t max_examples) {
  const auto n = max_examples == 0 ? corpus.size() : std::min(max_examples, corpus.size());
  if (n == 0) {
    return 0.0;
  }
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < n; start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto b = make_batch(corpus, idx);
    ForwardOptions opts;
    opts.mask_values = mask_values;
    const auto logits = forward(model, b, opts).logits;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      correct += argmax_row(logits, r) == b.labels[static_cast<std::size_t>(r)] ? 1 : 0;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<EpochRecord> pretrain(MaskedModel& model, const Corpus& corpus, const PretrainConfig& cfg,
                                  std::uint64_t seed) {
  cfg.validate();
  if (model.has_pretrained()) {
    throw StateError("model already carries a pretrained snapshot");
  }
  const auto& layout = model.layout();
  std::vector<std::uint8_t> frozen(layout.total(), 0);
  for (const auto& s : layout.slots()) {
    if (is_classifier(s)) {
      std::fill_n(frozen.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), std::uint8_t{1});
    }
  }
  AdamW opt(layout.total(), AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay, .clip = cfg.clip});
  std::vector<EpochRecord> history;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t counted = 0;
    for (auto& b : batches(corpus, cfg.batch_size, seed, static_cast<std::uint64_t>(epoch), true)) {
      Rng rng(derive_seed(derive_seed(seed, kTagMlmMask), step));
      std::vector<std::int32_t> targets(b.token_ids.size(), -1);
      for (int i = 0; i < b.size; ++i) {
        for (int t = 1; t < b.seq_len; ++t) {
          const auto k = static_cast<std::size_t>(i * b.seq_len + t);
          if (!b.is_pad(i, t) && rng.bernoulli(cfg.mask_prob)) {
            targets[k] = b.token_ids[k];
            b.token_ids[k] = kMaskId;
          }
        }
      }
      ++step;
      if (std::all_of(targets.begin(), targets.end(), [](auto t) { return t < 0; })) {
        continue;
      }
      const auto g = masked_lm_loss_and_grads(model, b, targets, {});
      check_finite(g.loss, "pretrain", epoch, step);
      opt.step(model.theta(), g.theta, frozen);
      total += g.loss;
      ++counted;
    }
    history.push_back(epoch_record("pretrain", epoch, counted ? total / static_cast<double>(counted) : 0.0));
  }
  if (cfg.epochs > 0) {
    round_to_storage(model);
  }
  model.snapshot_pretrained();
  return history;
}

std::vector<std::uint8_t> frozen_from_keep(const ParamLayout& layout, std::span<const std::uint8_t> keep) {
  std::vector<std::uint8_t> frozen(layout.total(), 0);
  for (const auto& s : layout.slots()) {
    if (!s.task_parameter) {
      std::fill_n(frozen.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), std::uint8_t{1});
    }
  }
  if (keep.empty()) {
    return frozen;
  }
  if (keep.size() != layout.maskable_count()) {
    throw ContractViolation("keep mask size does not match the maskable weights");
  }
  for (const auto& b : layout.maskable_blocks()) {
    for (std::size_t k = 0; k < b.size; ++k) {
      if (keep[b.mask_offset + k] == 0) {
        frozen[b.theta_offset + k] = 1;
      }
    }
  }
  return frozen;
}

void apply_keep(MaskedModel& model, std::span<const std::uint8_t> keep) {
  if (keep.empty()) {
    return;
  }
  const auto& layout = model.layout();
  if (keep.size() != layout.maskable_count()) {
    throw ContractViolation("keep mask size does not match the maskable weights");
  }
  auto theta = model.theta();
  for (const auto& b : layout.maskable_blocks()) {
    for (std::size_t k = 0; k < b.size; ++k) {
      if (keep[b.mask_offset + k] == 0) {
        theta[b.theta_offset + k] = 0.0;
      }
    }
  }
}

std::vector<EpochRecord> finetune(MaskedModel& model, const Corpus& train, const FinetuneConfig& cfg,
                                  std::uint64_t seed, std::span<const std::uint8_t> keep, const EpochEval& eval,
                                  const std::string& stage) {
  cfg.validate();
  if (!model.has_pretrained()) {
    throw StateError(stage + " requires a pretrained snapshot; run the pretrain stage first");
  }
  if (train.empty() && cfg.epochs > 0) {
    throw ConfigError(stage + ": training corpus is empty");
  }
  const auto& layout = model.layout();
  apply_keep(model, keep);
  const auto frozen = frozen_from_keep(layout, keep);
  const auto steps_per_epoch = batch_count(train.size(), cfg.batch_size);
  AdamW opt(layout.total(),
            AdamWConfig{.lr = cfg.lr,
                        .weight_decay = cfg.weight_decay,
                        .clip = cfg.clip,
                        .total_steps = cfg.linear_decay ? steps_per_epoch * static_cast<std::size_t>(cfg.epochs) : 0});
  std::vector<EpochRecord> history;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto bs = batches(train, cfg.batch_size, seed, static_cast<std::uint64_t>(epoch), true);
    for (const auto& b : bs) {
      ForwardOptions opts;
      opts.dropout = cfg.dropout;
      opts.dropout_seed = derive_seed(derive_seed(seed, kTagDropout), step);
      const auto g = loss_and_grads(model, b, opts, GradRequest{.theta = true});
      check_finite(g.loss, stage, epoch, step);
      opt.step(model.theta(), g.theta, frozen);
      total += g.loss;
      ++step;
    }
    auto rec = epoch_record(stage, epoch, total / static_cast<double>(bs.size()));
    fill_eval(rec, model, eval);
    history.push_back(rec);
  }
  if (step > 0) {
    round_to_storage(model);
  }
  return history;
}

MaskLearningResult learn_masks(const MaskedModel& model, const Corpus& train, const MaskTrainConfig& cfg,
                               std::uint64_t seed, const EpochEval& eval) {
  cfg.validate();
  if (train.empty()) {
    throw ConfigError("learn-masks: training corpus is empty");
  }
  const auto n = model.maskable_count();
  MaskLearningResult out;
  out.gates = GateParams::initialized(n, derive_seed(seed, kTagGateInit), cfg.beta, cfg.init_mean, cfg.init_std);
  const auto steps_per_epoch = batch_count(train.size(), cfg.batch_size);
  AdamW opt(n, AdamWConfig{.lr = cfg.mask_lr,
                           .weight_decay = cfg.weight_decay,
                           .clip = 0.0,
                           .total_steps = cfg.linear_decay ? steps_per_epoch * static_cast<std::size_t>(cfg.epochs) : 0});
  const Corpus& eval_corpus = eval.corpus != nullptr ? *eval.corpus : train;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto bs = batches(train, cfg.batch_size, seed, static_cast<std::uint64_t>(epoch), true);
    for (const auto& b : bs) {
      const auto sample = sample_gates(out.gates, derive_seed(derive_seed(seed, kTagGateSample), step));
      double loss = 0.0;
      std::vector<double> dm;
      if (cfg.adversarial) {
        auto r = adversarial_loss(model, b, sample.m, cfg.adv, derive_seed(derive_seed(seed, kTagPerturbation), step));
        loss = r.loss;
        dm = std::move(r.mask_grad);
      } else {
        ForwardOptions opts;
        opts.mask_values = sample.m;
        auto g = loss_and_grads(model, b, opts, GradRequest{.mask = true});
        loss = g.loss;
        dm = std::move(g.mask);
      }
      check_finite(loss, "learn-masks", epoch, step);
      auto grad = gate_gradients(out.gates, sample, dm);
      const auto reg = expected_l0_gradient(out.gates);
      for (std::size_t i = 0; i < n; ++i) {
        grad[i] += cfg.lambda * reg[i];
      }
      opt.step(out.gates.log_alpha(), grad);
      total += loss;
      ++step;
    }
    auto rec = epoch_record("learn-masks", epoch, total / static_cast<double>(bs.size()));
    rec.l0 = expected_l0(out.gates);
    rec.polarization = polarization_fraction(out.gates);
    const auto gate = inference_gate(out.gates);
    rec.clean_acc = accuracy(model, eval_corpus, gate, eval.max_examples);
    out.history.push_back(rec);
  }
  return out;
}

std::vector<EpochRecord> retrain(MaskedModel& model, const Ticket& ticket, const Corpus& train,
                                 const FinetuneConfig& cfg, std::uint64_t seed, const EpochEval& eval) {
  if (!model.has_pretrained()) {
    throw StateError("retrain requires the pretrained snapshot theta0; run the pretrain stage first");
  }
  if (ticket.size() != model.maskable_count()) {
    throw ContractViolation("ticket does not match the model's maskable weights");
  }
  model.reset_to_pretrained();
  return finetune(model, train, cfg, seed, ticket.keep_mask, eval, "retrain");
}

std::size_t imp_pruned_after(std::size_t n, double target_sparsity, int round, int rounds) {
  if (round >= rounds) {
    return static_cast<std::size_t>(std::floor(target_sparsity * static_cast<double>(n)));
  }
  const double kept = std::pow(1.0 - target_sparsity, static_cast<double>(round) / static_cast<double>(rounds));
  return static_cast<std::size_t>(std::floor((1.0 - kept) * static_cast<double>(n)));
}

ImpResult imp_baseline(MaskedModel& model, const Corpus& train, const FinetuneConfig& cfg, double target_sparsity,
                       int rounds, std::uint64_t seed) {
  require(rounds >= 1, "imp rounds must be >= 1");
  require(target_sparsity >= 0.0 && target_sparsity < 1.0, "imp target sparsity must be in [0, 1)");
  if (!model.has_pretrained()) {
    throw StateError("IMP rewinds to theta0; run the pretrain stage first");
  }
  const auto& layout = model.layout();
  const auto n = layout.maskable_count();
  ImpResult out;
  std::vector<std::uint8_t> keep(n, 1);
  std::vector<double> magnitude(n, 0.0);
  for (int r = 1; r <= rounds; ++r) {
    model.reset_to_pretrained();
    finetune(model, train, cfg, seed, keep, {}, "imp");
    const auto theta = model.theta();
    for (std::size_t j = 0; j < n; ++j) {
      magnitude[j] = std::abs(theta[layout.theta_offset_of_mask(j)]);
    }
    std::vector<std::size_t> survivors;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep[j]) survivors.push_back(j);
    }
    std::stable_sort(survivors.begin(), survivors.end(),
                     [&](std::size_t a, std::size_t b) { return magnitude[a] < magnitude[b]; });
    const auto already = n - survivors.size();
    const auto goal = imp_pruned_after(n, target_sparsity, r, rounds);
    for (std::size_t k = 0; k + already < goal && k < survivors.size(); ++k) {
      keep[survivors[k]] = 0;
    }
    out.round_masks.push_back(keep);
    out.round_sparsity.push_back(static_cast<double>(std::count(keep.begin(), keep.end(), 0)) /
                                 static_cast<double>(n));
  }
  model.reset_to_pretrained();
  out.ticket.keep_mask = keep;
  out.ticket.scores = magnitude;
  out.ticket.target_sparsity = target_sparsity;
  out.ticket.layer_sparsity = compute_layer_sparsity(layout, keep);
  out.ticket.provenance = "imp";
  out.ticket.source = std::to_string(rounds) + " rounds";
  return out;
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::reinit_ticket:
      return "reinit_ticket";
    case AblationMode::full_model_reinit_outside:
      return "full_model_reinit_outside";
    case AblationMode::full_model_reinit_outside_longer:
      return "full_model_reinit_outside_longer";
  }
  return "unknown";
}

AblationMode parse_ablation_mode(const std::string& name) {
  for (auto m : {AblationMode::reinit_ticket, AblationMode::full_model_reinit_outside,
                 AblationMode::full_model_reinit_outside_longer}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown ablation mode '" + name +
                    "' (expected reinit_ticket, full_model_reinit_outside or full_model_reinit_outside_longer)");
}

std::vector<EpochRecord> run_ablation(MaskedModel& model, const Ticket& ticket, AblationMode mode,
                                      const Corpus& train, const FinetuneConfig& cfg, std::uint64_t seed,
                                      std::uint64_t init_seed, const EpochEval& eval) {
  if (!model.has_pretrained()) {
    throw StateError("ablations start from theta0; run the pretrain stage first");
  }
  if (ticket.size() != model.maskable_count()) {
    throw ContractViolation("ticket does not match the model's maskable weights");
  }
  const auto& layout = model.layout();
  const auto& mc = model.config();
  const auto fresh = initial_parameters(layout, mc.embed_dim, mc.mlp_dim, init_seed);
  auto theta = model.theta();
  const std::string stage = "ablate." + to_string(mode);
  if (mode == AblationMode::reinit_ticket) {
    std::copy(fresh.begin(), fresh.end(), theta.begin());
    return finetune(model, train, cfg, seed, ticket.keep_mask, eval, stage);
  }
  model.reset_to_pretrained();
  for (std::size_t j = 0; j < ticket.size(); ++j) {
    if (ticket.keep_mask[j] == 0) {
      const auto off = layout.theta_offset_of_mask(j);
      theta[off] = fresh[off];
    }
  }
  auto c = cfg;
  if (mode == AblationMode::full_model_reinit_outside_longer) {
    c.epochs = kLongerAblationEpochs;
  }
  return finetune(model, train, c, seed, {}, eval, stage);
}

}  // namespace rticket
