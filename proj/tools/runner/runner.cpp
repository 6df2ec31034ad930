#include "runner.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "report.hpp"
#include "rticket/attack.hpp"
#include "rticket/checkpoint.hpp"
#include "rticket/errors.hpp"
#include "rticket/log.hpp"
#include "rticket/pipeline.hpp"
#include "rticket/rng.hpp"

namespace rticket::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string seed_label(std::uint64_t seed) { return "seed " + std::to_string(seed); }

json summary_json(const AttackReport& r) {
  return {{"clean_acc", r.clean_acc}, {"aua", r.aua},           {"suc", r.suc},
          {"avg_queries", r.avg_queries}, {"evaluated", r.evaluated}, {"attempted", r.attempted},
          {"successes", r.successes}};
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

void add_words(Vocab& vocab, const fs::path& substitutions) {
  std::ifstream in(substitutions);
  if (!in) throw FormatError("cannot open substitution file '" + substitutions.string() + "'");
  std::string line;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), '\t', ',');
    std::stringstream ss(line);
    for (std::string w; std::getline(ss, w, ',');) {
      while (!w.empty() && (w.back() == '\r' || w.back() == ' ')) w.pop_back();
      std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (!w.empty()) vocab.add(w);
    }
  }
}

std::vector<json> epoch_lines(const std::vector<EpochRecord>& history, const json& extra = json::object()) {
  std::vector<json> out;
  for (const auto& r : history) {
    json j = r;
    j["record"] = "epoch";
    for (const auto& [k, v] : extra.items()) j[k] = v;
    out.push_back(std::move(j));
  }
  return out;
}

json ticket_record(const Ticket& t) {
  json layers = json::array();
  for (const auto& l : t.layer_sparsity) {
    layers.push_back({{"layer", l.layer}, {"kind", std::string(to_string(l.kind))}, {"total", l.total}, {"pruned", l.pruned}});
  }
  return {{"record", "ticket"},        {"model", ticket_name(t.provenance, t.target_sparsity)},
          {"method", t.provenance},    {"sparsity", t.target_sparsity},
          {"achieved", t.sparsity()},  {"pruned", t.pruned_count()},
          {"total", t.size()},         {"layers", std::move(layers)}};
}

}  // namespace

std::uint64_t stage_seed(std::uint64_t seed, SeedStream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

std::string ticket_name(const std::string& provenance, double sparsity) {
  return provenance + "-" + fmt_g(sparsity);
}

double best_robust_sparsity(const std::vector<json>& attack_records) {
  std::optional<double> best_sp;
  double best_aua = -1.0;
  for (const auto& r : attack_records) {
    if (r.value("method", "") != "robust" || r.value("split", "") != "dev") continue;
    const double aua = r.at("aua").get<double>();
    const double sp = r.at("sparsity").get<double>();
    if (!best_sp || aua > best_aua || (aua == best_aua && sp < *best_sp)) {
      best_sp = sp;
      best_aua = aua;
    }
  }
  if (!best_sp) throw StateError("no dev attack results for robust tickets; run `attack` first");
  return *best_sp;
}

MetricsWriter::MetricsWriter(const fs::path& path, std::string config_hash, std::uint64_t seed, std::string stage)
    : path_(path), hash_(std::move(config_hash)), seed_(seed), stage_(std::move(stage)) {
  fs::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path_.string() + "'");
}

void MetricsWriter::write(json record) {
  json line = {{"config_hash", hash_}, {"seed", seed_}, {"stage", stage_}};
  for (auto& [k, v] : record.items()) {
    if (k == "stage") {
      line["phase"] = v;
    } else {
      line[k] = v;
    }
  }
  std::ofstream out(path_, std::ios::app);
  out << line.dump() << '\n';
  if (!out) throw FormatError("cannot append to '" + path_.string() + "'");
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<json> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

Runner::Runner(RunConfig cfg, RunOptions opts)
    : cfg_(std::move(cfg)), opts_(std::move(opts)), out_(opts_.out ? *opts_.out : cfg_.out), hash_(cfg_.hash()) {
  cfg_.validate();
}

std::vector<std::uint64_t> Runner::seeds() const {
  if (opts_.seed) return {*opts_.seed};
  return cfg_.seeds;
}

fs::path Runner::seed_dir(std::uint64_t seed) const { return out_ / ("seed-" + std::to_string(seed)); }

void Runner::write_config_snapshot() const {
  fs::create_directories(out_);
  const auto path = out_ / "config.ini";
  const std::string text = "# config_hash = " + hash_ + "\n" + cfg_.canonical();
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() == text) return;
    if (!opts_.force) {
      throw StateError("'" + out_.string() +
                       "' holds a run with different settings; choose another --out or pass --force");
    }
  }
  std::ofstream out(path, std::ios::trunc);
  out << text;
}

void Runner::run_all() {
  auto stages = cfg_.stages.empty() ? all_stages() : cfg_.stages;
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  for (auto s : stages) run(s);
}

void Runner::run(Stage stage) {
  write_config_snapshot();
  if (stage == Stage::report) {
    const auto report = build_report(out_, hash_, opts_.force);
    write_report(report, out_ / "report");
    log_info("report written to " + (out_ / "report").string());
    return;
  }
  for (auto seed : seeds()) {
    log_info(to_string(stage) + ": " + seed_label(seed));
    fs::create_directories(seed_dir(seed) / "metrics");
    switch (stage) {
      case Stage::pretrain: pretrain_stage(seed); break;
      case Stage::finetune: finetune_stage(seed); break;
      case Stage::learn_masks: masks_stage(seed); break;
      case Stage::draw: draw_stage(seed); break;
      case Stage::random_ticket: random_stage(seed); break;
      case Stage::imp: imp_stage(seed); break;
      case Stage::retrain: retrain_stage(seed); break;
      case Stage::attack: attack_stage(seed); break;
      case Stage::ablate: ablate_stage(seed); break;
      case Stage::report: break;
    }
  }
}

TaskData Runner::load_data(std::uint64_t seed) const {
  TaskData d;
  if (cfg_.synthetic) {
    auto task = generate_synthetic(cfg_.synth, seed);
    d.train = std::move(task.train);
    d.dev = std::move(task.dev);
    d.test = std::move(task.test);
    d.pretrain = std::move(task.pretrain);
    d.substitutions = std::move(task.substitutions);
    return d;
  }
  const auto& t = cfg_.tsv;
  TsvOptions grow{t.seq_len, true};
  Vocab vocab;
  if (!t.pretrain.empty()) vocab = load_tsv(t.pretrain, vocab, grow).vocab;
  d.train = load_tsv(t.train, vocab, grow);
  vocab = d.train.vocab;
  add_words(vocab, t.substitutions);
  d.train.vocab = vocab;
  const TsvOptions fixed{t.seq_len, false};
  if (t.dev.empty()) {
    d.dev = split_dev(d.train, t.dev_fraction, seed);
  } else {
    d.dev = load_tsv(t.dev, vocab, fixed);
  }
  d.test = load_tsv(t.test, vocab, fixed);
  d.pretrain = t.pretrain.empty() ? d.train : load_tsv(t.pretrain, vocab, fixed);
  int classes = 0;
  for (const Corpus* c : {&d.train, &d.dev, &d.test}) {
    for (const auto& e : c->examples) classes = std::max(classes, e.label + 1);
  }
  for (Corpus* c : {&d.train, &d.dev, &d.test, &d.pretrain}) {
    c->num_classes = std::max(classes, 2);
    c->vocab = vocab;
  }
  d.substitutions = load_substitutions(t.substitutions, vocab, static_cast<std::size_t>(cfg_.max_candidates));
  return d;
}

ModelConfig Runner::model_config(const TaskData& data) const {
  ModelConfig mc;
  mc.vocab_size = data.train.vocab.size();
  mc.embed_dim = cfg_.embed_dim;
  mc.num_layers = cfg_.num_layers;
  mc.num_heads = cfg_.num_heads;
  mc.mlp_dim = cfg_.mlp_dim;
  mc.max_seq_len = data.train.seq_len + 1;
  mc.num_classes = data.train.num_classes;
  return mc;
}

void Runner::write_sidecar(const fs::path& artifact, std::uint64_t seed, const std::string& stage) const {
  write_json_file(artifact.string() + ".json",
                  {{"config_hash", hash_}, {"seed", seed}, {"stage", stage}, {"file", artifact.filename().string()}});
}

void Runner::check_sidecar(const fs::path& artifact, std::uint64_t seed) const {
  const fs::path side = artifact.string() + ".json";
  if (!fs::exists(side)) {
    if (opts_.force) return;
    throw StateError("'" + artifact.string() + "' has no metadata sidecar; pass --force to use it anyway");
  }
  std::ifstream in(side);
  const auto meta = json::parse(in);
  const auto hash = meta.value("config_hash", "");
  if (hash != hash_ && !opts_.force) {
    throw StateError("'" + artifact.string() + "' was produced under config " + hash + ", current config is " +
                     hash_ + "; rerun the producing stage or pass --force");
  }
  if (meta.value("seed", seed) != seed && !opts_.force) {
    throw StateError("'" + artifact.string() + "' belongs to seed " + std::to_string(meta.value("seed", 0ULL)));
  }
}

MaskedModel Runner::load_model(std::uint64_t seed, const std::string& name, const std::string& producer) const {
  const auto path = seed_dir(seed) / name;
  if (!fs::exists(path)) {
    throw StateError("'" + path.string() + "' not found; run `" + producer + "` for " + seed_label(seed) + " first");
  }
  check_sidecar(path, seed);
  return load_checkpoint(path);
}

void Runner::save_model(const MaskedModel& model, std::uint64_t seed, const std::string& name,
                        const std::string& stage) const {
  const auto path = seed_dir(seed) / name;
  fs::create_directories(path.parent_path());
  save_checkpoint(model, path);
  write_sidecar(path, seed, stage);
}

void Runner::save_ticket_artifact(const Ticket& ticket, std::uint64_t seed, const std::string& name,
                                  const std::string& stage) const {
  const auto path = seed_dir(seed) / "tickets" / (name + ".ticket");
  fs::create_directories(path.parent_path());
  save_ticket(ticket, path);
  write_sidecar(path, seed, stage);
}

Ticket Runner::load_ticket_artifact(std::uint64_t seed, const fs::path& path, const ParamLayout& layout) const {
  check_sidecar(path, seed);
  return load_ticket(path, layout);
}

void Runner::pretrain_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  MaskedModel model(model_config(data), stage_seed(seed, SeedStream::init));
  MetricsWriter m(seed_dir(seed) / "metrics" / "pretrain.jsonl", hash_, seed, "pretrain");
  const auto history = pretrain(model, data.pretrain, cfg_.pretrain, stage_seed(seed, SeedStream::pretrain));
  for (auto& line : epoch_lines(history)) m.write(std::move(line));
  save_model(model, seed, "pretrained.ckpt", "pretrain");
}

void Runner::finetune_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  auto model = load_model(seed, "pretrained.ckpt", "pretrain");
  MetricsWriter m(seed_dir(seed) / "metrics" / "finetune.jsonl", hash_, seed, "finetune");
  EpochEval eval;
  if (cfg_.curves) eval = {&data.dev, &data.substitutions, cfg_.attack_max_examples};
  const auto history = finetune(model, data.train, cfg_.finetune, stage_seed(seed, SeedStream::finetune), {}, eval);
  for (auto& line : epoch_lines(history, {{"model", "full"}})) m.write(std::move(line));
  save_model(model, seed, "finetuned.ckpt", "finetune");
}

void Runner::masks_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  auto model = load_model(seed, "finetuned.ckpt", "finetune");
  MetricsWriter m(seed_dir(seed) / "metrics" / "learn-masks.jsonl", hash_, seed, "learn-masks");
  auto result = learn_masks(model, data.train, cfg_.masks, stage_seed(seed, SeedStream::masks));
  for (auto& line : epoch_lines(result.history)) m.write(std::move(line));
  model.bind_gates(std::move(result.gates));
  save_model(model, seed, "masks.ckpt", "learn-masks");
}

void Runner::draw_stage(std::uint64_t seed) {
  const auto model = load_model(seed, "masks.ckpt", "learn-masks");
  if (!model.gates()) throw StateError("masks.ckpt for " + seed_label(seed) + " holds no gate parameters");
  MetricsWriter m(seed_dir(seed) / "metrics" / "draw.jsonl", hash_, seed, "draw");
  for (double p : cfg_.sparsities) {
    auto t = draw_ticket(*model.gates(), model.layout(), p);
    t.source = "config=" + hash_ + " seed=" + std::to_string(seed);
    save_ticket_artifact(t, seed, ticket_name("robust", p), "draw");
    m.write(ticket_record(t));
  }
}

void Runner::random_stage(std::uint64_t seed) {
  const auto layout = ParamLayout(load_model(seed, "pretrained.ckpt", "pretrain").config());
  MetricsWriter m(seed_dir(seed) / "metrics" / "random-ticket.jsonl", hash_, seed, "random-ticket");
  const auto& which = cfg_.random_sparsities.empty() ? cfg_.sparsities : cfg_.random_sparsities;
  for (double p : which) {
    const auto ref_path = seed_dir(seed) / "tickets" / (ticket_name("robust", p) + ".ticket");
    if (!fs::exists(ref_path)) {
      throw StateError("'" + ref_path.string() + "' not found; run `draw` for " + seed_label(seed) + " first");
    }
    const auto ref = load_ticket_artifact(seed, ref_path, layout);
    auto t = random_ticket(ref, layout, stage_seed(seed, SeedStream::random));
    t.source = "config=" + hash_ + " seed=" + std::to_string(seed);
    save_ticket_artifact(t, seed, ticket_name("random", p), "random-ticket");
    m.write(ticket_record(t));
  }
}

void Runner::imp_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  auto model = load_model(seed, "pretrained.ckpt", "pretrain");
  MetricsWriter m(seed_dir(seed) / "metrics" / "imp.jsonl", hash_, seed, "imp");
  for (double p : cfg_.imp_sparsities) {
    auto r = imp_baseline(model, data.train, cfg_.finetune, p, cfg_.imp_rounds, stage_seed(seed, SeedStream::finetune));
    r.ticket.source = "config=" + hash_ + " seed=" + std::to_string(seed);
    save_ticket_artifact(r.ticket, seed, ticket_name("imp", p), "imp");
    auto rec = ticket_record(r.ticket);
    rec["round_sparsity"] = r.round_sparsity;
    m.write(std::move(rec));
  }
}

void Runner::retrain_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  const auto base = load_model(seed, "pretrained.ckpt", "pretrain");
  if (!base.has_pretrained()) {
    throw StateError("pretrained.ckpt for " + seed_label(seed) + " has no theta0 snapshot; rerun `pretrain`");
  }
  const auto dir = seed_dir(seed) / "tickets";
  std::vector<fs::path> tickets;
  if (fs::exists(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".ticket") tickets.push_back(e.path());
    }
  }
  if (tickets.empty()) {
    throw StateError("no tickets under '" + dir.string() + "'; run `draw`, `random-ticket` or `imp` first");
  }
  std::sort(tickets.begin(), tickets.end());
  MetricsWriter m(seed_dir(seed) / "metrics" / "retrain.jsonl", hash_, seed, "retrain");
  EpochEval eval;
  if (cfg_.curves) eval = {&data.dev, &data.substitutions, cfg_.attack_max_examples};
  for (const auto& path : tickets) {
    const auto t = load_ticket_artifact(seed, path, base.layout());
    auto model = base;
    const auto history = retrain(model, t, data.train, cfg_.finetune, stage_seed(seed, SeedStream::finetune), eval);
    const auto name = path.stem().string();
    for (auto& line : epoch_lines(history, {{"model", name}, {"method", t.provenance}, {"sparsity", t.target_sparsity}})) {
      m.write(std::move(line));
    }
    save_model(model, seed, "retrained/" + name + ".ckpt", "retrain");
  }
}

void Runner::attack_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  struct Target {
    std::string name;
    std::string method;
    double sparsity;
    std::string file;
  };
  std::vector<Target> targets{{"full", "full", 0.0, "finetuned.ckpt"}};
  const auto dir = seed_dir(seed) / "retrained";
  std::vector<fs::path> retrained;
  if (fs::exists(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".ckpt") retrained.push_back(e.path());
    }
  }
  std::sort(retrained.begin(), retrained.end());
  for (const auto& p : retrained) {
    const auto name = p.stem().string();
    const auto dash = name.rfind('-');
    targets.push_back({name, name.substr(0, dash), std::stod(name.substr(dash + 1)), "retrained/" + p.filename().string()});
  }
  MetricsWriter m(seed_dir(seed) / "metrics" / "attack.jsonl", hash_, seed, "attack");
  fs::create_directories(seed_dir(seed) / "attack");
  for (const auto& target : targets) {
    const auto model = load_model(seed, target.file, target.name == "full" ? "finetune" : "retrain");
    for (const auto& [split, corpus] : {std::pair<std::string, const Corpus*>{"dev", &data.dev}, {"test", &data.test}}) {
      const auto report = evaluate_attack(ModelClassifier(model), *corpus, data.substitutions, cfg_.attack_max_examples,
                                          static_cast<std::size_t>(cfg_.max_candidates));
      json full = report;
      full["config_hash"] = hash_;
      full["seed"] = seed;
      full["model"] = target.name;
      full["split"] = split;
      write_json_file(seed_dir(seed) / "attack" / (target.name + "-" + split + ".json"), full);
      auto rec = summary_json(report);
      rec["record"] = "attack";
      rec["model"] = target.name;
      rec["method"] = target.method;
      rec["sparsity"] = target.sparsity;
      rec["split"] = split;
      m.write(std::move(rec));
    }
  }
}

void Runner::ablate_stage(std::uint64_t seed) {
  const auto data = load_data(seed);
  const auto attack_path = seed_dir(seed) / "metrics" / "attack.jsonl";
  std::vector<json> attack_records;
  if (fs::exists(attack_path)) attack_records = read_jsonl(attack_path);
  double sparsity = 0.0;
  if (cfg_.ablation_sparsity) {
    sparsity = *cfg_.ablation_sparsity;
  } else {
    if (attack_records.empty()) {
      throw StateError("ablation.sparsity = best needs '" + attack_path.string() + "'; run `attack` first");
    }
    sparsity = best_robust_sparsity(attack_records);
  }
  const auto ticket_path = seed_dir(seed) / "tickets" / (ticket_name("robust", sparsity) + ".ticket");
  if (!fs::exists(ticket_path)) {
    throw StateError("'" + ticket_path.string() + "' not found; run `draw` with this sparsity first");
  }
  const auto base = load_model(seed, "pretrained.ckpt", "pretrain");
  const auto ticket = load_ticket_artifact(seed, ticket_path, base.layout());
  MetricsWriter m(seed_dir(seed) / "metrics" / "ablate.jsonl", hash_, seed, "ablate");
  for (const auto& r : attack_records) {
    if (r.value("model", "") == ticket_name("robust", sparsity) && r.value("split", "") == "test") {
      json rec = {{"record", "attack"}, {"variant", "robust"}, {"sparsity", sparsity}, {"split", "test"}};
      for (const char* k : {"clean_acc", "aua", "suc", "avg_queries", "evaluated", "attempted", "successes"}) {
        rec[k] = r.at(k);
      }
      m.write(std::move(rec));
    }
  }
  for (auto mode : cfg_.ablation_modes) {
    auto model = base;
    const auto history = run_ablation(model, ticket, mode, data.train, cfg_.finetune,
                                      stage_seed(seed, SeedStream::finetune), stage_seed(seed, SeedStream::reinit));
    const auto name = to_string(mode);
    for (auto& line : epoch_lines(history, {{"variant", name}, {"sparsity", sparsity}})) m.write(std::move(line));
    save_model(model, seed, "ablation/" + name + ".ckpt", "ablate");
    const auto report = evaluate_attack(ModelClassifier(model), data.test, data.substitutions, cfg_.attack_max_examples,
                                        static_cast<std::size_t>(cfg_.max_candidates));
    auto rec = summary_json(report);
    rec["record"] = "attack";
    rec["variant"] = name;
    rec["sparsity"] = sparsity;
    rec["split"] = "test";
    m.write(std::move(rec));
  }
}

}  // namespace rticket::runner
