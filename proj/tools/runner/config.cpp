#include "config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rticket/errors.hpp"

namespace rticket::runner {

namespace pt = boost::property_tree;

namespace {

constexpr std::pair<Stage, const char*> kStageNames[] = {
    {Stage::pretrain, "pretrain"}, {Stage::finetune, "finetune"},           {Stage::learn_masks, "learn-masks"},
    {Stage::draw, "draw"},         {Stage::random_ticket, "random-ticket"}, {Stage::imp, "imp"},
    {Stage::retrain, "retrain"},   {Stage::attack, "attack"},               {Stage::ablate, "ablate"},
    {Stage::report, "report"},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Reads typed fields out of the tree, remembering which keys were consumed and
// collecting every error instead of stopping at the first.
class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <class T>
  void get(const std::string& section, const std::string& key, T& target) {
    const auto raw = find(section, key);
    if (!raw) return;
    if (!convert(*raw, target)) {
      errors_.push_back(section + "." + key + ": cannot parse '" + *raw + "'");
    }
  }

  std::optional<std::string> find(const std::string& section, const std::string& key) {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    used_.insert(section + "." + key);
    return trim(*v);
  }

  void error(const std::string& field, const std::string& message) { errors_.push_back(field + ": " + message); }

  void check_unknown() {
    for (const auto& [section, child] : tree_) {
      if (child.empty() && !child.data().empty()) {
        errors_.push_back(section + ": key outside of any section");
        continue;
      }
      for (const auto& [key, value] : child) {
        (void)value;
        if (!used_.contains(section + "." + key)) {
          errors_.push_back(section + "." + key + ": unknown key");
        }
      }
    }
  }

  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static bool convert(const std::string& s, std::string& out) {
    out = s;
    return true;
  }
  static bool convert(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
      out = true;
    } else if (s == "false" || s == "0" || s == "no" || s == "off") {
      out = false;
    } else {
      return false;
    }
    return true;
  }
  template <class T>
    requires std::is_arithmetic_v<T>
  static bool convert(const std::string& s, T& out) {
    T v{};
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) return false;
    out = v;
    return true;
  }

  const pt::ptree& tree_;
  std::set<std::string> used_;
  std::vector<std::string> errors_;
};

std::vector<double> parse_doubles(Reader& r, const std::string& field, const std::string& raw) {
  std::vector<double> out;
  for (const auto& item : split_list(raw)) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      r.error(field, "cannot parse '" + item + "'");
    } else {
      out.push_back(v);
    }
  }
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <class F>
void collect(std::vector<std::string>& errors, const std::string& field, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    errors.push_back(field + ": " + e.what());
  }
}

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg = "invalid configuration:";
  for (const auto& e : errors) msg += "\n  " + e;
  return msg;
}

}  // namespace

std::string to_string(Stage s) {
  for (const auto& [stage, name] : kStageNames) {
    if (stage == s) return name;
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (const auto& [stage, n] : kStageNames) {
    if (name == n) return stage;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

std::vector<Stage> all_stages() {
  std::vector<Stage> out;
  for (const auto& [stage, name] : kStageNames) out.push_back(stage);
  return out;
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  if (seeds.empty()) errors.emplace_back("run.seeds: at least one seed is required");
  if (out.empty()) errors.emplace_back("run.out: output directory is empty");
  if (synthetic) {
    collect(errors, "data", [&] { synth.validate(); });
  } else {
    auto must_exist = [&](const char* field, const std::filesystem::path& p, bool required) {
      if (p.empty()) {
        if (required) errors.push_back(std::string("data.") + field + ": path is required");
      } else if (!std::filesystem::exists(p)) {
        errors.push_back(std::string("data.") + field + ": '" + p.string() + "' does not exist");
      }
    };
    must_exist("train", tsv.train, true);
    must_exist("dev", tsv.dev, false);
    must_exist("test", tsv.test, true);
    must_exist("pretrain", tsv.pretrain, false);
    must_exist("substitutions", tsv.substitutions, true);
    if (tsv.seq_len < 1) errors.emplace_back("data.seq_len: must be positive");
    if (tsv.dev.empty() && !(tsv.dev_fraction > 0.0 && tsv.dev_fraction < 1.0)) {
      errors.emplace_back("data.dev_fraction: must lie in (0, 1) when no dev file is given");
    }
  }
  if (embed_dim < 1 || num_layers < 1 || num_heads < 1 || mlp_dim < 1) {
    errors.emplace_back("model: dimensions must be positive");
  } else if (embed_dim % num_heads != 0) {
    errors.emplace_back("model.heads: must divide embed_dim");
  }
  collect(errors, "pretrain", [&] { pretrain.validate(); });
  collect(errors, "finetune", [&] { finetune.validate(); });
  collect(errors, "masks", [&] { masks.validate(); });
  auto check_sparsities = [&](const char* field, const std::vector<double>& v) {
    for (double p : v) {
      if (!(p >= 0.0 && p < 1.0)) errors.push_back(std::string("prune.") + field + ": " + fmt(p) + " not in [0, 1)");
    }
  };
  check_sparsities("sparsities", sparsities);
  check_sparsities("random_sparsities", random_sparsities);
  check_sparsities("imp_sparsities", imp_sparsities);
  for (double p : random_sparsities) {
    if (std::find(sparsities.begin(), sparsities.end(), p) == sparsities.end()) {
      errors.push_back("prune.random_sparsities: " + fmt(p) + " has no robust ticket in prune.sparsities");
    }
  }
  if (imp_rounds < 1) errors.emplace_back("prune.imp_rounds: must be at least 1");
  if (attack_max_examples < 1) errors.emplace_back("attack.max_examples: must be positive");
  if (max_candidates < 1) errors.emplace_back("attack.max_candidates: must be positive");
  if (ablation_sparsity && !(*ablation_sparsity >= 0.0 && *ablation_sparsity < 1.0)) {
    errors.emplace_back("ablation.sparsity: must lie in [0, 1)");
  }
  if (!errors.empty()) throw ConfigError(join_errors(errors));
}

std::string RunConfig::canonical() const {
  std::ostringstream o;
  auto line = [&](const std::string& k, const std::string& v) { o << k << " = " << v << '\n'; };
  auto num = [&](const std::string& k, double v) { line(k, fmt(v)); };
  auto list = [&](const std::string& k, const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ",") + fmt(x);
    line(k, s);
  };
  line("data.source", synthetic ? "synthetic" : "tsv");
  if (synthetic) {
    num("data.classes", synth.num_classes);
    num("data.signal_per_class", synth.signal_per_class);
    num("data.shortcut_per_class", synth.shortcut_per_class);
    num("data.filler_tokens", synth.filler_tokens);
    num("data.seq_len", synth.seq_len);
    num("data.signal_count", synth.signal_count);
    num("data.shortcut_count", synth.shortcut_count);
    num("data.shortcut_rate_train", synth.shortcut_rate_train);
    num("data.shortcut_rate_test", synth.shortcut_rate_test);
    num("data.noise_rate", synth.noise_rate);
    num("data.train_size", synth.train_size);
    num("data.dev_size", synth.dev_size);
    num("data.test_size", synth.test_size);
    num("data.pretrain_size", synth.pretrain_size);
    num("data.max_substitutions", synth.max_candidates);
  } else {
    line("data.train", tsv.train.string());
    line("data.dev", tsv.dev.string());
    line("data.test", tsv.test.string());
    line("data.pretrain", tsv.pretrain.string());
    line("data.substitutions", tsv.substitutions.string());
    num("data.seq_len", tsv.seq_len);
    num("data.dev_fraction", tsv.dev_fraction);
  }
  num("model.embed_dim", embed_dim);
  num("model.layers", num_layers);
  num("model.heads", num_heads);
  num("model.mlp_dim", mlp_dim);
  num("pretrain.epochs", pretrain.epochs);
  num("pretrain.lr", pretrain.lr);
  num("pretrain.weight_decay", pretrain.weight_decay);
  num("pretrain.batch_size", pretrain.batch_size);
  num("pretrain.mask_prob", pretrain.mask_prob);
  num("pretrain.clip", pretrain.clip);
  num("finetune.epochs", finetune.epochs);
  num("finetune.lr", finetune.lr);
  num("finetune.weight_decay", finetune.weight_decay);
  num("finetune.batch_size", finetune.batch_size);
  num("finetune.dropout", finetune.dropout);
  num("finetune.clip", finetune.clip);
  line("finetune.linear_decay", finetune.linear_decay ? "true" : "false");
  num("masks.lambda", masks.lambda);
  num("masks.mask_lr", masks.mask_lr);
  num("masks.epochs", masks.epochs);
  num("masks.weight_decay", masks.weight_decay);
  num("masks.batch_size", masks.batch_size);
  num("masks.beta", masks.beta);
  num("masks.init_mean", masks.init_mean);
  num("masks.init_std", masks.init_std);
  line("masks.adversarial", masks.adversarial ? "true" : "false");
  line("masks.linear_decay", masks.linear_decay ? "true" : "false");
  num("adversarial.eta", masks.adv.eta);
  num("adversarial.epsilon0", masks.adv.epsilon0);
  num("adversarial.steps", masks.adv.steps);
  line("adversarial.epsilon", masks.adv.epsilon ? fmt(*masks.adv.epsilon) : "none");
  line("adversarial.variant", to_string(masks.adv.variant));
  list("prune.sparsities", sparsities);
  list("prune.random_sparsities", random_sparsities);
  list("prune.imp_sparsities", imp_sparsities);
  num("prune.imp_rounds", imp_rounds);
  num("attack.max_examples", static_cast<double>(attack_max_examples));
  num("attack.max_candidates", max_candidates);
  line("attack.curves", curves ? "true" : "false");
  line("ablation.sparsity", ablation_sparsity ? fmt(*ablation_sparsity) : "best");
  std::string modes;
  for (auto m : ablation_modes) modes += (modes.empty() ? "" : ",") + to_string(m);
  line("ablation.modes", modes);
  return o.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("invalid configuration: line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig c;
  Reader r(tree);

  if (auto v = r.find("run", "stages")) {
    for (const auto& s : split_list(*v)) {
      try {
        c.stages.push_back(parse_stage(s));
      } catch (const ConfigError& e) {
        r.error("run.stages", e.what());
      }
    }
  }
  if (auto v = r.find("run", "seeds")) {
    c.seeds.clear();
    for (const auto& s : split_list(*v)) {
      std::uint64_t seed = 0;
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
      if (ec != std::errc() || ptr != s.data() + s.size()) {
        r.error("run.seeds", "cannot parse '" + s + "'");
      } else {
        c.seeds.push_back(seed);
      }
    }
  }
  if (auto v = r.find("run", "out")) c.out = resolve(base_dir, *v);

  if (auto v = r.find("data", "source")) {
    if (*v == "synthetic") {
      c.synthetic = true;
    } else if (*v == "tsv") {
      c.synthetic = false;
    } else {
      r.error("data.source", "expected 'synthetic' or 'tsv', got '" + *v + "'");
    }
  }
  if (c.synthetic) {
    r.get("data", "classes", c.synth.num_classes);
    r.get("data", "signal_per_class", c.synth.signal_per_class);
    r.get("data", "shortcut_per_class", c.synth.shortcut_per_class);
    r.get("data", "filler_tokens", c.synth.filler_tokens);
    r.get("data", "seq_len", c.synth.seq_len);
    r.get("data", "signal_count", c.synth.signal_count);
    r.get("data", "shortcut_count", c.synth.shortcut_count);
    r.get("data", "shortcut_rate_train", c.synth.shortcut_rate_train);
    r.get("data", "shortcut_rate_test", c.synth.shortcut_rate_test);
    r.get("data", "noise_rate", c.synth.noise_rate);
    r.get("data", "train_size", c.synth.train_size);
    r.get("data", "dev_size", c.synth.dev_size);
    r.get("data", "test_size", c.synth.test_size);
    r.get("data", "pretrain_size", c.synth.pretrain_size);
    r.get("data", "max_substitutions", c.synth.max_candidates);
  } else {
    auto path = [&](const char* key, std::filesystem::path& target) {
      if (auto v = r.find("data", key)) target = resolve(base_dir, *v);
    };
    path("train", c.tsv.train);
    path("dev", c.tsv.dev);
    path("test", c.tsv.test);
    path("pretrain", c.tsv.pretrain);
    path("substitutions", c.tsv.substitutions);
    r.get("data", "seq_len", c.tsv.seq_len);
    r.get("data", "dev_fraction", c.tsv.dev_fraction);
  }

  r.get("model", "embed_dim", c.embed_dim);
  r.get("model", "layers", c.num_layers);
  r.get("model", "heads", c.num_heads);
  r.get("model", "mlp_dim", c.mlp_dim);

  r.get("pretrain", "epochs", c.pretrain.epochs);
  r.get("pretrain", "lr", c.pretrain.lr);
  r.get("pretrain", "weight_decay", c.pretrain.weight_decay);
  r.get("pretrain", "batch_size", c.pretrain.batch_size);
  r.get("pretrain", "mask_prob", c.pretrain.mask_prob);
  r.get("pretrain", "clip", c.pretrain.clip);

  c.finetune.lr = 2e-5;
  r.get("finetune", "epochs", c.finetune.epochs);
  r.get("finetune", "lr", c.finetune.lr);
  r.get("finetune", "weight_decay", c.finetune.weight_decay);
  r.get("finetune", "batch_size", c.finetune.batch_size);
  r.get("finetune", "dropout", c.finetune.dropout);
  r.get("finetune", "clip", c.finetune.clip);
  r.get("finetune", "linear_decay", c.finetune.linear_decay);

  r.get("masks", "lambda", c.masks.lambda);
  r.get("masks", "mask_lr", c.masks.mask_lr);
  r.get("masks", "epochs", c.masks.epochs);
  r.get("masks", "weight_decay", c.masks.weight_decay);
  r.get("masks", "batch_size", c.masks.batch_size);
  r.get("masks", "beta", c.masks.beta);
  r.get("masks", "init_mean", c.masks.init_mean);
  r.get("masks", "init_std", c.masks.init_std);
  r.get("masks", "adversarial", c.masks.adversarial);
  r.get("masks", "linear_decay", c.masks.linear_decay);

  r.get("adversarial", "eta", c.masks.adv.eta);
  r.get("adversarial", "epsilon0", c.masks.adv.epsilon0);
  r.get("adversarial", "steps", c.masks.adv.steps);
  if (auto v = r.find("adversarial", "epsilon")) {
    if (*v == "none" || v->empty()) {
      c.masks.adv.epsilon.reset();
    } else {
      double eps = 0.0;
      const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), eps);
      if (ec != std::errc() || ptr != v->data() + v->size()) {
        r.error("adversarial.epsilon", "expected 'none' or a radius, got '" + *v + "'");
      } else {
        c.masks.adv.epsilon = eps;
      }
    }
  }
  if (auto v = r.find("adversarial", "variant")) {
    try {
      c.masks.adv.variant = parse_adv_variant(*v);
    } catch (const std::exception& e) {
      r.error("adversarial.variant", e.what());
    }
  }

  if (auto v = r.find("prune", "sparsities")) c.sparsities = parse_doubles(r, "prune.sparsities", *v);
  if (auto v = r.find("prune", "random_sparsities")) {
    c.random_sparsities = parse_doubles(r, "prune.random_sparsities", *v);
  }
  if (auto v = r.find("prune", "imp_sparsities")) c.imp_sparsities = parse_doubles(r, "prune.imp_sparsities", *v);
  r.get("prune", "imp_rounds", c.imp_rounds);

  r.get("attack", "max_examples", c.attack_max_examples);
  r.get("attack", "max_candidates", c.max_candidates);
  r.get("attack", "curves", c.curves);

  if (auto v = r.find("ablation", "sparsity")) {
    if (*v == "best") {
      c.ablation_sparsity.reset();
    } else {
      double p = 0.0;
      const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), p);
      if (ec != std::errc() || ptr != v->data() + v->size()) {
        r.error("ablation.sparsity", "expected 'best' or a sparsity, got '" + *v + "'");
      } else {
        c.ablation_sparsity = p;
      }
    }
  }
  if (auto v = r.find("ablation", "modes")) {
    c.ablation_modes.clear();
    for (const auto& m : split_list(*v)) {
      try {
        c.ablation_modes.push_back(parse_ablation_mode(m));
      } catch (const std::exception& e) {
        r.error("ablation.modes", e.what());
      }
    }
  }

  r.check_unknown();
  auto errors = r.errors();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (auto pos = msg.find("\n  "); pos != std::string::npos;) {
      const auto next = msg.find("\n  ", pos + 3);
      errors.push_back(msg.substr(pos + 3, next == std::string::npos ? std::string::npos : next - pos - 3));
      pos = next;
    }
  }
  if (!errors.empty()) throw ConfigError(join_errors(errors));
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

}  // namespace rticket::runner
