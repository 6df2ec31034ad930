#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include <json.hpp>

#include "rticket/errors.hpp"
#include "runner.hpp"

namespace rticket::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMetricFiles[] = {"pretrain.jsonl",      "finetune.jsonl", "learn-masks.jsonl",
                                        "draw.jsonl",          "random-ticket.jsonl", "imp.jsonl",
                                        "retrain.jsonl",       "attack.jsonl",   "ablate.jsonl"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string stat_cells(const Stat& s) { return num(s.mean) + "," + num(s.std); }

std::string stat_cells(const std::optional<Stat>& s) { return s ? stat_cells(*s) : ","; }

std::optional<Stat> optional_stat(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return stat_of(v);
}

}  // namespace

Stat stat_of(const std::vector<double>& values) {
  Stat s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

const SweepRow* Report::find_sweep(const std::string& method, double sparsity, const std::string& split) const {
  for (const auto& r : sweep) {
    if (r.method == method && std::abs(r.sparsity - sparsity) < 1e-12 && r.split == split) return &r;
  }
  return nullptr;
}

const AblationRow* Report::find_ablation(const std::string& variant) const {
  for (const auto& r : ablation) {
    if (r.variant == variant) return &r;
  }
  return nullptr;
}

Report build_report(const fs::path& run_dir, const std::optional<std::string>& expected_hash, bool force) {
  std::vector<std::pair<std::uint64_t, fs::path>> seed_dirs;
  if (fs::exists(run_dir)) {
    for (const auto& e : fs::directory_iterator(run_dir)) {
      const auto name = e.path().filename().string();
      if (e.is_directory() && name.rfind("seed-", 0) == 0) {
        seed_dirs.emplace_back(std::stoull(name.substr(5)), e.path());
      }
    }
  }
  if (seed_dirs.empty()) throw StateError("no seed-* directories under '" + run_dir.string() + "'");
  std::sort(seed_dirs.begin(), seed_dirs.end());

  std::vector<std::string> missing;
  for (const char* file : kMetricFiles) {
    std::size_t present = 0;
    for (const auto& [seed, dir] : seed_dirs) present += fs::exists(dir / "metrics" / file) ? 1 : 0;
    const bool required = std::string(file) == "attack.jsonl";
    if ((present > 0 || required) && present < seed_dirs.size()) {
      for (const auto& [seed, dir] : seed_dirs) {
        if (!fs::exists(dir / "metrics" / file)) missing.push_back((dir / "metrics" / file).string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "report inputs missing:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw StateError(msg);
  }

  Report rep;
  std::set<std::string> hashes;
  std::vector<std::string> mismatched;
  std::map<std::string, std::vector<json>> by_file;
  for (const auto& [seed, dir] : seed_dirs) {
    rep.seeds.push_back(seed);
    for (const char* file : kMetricFiles) {
      const auto path = dir / "metrics" / file;
      if (!fs::exists(path)) continue;
      bool flagged = false;
      for (auto& rec : read_jsonl(path)) {
        const auto h = rec.value("config_hash", "");
        hashes.insert(h);
        if (expected_hash && h != *expected_hash && !flagged) {
          mismatched.push_back(path.string() + " (config " + h + ")");
          flagged = true;
        }
        by_file[file].push_back(std::move(rec));
      }
    }
  }
  if (!force) {
    if (!mismatched.empty()) {
      std::string msg = "metrics written under a different config than " + *expected_hash + " (pass --force to mix):";
      for (const auto& m : mismatched) msg += "\n  " + m;
      throw StateError(msg);
    }
    if (hashes.size() > 1) throw StateError("metrics mix several config hashes; pass --force to aggregate anyway");
  }
  rep.config_hash = expected_hash ? *expected_hash : (hashes.empty() ? "" : *hashes.begin());

  {
    std::map<std::tuple<std::string, double, std::string>, std::array<std::vector<double>, 4>> groups;
    for (const auto& r : by_file["attack.jsonl"]) {
      if (r.value("record", "") != "attack") continue;
      auto& g = groups[{r.at("method").get<std::string>(), r.at("sparsity").get<double>(), r.at("split").get<std::string>()}];
      g[0].push_back(r.at("clean_acc").get<double>());
      g[1].push_back(r.at("aua").get<double>());
      g[2].push_back(r.at("suc").get<double>());
      g[3].push_back(r.at("avg_queries").get<double>());
    }
    for (const auto& [k, g] : groups) {
      rep.sweep.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), stat_of(g[0]), stat_of(g[1]), stat_of(g[2]),
                           stat_of(g[3])});
    }
  }

  {
    std::map<std::tuple<std::string, double, int, std::string>, std::vector<double>> groups;
    for (const char* file : {"draw.jsonl", "random-ticket.jsonl", "imp.jsonl"}) {
      for (const auto& r : by_file[file]) {
        if (r.value("record", "") != "ticket") continue;
        for (const auto& l : r.at("layers")) {
          const double total = l.at("total").get<double>();
          const double kept = total - l.at("pruned").get<double>();
          groups[{r.at("method").get<std::string>(), r.at("sparsity").get<double>(), l.at("layer").get<int>(),
                  l.at("kind").get<std::string>()}]
              .push_back(total > 0 ? 100.0 * kept / total : 100.0);
        }
      }
    }
    for (const auto& [k, v] : groups) {
      rep.layers.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), stat_of(v)});
    }
  }

  {
    struct Acc {
      std::vector<double> loss, clean, aua, l0, pol;
    };
    std::map<std::tuple<std::string, std::string, int>, Acc> groups;
    for (const char* file : {"pretrain.jsonl", "finetune.jsonl", "learn-masks.jsonl", "retrain.jsonl", "ablate.jsonl"}) {
      for (const auto& r : by_file[file]) {
        if (r.value("record", "") != "epoch") continue;
        std::string model = r.value("model", r.value("variant", ""));
        auto& a = groups[{r.at("stage").get<std::string>(), model, r.at("epoch").get<int>()}];
        a.loss.push_back(r.at("loss").get<double>());
        if (r.contains("clean_acc")) a.clean.push_back(r.at("clean_acc").get<double>());
        if (r.contains("aua")) a.aua.push_back(r.at("aua").get<double>());
        if (r.contains("l0")) a.l0.push_back(r.at("l0").get<double>());
        if (r.contains("polarization")) a.pol.push_back(r.at("polarization").get<double>());
      }
    }
    for (const auto& [k, a] : groups) {
      rep.curves.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), stat_of(a.loss), optional_stat(a.clean),
                            optional_stat(a.aua), optional_stat(a.l0), optional_stat(a.pol)});
    }
  }

  {
    std::map<std::string, std::array<std::vector<double>, 3>> groups;
    std::vector<std::string> order;
    for (const auto& r : by_file["ablate.jsonl"]) {
      if (r.value("record", "") != "attack") continue;
      const auto v = r.at("variant").get<std::string>();
      if (!groups.contains(v)) order.push_back(v);
      auto& g = groups[v];
      g[0].push_back(r.at("sparsity").get<double>());
      g[1].push_back(r.at("clean_acc").get<double>());
      g[2].push_back(r.at("aua").get<double>());
    }
    for (const auto& v : order) {
      const auto& g = groups[v];
      rep.ablation.push_back({v, stat_of(g[0]), stat_of(g[1]), stat_of(g[2])});
    }
  }
  return rep;
}

void write_report(const Report& rep, const fs::path& dir) {
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + (dir / name).string() + "'");
    return out;
  };
  {
    auto out = open("sweep.csv");
    out << "method,sparsity,split,seeds,clean_mean,clean_std,aua_mean,aua_std,suc_mean,suc_std,queries_mean,queries_std\n";
    for (const auto& r : rep.sweep) {
      out << r.method << ',' << short_num(r.sparsity) << ',' << r.split << ',' << r.clean.n << ',' << stat_cells(r.clean) << ','
          << stat_cells(r.aua) << ',' << stat_cells(r.suc) << ',' << stat_cells(r.queries) << '\n';
    }
  }
  {
    auto out = open("layers.csv");
    out << "method,sparsity,layer,kind,seeds,surviving_mean,surviving_std\n";
    for (const auto& r : rep.layers) {
      out << r.method << ',' << short_num(r.sparsity) << ',' << r.layer << ',' << r.kind << ',' << r.surviving.n << ','
          << stat_cells(r.surviving) << '\n';
    }
  }
  {
    auto out = open("curves.csv");
    out << "stage,model,epoch,seeds,loss_mean,loss_std,clean_mean,clean_std,aua_mean,aua_std,l0_mean,l0_std,"
           "polarization_mean,polarization_std\n";
    for (const auto& r : rep.curves) {
      out << r.stage << ',' << r.model << ',' << r.epoch << ',' << r.loss.n << ',' << stat_cells(r.loss) << ','
          << stat_cells(r.clean) << ',' << stat_cells(r.aua) << ',' << stat_cells(r.l0) << ','
          << stat_cells(r.polarization) << '\n';
    }
  }
  {
    auto out = open("ablation.csv");
    out << "variant,seeds,sparsity_mean,sparsity_std,clean_mean,clean_std,aua_mean,aua_std\n";
    for (const auto& r : rep.ablation) {
      out << r.variant << ',' << r.aua.n << ',' << stat_cells(r.sparsity) << ',' << stat_cells(r.clean) << ','
          << stat_cells(r.aua) << '\n';
    }
  }
  {
    std::ofstream out(dir / "summary.json", std::ios::trunc);
    json j = {{"config_hash", rep.config_hash}, {"seeds", rep.seeds}};
    out << j.dump(1) << '\n';
  }
}

}  // namespace rticket::runner
