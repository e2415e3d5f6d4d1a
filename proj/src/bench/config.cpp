#include "tapt/bench/config.hpp"

#include <fstream>

#include "tapt/errors.hpp"
#include "tapt/hash.hpp"
#include "tapt/rng.hpp"

namespace tapt::bench {

std::string canonical_digest(const nlohmann::json& j) { return sha256_hex(j.dump()); }

std::uint64_t job_seed(std::uint64_t global_seed, const std::string& digest) {
  return derive_seed(global_seed, std::stoull(digest.substr(0, 15), nullptr, 16));
}

std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::kHandcrafted: return "handcrafted";
    case DefenseKind::kAptFixed: return "apt";
    case DefenseKind::kTapt: return "tapt";
  }
  return "?";
}

DefenseKind parse_defense(const std::string& s) {
  if (s == "handcrafted") return DefenseKind::kHandcrafted;
  if (s == "apt") return DefenseKind::kAptFixed;
  if (s == "tapt") return DefenseKind::kTapt;
  throw UsageError("unknown defense '" + s + "' (expected handcrafted, apt or tapt)");
}

attacks::AttackSpec BenchConfig::default_stats_attack() {
  attacks::AttackSpec a;
  a.epsilon = 8.0 / 255.0;
  a.steps = 10;
  a.step_size = 2.0 / 255.0;
  return a;
}

std::vector<attacks::AttackSpec> BenchConfig::default_attacks() {
  attacks::AttackSpec pgd;
  pgd.epsilon = 8.0 / 255.0;
  pgd.steps = 20;
  pgd.step_size = 2.0 / 255.0;
  pgd.step_decay = false;
  attacks::AttackSpec di = pgd;
  di.family = attacks::Family::kDI;
  attacks::AttackSpec strong = pgd;
  strong.family = attacks::Family::kStrong;
  strong.restarts = 3;
  strong.step_decay = true;
  return {pgd, di, strong};
}

void BenchConfig::validate() const {
  data.validate();
  apt.validate();
  stats_attack.validate();
  tapt.validate();
  for (const auto& a : attacks) a.validate();
  if (!(epsilon_multiplier > 0.0)) throw ConfigError("epsilon_multiplier must be positive");
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
  for (const auto& d : datasets) {
    if (d == "source") continue;
    bool known = false;
    for (std::size_t z = 0; z < data.num_zero_shot; ++z) known |= d == "zeroshot" + std::to_string(z);
    if (!known) throw ConfigError("unknown dataset '" + d + "'");
  }
}

std::string BenchConfig::digest() const {
  // Execution knobs do not change results and stay out of the digest.
  nlohmann::json j = *this;
  j.erase("run_dir");
  j.erase("jobs");
  j.erase("build");
  return canonical_digest(j);
}

void to_json(nlohmann::json& j, const BenchConfig& c) {
  std::vector<std::string> designs, defenses;
  for (auto d : c.designs) designs.push_back(dualenc::to_string(d));
  for (auto d : c.defenses) defenses.push_back(to_string(d));
  j = {{"run_dir", c.run_dir.string()},
       {"seed", c.seed},
       {"data", c.data},
       {"pretrain", c.pretrain},
       {"apt", c.apt},
       {"stats_attack", c.stats_attack},
       {"datasets", c.datasets},
       {"attacks", c.attacks},
       {"designs", designs},
       {"defenses", defenses},
       {"tapt", c.tapt},
       {"adaptive_attack", c.adaptive_attack},
       {"eval_samples", c.eval_samples},
       {"epsilon_multiplier", c.epsilon_multiplier},
       {"jobs", c.jobs},
       {"build", c.build}};
}

void from_json(const nlohmann::json& j, BenchConfig& c) {
  const BenchConfig d;
  c.run_dir = j.value("run_dir", d.run_dir.string());
  c.seed = j.value("seed", d.seed);
  c.data = j.contains("data") ? j.at("data").get<SyntheticDatasetSpec>() : d.data;
  c.pretrain = j.contains("pretrain") ? j.at("pretrain").get<dualenc::PretrainConfig>() : d.pretrain;
  c.apt = j.contains("apt") ? j.at("apt").get<apt::TuneConfig>() : d.apt;
  c.stats_attack = j.contains("stats_attack") ? j.at("stats_attack").get<attacks::AttackSpec>() : d.stats_attack;
  c.datasets = j.value("datasets", d.datasets);
  c.attacks = j.contains("attacks") ? j.at("attacks").get<std::vector<attacks::AttackSpec>>() : d.attacks;
  c.designs = d.designs;
  if (j.contains("designs")) {
    c.designs.clear();
    for (const auto& s : j.at("designs")) c.designs.push_back(dualenc::parse_design(s.get<std::string>()));
  }
  c.defenses = d.defenses;
  if (j.contains("defenses")) {
    c.defenses.clear();
    for (const auto& s : j.at("defenses")) c.defenses.push_back(parse_defense(s.get<std::string>()));
  }
  c.tapt = j.contains("tapt") ? j.at("tapt").get<defense::TAPTConfig>() : d.tapt;
  c.adaptive_attack = j.value("adaptive_attack", d.adaptive_attack);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.epsilon_multiplier = j.value("epsilon_multiplier", d.epsilon_multiplier);
  c.jobs = j.value("jobs", d.jobs);
  c.build = j.value("build", d.build);
}

BenchConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("config file " + path.string() + " not found", "run-matrix --help");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  BenchConfig c;
  try {
    c = j.get<BenchConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  if (c.run_dir.is_relative()) c.run_dir = path.parent_path() / c.run_dir;
  c.validate();
  return c;
}

}  // namespace tapt::bench
