// Command-line front end for the toy TAPT lab.

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tapt/bench/config.hpp"
#include "tapt/bench/pipeline.hpp"
#include "tapt/bench/report.hpp"
#include "tapt/bench/runner.hpp"
#include "tapt/checkpoint.hpp"
#include "tapt/container.hpp"
#include "tapt/errors.hpp"

namespace {

using namespace tapt;
using namespace tapt::bench;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr int kMissing = 3;
constexpr int kNumerical = 4;

struct Common {
  std::string config_path;
  std::string run_dir;
  std::vector<std::string> sets;
  long long seed = -1;
  long long eval_samples = -1;
  std::size_t jobs = 0;
  bool no_build = false;
  bool quiet = false;
};

/// "a.b.c=value" -> j["a"]["b"]["c"] = value (parsed as JSON when possible).
void apply_set(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  auto step = [&](const std::string& name) -> nlohmann::json& {
    if (node->is_array()) {
      std::size_t idx = 0;
      const auto [end, ec] = std::from_chars(name.data(), name.data() + name.size(), idx);
      if (ec != std::errc() || end != name.data() + name.size() || idx >= node->size())
        throw UsageError("--set " + key + ": bad index " + name);
      return (*node)[idx];
    }
    if (!node->is_object()) throw UsageError("--set " + key + ": " + name + " is not inside a section");
    return (*node)[name];
  };
  for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &step(path[i]);
  step(path.back()) = value;
}

BenchConfig resolve(const Common& c) {
  BenchConfig cfg = c.config_path.empty() ? BenchConfig{} : load_config(c.config_path);
  nlohmann::json j = cfg;
  for (const std::string& s : c.sets) apply_set(j, s);
  if (c.seed >= 0) j["seed"] = c.seed;
  if (c.eval_samples >= 0) j["eval_samples"] = c.eval_samples;
  if (c.jobs > 0) j["jobs"] = c.jobs;
  if (c.no_build) j["build"] = false;
  if (!c.run_dir.empty()) j["run_dir"] = c.run_dir;
  try {
    cfg = j.get<BenchConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "JSON benchmark config (defaults apply to absent keys)");
  app->add_option("--run-dir", c.run_dir, "Content-addressed artifact directory");
  app->add_option("--set", c.sets, "Override a config key, e.g. --set tapt.lr=0.001")->take_all();
  app->add_option("--seed", c.seed, "Global seed");
  app->add_option("--eval-samples", c.eval_samples, "Test samples per dataset (0 = whole split)");
  app->add_option("-j,--jobs", c.jobs, "Concurrent matrix cells");
  app->add_flag("--no-build", c.no_build, "Fail instead of building missing upstream artifacts");
  app->add_flag("-q,--quiet", c.quiet, "Suppress progress lines");
}

struct Context {
  BenchConfig config;
  std::shared_ptr<ArtifactStore> store;
  std::unique_ptr<Pipeline> pipeline;
};

Context open(const Common& c) {
  Context ctx;
  ctx.config = resolve(c);
  ctx.store = std::make_shared<ArtifactStore>(ctx.config.run_dir);
  ctx.pipeline = std::make_unique<Pipeline>(ctx.config, ctx.store);
  if (!c.quiet) ctx.pipeline->log = [](const std::string& s) { std::cerr << "[tapt] " << s << '\n'; };
  return ctx;
}

std::vector<dualenc::PromptDesign> designs_of(const BenchConfig& cfg, const std::string& design) {
  if (design.empty()) return cfg.designs;
  return {dualenc::parse_design(design)};
}

void print_record(const EvalRecord& r) { std::cout << nlohmann::json(r).dump(1) << '\n'; }

CellSpec single_cell(const BenchConfig& cfg, const std::string& dataset, const std::string& family,
                     DefenseKind kind, const std::string& design) {
  CellSpec cell;
  cell.dataset = dataset;
  const attacks::Family want = attacks::parse_family(family);
  bool found = false;
  for (const attacks::AttackSpec& a : cfg.attacks)
    if (a.family == want && !found) {
      cell.attack = a;
      found = true;
    }
  if (!found) throw UsageError("no " + family + " attack in the config");
  cell.kind = kind;
  if (kind != DefenseKind::kHandcrafted) cell.design = dualenc::parse_design(design.empty() ? "visual_only" : design);
  cell.tapt = cfg.tapt;
  cell.samples = cfg.eval_samples;
  cell.seed = cfg.seed;
  cell.adaptive = cfg.adaptive_attack;
  return cell;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string v;
  while (std::getline(ss, v, ',')) if (!v.empty()) out.push_back(v);
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Toy test-time adversarial prompt tuning lab"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate-data", "Render the synthetic dataset family");
  std::string out_dir;
  gen->add_option("--out", out_dir, "Write to this directory instead of the run directory");
  auto* pre = app.add_subcommand("pretrain", "Pretrain the toy dual encoder");
  std::string design;
  auto* aptc = app.add_subcommand("apt-tune", "Adversarial prompt tuning on the source dataset");
  auto* cln = app.add_subcommand("clean-tune", "Standard prompt tuning on the source dataset");
  auto* sts = app.add_subcommand("compute-stats", "Adversarial and clean per-layer statistics");
  for (auto* s : {aptc, cln, sts}) s->add_option("--design", design, "visual_only, vl_joint or vl_independent");
  std::string dataset = "source", family = "PGD", log_path;
  bool adaptive = false;
  bool handcrafted = false;
  auto* atk = app.add_subcommand("attack", "Attack fixed prompts on one dataset");
  atk->add_option("--dataset", dataset);
  atk->add_option("--family", family, "PGD, DI or STRONG");
  atk->add_option("--design", design);
  atk->add_flag("--handcrafted", handcrafted, "Attack the hand-crafted prompts");
  auto* def = app.add_subcommand("defend", "Run TAPT on an attacked stream");
  def->add_option("--dataset", dataset);
  def->add_option("--family", family, "PGD, DI or STRONG");
  def->add_option("--design", design);
  def->add_option("--log-dir", log_path, "Directory for per-sample JSONL diagnostics");
  def->add_flag("--adaptive", adaptive, "Attack each sample's post-update prompts");
  bool force = false;
  auto* mat = app.add_subcommand("run-matrix", "Evaluate every dataset x attack x defense cell");
  mat->add_flag("--force", force, "Recompute cached cells");
  std::string axis, values;
  auto* abl = app.add_subcommand("ablate", "Sweep one TAPT axis");
  abl->add_option("--axis", axis, "steps, epsilon, reset_interval, alpha, tau or num_views")->required();
  abl->add_option("--values", values, "Comma-separated values; epsilon in nominal x/255 units")->required();
  std::string records_path, csv_out;
  auto* rep = app.add_subcommand("report", "Render records as defense x dataset grids");
  rep->add_option("--records", records_path, "Records CSV (defaults to the config's matrix table)");
  rep->add_option("--csv-out", csv_out, "Also write the grid as CSV");
  for (auto* s : app.get_subcommands({})) add_common(s, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (gen->parsed()) {
    const BenchConfig cfg = resolve(common);
    if (!out_dir.empty()) {
      write_family(build_family(cfg.data), cfg.data, out_dir);
      std::cout << out_dir << '\n';
    } else {
      Context ctx = open(common);
      std::cout << ctx.pipeline->family_dir().string() << '\n';
    }
    return kOk;
  }
  Context ctx = open(common);
  Pipeline& p = *ctx.pipeline;
  if (pre->parsed()) {
    p.model();
    std::cout << ctx.store->path_for("weights", p.weights_digest()).string() << '\n';
  } else if (aptc->parsed() || cln->parsed()) {
    for (auto d : designs_of(ctx.config, design)) {
      p.prompts(d, aptc->parsed());
      std::cout << ctx.store->path_for("prompts", p.prompts_digest(d, aptc->parsed())).string() << '\n';
    }
  } else if (sts->parsed()) {
    for (auto d : designs_of(ctx.config, design)) {
      p.stats(d);
      std::cout << ctx.store->path_for("stats", p.stats_digest(d)).string() << '\n';
    }
  } else if (atk->parsed()) {
    const CellSpec cell = single_cell(ctx.config, dataset, family,
                                      handcrafted ? DefenseKind::kHandcrafted : DefenseKind::kAptFixed, design);
    print_record(evaluate_cell(p, cell));
  } else if (def->parsed()) {
    RunOptions o;
    o.diagnostics_dir = log_path;
    if (adaptive) ctx.config.adaptive_attack = true;
    print_record(evaluate_cell(p, single_cell(ctx.config, dataset, family, DefenseKind::kTapt, design), o));
  } else if (mat->parsed()) {
    RunOptions o;
    o.force = force;
    const MatrixResult r = run_matrix(p, o);
    std::cerr << "[tapt] " << r.computed << " computed, " << r.cached << " cached\n";
    std::cout << render_text(build_report(r.records));
    std::cout << (ctx.store->root() / "tables" / (ctx.config.digest() + ".csv")).string() << '\n';
  } else if (abl->parsed()) {
    const AblationResult r = ablate(ctx.config, ctx.store, axis, split_values(values), {}, p.log);
    std::cout << r.series_csv();
  } else if (rep->parsed()) {
    const std::filesystem::path path = records_path.empty()
                                           ? ctx.store->root() / "tables" / (ctx.config.digest() + ".csv")
                                           : std::filesystem::path(records_path);
    const auto grids = build_report(load_records_csv(path));
    std::cout << render_text(grids);
    if (!csv_out.empty()) write_text_atomic(csv_out, render_csv(grids));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
