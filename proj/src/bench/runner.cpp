#include "tapt/bench/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "tapt/container.hpp"
#include "tapt/errors.hpp"
#include "tapt/pretrain.hpp"
#include "tapt/rng.hpp"

namespace tapt::bench {

namespace fs = std::filesystem;
using dualenc::PromptSet;

// ---- Cells ----------------------------------------------------------------------

nlohmann::json CellSpec::defense_json(const Pipeline& p) const {
  nlohmann::json j = {{"kind", to_string(kind)}, {"weights", p.weights_digest()}};
  if (kind == DefenseKind::kHandcrafted) return j;
  j["design"] = dualenc::to_string(design);
  j["prompts"] = p.prompts_digest(design, true);
  if (kind == DefenseKind::kTapt) {
    j["stats"] = p.stats_digest(design);
    j["tapt"] = tapt;
    if (adaptive) j["adaptive_attack"] = true;
  }
  return j;
}

nlohmann::json CellSpec::to_json(const Pipeline& p) const {
  return {{"dataset", dataset}, {"data", p.data_digest()}, {"attack", attack},
          {"defense", defense_json(p)}, {"samples", samples}, {"seed", seed}};
}

std::string CellSpec::digest(const Pipeline& p) const { return canonical_digest(to_json(p)); }

CellSpec CellSpec::from_json(const nlohmann::json& j) {
  CellSpec c;
  c.dataset = j.at("dataset");
  c.attack = j.at("attack").get<attacks::AttackSpec>();
  const nlohmann::json& d = j.at("defense");
  c.kind = parse_defense(d.at("kind"));
  if (d.contains("design")) c.design = dualenc::parse_design(d.at("design"));
  if (d.contains("tapt")) c.tapt = d.at("tapt").get<defense::TAPTConfig>();
  c.adaptive = d.value("adaptive_attack", false);
  c.samples = j.at("samples");
  c.seed = j.at("seed");
  return c;
}

std::vector<CellSpec> enumerate_cells(const BenchConfig& config) {
  auto wants = [&](DefenseKind k) {
    return std::find(config.defenses.begin(), config.defenses.end(), k) != config.defenses.end();
  };
  std::vector<CellSpec> cells;
  for (const std::string& ds : config.datasets)
    for (const attacks::AttackSpec& a : config.attacks) {
      CellSpec base;
      base.dataset = ds;
      base.attack = a;
      base.tapt = config.tapt;
      base.samples = config.eval_samples;
      base.seed = config.seed;
      base.adaptive = config.adaptive_attack;
      if (wants(DefenseKind::kHandcrafted)) cells.push_back(base);
      for (dualenc::PromptDesign design : config.designs)
        for (DefenseKind k : {DefenseKind::kAptFixed, DefenseKind::kTapt}) {
          if (!wants(k)) continue;
          CellSpec c = base;
          c.kind = k;
          c.design = design;
          cells.push_back(c);
        }
    }
  return cells;
}

// ---- Evaluation -----------------------------------------------------------------

namespace {

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

std::mutex& key_mutex(const std::string& key) {
  static std::mutex guard;
  static std::map<std::string, std::unique_ptr<std::mutex>> locks;
  std::lock_guard lock(guard);
  auto& m = locks[key];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

struct EvalInputs {
  std::vector<std::size_t> indices;
  Matrix images;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
};

EvalInputs eval_inputs(const Dataset& d, std::size_t samples) {
  if (samples > d.test.size())
    throw ConfigError("eval_samples " + std::to_string(samples) + " exceeds the test split of " + d.name);
  EvalInputs in;
  const std::size_t n = samples == 0 ? d.test.size() : samples;
  in.indices.assign(d.test.begin(), d.test.begin() + static_cast<std::ptrdiff_t>(n));
  in.images = gather_images(d, in.indices);
  in.labels = gather_labels(d, in.indices);
  in.ids.assign(in.indices.begin(), in.indices.end());
  return in;
}

attacks::AttackSpec effective_attack(const CellSpec& c) {
  attacks::AttackSpec a = c.attack;
  a.seed = derive_seed(c.seed, c.attack.seed);
  return a;
}

defense::TAPTConfig effective_tapt(const CellSpec& c) {
  defense::TAPTConfig t = c.tapt;
  t.seed = derive_seed(c.seed ^ 0x7a7a7a7aULL, c.tapt.seed);
  return t;
}

/// Adversarial copies of the evaluation images against `prompts`, shared by
/// every defense evaluated on the same (dataset, attack, prompts) triple.
Matrix adversarial_images(Pipeline& p, const CellSpec& c, const std::string& prompts_key, const PromptSet& prompts,
                          const Dataset& d, const EvalInputs& in, bool force) {
  const attacks::AttackSpec spec = effective_attack(c);
  const std::string key = canonical_digest({{"weights", p.weights_digest()},
                                            {"data", p.data_digest()},
                                            {"dataset", c.dataset},
                                            {"attack", spec},
                                            {"prompts", prompts_key},
                                            {"samples", in.ids.size()}});
  const fs::path path = p.store().path_for("adv", key);
  auto compute = [&] {
    const attacks::Target target(p.model(), prompts, d.catalog);
    const auto ex = attacks::attack_batch(target, in.images, in.labels, in.ids, spec);
    Matrix adv(in.images.rows(), in.images.cols());
    for (std::size_t i = 0; i < ex.size(); ++i) std::copy(ex[i].image.begin(), ex[i].image.end(), adv.row(i).begin());
    return adv;
  };
  if (force) return compute();
  std::lock_guard lock(key_mutex(key));
  if (fs::exists(path)) {
    try {
      return read_container(path, "adversarial").get("images");
    } catch (const IoError&) {
      // Recompute a damaged cache entry below.
    }
  }
  Matrix adv = compute();
  Container c2;
  c2.kind = "adversarial";
  c2.meta = {{"attack", spec}, {"dataset", c.dataset}, {"prompts", prompts_key}};
  c2.put("images", adv);
  fs::create_directories(path.parent_path());
  write_container(path, c2);
  p.store().record("adv", key, path, {{"dataset", c.dataset}, {"attack", c.attack.digest()}});
  return adv;
}

/// Per sample: run TAPT on the clean image, then attack the updated prompts.
Matrix adaptive_adversarial(Pipeline& p, const CellSpec& c, const Dataset& d, const EvalInputs& in) {
  const attacks::AttackSpec spec = effective_attack(c);
  const defense::TAPTConfig tc = effective_tapt(c);
  const PromptSet& init = p.prompts(c.design, true);
  const stats::LayerStatsBundle& bundle = p.stats(c.design);
  Matrix adv(in.images.rows(), in.images.cols());
  for (std::size_t i = 0; i < in.ids.size(); ++i) {
    defense::PromptState state{init, optim::AdamW()};
    defense::defend_sample(p.model(), in.images.row(i), state, d.catalog, bundle, tc, in.ids[i]);
    const attacks::Target target(p.model(), state.prompts, d.catalog);
    const Matrix one(1, in.images.cols(), std::vector<double>(in.images.row(i).begin(), in.images.row(i).end()));
    const int label = in.labels[i];
    const std::uint64_t id = in.ids[i];
    const auto ex = attacks::attack_batch(target, one, std::span(&label, 1), std::span(&id, 1), spec);
    std::copy(ex[0].image.begin(), ex[0].image.end(), adv.row(i).begin());
  }
  return adv;
}

std::string tapt_log_path(const RunOptions& o, const std::string& cell, const char* stream) {
  if (o.diagnostics_dir.empty()) return {};
  fs::create_directories(o.diagnostics_dir);
  return (fs::path(o.diagnostics_dir) / (cell.substr(0, 16) + "-" + stream + ".jsonl")).string();
}

defense::StreamOutput run_tapt(Pipeline& p, const CellSpec& c, const Dataset& d, const Matrix& images,
                               const std::vector<std::uint64_t>& ids, const RunOptions& o, const std::string& log_path) {
  std::ofstream log;
  if (!log_path.empty()) log.open(log_path);
  defense::StreamOptions so;
  so.parallel = o.parallel_samples;
  so.log = log.is_open() ? &log : nullptr;
  return defense::defend_stream(p.model(), images, ids, p.prompts(c.design, true), d.catalog, p.stats(c.design),
                                effective_tapt(c), so);
}

}  // namespace

EvalRecord evaluate_cell(Pipeline& p, const CellSpec& c, const RunOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset& d = p.dataset(c.dataset);
  const dualenc::DualEncoder& model = p.model();
  const EvalInputs in = eval_inputs(d, c.samples);
  const std::string cell = c.digest(p);

  const bool hand = c.kind == DefenseKind::kHandcrafted;
  const PromptSet hc = PromptSet::handcrafted(model.config().embed_dim);
  const PromptSet& prompts = hand ? hc : p.prompts(c.design, true);
  const std::string prompts_key = hand ? std::string("handcrafted") : p.prompts_digest(c.design, true);
  const Matrix adv = c.kind == DefenseKind::kTapt && c.adaptive
                         ? adaptive_adversarial(p, c, d, in)
                         : adversarial_images(p, c, prompts_key, prompts, d, in, o.force);

  EvalRecord r;
  r.cell = cell;
  r.dataset_id = c.dataset;
  r.attack = c.attack.digest();
  r.attack_family = attacks::to_string(c.attack.family);
  r.epsilon = c.attack.epsilon;
  r.defense = canonical_digest(c.defense_json(p));
  r.defense_kind = to_string(c.kind);
  r.design = hand ? "none" : dualenc::to_string(c.design);
  r.num_samples = in.labels.size();
  r.seed = c.seed;

  if (c.kind != DefenseKind::kTapt) {
    const Matrix text = model.text_embeddings(d.catalog, prompts);
    r.clean_accuracy = accuracy(dualenc::argmax_rows(model.classify_batch(in.images, prompts, text)), in.labels);
    r.clean_accuracy_alt = r.clean_accuracy;
    r.robust_accuracy = accuracy(dualenc::argmax_rows(model.classify_batch(adv, prompts, text)), in.labels);
  } else {
    r.robust_accuracy = accuracy(run_tapt(p, c, d, adv, in.ids, o, tapt_log_path(o, cell, "robust")).predictions,
                                 in.labels);
    // Clean-stream accuracy does not depend on the attack; cache it per defense.
    const std::string key = canonical_digest({{"data", p.data_digest()}, {"dataset", c.dataset},
                                              {"defense", c.defense_json(p)}, {"samples", in.ids.size()},
                                              {"seed", c.seed}});
    const fs::path path = p.store().path_for("tapt_clean", key, ".json");
    std::lock_guard lock(key_mutex(key));
    nlohmann::json cached;
    if (!o.force && fs::exists(path)) {
      std::ifstream f(path);
      cached = nlohmann::json::parse(f, nullptr, false);
    }
    if (cached.is_object() && cached.contains("clean") && cached.contains("alt")) {
      r.clean_accuracy = cached.at("clean");
      r.clean_accuracy_alt = cached.at("alt");
    } else {
      const defense::StreamOutput out = run_tapt(p, c, d, in.images, in.ids, o, tapt_log_path(o, cell, "clean"));
      r.clean_accuracy = accuracy(out.predictions, in.labels);
      r.clean_accuracy_alt = accuracy(out.alternate_predictions, in.labels);
      if (!o.force) {
        fs::create_directories(path.parent_path());
        write_text_atomic(path, nlohmann::json{{"clean", r.clean_accuracy}, {"alt", r.clean_accuracy_alt}}.dump() + "\n");
      }
    }
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.validate();
  return r;
}

// ---- Matrix -----------------------------------------------------------------------

namespace {

std::optional<EvalRecord> stored_record(const fs::path& path, const std::string& cell) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  const nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  try {
    EvalRecord r = j.get<EvalRecord>();
    if (r.cell != cell) return std::nullopt;
    r.validate();
    return r;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

MatrixResult run_cells(Pipeline& p, const std::vector<CellSpec>& cells, const RunOptions& o) {
  MatrixResult res;
  res.records.resize(cells.size());
  std::vector<std::size_t> pending;
  std::vector<std::string> digests;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    digests.push_back(cells[i].digest(p));
    const fs::path path = p.store().path_for("records", digests[i], ".json");
    if (!o.force) {
      if (auto r = stored_record(path, digests[i])) {
        res.records[i] = *r;
        ++res.cached;
        continue;
      }
    }
    pending.push_back(i);
  }
  if (pending.empty()) return res;

  // Upstream artifacts first, so workers never wait on a build.
  std::set<dualenc::PromptDesign> designs;
  std::set<std::string> names;
  for (std::size_t i : pending) {
    names.insert(cells[i].dataset);
    if (cells[i].kind != DefenseKind::kHandcrafted) designs.insert(cells[i].design);
  }
  for (const auto& n : names) p.dataset(n);
  p.model();
  for (auto d : designs) {
    p.prompts(d, true);
    bool tapt = false;
    for (std::size_t i : pending) tapt |= cells[i].kind == DefenseKind::kTapt && cells[i].design == d;
    if (tapt) p.stats(d);
  }

  const std::size_t jobs = std::max<std::size_t>(1, std::min(o.jobs != 0 ? o.jobs : p.config().jobs, pending.size()));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed) {
      const std::size_t k = next++;
      if (k >= pending.size()) return;
      const std::size_t i = pending[k];
      try {
        const CellSpec& c = cells[i];
        EvalRecord r = evaluate_cell(p, c, o);
        p.store().store_config(r.cell, c.to_json(p));
        p.store().store_config(r.attack, c.attack);
        p.store().store_config(r.defense, c.defense_json(p));
        const fs::path path = p.store().path_for("records", r.cell, ".json");
        fs::create_directories(path.parent_path());
        write_text_atomic(path, nlohmann::json(r).dump(1) + "\n");
        p.store().record("record", r.cell, path,
                         {{"dataset", r.dataset_id}, {"defense", r.defense_kind}, {"design", r.design},
                          {"attack", r.attack_family}, {"robust", r.robust_accuracy}});
        if (p.log)
          p.log(r.dataset_id + " " + r.attack_family + " " + r.defense_kind + "/" + r.design + ": clean " +
                std::to_string(r.clean_accuracy) + " robust " + std::to_string(r.robust_accuracy));
        res.records[i] = std::move(r);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  res.computed = pending.size();
  return res;
}

MatrixResult run_matrix(Pipeline& p, const RunOptions& o) {
  MatrixResult res = run_cells(p, enumerate_cells(p.config()), o);
  const std::string d = p.config().digest();
  const fs::path dir = p.store().root() / "tables";
  fs::create_directories(dir);
  write_text_atomic(dir / (d + ".csv"), records_to_csv(res.records));
  write_text_atomic(dir / (d + ".json"), nlohmann::json(res.records).dump(1) + "\n");
  p.store().store_config(d, p.config());
  p.store().record("table", d, dir / (d + ".csv"), {{"cells", res.records.size()}});
  return res;
}

EvalRecord reproduce(Pipeline& p, const std::string& cell_digest, const RunOptions& options) {
  const nlohmann::json j = p.store().load_config(cell_digest);
  const CellSpec c = CellSpec::from_json(j);
  if (c.digest(p) != cell_digest)
    throw ConfigError("cell " + cell_digest + " was produced under a different pipeline config");
  RunOptions o = options;
  o.force = true;
  return evaluate_cell(p, c, o);
}

// ---- Ablation -----------------------------------------------------------------------

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"steps", "epsilon", "reset_interval", "alpha", "tau", "num_views"};
  return axes;
}

namespace {

double parse_double(const std::string& axis, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw UsageError("axis " + axis + ": bad value '" + v + "'");
  return x;
}

std::size_t parse_count(const std::string& axis, const std::string& v) {
  const double x = parse_double(axis, v);
  if (x < 0 || x != static_cast<double>(static_cast<std::size_t>(x)))
    throw UsageError("axis " + axis + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

}  // namespace

BenchConfig with_axis(const BenchConfig& base, const std::string& axis, const std::string& value) {
  BenchConfig c = base;
  if (axis == "steps") {
    c.tapt.steps = parse_count(axis, value);
  } else if (axis == "epsilon") {
    const double eps = parse_double(axis, value) * base.epsilon_multiplier / 255.0;
    for (attacks::AttackSpec& a : c.attacks) {
      a.step_size = a.epsilon > 0.0 ? a.step_size * eps / a.epsilon : eps / 4.0;
      a.epsilon = eps;
    }
  } else if (axis == "reset_interval") {
    c.tapt.reset_interval = defense::parse_reset(value);
  } else if (axis == "alpha") {
    c.tapt.alpha = parse_double(axis, value);
  } else if (axis == "tau") {
    c.tapt.select_fraction = parse_double(axis, value);
  } else if (axis == "num_views") {
    c.tapt.num_views = parse_count(axis, value);
  } else {
    throw UsageError("unknown ablation axis '" + axis + "'");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw UsageError("axis " + axis + " value " + value + ": " + e.what());
  }
  return c;
}

std::string AblationResult::series_csv() const {
  std::ostringstream out;
  out << "value,robust_accuracy,clean_accuracy\n";
  for (const AblationPoint& pt : points) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", pt.robust_mean, pt.clean_mean);
    out << pt.value << ',' << buf << '\n';
  }
  return out.str();
}

AblationResult ablate(const BenchConfig& base, std::shared_ptr<ArtifactStore> store, const std::string& axis,
                      const std::vector<std::string>& values, const RunOptions& options,
                      const std::function<void(const std::string&)>& log) {
  if (std::find(ablation_axes().begin(), ablation_axes().end(), axis) == ablation_axes().end())
    throw UsageError("unknown ablation axis '" + axis + "'");
  if (values.empty()) throw UsageError("ablation needs at least one value");
  AblationResult res;
  res.axis = axis;
  for (const std::string& v : values) {
    BenchConfig c = with_axis(base, axis, v);
    c.defenses = {DefenseKind::kTapt};
    Pipeline p(c, store);
    p.log = log;
    AblationPoint pt;
    pt.value = v;
    pt.records = run_cells(p, enumerate_cells(c), options).records;
    for (const EvalRecord& r : pt.records) {
      pt.robust_mean += r.robust_accuracy;
      pt.clean_mean += r.clean_accuracy;
    }
    if (!pt.records.empty()) {
      pt.robust_mean /= static_cast<double>(pt.records.size());
      pt.clean_mean /= static_cast<double>(pt.records.size());
    }
    if (log) log(axis + "=" + v + ": robust " + std::to_string(pt.robust_mean) + " clean " + std::to_string(pt.clean_mean));
    res.points.push_back(std::move(pt));
  }
  const std::string d = canonical_digest({{"base", base.digest()}, {"axis", axis}, {"values", values}});
  const fs::path path = store->root() / "ablations" / (axis + "-" + d.substr(0, 16) + ".csv");
  fs::create_directories(path.parent_path());
  write_text_atomic(path, res.series_csv());
  store->record("ablation", d, path, {{"axis", axis}, {"values", values}});
  return res;
}

}  // namespace tapt::bench
