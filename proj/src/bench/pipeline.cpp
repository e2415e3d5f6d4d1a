#include "tapt/bench/pipeline.hpp"

#include <fstream>

#include "tapt/checkpoint.hpp"
#include "tapt/container.hpp"
#include "tapt/errors.hpp"

namespace tapt::bench {

namespace fs = std::filesystem;

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {
  try {
    fs::create_directories(root_);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create run directory " + root_.string() + ": " + e.what());
  }
}

fs::path ArtifactStore::path_for(const std::string& kind, const std::string& digest, const std::string& ext) const {
  return root_ / kind / (digest + ext);
}

namespace {

nlohmann::json read_json_or(const fs::path& p, nlohmann::json fallback) {
  std::ifstream in(p);
  if (!in) return fallback;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception&) {
    return fallback;
  }
}

}  // namespace

void ArtifactStore::record(const std::string& kind, const std::string& digest, const fs::path& path,
                           const nlohmann::json& summary) {
  std::lock_guard lock(mutex_);
  nlohmann::json idx = read_json_or(root_ / "index.json", nlohmann::json::object());
  idx[digest] = {{"kind", kind}, {"path", fs::relative(path, root_).string()}, {"summary", summary}};
  write_text_atomic(root_ / "index.json", idx.dump(1) + "\n");
}

nlohmann::json ArtifactStore::index() const {
  std::lock_guard lock(mutex_);
  return read_json_or(root_ / "index.json", nlohmann::json::object());
}

void ArtifactStore::store_config(const std::string& digest, const nlohmann::json& config) {
  const fs::path p = path_for("configs", digest, ".json");
  if (fs::exists(p)) return;
  fs::create_directories(p.parent_path());
  write_text_atomic(p, config.dump(1) + "\n");
}

nlohmann::json ArtifactStore::load_config(const std::string& digest) const {
  const fs::path p = path_for("configs", digest, ".json");
  std::ifstream in(p);
  if (!in) throw MissingArtifactError("no stored config for digest " + digest, "run-matrix");
  return nlohmann::json::parse(in);
}

// ---- Pipeline -------------------------------------------------------------------

Pipeline::Pipeline(BenchConfig config, std::shared_ptr<ArtifactStore> store)
    : config_(std::move(config)), store_(std::move(store)) {
  config_.validate();
  if (config_.pretrain.model.image_size != config_.data.image_size)
    throw ConfigError("pretrain.model.image_size must equal data.image_size");
}

void Pipeline::say(const std::string& msg) const {
  if (log) log(msg);
}

std::string Pipeline::data_digest() const { return canonical_digest(nlohmann::json(config_.data)); }

std::string Pipeline::weights_digest() const {
  return canonical_digest({{"data", data_digest()}, {"pretrain", config_.pretrain}});
}

apt::TuneConfig Pipeline::tune_config(dualenc::PromptDesign design) const {
  apt::TuneConfig c = config_.apt;
  c.design = design;
  return c;
}

std::string Pipeline::prompts_digest(dualenc::PromptDesign design, bool adversarial) const {
  return canonical_digest(
      {{"weights", weights_digest()}, {"tune", tune_config(design)}, {"adversarial", adversarial}, {"on", "source"}});
}

std::string Pipeline::stats_digest(dualenc::PromptDesign design) const {
  return canonical_digest({{"weights", weights_digest()},
                           {"robust", prompts_digest(design, true)},
                           {"clean", prompts_digest(design, false)},
                           {"attack", config_.stats_attack}});
}

fs::path Pipeline::family_dir() {
  std::lock_guard lock(mutex_);
  const std::string d = data_digest();
  const fs::path dir = store_->root() / "data" / d;
  if (!fs::exists(dir / "family.json")) {
    if (!config_.build) throw MissingArtifactError("dataset family " + d + " not generated", "generate-data");
    say("generating datasets " + d.substr(0, 12));
    const DatasetFamily fam = build_family(config_.data);
    write_family(fam, config_.data, dir);
    store_->record("data", d, dir, {{"members", family_members(dir)}});
  }
  return dir;
}

const Dataset& Pipeline::dataset(const std::string& name) {
  std::lock_guard lock(mutex_);
  auto it = datasets_.find(name);
  if (it == datasets_.end())
    it = datasets_.emplace(name, std::make_unique<Dataset>(load_dataset(family_dir() / name))).first;
  return *it->second;
}

const dualenc::DualEncoder& Pipeline::model() {
  std::lock_guard lock(mutex_);
  if (model_) return *model_;
  const std::string d = weights_digest();
  const fs::path p = store_->path_for("weights", d);
  if (!fs::exists(p)) {
    if (!config_.build) throw MissingArtifactError("pretrained weights " + d + " not found", "pretrain");
    const Dataset& corpus = dataset("pretrain");
    say("pretraining toy encoder " + d.substr(0, 12));
    dualenc::PretrainResult r = dualenc::pretrain_toy(corpus, config_.pretrain);
    fs::create_directories(p.parent_path());
    save_weights(p, {r.weights, r.manifest});
    store_->record("weights", d, p, {{"heldout_accuracy", r.manifest.at("heldout_accuracy")}});
  }
  WeightCheckpoint ck = load_weights(p);
  if (!(ck.weights.config == config_.pretrain.model)) throw ConfigError("weights " + d + ": config mismatch");
  model_ = std::make_unique<dualenc::DualEncoder>(std::move(ck.weights));
  return *model_;
}

const dualenc::PromptSet& Pipeline::prompts(dualenc::PromptDesign design, bool adversarial) {
  std::lock_guard lock(mutex_);
  const std::string d = prompts_digest(design, adversarial);
  if (auto it = prompts_.find(d); it != prompts_.end()) return *it->second;
  const fs::path p = store_->path_for("prompts", d);
  if (!fs::exists(p)) {
    const std::string producer = adversarial ? "apt-tune" : "clean-tune";
    if (!config_.build) throw MissingArtifactError("prompts " + d + " not found", producer);
    const dualenc::DualEncoder& m = model();
    const Dataset& src = dataset("source");
    say(producer + " " + dualenc::to_string(design) + " " + d.substr(0, 12));
    const apt::TuneResult r = adversarial ? apt::tune(m, src, tune_config(design))
                                          : apt::standard_tune(m, src, tune_config(design));
    fs::create_directories(p.parent_path());
    save_prompts(p, {r.prompts, r.manifest});
    store_->record("prompts", d, p, {{"design", dualenc::to_string(design)}, {"adversarial", adversarial}});
  }
  return *prompts_.emplace(d, std::make_unique<dualenc::PromptSet>(load_prompts(p).prompts)).first->second;
}

const stats::LayerStatsBundle& Pipeline::stats(dualenc::PromptDesign design) {
  std::lock_guard lock(mutex_);
  const std::string d = stats_digest(design);
  if (auto it = stats_.find(d); it != stats_.end()) return *it->second;
  const fs::path p = store_->path_for("stats", d);
  if (!fs::exists(p)) {
    if (!config_.build) throw MissingArtifactError("layer statistics " + d + " not found", "compute-stats");
    const dualenc::PromptSet& robust = prompts(design, true);
    const dualenc::PromptSet& clean = prompts(design, false);
    const Dataset& src = dataset("source");
    say("computing statistics " + dualenc::to_string(design) + " " + d.substr(0, 12));
    const stats::LayerStatsBundle b = stats::compute_public_stats(model(), src, src.train, robust, clean,
                                                                  config_.stats_attack);
    fs::create_directories(p.parent_path());
    stats::save_stats(p, b);
    store_->record("stats", d, p, {{"design", dualenc::to_string(design)}});
  }
  return *stats_.emplace(d, std::make_unique<stats::LayerStatsBundle>(stats::load_stats(p, model().config())))
              .first->second;
}

}  // namespace tapt::bench
