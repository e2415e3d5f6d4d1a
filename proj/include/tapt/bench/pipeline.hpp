#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "tapt/bench/config.hpp"
#include "tapt/stats.hpp"

namespace tapt::bench {

/// Content-addressed artifact directory: <root>/<kind>/<digest><ext>, plus
/// index.json mapping every registered digest to its kind, path and summary.
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path_for(const std::string& kind, const std::string& digest,
                                 const std::string& ext = ".bin") const;
  /// Adds or replaces an index entry; safe to call from several threads.
  void record(const std::string& kind, const std::string& digest, const std::filesystem::path& path,
              const nlohmann::json& summary = nlohmann::json::object());
  nlohmann::json index() const;

  /// Stores a JSON document at configs/<digest>.json so digests resolve.
  void store_config(const std::string& digest, const nlohmann::json& config);
  nlohmann::json load_config(const std::string& digest) const;

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
};

/// Builds or loads the upstream artifacts of a benchmark config in pipeline
/// order: data -> pretrain -> apt/clean tune -> stats. Artifact digests are
/// computed from configs alone, so a lookup never needs the artifact itself.
/// With config.build = false a missing artifact raises MissingArtifactError
/// naming the CLI command that produces it. Thread-safe.
class Pipeline {
 public:
  Pipeline(BenchConfig config, std::shared_ptr<ArtifactStore> store);

  const BenchConfig& config() const { return config_; }
  ArtifactStore& store() { return *store_; }

  std::string data_digest() const;
  std::string weights_digest() const;
  std::string prompts_digest(dualenc::PromptDesign design, bool adversarial) const;
  std::string stats_digest(dualenc::PromptDesign design) const;

  std::filesystem::path family_dir();
  const Dataset& dataset(const std::string& name);
  const dualenc::DualEncoder& model();
  const dualenc::PromptSet& prompts(dualenc::PromptDesign design, bool adversarial);
  const stats::LayerStatsBundle& stats(dualenc::PromptDesign design);

  /// Progress messages (one line each); silent by default.
  std::function<void(const std::string&)> log;

 private:
  void say(const std::string& msg) const;
  apt::TuneConfig tune_config(dualenc::PromptDesign design) const;

  BenchConfig config_;
  std::shared_ptr<ArtifactStore> store_;
  std::recursive_mutex mutex_;
  std::map<std::string, std::unique_ptr<Dataset>> datasets_;
  std::unique_ptr<dualenc::DualEncoder> model_;
  std::map<std::string, std::unique_ptr<dualenc::PromptSet>> prompts_;
  std::map<std::string, std::unique_ptr<stats::LayerStatsBundle>> stats_;
};

}  // namespace tapt::bench
