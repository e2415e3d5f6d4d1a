#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "tapt/bench/config.hpp"
#include "tapt/bench/dataset.hpp"
#include "tapt/bench/pipeline.hpp"
#include "tapt/bench/record.hpp"
#include "tapt/bench/report.hpp"
#include "tapt/bench/runner.hpp"
#include "tapt/errors.hpp"
#include "test_util.hpp"

namespace tapt::bench {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tapt_bench_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

BenchConfig tiny_bench(const fs::path& dir) {
  BenchConfig c;
  c.run_dir = dir;
  c.data.num_classes = 3;
  c.data.samples_per_class = 8;
  c.data.image_size = 16;
  c.data.num_zero_shot = 1;
  c.data.pretrain_samples_per_class = 2;
  c.pretrain.model = testing::tiny_config();
  c.pretrain.steps = 2;
  c.pretrain.batch_size = 4;
  c.pretrain.warmup = 1;
  c.apt.prompt_len = 2;
  c.apt.epochs = 1;
  c.apt.batch_size = 8;
  c.stats_attack.steps = 1;
  c.attacks.resize(2);
  for (auto& a : c.attacks) a.steps = 2;
  c.attacks[1].family = attacks::Family::kDI;
  c.datasets = {"source", "zeroshot0"};
  c.designs = {dualenc::PromptDesign::kVisualOnly, dualenc::PromptDesign::kVLJoint};
  c.tapt.num_views = 4;
  c.tapt.select_fraction = 0.5;
  c.eval_samples = 3;
  return c;
}

// ---- config -------------------------------------------------------------------------

TEST(BenchConfigTest, JsonRoundTripAndDigest) {
  BenchConfig c = tiny_bench("runs");
  const nlohmann::json j = c;
  const BenchConfig back = j.get<BenchConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.digest(), c.digest());
  // Execution knobs do not move the digest; experiment knobs do.
  c.jobs = 7;
  c.run_dir = "elsewhere";
  EXPECT_EQ(c.digest(), back.digest());
  c.tapt.alpha = 0.25;
  EXPECT_NE(c.digest(), back.digest());
}

TEST(BenchConfigTest, PartialFilesFallBackToDefaults) {
  const fs::path dir = temp_dir("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"eval_samples": 5, "defenses": ["tapt"], "tapt": {"reset_interval": "all"}})";
  const BenchConfig c = load_config(dir / "c.json");
  EXPECT_EQ(c.eval_samples, 5u);
  EXPECT_EQ(c.defenses, std::vector<DefenseKind>{DefenseKind::kTapt});
  EXPECT_EQ(c.tapt.reset_interval, defense::kResetAll);
  EXPECT_EQ(c.run_dir, dir / "runs");
  EXPECT_EQ(c.attacks.size(), 3u);
  std::ofstream(dir / "bad.json") << R"({"defenses": ["magic"]})";
  EXPECT_THROW(load_config(dir / "bad.json"), UsageError);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_THROW(load_config(dir / "broken.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "absent.json"), MissingArtifactError);
  fs::remove_all(dir);
}

TEST(BenchConfigTest, CanonicalDigestIgnoresKeyOrder) {
  EXPECT_EQ(canonical_digest(nlohmann::json::parse(R"({"a":1,"b":[1,2]})")),
            canonical_digest(nlohmann::json::parse(R"({ "b": [1, 2], "a": 1 })")));
}

// ---- datasets -----------------------------------------------------------------------

TEST(GenerateTest, DefaultFamilyShapeAndDisjointVocabularies) {
  const DatasetFamily f = build_family({});
  EXPECT_EQ(f.source.size(), 800u);
  ASSERT_EQ(f.zero_shot.size(), 2u);
  std::set<std::string> seen(f.source.catalog.class_names.begin(), f.source.catalog.class_names.end());
  for (const Dataset& z : f.zero_shot) {
    EXPECT_EQ(z.size(), 800u);
    EXPECT_EQ(z.catalog.size(), 8u);
    for (const std::string& n : z.catalog.class_names) EXPECT_TRUE(seen.insert(n).second) << n;
  }
  // Train and test partition each dataset.
  for (const Dataset* d : {&f.source, &f.zero_shot[0]}) {
    std::set<std::size_t> all(d->train.begin(), d->train.end());
    for (std::size_t i : d->test) EXPECT_TRUE(all.insert(i).second);
    EXPECT_EQ(all.size(), d->size());
  }
}

TEST(GenerateTest, SameSpecGivesByteIdenticalDirectories) {
  SyntheticDatasetSpec spec;
  spec.samples_per_class = 10;
  const fs::path a = temp_dir("gen_a"), b = temp_dir("gen_b");
  write_family(build_family(spec), spec, a);
  write_family(build_family(spec), spec, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_GE(files, 9u);
  const Dataset loaded = load_dataset(a / "zeroshot1");
  EXPECT_EQ(loaded.hash(), build_family(spec).zero_shot[1].hash());
  EXPECT_EQ(family_members(a), (std::vector<std::string>{"source", "zeroshot0", "zeroshot1"}));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(GenerateTest, UnwritableTargetIsAnIoError) {
  const fs::path file = temp_dir("blocker");
  std::ofstream(file) << "x";
  SyntheticDatasetSpec spec;
  spec.samples_per_class = 2;
  EXPECT_ANY_THROW(write_family(build_family(spec), spec, file / "sub"));
  fs::remove(file);
}

// ---- records and report -----------------------------------------------------------------

EvalRecord rec(std::string dataset, std::string kind, std::string design, double robust, std::string defense = "d",
               std::string attack = "a") {
  EvalRecord r;
  r.cell = dataset + kind + design + defense + attack;
  r.dataset_id = std::move(dataset);
  r.attack = std::move(attack);
  r.attack_family = "PGD";
  r.epsilon = 8.0 / 255.0;
  r.defense = std::move(defense);
  r.defense_kind = std::move(kind);
  r.design = std::move(design);
  r.robust_accuracy = robust;
  r.clean_accuracy = 90.0;
  r.clean_accuracy_alt = 88.0;
  r.num_samples = 64;
  r.wall_time = 0.123456789;
  r.seed = 42;
  return r;
}

TEST(RecordTest, CsvRoundTripIsLossless) {
  std::vector<EvalRecord> rs = {rec("source", "apt", "visual_only", 100.0 / 3.0), rec("zeroshot0", "tapt", "vl_joint", 0.1)};
  rs[1].epsilon = 1.0 / 255.0;
  rs[1].wall_time = 1e-300;
  const std::vector<EvalRecord> back = records_from_csv(records_to_csv(rs));
  ASSERT_EQ(back.size(), rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    EXPECT_EQ(nlohmann::json(back[i]), nlohmann::json(rs[i]));
    EXPECT_TRUE(back[i].same_result(rs[i]));
  }
  EXPECT_TRUE(records_from_csv(records_to_csv({})).empty());
  EXPECT_THROW(records_from_csv("nope\n"), IoError);
}

TEST(RecordTest, AccuracyRange) {
  EvalRecord r = rec("s", "apt", "v", 50.0);
  EXPECT_NO_THROW(r.validate());
  r.robust_accuracy = 100.5;
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(ReportTest, SingleRecordIsItsOwnAverage) {
  const auto grids = build_report({rec("source", "apt", "visual_only", 37.5)});
  ASSERT_EQ(grids.size(), 1u);
  ASSERT_EQ(grids[0].rows.size(), 1u);
  EXPECT_EQ(grids[0].rows[0].robust_average, 37.5);
  EXPECT_FALSE(grids[0].rows[0].delta.has_value());
}

TEST(ReportTest, DeltaAgainstMatchedBaseline) {
  const auto grids = build_report({rec("source", "apt", "visual_only", 30.0, "p"),
                                   rec("source", "tapt", "visual_only", 72.5, "t"),
                                   rec("source", "handcrafted", "none", 40.0, "h")});
  ASSERT_EQ(grids.size(), 1u);
  ASSERT_EQ(grids[0].rows.size(), 3u);
  EXPECT_EQ(grids[0].rows[0].defense_kind, "handcrafted");
  EXPECT_DOUBLE_EQ(*grids[0].rows[1].delta, -10.0);
  EXPECT_DOUBLE_EQ(*grids[0].rows[2].delta, 42.5);
  const std::string text = render_text(grids);
  EXPECT_NE(text.find("+42.5"), std::string::npos);
  EXPECT_NE(text.find("-10.0"), std::string::npos);
  EXPECT_NE(render_csv(grids).find("tapt,average,72.5,90,+42.5"), std::string::npos);
}

TEST(ReportTest, AveragesAcrossDatasetsAndSplitsDesigns) {
  const auto grids = build_report({rec("source", "apt", "visual_only", 30.0), rec("zs", "apt", "visual_only", 50.0),
                                   rec("source", "apt", "vl_joint", 10.0, "j"),
                                   rec("source", "handcrafted", "none", 5.0, "h")});
  ASSERT_EQ(grids.size(), 2u);
  EXPECT_EQ(grids[0].datasets.size(), 2u);
  EXPECT_DOUBLE_EQ(grids[0].rows[1].robust_average, 40.0);
  // Hand-crafted joins both design grids.
  EXPECT_EQ(grids[1].rows.size(), 2u);
  EXPECT_DOUBLE_EQ(*grids[1].rows[1].delta, 5.0);
}

TEST(ReportTest, MixedDigestsAreRejected) {
  EXPECT_THROW(build_report({rec("source", "tapt", "visual_only", 30.0, "t1"),
                             rec("zs", "tapt", "visual_only", 50.0, "t2")}),
               ReportError);
  EXPECT_THROW(build_report({rec("source", "tapt", "visual_only", 30.0), rec("source", "tapt", "visual_only", 31.0)}),
               ReportError);
}

// ---- ablation axes ------------------------------------------------------------------------

TEST(AblationTest, AxisOverrides) {
  const BenchConfig base = tiny_bench("runs");
  EXPECT_EQ(with_axis(base, "steps", "4").tapt.steps, 4u);
  EXPECT_EQ(with_axis(base, "reset_interval", "all").tapt.reset_interval, defense::kResetAll);
  EXPECT_EQ(with_axis(base, "num_views", "16").tapt.num_views, 16u);
  EXPECT_DOUBLE_EQ(with_axis(base, "tau", "0.5").tapt.select_fraction, 0.5);
  EXPECT_DOUBLE_EQ(with_axis(base, "alpha", "1").tapt.alpha, 1.0);
  const BenchConfig e = with_axis(base, "epsilon", "2");
  for (std::size_t i = 0; i < e.attacks.size(); ++i) {
    EXPECT_DOUBLE_EQ(e.attacks[i].epsilon, 2.0 * base.epsilon_multiplier / 255.0);
    EXPECT_DOUBLE_EQ(e.attacks[i].step_size / e.attacks[i].epsilon,
                     base.attacks[i].step_size / base.attacks[i].epsilon);
  }
  EXPECT_THROW(with_axis(base, "temperature", "1"), UsageError);
  EXPECT_THROW(with_axis(base, "steps", "two"), UsageError);
  EXPECT_THROW(with_axis(base, "tau", "0"), UsageError);
  EXPECT_THROW(ablate(base, std::make_shared<ArtifactStore>(temp_dir("abl")), "colour", {"1"}), UsageError);
  fs::remove_all(temp_dir("abl"));
}

// ---- runner -------------------------------------------------------------------------------

class RunnerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(temp_dir("runner"));
    Pipeline p(tiny_bench(*dir_), std::make_shared<ArtifactStore>(*dir_));
    first_ = new MatrixResult(run_matrix(p));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
    delete first_;
  }
  static fs::path* dir_;
  static MatrixResult* first_;
};

fs::path* RunnerTest::dir_ = nullptr;
MatrixResult* RunnerTest::first_ = nullptr;

TEST_F(RunnerTest, EnumeratesEveryCell) {
  // 2 datasets x 2 attacks x (1 hand-crafted + 2 designs x 2 defenses).
  EXPECT_EQ(first_->records.size(), 20u);
  EXPECT_EQ(first_->computed, 20u);
  std::set<std::string> cells;
  for (const EvalRecord& r : first_->records) {
    EXPECT_TRUE(cells.insert(r.cell).second);
    EXPECT_EQ(r.num_samples, 3u);
    EXPECT_NO_THROW(r.validate());
  }
  const BenchConfig c = tiny_bench(*dir_);
  EXPECT_TRUE(fs::exists(*dir_ / "tables" / (c.digest() + ".csv")));
  EXPECT_EQ(load_records_csv(*dir_ / "tables" / (c.digest() + ".csv")).size(), 20u);
}

TEST_F(RunnerTest, IdenticalRerunIsFullyCached) {
  Pipeline p(tiny_bench(*dir_), std::make_shared<ArtifactStore>(*dir_));
  const MatrixResult again = run_matrix(p);
  EXPECT_EQ(again.computed, 0u);
  EXPECT_EQ(again.cached, 20u);
  for (std::size_t i = 0; i < again.records.size(); ++i)
    EXPECT_EQ(nlohmann::json(again.records[i]), nlohmann::json(first_->records[i]));
}

TEST_F(RunnerTest, DigestsResolveToStoredConfigs) {
  ArtifactStore store(*dir_);
  for (const EvalRecord& r : first_->records) {
    EXPECT_EQ(store.load_config(r.attack).get<attacks::AttackSpec>().digest(), r.attack);
    EXPECT_EQ(canonical_digest(store.load_config(r.defense)), r.defense);
    EXPECT_EQ(canonical_digest(store.load_config(r.cell)), r.cell);
  }
  const nlohmann::json idx = store.index();
  for (const char* kind : {"data", "weights", "prompts", "stats", "record", "table"}) {
    bool found = false;
    for (const auto& [k, v] : idx.items()) found |= v.at("kind") == kind;
    EXPECT_TRUE(found) << kind;
  }
}

TEST_F(RunnerTest, RecordsReproduceSeriallyAndInParallel) {
  Pipeline p(tiny_bench(*dir_), std::make_shared<ArtifactStore>(*dir_));
  RunOptions serial;
  serial.parallel_samples = false;
  RunOptions parallel;
  parallel.jobs = 3;
  for (const EvalRecord& r : first_->records) {
    EXPECT_TRUE(reproduce(p, r.cell, serial).same_result(r)) << r.cell;
  }
  parallel.force = true;
  const MatrixResult par = run_matrix(p, parallel);
  EXPECT_EQ(par.computed, 20u);
  for (std::size_t i = 0; i < par.records.size(); ++i) EXPECT_TRUE(par.records[i].same_result(first_->records[i]));
}

TEST_F(RunnerTest, EmptyMatrixGivesEmptyTable) {
  BenchConfig c = tiny_bench(*dir_);
  c.datasets.clear();
  Pipeline p(c, std::make_shared<ArtifactStore>(*dir_));
  const MatrixResult r = run_matrix(p);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(r.computed, 0u);
}

TEST_F(RunnerTest, InterruptedRecordIsRecomputed) {
  const EvalRecord& victim = first_->records[5];
  const fs::path path = *dir_ / "records" / (victim.cell + ".json");
  std::ofstream(path) << "{\"cell\": \"trunc";
  Pipeline p(tiny_bench(*dir_), std::make_shared<ArtifactStore>(*dir_));
  const MatrixResult r = run_matrix(p);
  EXPECT_EQ(r.computed, 1u);
  EXPECT_TRUE(r.records[5].same_result(victim));
}

TEST_F(RunnerTest, AblationSharesTheStore) {
  const auto store = std::make_shared<ArtifactStore>(*dir_);
  BenchConfig c = tiny_bench(*dir_);
  c.attacks.resize(1);
  c.designs = {dualenc::PromptDesign::kVisualOnly};
  const AblationResult a = ablate(c, store, "steps", {"0", "1"});
  ASSERT_EQ(a.points.size(), 2u);
  EXPECT_EQ(a.points[0].records.size(), 2u);
  // The steps=1 point is the matrix's own TAPT cell.
  for (const EvalRecord& r : a.points[1].records) {
    bool matched = false;
    for (const EvalRecord& m : first_->records) matched |= m.cell == r.cell && m.same_result(r);
    EXPECT_TRUE(matched);
  }
  EXPECT_NE(a.series_csv().find("value,robust_accuracy,clean_accuracy\n0,"), std::string::npos);
}

TEST_F(RunnerTest, AdaptiveAttackOnlyChangesTaptCells) {
  Pipeline p(tiny_bench(*dir_), std::make_shared<ArtifactStore>(*dir_));
  BenchConfig c = tiny_bench(*dir_);
  c.adaptive_attack = true;
  const auto plain = enumerate_cells(tiny_bench(*dir_));
  const auto adaptive = enumerate_cells(c);
  ASSERT_EQ(plain.size(), adaptive.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    const bool tapt = plain[i].kind == DefenseKind::kTapt;
    EXPECT_EQ(plain[i].digest(p) != adaptive[i].digest(p), tapt);
    changed += tapt;
  }
  EXPECT_EQ(changed, 8u);

  std::size_t i = 0;
  while (adaptive[i].kind != DefenseKind::kTapt) ++i;
  const EvalRecord r = evaluate_cell(p, adaptive[i]);
  const EvalRecord again = evaluate_cell(p, CellSpec::from_json(adaptive[i].to_json(p)));
  EXPECT_TRUE(r.same_result(again));
  EXPECT_GE(r.robust_accuracy, 0.0);
  EXPECT_EQ(r.clean_accuracy, first_->records[i].clean_accuracy);
}

TEST(PipelineTest, MissingArtifactNamesItsProducer) {
  const fs::path dir = temp_dir("missing");
  BenchConfig c = tiny_bench(dir);
  c.build = false;
  Pipeline p(c, std::make_shared<ArtifactStore>(dir));
  try {
    p.dataset("source");
    FAIL() << "expected MissingArtifactError";
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.producer, "generate-data");
  }
  write_family(build_family(c.data), c.data, dir / "data" / p.data_digest());
  try {
    p.model();
    FAIL() << "expected MissingArtifactError";
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.producer, "pretrain");
  }
  try {
    p.stats(dualenc::PromptDesign::kVisualOnly);
    FAIL() << "expected MissingArtifactError";
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.producer, "compute-stats");
  }
  fs::remove_all(dir);
}

}  // namespace
}  // namespace tapt::bench
