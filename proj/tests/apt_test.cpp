#include <gtest/gtest.h>

#include "tapt/apt.hpp"
#include "tapt/errors.hpp"
#include "tapt/pretrain.hpp"
#include "test_util.hpp"

namespace tapt::apt {
namespace {

using dualenc::DualEncoder;
using dualenc::ModelWeights;
using dualenc::PromptDesign;
using testing::tiny_config;
using testing::tiny_family;

class AptTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { family_ = new bench::DatasetFamily(tiny_family()); }
  static void TearDownTestSuite() { delete family_; }

  const Dataset& source() const { return family_->source; }
  DualEncoder model{ModelWeights::initialize(tiny_config(), 3)};

  static TuneConfig small(PromptDesign d) {
    TuneConfig c;
    c.design = d;
    c.prompt_len = 2;
    c.epochs = 2;
    c.batch_size = 8;
    return c;
  }

  static bench::DatasetFamily* family_;
};

bench::DatasetFamily* AptTest::family_ = nullptr;

TEST(TuneConfigTest, Validation) {
  TuneConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(c.effective_inner_step(), c.epsilon);
  c.train_textual = true;
  EXPECT_THROW(c.validate(), ConsistencyError);
  c.design = PromptDesign::kVLIndependent;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TuneConfig{};
  c.epsilon = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TuneConfig{};
  c.prompt_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TuneConfigTest, JsonRoundTrip) {
  TuneConfig c;
  c.design = PromptDesign::kVLJoint;
  c.shots = 16;
  const TuneConfig back = nlohmann::json(c).get<TuneConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST_F(AptTest, ZeroEpochsReturnsInitialization) {
  TuneConfig c = small(PromptDesign::kVLIndependent);
  c.epochs = 0;
  const TuneResult r = tune(model, source(), c);
  EXPECT_EQ(r.prompts,
            dualenc::PromptSet::random(c.design, c.prompt_len, model.config().embed_dim, derive_seed(c.seed, 0), c.init_std));
  EXPECT_TRUE(r.curve.empty());
}

TEST_F(AptTest, TuningMovesPromptsNotWeights) {
  const std::string weights = model.weights().hash();
  const TuneConfig c = small(PromptDesign::kVisualOnly);
  const TuneResult r = tune(model, source(), c);
  EXPECT_EQ(model.weights().hash(), weights);
  EXPECT_EQ(r.curve.size(), c.epochs);
  EXPECT_NE(r.prompts,
            dualenc::PromptSet::random(c.design, c.prompt_len, model.config().embed_dim, derive_seed(c.seed, 0), c.init_std));
  EXPECT_FALSE(r.prompts.has_textual());
  EXPECT_EQ(r.manifest.at("prompts_hash"), r.prompts.hash());
  EXPECT_EQ(r.manifest.at("weights"), weights);
  EXPECT_EQ(r.manifest.at("data_hash"), source().hash());
  EXPECT_TRUE(r.manifest.at("adversarial").get<bool>());
}

TEST_F(AptTest, JointDesignKeepsOneSharedBlock) {
  const TuneResult r = tune(model, source(), small(PromptDesign::kVLJoint));
  ASSERT_EQ(r.prompts.blocks().size(), 1u);
  EXPECT_EQ(r.prompts.visual_tokens(), r.prompts.textual_tokens());
}

TEST_F(AptTest, SeededRunsAreBitIdentical) {
  const TuneConfig c = small(PromptDesign::kVLIndependent);
  const TuneResult a = tune(model, source(), c);
  const TuneResult b = tune(model, source(), c);
  EXPECT_EQ(a.prompts, b.prompts);
  EXPECT_EQ(a.curve, b.curve);
  TuneConfig other = c;
  other.seed = c.seed + 1;
  EXPECT_NE(tune(model, source(), other).prompts, a.prompts);
}

TEST_F(AptTest, StandardTuneIsCleanAndDiffers) {
  const TuneConfig c = small(PromptDesign::kVisualOnly);
  const TuneResult clean = standard_tune(model, source(), c);
  EXPECT_FALSE(clean.manifest.at("adversarial").get<bool>());
  EXPECT_NE(clean.prompts, tune(model, source(), c).prompts);
  // Zero epsilon makes the adversarial loop see clean images.
  TuneConfig zero = c;
  zero.epsilon = 0.0;
  EXPECT_EQ(tune(model, source(), zero).prompts, clean.prompts);
}

TEST_F(AptTest, ShotsLimitSamples) {
  TuneConfig c = small(PromptDesign::kVisualOnly);
  c.shots = 2;
  const TuneResult r = tune(model, source(), c);
  EXPECT_EQ(r.manifest.at("num_samples").get<std::size_t>(), 2u * source().catalog.size());
}

TEST(Pretrain, ZeroStepsStaysNearChanceAndIsDeterministic) {
  const auto family = tiny_family();
  dualenc::PretrainConfig c;
  c.model = tiny_config();
  c.steps = 0;
  const auto r0 = dualenc::pretrain_toy(family.pretrain, c);
  EXPECT_EQ(r0.manifest.at("weights_hash"), ModelWeights::initialize(c.model, derive_seed(c.seed, 0)).hash());
  c.steps = 4;
  c.batch_size = 4;
  c.warmup = 1;
  const auto a = dualenc::pretrain_toy(family.pretrain, c);
  const auto b = dualenc::pretrain_toy(family.pretrain, c);
  EXPECT_EQ(a.weights.hash(), b.weights.hash());
  EXPECT_NE(a.weights.hash(), r0.weights.hash());
  EXPECT_TRUE(std::isfinite(a.manifest.at("final_loss").get<double>()));
}

}  // namespace
}  // namespace tapt::apt
