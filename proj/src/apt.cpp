#include "tapt/apt.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tapt/attacks.hpp"
#include "tapt/errors.hpp"
#include "tapt/optim.hpp"
#include "tapt/rng.hpp"

namespace tapt::apt {

using dualenc::PromptDesign;
using dualenc::PromptSet;

void TuneConfig::validate() const {
  if (prompt_len == 0) throw ConfigError("prompt_len must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0,1]");
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (train_textual && design == PromptDesign::kVisualOnly)
    throw ConsistencyError("textual prompt gradients requested for a visual-only design");
}

double TuneConfig::effective_inner_step() const {
  if (inner_step_size > 0.0) return inner_step_size;
  return inner_steps == 0 ? 0.0 : 2.0 * epsilon / static_cast<double>(inner_steps);
}

void to_json(nlohmann::json& j, const TuneConfig& c) {
  j = {{"design", dualenc::to_string(c.design)},
       {"prompt_len", c.prompt_len},
       {"epsilon", c.epsilon},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"init_std", c.init_std},
       {"inner_steps", c.inner_steps},
       {"inner_step_size", c.inner_step_size},
       {"shots", c.shots},
       {"train_textual", c.train_textual},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TuneConfig& c) {
  TuneConfig d;
  c.design = dualenc::parse_design(j.value("design", dualenc::to_string(d.design)));
  c.prompt_len = j.value("prompt_len", d.prompt_len);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.init_std = j.value("init_std", d.init_std);
  c.inner_steps = j.value("inner_steps", d.inner_steps);
  c.inner_step_size = j.value("inner_step_size", d.inner_step_size);
  c.shots = j.value("shots", d.shots);
  c.train_textual = j.value("train_textual", d.train_textual);
  c.seed = j.value("seed", d.seed);
}

namespace {

std::vector<std::size_t> training_pool(const Dataset& dataset, std::size_t shots) {
  if (shots == 0) return dataset.train;
  std::map<int, std::size_t> taken;
  std::vector<std::size_t> pool;
  for (std::size_t i : dataset.train)
    if (taken[dataset.labels[i]]++ < shots) pool.push_back(i);
  return pool;
}

TuneResult run(const dualenc::DualEncoder& model, const Dataset& dataset, const TuneConfig& config,
               bool adversarial, const EpochCallback& on_epoch) {
  config.validate();
  const auto& cfg = model.config();
  const dualenc::TokenizedCatalog tokens = dualenc::tokenize(dataset.catalog, cfg.max_text_len);
  std::vector<std::size_t> order = training_pool(dataset, config.shots);
  if (order.empty()) throw InputError("prompt tuning needs a non-empty training split");

  TuneResult out;
  out.prompts = PromptSet::random(config.design, config.prompt_len, cfg.embed_dim,
                                  derive_seed(config.seed, 0), config.init_std);
  std::vector<Matrix*> params;
  for (Matrix& b : out.prompts.blocks()) params.push_back(&b);
  optim::Sgd opt(config.momentum, 0.0);

  attacks::AttackSpec inner;
  inner.family = attacks::Family::kPGD;
  inner.epsilon = config.epsilon;
  inner.steps = config.inner_steps;
  inner.step_size = config.effective_inner_step();
  inner.random_start = true;

  Rng rng(derive_seed(config.seed, 1));
  const std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * batches;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::span<const std::size_t> part =
          std::span<const std::size_t>(order).subspan(b * config.batch_size,
                                                      std::min(config.batch_size, order.size() - b * config.batch_size));
      Matrix images = gather_images(dataset, part);
      const std::vector<int> labels = gather_labels(dataset, part);
      if (adversarial && config.epsilon > 0.0 && config.inner_steps > 0) {
        inner.seed = derive_seed(config.seed, 1000 + step);
        const std::vector<std::uint64_t> ids(part.begin(), part.end());
        const attacks::Target target(model, out.prompts, dataset.catalog);
        const auto adv = attacks::attack_batch(target, images, labels, ids, inner);
        for (std::size_t i = 0; i < adv.size(); ++i)
          std::copy(adv[i].image.begin(), adv[i].image.end(), images.row(i).begin());
      }

      ad::Tape tape;
      dualenc::WeightBinder w(tape, false);
      const dualenc::PromptVars pv = dualenc::bind_prompts(tape, out.prompts, true);
      const dualenc::ImageGraph g = dualenc::image_graph(w, model.weights(), tape.constant_ref(images), pv.visual);
      ad::Var text = dualenc::text_graph(w, model.weights(), tokens, pv.textual);
      ad::Var loss = ad::cross_entropy(dualenc::logits_graph(g.embedding, text, cfg.temperature), labels);
      if (!std::isfinite(loss.scalar())) throw TrainingError("prompt tuning loss became non-finite", step);
      tape.backward(loss);
      epoch_loss += loss.scalar() * static_cast<double>(part.size());

      std::vector<const Matrix*> grads;
      for (ad::Var v : pv.blocks) grads.push_back(tape.has_grad(v.id) ? &tape.grad(v.id) : nullptr);
      opt.step(params, grads, optim::cosine_lr(config.lr, step, total));
    }
    epoch_loss /= static_cast<double>(order.size());
    out.curve.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }

  out.manifest = {{"config", config},
                  {"adversarial", adversarial},
                  {"dataset", dataset.name},
                  {"data_hash", dataset.hash()},
                  {"weights", model.weights().hash()},
                  {"num_samples", order.size()},
                  {"curve", out.curve},
                  {"prompts_hash", out.prompts.hash()}};
  return out;
}

}  // namespace

TuneResult tune(const dualenc::DualEncoder& model, const Dataset& dataset, const TuneConfig& config,
                const EpochCallback& on_epoch) {
  return run(model, dataset, config, true, on_epoch);
}

TuneResult standard_tune(const dualenc::DualEncoder& model, const Dataset& dataset,
                         const TuneConfig& config, const EpochCallback& on_epoch) {
  return run(model, dataset, config, false, on_epoch);
}

}  // namespace tapt::apt
