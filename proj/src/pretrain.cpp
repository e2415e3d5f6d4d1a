#include "tapt/pretrain.hpp"

#include <cmath>

#include "tapt/errors.hpp"
#include "tapt/imageops.hpp"
#include "tapt/optim.hpp"
#include "tapt/rng.hpp"

namespace tapt::dualenc {

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"model", c.model},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"warmup", c.warmup},
       {"weight_decay", c.weight_decay},
       {"crop_probability", c.crop_probability},
       {"crop_scale_lo", c.crop_scale_lo},
       {"templates", c.templates},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.model = j.value("model", d.model);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.warmup = j.value("warmup", d.warmup);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.crop_probability = j.value("crop_probability", d.crop_probability);
  c.crop_scale_lo = j.value("crop_scale_lo", d.crop_scale_lo);
  c.templates = j.value("templates", d.templates);
  c.seed = j.value("seed", d.seed);
}

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    const auto row = probs.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double clean_accuracy(const DualEncoder& model, const Dataset& dataset,
                      std::span<const std::size_t> indices, const PromptSet& prompts) {
  if (indices.empty()) return 0.0;
  const Matrix text = model.text_embeddings(dataset.catalog, prompts);
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto part = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const std::vector<int> pred = argmax_rows(model.classify_batch(gather_images(dataset, part), prompts, text));
    for (std::size_t i = 0; i < part.size(); ++i) correct += pred[i] == dataset.labels[part[i]];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(indices.size());
}

PretrainResult pretrain_toy(const Dataset& dataset, const PretrainConfig& config,
                            const std::function<void(std::size_t, double)>& on_step) {
  config.model.validate();
  if (dataset.train.empty()) throw InputError("pretraining needs a non-empty training split");
  if (dataset.image_size != config.model.image_size || dataset.channels != config.model.channels)
    throw ConfigError("dataset images do not match the encoder config");
  if (config.templates.empty()) throw ConfigError("pretraining needs at least one caption template");

  std::vector<TokenizedCatalog> captions;
  for (const std::string& t : config.templates) {
    ClassCatalog cat{dataset.catalog.class_names, t};
    captions.push_back(tokenize(cat, config.model.max_text_len));
  }

  ModelWeights weights = ModelWeights::initialize(config.model, derive_seed(config.seed, 0));
  std::vector<Matrix*> params;
  weights.for_each([&](const std::string&, Matrix& m) { params.push_back(&m); });
  optim::AdamW opt({.beta1 = 0.9, .beta2 = 0.98, .eps = 1e-8, .weight_decay = config.weight_decay});

  Rng rng(derive_seed(config.seed, 1));
  std::vector<std::size_t> order = dataset.train;
  std::size_t cursor = order.size();
  const std::size_t side = dataset.image_size;
  double last_loss = 0.0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t b = std::min(config.batch_size, order.size());
    Matrix images(b, config.model.pixels());
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      labels[i] = dataset.labels[idx];
      auto dst = images.row(i);
      if (rng.bernoulli(config.crop_probability)) {
        const auto box = imageops::random_resized_crop(rng, side, config.crop_scale_lo, 1.0, true);
        const auto view = imageops::apply(imageops::resized_crop(dataset.channels, side, box, side),
                                          dataset.image(idx));
        std::copy(view.begin(), view.end(), dst.begin());
      } else {
        const auto src = dataset.image(idx);
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
    const TokenizedCatalog& tokens = captions[rng.below(captions.size())];

    ad::Tape tape;
    WeightBinder w(tape, true);
    ImageGraph g = image_graph(w, weights, tape.constant_ref(images), ad::Var{});
    ad::Var text = text_graph(w, weights, tokens, ad::Var{});
    ad::Var loss = ad::cross_entropy(logits_graph(g.embedding, text, config.model.temperature), labels);
    last_loss = loss.scalar();
    if (!std::isfinite(last_loss))
      throw TrainingError("pretraining loss became non-finite", step);
    tape.backward(loss);

    std::vector<const Matrix*> grads;
    for (Matrix* p : params) grads.push_back(w.grad(*p));
    opt.step(params, grads, optim::cosine_lr(config.lr, step, config.steps, config.warmup));
    if (on_step) on_step(step, last_loss);
  }

  PretrainResult out{std::move(weights), {}};
  const DualEncoder model(out.weights);
  const double acc = clean_accuracy(model, dataset, dataset.test, PromptSet::handcrafted(config.model.embed_dim));
  out.manifest = {{"config", config},
                  {"dataset", dataset.name},
                  {"data_hash", dataset.hash()},
                  {"final_loss", last_loss},
                  {"heldout_accuracy", acc},
                  {"chance_accuracy", 100.0 / static_cast<double>(dataset.catalog.size())},
                  {"weights_hash", out.weights.hash()}};
  return out;
}

}  // namespace tapt::dualenc
