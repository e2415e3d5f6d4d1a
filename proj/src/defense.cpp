#include "tapt/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tapt/errors.hpp"
#include "tapt/hash.hpp"
#include "tapt/imageops.hpp"
#include "tapt/rng.hpp"

namespace tapt::defense {

using dualenc::DualEncoder;
using dualenc::PromptSet;

void TAPTConfig::validate() const {
  if (num_views < 1) throw ConfigError("num_views must be at least 1");
  if (!(select_fraction > 0.0 && select_fraction <= 1.0)) throw ConfigError("select_fraction must lie in (0,1]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
}

std::string TAPTConfig::digest() const { return sha256_hex(nlohmann::json(*this).dump()); }

std::string reset_to_string(std::size_t interval) {
  return interval == kResetAll ? "all" : std::to_string(interval);
}

std::size_t parse_reset(const std::string& s) {
  if (s == "all" || s == "ALL") return kResetAll;
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || v == 0) throw UsageError("reset interval must be a positive integer or 'all'");
  return v;
}

void to_json(nlohmann::json& j, const TAPTConfig& c) {
  j = {{"num_views", c.num_views},
       {"select_fraction", c.select_fraction},
       {"alpha", c.alpha},
       {"lr", c.lr},
       {"steps", c.steps},
       {"reset_interval", reset_to_string(c.reset_interval)},
       {"predict_original", c.predict_original},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TAPTConfig& c) {
  TAPTConfig d;
  c.num_views = j.value("num_views", d.num_views);
  c.select_fraction = j.value("select_fraction", d.select_fraction);
  c.alpha = j.value("alpha", d.alpha);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  if (j.contains("reset_interval")) {
    const auto& r = j.at("reset_interval");
    c.reset_interval = r.is_string() ? parse_reset(r.get<std::string>()) : r.get<std::size_t>();
    if (!r.is_string() && c.reset_interval == 0) throw ConfigError("reset_interval 0 is not valid; use \"all\"");
  } else {
    c.reset_interval = d.reset_interval;
  }
  c.predict_original = j.value("predict_original", d.predict_original);
  c.seed = j.value("seed", d.seed);
}

// ---- Views --------------------------------------------------------------------

std::vector<std::size_t> ViewBatch::selected_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (selected[i]) out.push_back(i);
  return out;
}

Matrix ViewBatch::selected_views() const {
  const auto idx = selected_indices();
  Matrix m(idx.size(), views.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(views.row(idx[i]).begin(), views.row(idx[i]).end(), m.row(i).begin());
  return m;
}

std::size_t select_count(std::size_t num_views, double tau) {
  const auto k = static_cast<std::size_t>(std::floor(tau * static_cast<double>(num_views)));
  return std::clamp<std::size_t>(k, 1, num_views);
}

std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

ViewBatch augment(std::span<const double> image, std::size_t channels, std::size_t side,
                  std::size_t num_views, std::uint64_t seed) {
  if (num_views < 1) throw ConfigError("num_views must be at least 1");
  if (image.size() != channels * side * side) throw ConfigError("augment: image size mismatch");
  ViewBatch b;
  b.views = Matrix(num_views, image.size());
  std::copy(image.begin(), image.end(), b.views.row(0).begin());
  Rng rng(seed);
  for (std::size_t j = 1; j < num_views; ++j) {
    const auto box = imageops::random_resized_crop(rng, side, 0.5, 1.0, true);
    imageops::resized_crop(channels, side, box, side).apply(image, b.views.row(j));
  }
  return b;
}

double mean_entropy(const Matrix& probs) {
  const std::size_t n = probs.rows();
  double h = 0.0;
  for (std::size_t j = 0; j < probs.cols(); ++j) {
    double p = 0.0;
    for (std::size_t r = 0; r < n; ++r) p += probs(r, j);
    p /= static_cast<double>(n);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

void select_views(ViewBatch& batch, const DualEncoder& model, const PromptSet& prompts, const Matrix& text,
                  double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("select_fraction must lie in (0,1]");
  const Matrix probs = model.classify_batch(batch.views, prompts, text);
  batch.entropies.resize(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    double h = 0.0;
    for (double p : probs.row(r))
      if (p > 0.0) h -= p * std::log(p);
    batch.entropies[r] = h;
  }
  batch.selected.assign(batch.size(), false);
  for (std::size_t i : lowest_k(batch.entropies, select_count(batch.size(), tau))) batch.selected[i] = true;
}

// ---- Objective ----------------------------------------------------------------

Alignment alignment_from_moments(const stats::Moments& current, const stats::LayerStatsBundle& bundle,
                                 double alpha) {
  const std::size_t layers = current.mu.rows();
  if (bundle.num_layers() != layers || bundle.dim() != current.mu.cols())
    throw ConfigError("stats bundle does not match the model's layer shape");
  Alignment a;
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t j = 0; j < current.mu.cols(); ++j) {
      a.adv += std::abs(current.mu(l, j) - bundle.mu_adv(l, j)) + std::abs(current.var(l, j) - bundle.var_adv(l, j));
      a.clean +=
          std::abs(current.mu(l, j) - bundle.mu_clean(l, j)) + std::abs(current.var(l, j) - bundle.var_clean(l, j));
    }
  a.adv /= static_cast<double>(layers);
  a.clean /= static_cast<double>(layers);
  a.combined = alpha * a.adv + (1.0 - alpha) * a.clean;
  return a;
}

namespace {

Matrix layer_row(const Matrix& m, std::size_t l) {
  return Matrix(1, m.cols(), std::vector<double>(m.row(l).begin(), m.row(l).end()));
}

ad::Var alignment_graph(const std::vector<ad::Var>& layers, const Matrix& mu, const Matrix& var) {
  ad::Var total;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ad::Var d = ad::add(ad::l1_distance(ad::mean_rows(layers[l]), layer_row(mu, l)),
                        ad::l1_distance(ad::variance_rows(layers[l]), layer_row(var, l)));
    total = total.valid() ? ad::add(total, d) : d;
  }
  return ad::scale(total, 1.0 / static_cast<double>(layers.size()));
}

}  // namespace

Objective evaluate_objective(const DualEncoder& model, const Matrix& views, const PromptSet& prompts,
                             const dualenc::TokenizedCatalog& tokens, const Matrix* fixed_text,
                             const stats::LayerStatsBundle& bundle, double alpha, bool with_grad) {
  if (views.rows() == 0) throw ConsistencyError("the objective needs at least one selected view");
  const auto& cfg = model.config();
  if (bundle.num_layers() != cfg.num_layers || bundle.dim() != cfg.embed_dim)
    throw ConfigError("stats bundle does not match the model's layer shape");
  ad::Tape tape(with_grad);
  dualenc::WeightBinder w(tape, false);
  const dualenc::PromptVars pv = dualenc::bind_prompts(tape, prompts, with_grad);
  const dualenc::ImageGraph g = dualenc::image_graph(w, model.weights(), tape.constant_ref(views), pv.visual);
  ad::Var text = (fixed_text != nullptr && !pv.textual.valid())
                     ? tape.constant_ref(*fixed_text)
                     : dualenc::text_graph(w, model.weights(), tokens, pv.textual);
  ad::Var probs = ad::softmax_rows(dualenc::logits_graph(g.embedding, text, cfg.temperature));
  ad::Var mean_probs = ad::mean_rows(probs);
  ad::Var ent = ad::entropy_rows(mean_probs);
  ad::Var adv = alignment_graph(g.layers, bundle.mu_adv, bundle.var_adv);
  ad::Var clean = alignment_graph(g.layers, bundle.mu_clean, bundle.var_clean);
  ad::Var total = ad::add_scalars({{1.0, ent}, {alpha, adv}, {1.0 - alpha, clean}});

  Objective o;
  o.entropy = ent.scalar();
  o.align_adv = adv.scalar();
  o.align_clean = clean.scalar();
  o.total = total.scalar();
  o.mean_probs = mean_probs.value();
  if (with_grad) {
    tape.backward(total);
    for (ad::Var b : pv.blocks)
      o.prompt_grads.push_back(tape.has_grad(b.id) ? tape.grad(b.id) : Matrix(b.rows(), b.cols()));
  }
  return o;
}

// ---- Per-sample defense -------------------------------------------------------

namespace {

bool all_finite(const Objective& o) {
  if (!std::isfinite(o.total)) return false;
  for (const Matrix& g : o.prompt_grads)
    for (double v : g.flat())
      if (!std::isfinite(v)) return false;
  return true;
}

std::vector<double> to_vector(const Matrix& m) { return {m.flat().begin(), m.flat().end()}; }

int argmax(const std::vector<double>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

SampleResult defend_sample(const DualEncoder& model, std::span<const double> image, PromptState& state,
                           const dualenc::ClassCatalog& catalog, const stats::LayerStatsBundle& bundle,
                           const TAPTConfig& config, std::uint64_t sample_id) {
  config.validate();
  model.check_image(image);
  const auto& cfg = model.config();
  SampleResult res;
  const Matrix original(1, image.size(), std::vector<double>(image.begin(), image.end()));

  if (config.steps == 0) {
    const Matrix text = model.text_embeddings(catalog, state.prompts);
    res.probabilities = to_vector(model.classify_batch(original, state.prompts, text));
    res.prediction = argmax(res.probabilities);
    res.alternate_prediction = res.prediction;
    res.selected = {0};
    return res;
  }

  const dualenc::TokenizedCatalog tokens = dualenc::tokenize(catalog, cfg.max_text_len);
  const Matrix initial_text = model.text_embeddings(catalog, state.prompts);
  const Matrix* fixed_text = state.prompts.has_textual() ? nullptr : &initial_text;

  ViewBatch batch = augment(image, cfg.channels, cfg.image_size, config.num_views,
                            derive_seed(config.seed, sample_id));
  select_views(batch, model, state.prompts, initial_text, config.select_fraction);
  res.selected = batch.selected_indices();
  const Matrix views = batch.selected_views();

  const PromptState saved = state;
  StepDiagnostics& diag = res.diagnostics;
  try {
    std::vector<Matrix*> params;
    for (Matrix& b : state.prompts.blocks()) params.push_back(&b);
    for (std::size_t s = 0; s < config.steps; ++s) {
      Objective o = evaluate_objective(model, views, state.prompts, tokens, fixed_text, bundle, config.alpha, true);
      if (!all_finite(o)) throw DefenseError("test-time objective became non-finite", s);
      std::vector<const Matrix*> grads;
      for (const Matrix& g : o.prompt_grads) grads.push_back(&g);
      state.optimizer.step(params, grads, config.lr);
      if (s == 0) diag.before = std::move(o);
      ++diag.steps_applied;
    }
    diag.after = evaluate_objective(model, views, state.prompts, tokens, fixed_text, bundle, config.alpha, false);
    if (!std::isfinite(diag.after.total)) throw DefenseError("test-time objective became non-finite", config.steps);
    state.prompts.check_finite();
  } catch (const std::exception& e) {
    state = saved;
    diag.fallback = true;
    diag.error = e.what();
    diag.steps_applied = 0;
    diag.after = evaluate_objective(model, views, state.prompts, tokens, fixed_text, bundle, config.alpha, false);
  }

  const Matrix text = fixed_text != nullptr ? initial_text : model.text_embeddings(catalog, state.prompts);
  std::vector<double> primary = to_vector(diag.after.mean_probs);
  std::vector<double> alternate = to_vector(model.classify_batch(original, state.prompts, text));
  if (config.predict_original) std::swap(primary, alternate);
  res.probabilities = std::move(primary);
  res.prediction = argmax(res.probabilities);
  res.alternate_prediction = argmax(alternate);
  return res;
}

// ---- Stream -------------------------------------------------------------------

namespace {

nlohmann::json terms(const Objective& o) {
  return {{"entropy", o.entropy}, {"align_adv", o.align_adv}, {"align_clean", o.align_clean}, {"total", o.total}};
}

}  // namespace

StreamOutput defend_stream(const DualEncoder& model, const Matrix& images, std::span<const std::uint64_t> sample_ids,
                           const PromptSet& prompts_init, const dualenc::ClassCatalog& catalog,
                           const stats::LayerStatsBundle& bundle, const TAPTConfig& config,
                           const StreamOptions& options) {
  config.validate();
  if (sample_ids.size() != images.rows()) throw InputError("defend_stream: one sample id per image");
  model.check_prompts(prompts_init);
  bundle.validate(model.config().num_layers, model.config().embed_dim);
  const std::size_t n = images.rows();
  StreamOutput out;
  out.samples.resize(n);

  if (config.reset_interval == 1) {
    // Independent samples: each starts from a private copy of the initial prompts.
    const bool par = options.parallel;
#pragma omp parallel for if (par) schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
      PromptState state{prompts_init, optim::AdamW()};
      out.samples[i] = defend_sample(model, images.row(i), state, catalog, bundle, config, sample_ids[i]);
    }
  } else {
    PromptState state{prompts_init, optim::AdamW()};
    for (std::size_t i = 0; i < n; ++i) {
      if (config.reset_interval != kResetAll && i % config.reset_interval == 0 && i > 0)
        state = PromptState{prompts_init, optim::AdamW()};
      out.samples[i] = defend_sample(model, images.row(i), state, catalog, bundle, config, sample_ids[i]);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const SampleResult& s = out.samples[i];
    out.predictions.push_back(s.prediction);
    out.alternate_predictions.push_back(s.alternate_prediction);
    out.fallbacks += s.diagnostics.fallback ? 1 : 0;
    if (options.log != nullptr) {
      nlohmann::json line = {{"sample", sample_ids[i]},
                             {"prediction", s.prediction},
                             {"selected", s.selected},
                             {"steps_applied", s.diagnostics.steps_applied},
                             {"fallback", s.diagnostics.fallback}};
      if (config.steps > 0) {
        line["before"] = terms(s.diagnostics.before);
        line["after"] = terms(s.diagnostics.after);
      }
      if (!s.diagnostics.error.empty()) line["error"] = s.diagnostics.error;
      *options.log << line.dump() << '\n';
    }
  }
  return out;
}

}  // namespace tapt::defense
