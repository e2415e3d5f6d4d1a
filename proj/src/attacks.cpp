#include "tapt/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tapt/errors.hpp"
#include "tapt/hash.hpp"
#include "tapt/imageops.hpp"
#include "tapt/rng.hpp"

namespace tapt::attacks {

using dualenc::DualEncoder;
using dualenc::PromptSet;

std::string to_string(Family f) {
  switch (f) {
    case Family::kPGD: return "pgd";
    case Family::kDI: return "di";
    case Family::kStrong: return "strong";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "pgd" || s == "PGD") return Family::kPGD;
  if (s == "di" || s == "DI") return Family::kDI;
  if (s == "strong" || s == "STRONG") return Family::kStrong;
  throw UsageError("unknown attack family '" + s + "'");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack epsilon must lie in [0,1]");
  if (steps > 0 && !(step_size > 0.0)) throw ConfigError("attack step_size must be positive");
  if (restarts < 1) throw ConfigError("attack restarts must be at least 1");
  if (!(di_probability >= 0.0 && di_probability <= 1.0))
    throw ConfigError("di_probability must lie in [0,1]");
}

std::string AttackSpec::digest() const { return sha256_hex(nlohmann::json(*this).dump()); }

void to_json(nlohmann::json& j, const AttackSpec& s) {
  j = {{"family", to_string(s.family)},   {"epsilon", s.epsilon},
       {"steps", s.steps},                {"step_size", s.step_size},
       {"restarts", s.restarts},          {"di_probability", s.di_probability},
       {"random_start", s.random_start},  {"step_decay", s.step_decay},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, AttackSpec& s) {
  AttackSpec d;
  s.family = parse_family(j.value("family", to_string(d.family)));
  s.epsilon = j.value("epsilon", d.epsilon);
  s.steps = j.value("steps", d.steps);
  s.step_size = j.value("step_size", d.step_size);
  s.restarts = j.value("restarts", d.restarts);
  s.di_probability = j.value("di_probability", d.di_probability);
  s.random_start = j.value("random_start", d.random_start);
  s.step_decay = j.value("step_decay", d.step_decay);
  s.seed = j.value("seed", d.seed);
}

// ---- Target -------------------------------------------------------------------

Target::Target(const DualEncoder& model, const PromptSet& prompts, const dualenc::ClassCatalog& catalog)
    : Target(model, prompts, model.text_embeddings(catalog, prompts)) {}

Target::Target(const DualEncoder& model, const PromptSet& prompts, Matrix text)
    : model_(model), prompts_(prompts), text_(std::move(text)) {
  model_.check_prompts(prompts_);
}

namespace {

std::vector<double> row_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  std::vector<double> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out[r] = mx + std::log(z) - row[labels[r]];
  }
  return out;
}

}  // namespace

Target::LossGrad Target::loss_and_grad(
    const Matrix& images, std::span<const int> labels,
    const std::vector<std::shared_ptr<const ad::SparseMap>>& transforms) const {
  ad::Tape tape;
  dualenc::WeightBinder w(tape, false);
  const dualenc::PromptVars pv = dualenc::bind_prompts(tape, prompts_, false);
  ad::Var x = tape.parameter(images);
  ad::Var input = transforms.empty() ? x : ad::sparse_map_rows(x, transforms);
  const dualenc::ImageGraph g = dualenc::image_graph(w, model_.weights(), input, pv.visual);
  ad::Var logits = dualenc::logits_graph(g.embedding, tape.constant_ref(text_), model_.config().temperature);
  // Summed (not averaged) loss keeps each row's gradient independent of the batch size.
  ad::Var loss = ad::scale(ad::cross_entropy(logits, labels), static_cast<double>(images.rows()));
  tape.backward(loss);
  return {row_cross_entropy(logits.value(), labels), tape.grad(x.id)};
}

void Target::evaluate(const Matrix& images, std::span<const int> labels, std::vector<double>& loss,
                      std::vector<int>& pred) const {
  ad::Tape tape(false);
  dualenc::WeightBinder w(tape, false);
  const dualenc::PromptVars pv = dualenc::bind_prompts(tape, prompts_, false);
  const dualenc::ImageGraph g = dualenc::image_graph(w, model_.weights(), tape.constant_ref(images), pv.visual);
  const Matrix logits =
      dualenc::logits_graph(g.embedding, tape.constant_ref(text_), model_.config().temperature).value();
  loss = row_cross_entropy(logits, labels);
  pred.resize(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    pred[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
}

// ---- Attacks ------------------------------------------------------------------

namespace {

// Clamps v into the eps-ball around b and the [0,1] box. base +/- eps is
// rounded, so v is then nudged toward b until the computed |v - b| <= eps.
double project(double v, double b, double epsilon) {
  v = std::clamp(v, b - epsilon, b + epsilon);
  while (std::abs(v - b) > epsilon) v = std::nextafter(v, b);
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

void project_step(std::span<double> x, std::span<const double> base, std::span<const double> grad,
                  double step, double epsilon) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    x[i] = project(x[i] + step * s, base[i], epsilon);
  }
}

namespace {

// Random streams per sample: 0 = random start (offset by restart), 1 = DI draws.
constexpr std::uint64_t kStartStream = 0x5157;
constexpr std::uint64_t kDiStream = 0xd1d1;

std::shared_ptr<const ad::SparseMap> di_transform(Rng& rng, double probability, std::size_t channels,
                                                  std::size_t side) {
  if (!rng.bernoulli(probability)) return nullptr;
  const double scale = rng.uniform(0.8, 1.0);
  const auto inner = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * side)), 1, side);
  const std::size_t slack = side - inner;
  const std::size_t ox = slack == 0 ? 0 : rng.below(slack + 1);
  const std::size_t oy = slack == 0 ? 0 : rng.below(slack + 1);
  return std::make_shared<const ad::SparseMap>(imageops::resize_and_pad(channels, side, inner, ox, oy));
}

void check_gradient(const Matrix& g, std::size_t step) {
  for (double v : g.flat())
    if (!std::isfinite(v)) throw AttackError("attack gradient became non-finite", step);
}

// One sign-gradient run (no restarts) over the whole batch.
Matrix run_single(const Target& target, const Matrix& base, std::span<const int> labels,
                  std::span<const std::uint64_t> ids, const AttackSpec& spec, std::size_t restart,
                  bool decay) {
  const std::size_t n = base.rows();
  const auto& cfg = target.model().config();
  Matrix x = base;
  if (spec.steps == 0 || spec.epsilon == 0.0) return x;
  if (spec.random_start) {
    for (std::size_t r = 0; r < n; ++r) {
      Rng rng(derive_seed(derive_seed(spec.seed, ids[r]), kStartStream + restart));
      auto xr = x.row(r);
      const auto br = base.row(r);
      for (std::size_t i = 0; i < xr.size(); ++i)
        xr[i] = project(br[i] + rng.uniform(-spec.epsilon, spec.epsilon), br[i], spec.epsilon);
    }
  }
  std::vector<Rng> di_rngs;
  if (spec.family == Family::kDI)
    for (std::size_t r = 0; r < n; ++r) di_rngs.emplace_back(derive_seed(derive_seed(spec.seed, ids[r]), kDiStream));

  std::vector<std::shared_ptr<const ad::SparseMap>> transforms;
  for (std::size_t t = 0; t < spec.steps; ++t) {
    transforms.clear();
    if (spec.family == Family::kDI) {
      transforms.resize(n);
      for (std::size_t r = 0; r < n; ++r)
        transforms[r] = di_transform(di_rngs[r], spec.di_probability, cfg.channels, cfg.image_size);
    }
    const Target::LossGrad lg = target.loss_and_grad(x, labels, transforms);
    check_gradient(lg.grad, t);
    double step = spec.step_size;
    if (decay)
      step *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(spec.steps)));
    for (std::size_t r = 0; r < n; ++r) project_step(x.row(r), base.row(r), lg.grad.row(r), step, spec.epsilon);
  }
  return x;
}

}  // namespace

std::vector<AdversarialExample> attack_batch(const Target& target, const Matrix& images,
                                             std::span<const int> labels,
                                             std::span<const std::uint64_t> sample_ids,
                                             const AttackSpec& spec) {
  spec.validate();
  const std::size_t n = images.rows();
  if (labels.size() != n || sample_ids.size() != n)
    throw InputError("attack_batch: one label and one sample id per image");
  for (std::size_t r = 0; r < n; ++r) target.model().check_image(images.row(r));

  std::vector<double> loss0, loss;
  std::vector<int> pred0, pred;
  target.evaluate(images, labels, loss0, pred0);

  const bool strong = spec.family == Family::kStrong;
  const std::size_t restarts = strong ? spec.restarts : 1;
  Matrix best = run_single(target, images, labels, sample_ids, spec, 0, strong && spec.step_decay);
  target.evaluate(best, labels, loss, pred);
  for (std::size_t k = 1; k < restarts; ++k) {
    const Matrix cand = run_single(target, images, labels, sample_ids, spec, k, spec.step_decay);
    std::vector<double> closs;
    std::vector<int> cpred;
    target.evaluate(cand, labels, closs, cpred);
    for (std::size_t r = 0; r < n; ++r)
      if (closs[r] > loss[r]) {
        std::copy(cand.row(r).begin(), cand.row(r).end(), best.row(r).begin());
        loss[r] = closs[r];
        pred[r] = cpred[r];
      }
  }

  std::vector<AdversarialExample> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    AdversarialExample& e = out[r];
    e.image.assign(best.row(r).begin(), best.row(r).end());
    e.base_image.assign(images.row(r).begin(), images.row(r).end());
    e.loss_before = loss0[r];
    e.loss_after = loss[r];
    e.success = pred[r] != labels[r];
  }
  return out;
}

namespace {

AdversarialExample single(const Target& target, std::span<const double> image, int label,
                          AttackSpec spec, Family family, std::uint64_t id) {
  spec.family = family;
  const Matrix m(1, image.size(), std::vector<double>(image.begin(), image.end()));
  const int labels[1] = {label};
  const std::uint64_t ids[1] = {id};
  return attack_batch(target, m, labels, ids, spec).front();
}

}  // namespace

AdversarialExample pgd(const Target& target, std::span<const double> image, int label,
                       const AttackSpec& spec, std::uint64_t sample_id) {
  return single(target, image, label, spec, Family::kPGD, sample_id);
}

AdversarialExample di(const Target& target, std::span<const double> image, int label,
                      const AttackSpec& spec, std::uint64_t sample_id) {
  return single(target, image, label, spec, Family::kDI, sample_id);
}

AdversarialExample strong(const Target& target, std::span<const double> image, int label,
                          const AttackSpec& spec, std::uint64_t sample_id) {
  return single(target, image, label, spec, Family::kStrong, sample_id);
}

}  // namespace tapt::attacks
