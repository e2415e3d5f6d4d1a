// End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
//   tapt_acceptance [--run-dir DIR] [--reuse]
//
// Without --reuse the run directory is wiped first, so every artifact and
// timing comes from this process.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "tapt/attacks.hpp"
#include "tapt/bench/config.hpp"
#include "tapt/bench/pipeline.hpp"
#include "tapt/bench/report.hpp"
#include "tapt/bench/runner.hpp"
#include "tapt/defense.hpp"
#include "tapt/rng.hpp"
#include "tapt/stats.hpp"

namespace {

using namespace tapt;
using namespace tapt::bench;
using dualenc::PromptDesign;
using dualenc::PromptSet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradBudgetSeconds = 120.0;
constexpr std::size_t kBudgetSamples = 10000;
constexpr double kPotencyDrop = 30.0;
constexpr double kPotencyBudgetSeconds = 300.0;
constexpr double kTaptMargin = 5.0;
constexpr double kMatrixBudgetSeconds = 1800.0;
constexpr double kCleanSlack = 2.0;
constexpr double kStepNoise = 1.0;
constexpr double kResetGap = 20.0;
constexpr double kOracleRelTol = 1e-10;
constexpr double kEntropyTol = 1e-9;
constexpr double kAnchorTol = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("[%s] %2d %-22s %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
  Matrix m(r, c);
  for (double& v : m.storage()) v = rng.uniform(lo, hi);
  return m;
}

stats::LayerStatsBundle random_bundle(std::size_t L, std::size_t D, Rng& rng) {
  return {random_matrix(L, D, rng, -0.5, 0.5), random_matrix(L, D, rng, 0.05, 0.5),
          random_matrix(L, D, rng, -0.5, 0.5), random_matrix(L, D, rng, 0.05, 0.5), {}};
}

const dualenc::ClassCatalog& catalog8() {
  static const dualenc::ClassCatalog c{{"red circle", "green square", "blue triangle", "yellow cross", "cyan ring",
                                        "magenta diamond", "red square", "blue circle"},
                                       "a photo of a {}"};
  return c;
}

// ---- 1 -------------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const dualenc::ToyEncoderConfig cfg;  // reference toy encoder
  const dualenc::DualEncoder model(dualenc::ModelWeights::initialize(cfg, 101));
  const dualenc::TokenizedCatalog tokens = dualenc::tokenize(catalog8(), cfg.max_text_len);
  double worst = 0.0;
  for (PromptDesign d : {PromptDesign::kVisualOnly, PromptDesign::kVLJoint, PromptDesign::kVLIndependent})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(derive_seed(7, seed));
      PromptSet prompts = PromptSet::random(d, 2, cfg.embed_dim, seed, 0.5);
      const Matrix views = random_matrix(3, cfg.pixels(), rng, 0.0, 1.0);
      const auto bundle = random_bundle(cfg.num_layers, cfg.embed_dim, rng);
      const double alpha = rng.uniform();
      const defense::Objective o =
          defense::evaluate_objective(model, views, prompts, tokens, nullptr, bundle, alpha, true);
      for (std::size_t b = 0; b < prompts.blocks().size(); ++b) {
        Matrix& m = prompts.blocks()[b];
        double diff = 0.0, scale = 1e-3;
        for (std::size_t i = 0; i < m.size(); ++i) {
          const double keep = m[i], h = 1e-6;
          m[i] = keep + h;
          const double up = defense::evaluate_objective(model, views, prompts, tokens, nullptr, bundle, alpha, false).total;
          m[i] = keep - h;
          const double down =
              defense::evaluate_objective(model, views, prompts, tokens, nullptr, bundle, alpha, false).total;
          m[i] = keep;
          const double numeric = (up - down) / (2.0 * h);
          diff = std::max(diff, std::abs(o.prompt_grads[b][i] - numeric));
          scale = std::max(scale, std::abs(numeric));
        }
        worst = std::max(worst, diff / scale);
      }
    }
  const double secs = seconds_since(t0);
  return {worst <= kGradRelTol && secs < kGradBudgetSeconds,
          "max rel err " + fmt("%.2e", worst) + " over 20 seeds x 3 designs in " + fmt("%.1f s", secs)};
}

// ---- 2 -------------------------------------------------------------------------------

Outcome budget_exactness() {
  dualenc::ToyEncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  const dualenc::DualEncoder model(dualenc::ModelWeights::initialize(cfg, 202));
  const PromptSet hc = PromptSet::handcrafted(cfg.embed_dim);
  const attacks::Target target(model, hc, catalog8());
  const double eps_set[] = {1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255, 0.3};
  const attacks::Family fams[] = {attacks::Family::kPGD, attacks::Family::kDI, attacks::Family::kStrong};
  Rng rng(303);
  std::size_t done = 0, violations = 0, batch_no = 0;
  double worst_excess = -1.0;
  while (done < kBudgetSamples) {
    const std::size_t n = std::min<std::size_t>(250, kBudgetSamples - done);
    Matrix images(n, cfg.pixels());
    for (double& v : images.storage()) {
      const double u = rng.uniform();
      v = u < 0.05 ? 0.0 : u < 0.1 ? 1.0 : rng.uniform();  // saturated pixels exercise the box clamp
    }
    std::vector<int> labels(n);
    std::vector<std::uint64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng.below(8));
      ids[i] = done + i;
    }
    attacks::AttackSpec spec;
    spec.family = fams[batch_no % 3];
    spec.epsilon = eps_set[batch_no % 6];
    spec.steps = 3;
    spec.step_size = spec.epsilon * 0.75;
    spec.restarts = 2;
    spec.seed = batch_no;
    const auto ex = attacks::attack_batch(target, images, labels, ids, spec);
    const double ulp = std::nextafter(spec.epsilon, 2.0) - spec.epsilon;
    for (std::size_t i = 0; i < n; ++i) {
      double dist = 0.0;
      bool in_box = true;
      for (std::size_t j = 0; j < cfg.pixels(); ++j) {
        const double x = ex[i].image[j];
        in_box &= x >= 0.0 && x <= 1.0;
        dist = std::max(dist, std::abs(x - images(i, j)));
      }
      worst_excess = std::max(worst_excess, (dist - spec.epsilon) / ulp);
      if (!in_box || dist - spec.epsilon > ulp) ++violations;
    }
    done += n;
    ++batch_no;
  }
  return {violations == 0, std::to_string(done) + " samples, " + std::to_string(violations) +
                               " violations, worst (dist - eps) " + fmt("%.2f ulp", worst_excess)};
}

// ---- 9 -------------------------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(909);
  double worst = 0.0;
  for (std::size_t n : {1u, 2u, 3u, 17u, 64u, 257u})
    for (double offset : {0.0, 1e3}) {
      std::vector<Matrix> layers;
      for (std::size_t l = 0; l < 4; ++l) layers.push_back(random_matrix(n, 24, rng, offset - 1.0, offset + 1.0));
      const stats::Moments m = stats::batch_moments(layers);
      for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t d = 0; d < 24; ++d) {
          long double mean = 0.0L;
          for (std::size_t i = 0; i < n; ++i) mean += layers[l](i, d);
          mean /= static_cast<long double>(n);
          long double ss = 0.0L;
          for (std::size_t i = 0; i < n; ++i) ss += (layers[l](i, d) - mean) * (layers[l](i, d) - mean);
          const long double var = n > 1 ? ss / static_cast<long double>(n - 1) : 0.0L;
          auto rel = [](double a, long double b) {
            const long double s = std::max(std::abs(b), 1e-300L);
            return static_cast<double>(std::abs(static_cast<long double>(a) - b) / s);
          };
          worst = std::max(worst, rel(m.mu(l, d), mean));
          if (n > 1) worst = std::max(worst, rel(m.var(l, d), var));
          else if (m.var(l, d) != 0.0) worst = 1.0;
        }
    }
  std::size_t mismatches = 0, cases = 0;
  for (std::size_t m = 1; m <= 64; ++m)
    for (double tau : {0.05, 0.1, 0.5, 1.0})
      for (int rep = 0; rep < 3; ++rep) {
        std::vector<double> e(m);
        for (double& v : e) v = rep == 0 ? rng.uniform() : std::floor(rng.uniform(0.0, 4.0));  // reps 1-2 have ties
        const std::size_t k = defense::select_count(m, tau);
        std::vector<std::size_t> order(m);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return e[a] < e[b]; });
        std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(want.begin(), want.end());
        mismatches += defense::lowest_k(e, k) == want ? 0 : 1;
        ++cases;
      }
  // The model-driven path: select_views on augmented batches.
  dualenc::ToyEncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  const dualenc::DualEncoder model(dualenc::ModelWeights::initialize(cfg, 9));
  const PromptSet hc = PromptSet::handcrafted(cfg.embed_dim);
  const Matrix text = model.text_embeddings(catalog8(), hc);
  const Matrix img = random_matrix(1, cfg.pixels(), rng, 0.0, 1.0);
  for (std::size_t m : {1u, 7u, 64u})
    for (double tau : {0.05, 0.1, 0.5, 1.0}) {
      defense::ViewBatch b = defense::augment(img.row(0), cfg.channels, cfg.image_size, m, m);
      defense::select_views(b, model, hc, text, tau);
      std::vector<std::size_t> order(m);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return b.entropies[x] < b.entropies[y]; });
      std::vector<std::size_t> want(order.begin(), order.begin() + defense::select_count(m, tau));
      std::sort(want.begin(), want.end());
      mismatches += b.selected_indices() == want ? 0 : 1;
      ++cases;
    }
  return {worst <= kOracleRelTol && mismatches == 0,
          "moments max rel err " + fmt("%.2e", worst) + "; selection " + std::to_string(cases - mismatches) + "/" +
              std::to_string(cases) + " identical"};
}

// ---- 10 ------------------------------------------------------------------------------

Outcome loss_anchors() {
  double entropy_err = 0.0;
  for (std::size_t k : {2u, 3u, 8u, 10u, 100u, 1000u})
    entropy_err = std::max(entropy_err,
                           std::abs(defense::mean_entropy(Matrix(1, k, 1.0 / static_cast<double>(k))) - std::log(double(k))));
  dualenc::ToyEncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  const dualenc::DualEncoder model(dualenc::ModelWeights::initialize(cfg, 10));
  const dualenc::TokenizedCatalog tokens = dualenc::tokenize(catalog8(), cfg.max_text_len);
  Rng rng(1010);
  const Matrix views = random_matrix(6, cfg.pixels(), rng, 0.0, 1.0);
  const PromptSet prompts = PromptSet::random(PromptDesign::kVLIndependent, 2, cfg.embed_dim, 3);
  const stats::Moments own = stats::batch_moments(stats::encode_layers(model, views, prompts));
  const auto other = random_bundle(cfg.num_layers, cfg.embed_dim, rng);
  double matched = 0.0;
  for (double alpha : {0.0, 0.5, 1.0}) {
    // The side weighted by alpha is matched; the other side is weighted zero
    // at the extremes, and both are matched at 0.5.
    stats::LayerStatsBundle b = alpha == 1.0 ? stats::LayerStatsBundle{own.mu, own.var, other.mu_clean, other.var_clean, {}}
                                : alpha == 0.0 ? stats::LayerStatsBundle{other.mu_adv, other.var_adv, own.mu, own.var, {}}
                                               : stats::LayerStatsBundle{own.mu, own.var, own.mu, own.var, {}};
    const defense::Objective o = defense::evaluate_objective(model, views, prompts, tokens, nullptr, b, alpha, false);
    matched = std::max(matched, std::abs(o.total - o.entropy));
  }
  double linear = 0.0;
  for (double alpha : {0.0, 0.2, 0.5, 0.9, 1.0}) {
    const defense::Objective o = defense::evaluate_objective(model, views, prompts, tokens, nullptr, other, alpha, false);
    const Matrix probs = model.classify_batch(views, prompts, model.text_embeddings(catalog8(), prompts));
    const defense::Alignment a = defense::alignment_from_moments(own, other, alpha);
    linear = std::max({linear, std::abs(o.entropy - defense::mean_entropy(probs)),
                       std::abs(o.total - (defense::mean_entropy(probs) + alpha * a.adv + (1.0 - alpha) * a.clean))});
  }
  return {entropy_err <= kEntropyTol && matched <= kAnchorTol && linear <= 1e-10,
          "|H(uniform) - ln K| " + fmt("%.1e", entropy_err) + "; matched alignment " + fmt("%.1e", matched) +
              "; linearity " + fmt("%.1e", linear)};
}

// ---- matrix-driven criteria -------------------------------------------------------------

const EvalRecord* find(const std::vector<EvalRecord>& rs, const std::string& ds, const std::string& fam,
                       const std::string& kind, const std::string& design) {
  for (const EvalRecord& r : rs)
    if (r.dataset_id == ds && r.attack_family == fam && r.defense_kind == kind &&
        (kind == "handcrafted" || r.design == design))
      return &r;
  return nullptr;
}

double mean_robust(const std::vector<EvalRecord>& rs, const std::vector<std::string>& datasets,
                   const std::string& fam, const std::string& kind, const std::string& design) {
  double s = 0.0;
  for (const auto& d : datasets) s += find(rs, d, fam, kind, design)->robust_accuracy;
  return s / static_cast<double>(datasets.size());
}

}  // namespace

int main(int argc, char** argv) {
  fs::path run_dir = "acceptance_run";
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--run-dir" && i + 1 < argc) run_dir = argv[++i];
    else if (a == "--reuse") reuse = true;
    else {
      std::cerr << "usage: tapt_acceptance [--run-dir DIR] [--reuse]\n";
      return 2;
    }
  }
  if (!reuse) fs::remove_all(run_dir);
  const auto t_all = Clock::now();

  report(1, "gradient fidelity", gradient_fidelity());
  report(2, "budget exactness", budget_exactness());
  report(9, "oracle equivalence", oracle_equivalence());
  report(10, "loss-term anchors", loss_anchors());

  BenchConfig ref;  // the reference configuration is the default config
  ref.run_dir = run_dir;
  ref.jobs = 2;
  const auto store = std::make_shared<ArtifactStore>(run_dir);
  Pipeline pipeline(ref, store);
  pipeline.log = [](const std::string& s) { std::fprintf(stderr, "[acceptance] %s\n", s.c_str()); };

  const auto t_matrix = Clock::now();
  const MatrixResult matrix = run_matrix(pipeline);
  const double matrix_secs = seconds_since(t_matrix);
  const std::vector<EvalRecord>& rs = matrix.records;
  std::printf("reference matrix: %zu cells (%zu computed, %zu cached) in %.0f s\n%s", rs.size(), matrix.computed,
              matrix.cached, matrix_secs, render_text(build_report(rs)).c_str());

  std::vector<std::string> designs;
  for (PromptDesign d : ref.designs) designs.push_back(dualenc::to_string(d));
  std::vector<std::string> families;
  for (const auto& a : ref.attacks) families.push_back(attacks::to_string(a.family));

  {
    const EvalRecord* r = find(rs, "source", "pgd", "handcrafted", "");
    const double drop = r->clean_accuracy - r->robust_accuracy;
    report(3, "attack potency",
           {drop >= kPotencyDrop && r->wall_time < kPotencyBudgetSeconds,
            "hand-crafted source clean " + fmt("%.1f", r->clean_accuracy) + " -> PGD-20 " +
                fmt("%.1f", r->robust_accuracy) + " (drop " + fmt("%.1f", drop) + ") in " + fmt("%.1f s", r->wall_time)});
  }
  {
    bool ok = matrix.cached > 0 || matrix_secs < kMatrixBudgetSeconds;
    std::string detail;
    for (const auto& fam : families)
      for (const auto& d : designs) {
        const double hc = mean_robust(rs, ref.datasets, fam, "handcrafted", d);
        const double apt = mean_robust(rs, ref.datasets, fam, "apt", d);
        const double tapt = mean_robust(rs, ref.datasets, fam, "tapt", d);
        const bool cell_ok = tapt >= apt + kTaptMargin && apt >= hc;
        ok &= cell_ok;
        detail += (cell_ok ? " " : " !") + fam + "/" + d + " " + fmt("%.1f", hc) + "<=" + fmt("%.1f", apt) + "<<" +
                  fmt("%.1f", tapt);
      }
    report(4, "defense ordering", {ok, "matrix " + fmt("%.0f s;", matrix_secs) + detail});
  }
  {
    bool ok = true;
    std::string detail;
    for (const auto& ds : ref.datasets)
      for (const auto& d : designs) {
        const EvalRecord* a = find(rs, ds, "pgd", "apt", d);
        const EvalRecord* t = find(rs, ds, "pgd", "tapt", d);
        const bool cell_ok = t->clean_accuracy >= a->clean_accuracy - kCleanSlack;
        ok &= cell_ok;
        detail += (cell_ok ? " " : " !") + ds + "/" + d + " " + fmt("%.1f", a->clean_accuracy) + "->" +
                  fmt("%.1f", t->clean_accuracy);
      }
    report(5, "clean retention", {ok, detail});
  }

  // Ablations sweep TAPT on the PGD attack and the visual-only design.
  BenchConfig base = ref;
  base.attacks.resize(1);
  base.designs = {PromptDesign::kVisualOnly};
  RunOptions ro;
  ro.jobs = 2;
  auto series = [&](const AblationResult& a) {
    std::string s;
    for (const auto& p : a.points) s += " " + p.value + ":" + fmt("%.1f", p.robust_mean);
    return s;
  };
  {
    const AblationResult a = ablate(base, store, "steps", {"0", "1", "2", "4"}, ro, pipeline.log);
    bool ok = a.points[1].robust_mean > a.points[0].robust_mean;
    for (std::size_t i = 2; i < a.points.size(); ++i) ok &= a.points[i].robust_mean >= a.points[i - 1].robust_mean - kStepNoise;
    report(6, "step ablation", {ok, "robust by steps" + series(a)});
  }
  {
    const AblationResult a = ablate(base, store, "epsilon", {"1", "2", "4"}, ro, pipeline.log);
    bool ok = true;
    for (std::size_t i = 1; i < a.points.size(); ++i) ok &= a.points[i].robust_mean <= a.points[i - 1].robust_mean;
    report(7, "epsilon ablation", {ok, "robust by nominal eps/255 (x" + fmt("%g", ref.epsilon_multiplier) + ")" + series(a)});
  }
  {
    const AblationResult a = ablate(base, store, "reset_interval", {"1", "2", "4", "8", "16", "32", "all"}, ro, pipeline.log);
    const double all = a.points.back().robust_mean, one = a.points.front().robust_mean;
    bool ok = all <= one - kResetGap;
    for (const auto& p : a.points) ok &= all <= p.robust_mean;

    // reset = 1 permutation equivariance on the adversarial source stream.
    const Dataset& src = pipeline.dataset("source");
    std::vector<std::size_t> idx(src.test.begin(), src.test.begin() + static_cast<std::ptrdiff_t>(ref.eval_samples));
    const Matrix images = gather_images(src, idx);
    const std::vector<int> labels = gather_labels(src, idx);
    std::vector<std::uint64_t> ids(idx.begin(), idx.end());
    const PromptSet& robust = pipeline.prompts(PromptDesign::kVisualOnly, true);
    const auto ex = attacks::attack_batch(attacks::Target(pipeline.model(), robust, src.catalog), images, labels, ids,
                                          ref.attacks[0]);
    Matrix adv(images.rows(), images.cols()), perm_adv(images.rows(), images.cols());
    std::vector<std::size_t> perm(idx.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(4242);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<std::uint64_t> perm_ids(ids.size());
    for (std::size_t i = 0; i < ex.size(); ++i) std::copy(ex[i].image.begin(), ex[i].image.end(), adv.row(i).begin());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      std::copy(adv.row(perm[i]).begin(), adv.row(perm[i]).end(), perm_adv.row(i).begin());
      perm_ids[i] = ids[perm[i]];
    }
    defense::TAPTConfig tc = ref.tapt;
    const auto& bundle = pipeline.stats(PromptDesign::kVisualOnly);
    const auto straight = defense::defend_stream(pipeline.model(), adv, ids, robust, src.catalog, bundle, tc);
    const auto shuffled = defense::defend_stream(pipeline.model(), perm_adv, perm_ids, robust, src.catalog, bundle, tc,
                                                 {nullptr, false});
    bool equivariant = true;
    for (std::size_t i = 0; i < perm.size(); ++i)
      equivariant &= shuffled.samples[i].probabilities == straight.samples[perm[i]].probabilities;
    report(8, "reset ablation", {ok && equivariant, "robust by interval" + series(a) + "; gap(1 - all) " +
                                                        fmt("%.1f", one - all) + "; permutation equivariance " +
                                                        (equivariant ? "bit-exact" : "BROKEN")});
  }
  {
    RunOptions serial;
    serial.jobs = 1;
    serial.parallel_samples = false;
    std::size_t same = 0;
    for (const EvalRecord& r : rs) same += reproduce(pipeline, r.cell, serial).same_result(r) ? 1 : 0;
    report(11, "determinism", {same == rs.size(), std::to_string(same) + "/" + std::to_string(rs.size()) +
                                                      " records reproduced serially from digests (matrix ran with 2 jobs, "
                                                      "parallel samples)"});
  }
  std::printf("%d criteria failed; total %.0f s\n", failures, seconds_since(t_all));
  return failures == 0 ? 0 : 1;
}
