#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"

// l-infinity bounded attacks on the image input of the dual encoder.

namespace tapt::attacks {

enum class Family { kPGD, kDI, kStrong };

std::string to_string(Family f);
Family parse_family(const std::string& s);

struct AttackSpec {
  Family family = Family::kPGD;
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 20;
  double step_size = 2.0 / 255.0;
  std::size_t restarts = 1;      // STRONG only
  double di_probability = 0.5;   // DI only
  bool random_start = true;
  bool step_decay = true;        // STRONG only: cosine-decayed step size
  std::uint64_t seed = 0;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  /// SHA-256 over the canonical JSON form.
  std::string digest() const;

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

void to_json(nlohmann::json& j, const AttackSpec& s);
void from_json(const nlohmann::json& j, AttackSpec& s);

struct AdversarialExample {
  std::vector<double> image;
  std::vector<double> base_image;
  double loss_before = 0.0;
  double loss_after = 0.0;
  bool success = false;  // prediction differs from the true label
};

/// Frozen model, prompts and class text embeddings that an attack differentiates through.
class Target {
 public:
  Target(const dualenc::DualEncoder& model, const dualenc::PromptSet& prompts,
         const dualenc::ClassCatalog& catalog);
  Target(const dualenc::DualEncoder& model, const dualenc::PromptSet& prompts, Matrix text);

  const dualenc::DualEncoder& model() const { return model_; }
  const dualenc::PromptSet& prompts() const { return prompts_; }
  const Matrix& text() const { return text_; }

  /// Per-row cross-entropy and its gradient w.r.t. the (optionally
  /// transformed) images. Rows are independent.
  struct LossGrad {
    std::vector<double> loss;
    Matrix grad;
  };
  LossGrad loss_and_grad(const Matrix& images, std::span<const int> labels,
                         const std::vector<std::shared_ptr<const ad::SparseMap>>& transforms) const;
  /// Per-row cross-entropy and predicted class.
  void evaluate(const Matrix& images, std::span<const int> labels, std::vector<double>& loss,
                std::vector<int>& pred) const;

 private:
  const dualenc::DualEncoder& model_;
  const dualenc::PromptSet& prompts_;
  Matrix text_;
};

/// Attacks every row of `images`. Sample ids seed the per-sample random
/// streams, so a sample's result does not depend on what it is batched with.
std::vector<AdversarialExample> attack_batch(const Target& target, const Matrix& images,
                                             std::span<const int> labels,
                                             std::span<const std::uint64_t> sample_ids,
                                             const AttackSpec& spec);

AdversarialExample pgd(const Target& target, std::span<const double> image, int label,
                       const AttackSpec& spec, std::uint64_t sample_id = 0);
AdversarialExample di(const Target& target, std::span<const double> image, int label,
                      const AttackSpec& spec, std::uint64_t sample_id = 0);
AdversarialExample strong(const Target& target, std::span<const double> image, int label,
                          const AttackSpec& spec, std::uint64_t sample_id = 0);

/// Sign-gradient ascent step followed by projection onto the eps-ball around
/// base and the [0,1] box.
void project_step(std::span<double> x, std::span<const double> base, std::span<const double> grad,
                  double step, double epsilon);

}  // namespace tapt::attacks
