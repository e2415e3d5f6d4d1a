#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/autodiff.hpp"
#include "tapt/matrix.hpp"

// Toy CLIP-style dual encoder: a ViT image tower and a transformer text tower
// projected into a shared unit sphere, with learnable prompt tokens appended
// to the input sequences of either tower.

namespace tapt::dualenc {

struct ToyEncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 12;
  double temperature = 1.0 / 0.07;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t pixels() const { return channels * image_size * image_size; }

  friend bool operator==(const ToyEncoderConfig&, const ToyEncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const ToyEncoderConfig& c);
void from_json(const nlohmann::json& j, ToyEncoderConfig& c);

// ---- Prompts ----------------------------------------------------------------

enum class PromptDesign { kVisualOnly, kVLJoint, kVLIndependent };

std::string to_string(PromptDesign d);
PromptDesign parse_design(const std::string& s);

/// Learnable prompt tokens. Storage is a list of parameter blocks; the
/// visual and textual views index into it, so under VL_JOINT both views
/// resolve to the same block and any update moves them together.
class PromptSet {
 public:
  /// The hand-crafted baseline: no learned tokens on either tower.
  static PromptSet handcrafted(std::size_t embed_dim);
  /// Tokens drawn i.i.d. from N(0, init_std^2).
  static PromptSet random(PromptDesign design, std::size_t prompt_len, std::size_t embed_dim,
                          std::uint64_t seed, double init_std = 0.02);
  static PromptSet from_blocks(PromptDesign design, std::vector<Matrix> blocks);

  PromptDesign design() const { return design_; }
  std::size_t prompt_len() const { return prompt_len_; }
  std::size_t embed_dim() const { return embed_dim_; }
  bool is_handcrafted() const { return blocks_.empty(); }

  bool has_visual() const { return visual_.has_value(); }
  bool has_textual() const { return textual_.has_value(); }
  const Matrix& visual_tokens() const;
  const Matrix& textual_tokens() const;
  std::optional<std::size_t> visual_block() const { return visual_; }
  std::optional<std::size_t> textual_block() const { return textual_; }

  std::span<const Matrix> blocks() const { return blocks_; }
  std::span<Matrix> blocks() { return blocks_; }

  std::string hash() const;
  void check_finite() const;

  friend bool operator==(const PromptSet&, const PromptSet&) = default;

 private:
  PromptSet(PromptDesign design, std::vector<Matrix> blocks, std::size_t embed_dim);

  PromptDesign design_ = PromptDesign::kVisualOnly;
  std::size_t prompt_len_ = 0;
  std::size_t embed_dim_ = 0;
  std::vector<Matrix> blocks_;
  std::optional<std::size_t> visual_;
  std::optional<std::size_t> textual_;
};

// ---- Classes and text ---------------------------------------------------------

struct ClassCatalog {
  std::vector<std::string> class_names;
  std::string prompt_template = "a photo of a {}";

  void validate() const;
  std::size_t size() const { return class_names.size(); }
  std::string render(std::size_t k) const;
};

/// Fixed word -> id map over the toy vocabulary.
class Vocabulary {
 public:
  static const Vocabulary& standard();
  std::size_t size() const { return words_.size(); }
  int id(const std::string& word) const;
  std::vector<int> encode(const std::string& text) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  explicit Vocabulary(std::vector<std::string> words);
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Token ids for every class prompt of a catalog; all rows have equal length.
struct TokenizedCatalog {
  std::size_t num_classes = 0;
  std::size_t length = 0;
  std::vector<int> ids;  // num_classes * length
};
TokenizedCatalog tokenize(const ClassCatalog& catalog, std::size_t max_len);

// ---- Weights ------------------------------------------------------------------

struct BlockWeights {
  Matrix ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
};

struct ImageTower {
  Matrix patch_w, patch_b, cls, pos;
  std::vector<BlockWeights> blocks;
  Matrix ln_g, ln_b, proj;
};

struct TextTower {
  Matrix token_emb, pos;
  std::vector<BlockWeights> blocks;
  Matrix ln_g, ln_b, proj;
};

struct ModelWeights {
  ToyEncoderConfig config;
  ImageTower image;
  TextTower text;

  static ModelWeights initialize(const ToyEncoderConfig& config, std::uint64_t seed);

  /// Visits every parameter in a fixed order with a stable name.
  template <class F>
  void for_each(F&& f);
  template <class F>
  void for_each(F&& f) const;

  std::string hash() const;
  std::size_t parameter_count() const;
};

// ---- Graph construction -------------------------------------------------------

/// Binds weight matrices onto a tape once per tape, as constants or as
/// trainable parameters.
class WeightBinder {
 public:
  WeightBinder(ad::Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}
  ad::Var operator()(const Matrix& m);
  /// Gradient of a bound weight, or nullptr if it was never bound.
  const Matrix* grad(const Matrix& m);
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  bool trainable_;
  std::unordered_map<const Matrix*, ad::Var> cache_;
};

struct PromptVars {
  std::vector<ad::Var> blocks;
  ad::Var visual;   // invalid when absent
  ad::Var textual;  // invalid when absent
};
PromptVars bind_prompts(ad::Tape& tape, const PromptSet& prompts, bool trainable);

struct ImageGraph {
  ad::Var embedding;            // batch x D, unit rows
  std::vector<ad::Var> layers;  // per block: batch x D mean over non-prompt tokens
};

/// images: batch x pixels.
ImageGraph image_graph(WeightBinder& w, const ModelWeights& weights, ad::Var images,
                       ad::Var visual_prompts);
/// Returns num_classes x D unit rows.
ad::Var text_graph(WeightBinder& w, const ModelWeights& weights, const TokenizedCatalog& tokens,
                   ad::Var textual_prompts);
/// temperature * image . text^T
ad::Var logits_graph(ad::Var image_embedding, ad::Var text_embedding, double temperature);

// ---- Inference facade ---------------------------------------------------------

struct EmbeddingTrace {
  std::vector<double> final_embedding;
  std::vector<std::vector<double>> layer_embeddings;
};

class DualEncoder {
 public:
  explicit DualEncoder(ModelWeights weights);

  const ToyEncoderConfig& config() const { return weights_.config; }
  const ModelWeights& weights() const { return weights_; }

  EmbeddingTrace encode_image(std::span<const double> image, const PromptSet& prompts) const;
  std::vector<double> encode_text(std::size_t class_index, const ClassCatalog& catalog,
                                  const PromptSet& prompts) const;
  /// num_classes x D
  Matrix text_embeddings(const ClassCatalog& catalog, const PromptSet& prompts) const;
  std::vector<double> classify(std::span<const double> image, const PromptSet& prompts,
                               const ClassCatalog& catalog) const;
  /// Row-wise class probabilities for a batch of images against precomputed text rows.
  Matrix classify_batch(const Matrix& images, const PromptSet& prompts, const Matrix& text) const;

  /// Throws ConfigError/InputError for a malformed image or prompt set.
  void check_image(std::span<const double> image) const;
  void check_prompts(const PromptSet& prompts) const;

 private:
  ModelWeights weights_;
};

/// Per-row softmax of temperature-scaled cosine logits.
Matrix probabilities_from_logits(const Matrix& logits);

// ---- template definitions -----------------------------------------------------

namespace detail {
template <class Block, class F>
void visit_block(Block& b, const std::string& p, F& f) {
  f(p + "ln1_g", b.ln1_g);
  f(p + "ln1_b", b.ln1_b);
  f(p + "w_qkv", b.w_qkv);
  f(p + "b_qkv", b.b_qkv);
  f(p + "w_o", b.w_o);
  f(p + "b_o", b.b_o);
  f(p + "ln2_g", b.ln2_g);
  f(p + "ln2_b", b.ln2_b);
  f(p + "w_fc1", b.w_fc1);
  f(p + "b_fc1", b.b_fc1);
  f(p + "w_fc2", b.w_fc2);
  f(p + "b_fc2", b.b_fc2);
}

template <class W, class F>
void visit_weights(W& w, F& f) {
  f("image.patch_w", w.image.patch_w);
  f("image.patch_b", w.image.patch_b);
  f("image.cls", w.image.cls);
  f("image.pos", w.image.pos);
  for (std::size_t l = 0; l < w.image.blocks.size(); ++l)
    visit_block(w.image.blocks[l], "image.block" + std::to_string(l) + ".", f);
  f("image.ln_g", w.image.ln_g);
  f("image.ln_b", w.image.ln_b);
  f("image.proj", w.image.proj);
  f("text.token_emb", w.text.token_emb);
  f("text.pos", w.text.pos);
  for (std::size_t l = 0; l < w.text.blocks.size(); ++l)
    visit_block(w.text.blocks[l], "text.block" + std::to_string(l) + ".", f);
  f("text.ln_g", w.text.ln_g);
  f("text.ln_b", w.text.ln_b);
  f("text.proj", w.text.proj);
}
}  // namespace detail

template <class F>
void ModelWeights::for_each(F&& f) {
  detail::visit_weights(*this, f);
}
template <class F>
void ModelWeights::for_each(F&& f) const {
  detail::visit_weights(*this, f);
}

}  // namespace tapt::dualenc
