#include "tapt/dualenc.hpp"

#include <cmath>
#include <sstream>

#include "tapt/errors.hpp"
#include "tapt/hash.hpp"
#include "tapt/rng.hpp"

namespace tapt::dualenc {

void ToyEncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image_size must be a positive multiple of patch_size");
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ConfigError("temperature must be positive");
  if (num_layers == 0 || channels == 0 || mlp_ratio == 0)
    throw ConfigError("num_layers, channels and mlp_ratio must be positive");
  if (vocab_size < Vocabulary::standard().size())
    throw ConfigError("vocab_size smaller than the toy vocabulary");
  if (max_text_len == 0) throw ConfigError("max_text_len must be positive");
}

void to_json(nlohmann::json& j, const ToyEncoderConfig& c) {
  j = {{"image_size", c.image_size}, {"patch_size", c.patch_size},
       {"channels", c.channels},     {"embed_dim", c.embed_dim},
       {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
       {"mlp_ratio", c.mlp_ratio},   {"vocab_size", c.vocab_size},
       {"max_text_len", c.max_text_len}, {"temperature", c.temperature}};
}

void from_json(const nlohmann::json& j, ToyEncoderConfig& c) {
  ToyEncoderConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_text_len = j.value("max_text_len", d.max_text_len);
  c.temperature = j.value("temperature", d.temperature);
}

// ---- PromptSet ----------------------------------------------------------------

std::string to_string(PromptDesign d) {
  switch (d) {
    case PromptDesign::kVisualOnly: return "visual";
    case PromptDesign::kVLJoint: return "vl_joint";
    case PromptDesign::kVLIndependent: return "vl_independent";
  }
  return "?";
}

PromptDesign parse_design(const std::string& s) {
  if (s == "visual" || s == "V" || s == "visual_only") return PromptDesign::kVisualOnly;
  if (s == "vl_joint" || s == "VLJ") return PromptDesign::kVLJoint;
  if (s == "vl_independent" || s == "VLI") return PromptDesign::kVLIndependent;
  throw UsageError("unknown prompt design '" + s + "'");
}

PromptSet::PromptSet(PromptDesign design, std::vector<Matrix> blocks, std::size_t embed_dim)
    : design_(design), embed_dim_(embed_dim), blocks_(std::move(blocks)) {
  if (blocks_.empty()) return;
  const std::size_t want = design == PromptDesign::kVLIndependent ? 2 : 1;
  if (blocks_.size() != want) throw ConfigError("prompt block count does not match design");
  prompt_len_ = blocks_[0].rows();
  for (const Matrix& b : blocks_)
    if (b.rows() != prompt_len_ || b.cols() != embed_dim_)
      throw ConfigError("prompt blocks must be prompt_len x embed_dim");
  visual_ = 0;
  if (design == PromptDesign::kVLJoint) textual_ = 0;
  if (design == PromptDesign::kVLIndependent) textual_ = 1;
}

PromptSet PromptSet::handcrafted(std::size_t embed_dim) {
  return PromptSet(PromptDesign::kVisualOnly, {}, embed_dim);
}

PromptSet PromptSet::random(PromptDesign design, std::size_t prompt_len, std::size_t embed_dim,
                            std::uint64_t seed, double init_std) {
  if (prompt_len == 0) throw ConfigError("prompt_len must be positive for a learned prompt set");
  Rng rng(seed);
  std::vector<Matrix> blocks(design == PromptDesign::kVLIndependent ? 2 : 1,
                             Matrix(prompt_len, embed_dim));
  for (Matrix& b : blocks)
    for (double& v : b.storage()) v = init_std * rng.normal();
  return PromptSet(design, std::move(blocks), embed_dim);
}

PromptSet PromptSet::from_blocks(PromptDesign design, std::vector<Matrix> blocks) {
  if (blocks.empty()) throw ConfigError("from_blocks needs at least one block");
  const std::size_t d = blocks[0].cols();
  return PromptSet(design, std::move(blocks), d);
}

const Matrix& PromptSet::visual_tokens() const {
  if (!visual_) throw ConfigError("prompt set has no visual tokens");
  return blocks_[*visual_];
}

const Matrix& PromptSet::textual_tokens() const {
  if (!textual_) throw ConfigError("prompt set has no textual tokens");
  return blocks_[*textual_];
}

std::string PromptSet::hash() const {
  Hasher h;
  h.update(to_string(design_));
  for (const Matrix& b : blocks_) h.update(b);
  return h.hex();
}

void PromptSet::check_finite() const {
  for (const Matrix& b : blocks_)
    for (double v : b.flat())
      if (!std::isfinite(v)) throw InputError("prompt tokens contain a non-finite value");
}

// ---- Text ---------------------------------------------------------------------

void ClassCatalog::validate() const {
  if (class_names.size() < 2) throw ConfigError("a class catalog needs at least two classes");
  for (std::size_t i = 0; i < class_names.size(); ++i)
    for (std::size_t j = i + 1; j < class_names.size(); ++j)
      if (class_names[i] == class_names[j])
        throw ConfigError("duplicate class name '" + class_names[i] + "'");
  if (prompt_template.find("{}") == std::string::npos)
    throw ConfigError("prompt template lacks a {} class placeholder");
}

std::string ClassCatalog::render(std::size_t k) const {
  if (k >= class_names.size()) throw InputError("class index out of range");
  std::string s = prompt_template;
  s.replace(s.find("{}"), 2, class_names[k]);
  return s;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v({
      "a", "an", "the", "photo", "picture", "image", "drawing", "rendering",
      "of", "toy", "small", "large", "shape", "object", "type", "kind",
      "pattern", "plain", "simple", "bright", "dark", "colored", "cartoon", "sketch",
      "icon", "symbol", "token", "sample", "figure", "blurry", "clean", "noisy",
      "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
      "white", "gray", "circle", "square", "triangle", "cross", "ring", "diamond",
      "bar", "star", "plus", "disk", "frame", "arrow", "on", "with",
      "in", "and", "background", "black", "striped", "dotted", "textured", "solid",
  });
  return v;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw InputError("word '" + word + "' is not in the toy vocabulary");
  return it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    while (!word.empty() && (word.back() == ',' || word.back() == '.')) word.pop_back();
    if (!word.empty()) ids.push_back(id(word));
  }
  return ids;
}

TokenizedCatalog tokenize(const ClassCatalog& catalog, std::size_t max_len) {
  catalog.validate();
  TokenizedCatalog t;
  t.num_classes = catalog.size();
  for (std::size_t k = 0; k < catalog.size(); ++k) {
    const std::vector<int> ids = Vocabulary::standard().encode(catalog.render(k));
    if (ids.empty() || ids.size() > max_len)
      throw ConfigError("class prompt '" + catalog.render(k) + "' exceeds max_text_len");
    if (k == 0) t.length = ids.size();
    if (ids.size() != t.length)
      throw ConfigError("all class prompts of a catalog must have the same word count");
    t.ids.insert(t.ids.end(), ids.begin(), ids.end());
  }
  return t;
}

// ---- Weights ------------------------------------------------------------------

namespace {

Matrix gaussian(std::size_t r, std::size_t c, double std, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.storage()) v = std * rng.normal();
  return m;
}

BlockWeights init_block(std::size_t d, std::size_t hidden, Rng& rng) {
  BlockWeights b;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  b.ln1_g = Matrix(1, d, 1.0);
  b.ln1_b = Matrix(1, d);
  b.w_qkv = gaussian(d, 3 * d, s, rng);
  b.b_qkv = Matrix(1, 3 * d);
  b.w_o = gaussian(d, d, s, rng);
  b.b_o = Matrix(1, d);
  b.ln2_g = Matrix(1, d, 1.0);
  b.ln2_b = Matrix(1, d);
  b.w_fc1 = gaussian(d, hidden, s, rng);
  b.b_fc1 = Matrix(1, hidden);
  b.w_fc2 = gaussian(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  b.b_fc2 = Matrix(1, d);
  return b;
}

}  // namespace

ModelWeights ModelWeights::initialize(const ToyEncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.embed_dim;
  const std::size_t patch_dim = config.channels * config.patch_size * config.patch_size;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  ModelWeights w;
  w.config = config;
  w.image.patch_w = gaussian(patch_dim, d, 1.0 / std::sqrt(static_cast<double>(patch_dim)), rng);
  w.image.patch_b = Matrix(1, d);
  w.image.cls = gaussian(1, d, 0.02, rng);
  w.image.pos = gaussian(config.num_patches(), d, 0.02, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l)
    w.image.blocks.push_back(init_block(d, config.mlp_ratio * d, rng));
  w.image.ln_g = Matrix(1, d, 1.0);
  w.image.ln_b = Matrix(1, d);
  w.image.proj = gaussian(d, d, sd, rng);
  w.text.token_emb = gaussian(config.vocab_size, d, 0.02, rng);
  w.text.pos = gaussian(config.max_text_len, d, 0.01, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l)
    w.text.blocks.push_back(init_block(d, config.mlp_ratio * d, rng));
  w.text.ln_g = Matrix(1, d, 1.0);
  w.text.ln_b = Matrix(1, d);
  w.text.proj = gaussian(d, d, sd, rng);
  return w;
}

std::string ModelWeights::hash() const {
  Hasher h;
  h.update(nlohmann::json(config).dump());
  for_each([&](const std::string& name, const Matrix& m) { h.update(name).update(m); });
  return h.hex();
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

// ---- Graphs -------------------------------------------------------------------

ad::Var WeightBinder::operator()(const Matrix& m) {
  auto it = cache_.find(&m);
  if (it != cache_.end()) return it->second;
  ad::Var v = trainable_ ? tape_.parameter(m) : tape_.constant_ref(m);
  cache_.emplace(&m, v);
  return v;
}

const Matrix* WeightBinder::grad(const Matrix& m) {
  auto it = cache_.find(&m);
  if (it == cache_.end() || !tape_.has_grad(it->second.id)) return nullptr;
  return &tape_.grad(it->second.id);
}

PromptVars bind_prompts(ad::Tape& tape, const PromptSet& prompts, bool trainable) {
  PromptVars pv;
  for (const Matrix& b : prompts.blocks())
    pv.blocks.push_back(trainable ? tape.parameter(b) : tape.constant_ref(b));
  if (auto v = prompts.visual_block()) pv.visual = pv.blocks[*v];
  if (auto t = prompts.textual_block()) pv.textual = pv.blocks[*t];
  return pv;
}

namespace {

ad::Var linear(WeightBinder& w, ad::Var x, const Matrix& weight, const Matrix& bias) {
  return ad::add_row(ad::matmul(x, w(weight)), w(bias));
}

ad::Var transformer_block(WeightBinder& w, const BlockWeights& b, ad::Var x,
                          const kernels::AttentionShape& shape) {
  ad::Var h = ad::layer_norm(x, w(b.ln1_g), w(b.ln1_b));
  ad::Var qkv = linear(w, h, b.w_qkv, b.b_qkv);
  ad::Var att = linear(w, ad::attention(qkv, shape), b.w_o, b.b_o);
  x = ad::add(x, att);
  h = ad::layer_norm(x, w(b.ln2_g), w(b.ln2_b));
  h = ad::gelu(linear(w, h, b.w_fc1, b.b_fc1));
  h = linear(w, h, b.w_fc2, b.b_fc2);
  return ad::add(x, h);
}

}  // namespace

ImageGraph image_graph(WeightBinder& w, const ModelWeights& weights, ad::Var images,
                       ad::Var visual_prompts) {
  const ToyEncoderConfig& c = weights.config;
  const ImageTower& t = weights.image;
  const std::size_t batch = images.rows();
  if (images.cols() != c.pixels()) throw ConfigError("image size does not match the encoder config");
  ad::Var patches = ad::patchify(images, c.channels, c.image_size, c.patch_size);
  ad::Var x = linear(w, patches, t.patch_w, t.patch_b);
  x = ad::add_tiled(x, w(t.pos));
  x = ad::stack_sequences(w(t.cls), x, visual_prompts, batch);
  const std::size_t content = 1 + c.num_patches();
  const std::size_t prompt_len = visual_prompts.valid() ? visual_prompts.rows() : 0;
  const kernels::AttentionShape shape{batch, content + prompt_len, c.num_heads,
                                      c.embed_dim / c.num_heads};
  ImageGraph g;
  for (const BlockWeights& b : t.blocks) {
    x = transformer_block(w, b, x, shape);
    g.layers.push_back(ad::segment_mean(x, shape.seq, 0, content));
  }
  ad::Var cls = ad::segment_mean(x, shape.seq, 0, 1);
  cls = ad::layer_norm(cls, w(t.ln_g), w(t.ln_b));
  g.embedding = ad::normalize_rows(ad::matmul(cls, w(t.proj)));
  return g;
}

ad::Var text_graph(WeightBinder& w, const ModelWeights& weights, const TokenizedCatalog& tokens,
                   ad::Var textual_prompts) {
  const ToyEncoderConfig& c = weights.config;
  const TextTower& t = weights.text;
  if (tokens.length > c.max_text_len) throw ConfigError("text longer than max_text_len");
  ad::Var x = ad::gather_rows(w(t.token_emb), tokens.ids);
  std::vector<std::size_t> positions(tokens.length);
  for (std::size_t i = 0; i < tokens.length; ++i) positions[i] = i;
  x = ad::add_tiled(x, ad::select_rows(w(t.pos), positions));
  x = ad::stack_sequences(ad::Var{}, x, textual_prompts, tokens.num_classes);
  const std::size_t prompt_len = textual_prompts.valid() ? textual_prompts.rows() : 0;
  const kernels::AttentionShape shape{tokens.num_classes, tokens.length + prompt_len, c.num_heads,
                                      c.embed_dim / c.num_heads};
  for (const BlockWeights& b : t.blocks) x = transformer_block(w, b, x, shape);
  ad::Var pooled = ad::segment_mean(x, shape.seq, 0, tokens.length);
  pooled = ad::layer_norm(pooled, w(t.ln_g), w(t.ln_b));
  return ad::normalize_rows(ad::matmul(pooled, w(t.proj)));
}

ad::Var logits_graph(ad::Var image_embedding, ad::Var text_embedding, double temperature) {
  return ad::scale(ad::matmul_nt(image_embedding, text_embedding), temperature);
}

// ---- Facade -------------------------------------------------------------------

DualEncoder::DualEncoder(ModelWeights weights) : weights_(std::move(weights)) {
  weights_.config.validate();
}

void DualEncoder::check_image(std::span<const double> image) const {
  if (image.size() != config().pixels())
    throw ConfigError("image has " + std::to_string(image.size()) + " values, encoder expects " +
                      std::to_string(config().pixels()));
  for (double v : image)
    if (!std::isfinite(v)) throw InputError("image contains a non-finite value");
}

void DualEncoder::check_prompts(const PromptSet& prompts) const {
  if (!prompts.is_handcrafted() && prompts.embed_dim() != config().embed_dim)
    throw ConfigError("prompt width does not match embed_dim");
  prompts.check_finite();
}

EmbeddingTrace DualEncoder::encode_image(std::span<const double> image,
                                         const PromptSet& prompts) const {
  check_image(image);
  check_prompts(prompts);
  ad::Tape tape(false);
  WeightBinder w(tape, false);
  PromptVars pv = bind_prompts(tape, prompts, false);
  ad::Var img = tape.constant(Matrix(1, image.size(), std::vector<double>(image.begin(), image.end())));
  ImageGraph g = image_graph(w, weights_, img, pv.visual);
  EmbeddingTrace trace;
  const auto e = g.embedding.value().flat();
  trace.final_embedding.assign(e.begin(), e.end());
  for (ad::Var l : g.layers) {
    const auto v = l.value().flat();
    trace.layer_embeddings.emplace_back(v.begin(), v.end());
  }
  return trace;
}

Matrix DualEncoder::text_embeddings(const ClassCatalog& catalog, const PromptSet& prompts) const {
  check_prompts(prompts);
  const TokenizedCatalog tokens = tokenize(catalog, config().max_text_len);
  ad::Tape tape(false);
  WeightBinder w(tape, false);
  PromptVars pv = bind_prompts(tape, prompts, false);
  return text_graph(w, weights_, tokens, pv.textual).value();
}

std::vector<double> DualEncoder::encode_text(std::size_t class_index, const ClassCatalog& catalog,
                                             const PromptSet& prompts) const {
  if (class_index >= catalog.size()) throw InputError("class index out of range");
  const Matrix all = text_embeddings(catalog, prompts);
  const auto row = all.row(class_index);
  return {row.begin(), row.end()};
}

Matrix probabilities_from_logits(const Matrix& logits) {
  Matrix p = logits;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return p;
}

Matrix DualEncoder::classify_batch(const Matrix& images, const PromptSet& prompts,
                                   const Matrix& text) const {
  check_prompts(prompts);
  for (std::size_t r = 0; r < images.rows(); ++r) check_image(images.row(r));
  ad::Tape tape(false);
  WeightBinder w(tape, false);
  PromptVars pv = bind_prompts(tape, prompts, false);
  ImageGraph g = image_graph(w, weights_, tape.constant_ref(images), pv.visual);
  ad::Var logits = logits_graph(g.embedding, tape.constant_ref(text), config().temperature);
  return probabilities_from_logits(logits.value());
}

std::vector<double> DualEncoder::classify(std::span<const double> image, const PromptSet& prompts,
                                          const ClassCatalog& catalog) const {
  const Matrix text = text_embeddings(catalog, prompts);
  const Matrix img(1, image.size(), std::vector<double>(image.begin(), image.end()));
  const Matrix p = classify_batch(img, prompts, text);
  return {p.data(), p.data() + p.size()};
}

}  // namespace tapt::dualenc
