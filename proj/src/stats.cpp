#include "tapt/stats.hpp"

#include <algorithm>
#include <cmath>

#include "tapt/container.hpp"
#include "tapt/errors.hpp"
#include "tapt/hash.hpp"

namespace tapt::stats {

Moments batch_moments(std::span<const Matrix> layers) {
  if (layers.empty()) throw InputError("batch_moments needs at least one layer");
  const std::size_t n = layers[0].rows();
  const std::size_t d = layers[0].cols();
  if (n == 0) throw InputError("batch_moments needs at least one sample");
  for (const Matrix& l : layers)
    if (l.rows() != n || l.cols() != d) throw InputError("batch_moments: layers disagree in shape");
  Moments m{Matrix(layers.size(), d), Matrix(layers.size(), d)};
  std::vector<double> col(n);
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < n; ++i) col[i] = layers[l](i, j);
      std::sort(col.begin(), col.end());
      if (col.front() == col.back()) {  // constant column: exact, no rounding in the mean
        m.mu(l, j) = col.front();
        m.var(l, j) = 0.0;
        continue;
      }
      double s = 0.0;
      for (double v : col) s += v;
      const double mean = s / static_cast<double>(n);
      double ss = 0.0;
      for (double v : col) ss += (v - mean) * (v - mean);
      m.mu(l, j) = mean;
      m.var(l, j) = n > 1 ? ss / static_cast<double>(n - 1) : 0.0;
    }
  return m;
}

Moments batch_moments(std::span<const dualenc::EmbeddingTrace> traces) {
  if (traces.empty()) throw InputError("batch_moments needs at least one trace");
  const std::size_t num_layers = traces[0].layer_embeddings.size();
  if (num_layers == 0) throw InputError("trace has no layer embeddings");
  const std::size_t d = traces[0].layer_embeddings[0].size();
  std::vector<Matrix> layers(num_layers, Matrix(traces.size(), d));
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (traces[i].layer_embeddings.size() != num_layers)
      throw InputError("traces disagree in layer count");
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto& v = traces[i].layer_embeddings[l];
      if (v.size() != d) throw InputError("traces disagree in embedding width");
      std::copy(v.begin(), v.end(), layers[l].row(i).begin());
    }
  }
  return batch_moments(layers);
}

void LayerStatsBundle::validate(std::size_t num_layers, std::size_t embed_dim) const {
  for (const Matrix* m : {&mu_adv, &var_adv, &mu_clean, &var_clean}) {
    if (m->rows() != num_layers || m->cols() != embed_dim)
      throw ConfigError("stats bundle is " + std::to_string(m->rows()) + "x" + std::to_string(m->cols()) +
                        ", model expects " + std::to_string(num_layers) + "x" + std::to_string(embed_dim));
    for (double v : m->flat())
      if (!std::isfinite(v)) throw ConfigError("stats bundle contains a non-finite value");
  }
  for (const Matrix* m : {&var_adv, &var_clean})
    for (double v : m->flat())
      if (v < 0.0) throw ConfigError("stats bundle contains a negative variance");
}

std::string LayerStatsBundle::hash() const {
  Hasher h;
  for (const Matrix* m : {&mu_adv, &var_adv, &mu_clean, &var_clean}) h.update(*m);
  h.update(source_manifest.dump());
  return h.hex();
}

std::vector<Matrix> encode_layers(const dualenc::DualEncoder& model, const Matrix& images,
                                  const dualenc::PromptSet& prompts) {
  ad::Tape tape(false);
  dualenc::WeightBinder w(tape, false);
  const dualenc::PromptVars pv = dualenc::bind_prompts(tape, prompts, false);
  const dualenc::ImageGraph g = dualenc::image_graph(w, model.weights(), tape.constant_ref(images), pv.visual);
  std::vector<Matrix> out;
  for (ad::Var l : g.layers) out.push_back(l.value());
  return out;
}

namespace {

constexpr std::size_t kChunk = 64;

void append_rows(std::vector<Matrix>& acc, const std::vector<Matrix>& part, std::size_t offset) {
  for (std::size_t l = 0; l < part.size(); ++l)
    for (std::size_t r = 0; r < part[l].rows(); ++r)
      std::copy(part[l].row(r).begin(), part[l].row(r).end(), acc[l].row(offset + r).begin());
}

}  // namespace

LayerStatsBundle compute_public_stats(const dualenc::DualEncoder& model, const Dataset& public_data,
                                      std::span<const std::size_t> indices,
                                      const dualenc::PromptSet& robust_prompts,
                                      const dualenc::PromptSet& clean_prompts,
                                      const attacks::AttackSpec& attack) {
  if (indices.empty()) throw InputError("public statistics need a non-empty dataset");
  const auto& cfg = model.config();
  const attacks::Target target(model, robust_prompts, public_data.catalog);
  std::vector<Matrix> adv(cfg.num_layers, Matrix(indices.size(), cfg.embed_dim));
  std::vector<Matrix> clean = adv;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto part = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const Matrix images = gather_images(public_data, part);
    const std::vector<int> labels = gather_labels(public_data, part);
    const std::vector<std::uint64_t> ids(part.begin(), part.end());
    const auto examples = attacks::attack_batch(target, images, labels, ids, attack);
    Matrix attacked(part.size(), images.cols());
    for (std::size_t i = 0; i < part.size(); ++i)
      std::copy(examples[i].image.begin(), examples[i].image.end(), attacked.row(i).begin());
    append_rows(adv, encode_layers(model, attacked, robust_prompts), start);
    append_rows(clean, encode_layers(model, images, clean_prompts), start);
  }
  const Moments ma = batch_moments(adv);
  const Moments mc = batch_moments(clean);
  LayerStatsBundle b{ma.mu, ma.var, mc.mu, mc.var, {}};
  b.source_manifest = {{"dataset", public_data.name},
                       {"data_hash", public_data.hash()},
                       {"num_samples", indices.size()},
                       {"robust_prompts", robust_prompts.hash()},
                       {"clean_prompts", clean_prompts.hash()},
                       {"weights", model.weights().hash()},
                       {"attack", attack},
                       {"epsilon", attack.epsilon},
                       {"seed", attack.seed}};
  return b;
}

void save_stats(const std::filesystem::path& path, const LayerStatsBundle& bundle) {
  Container c;
  c.kind = "layer_stats";
  c.meta = {{"num_layers", bundle.num_layers()}, {"embed_dim", bundle.dim()}, {"source", bundle.source_manifest}};
  c.put("mu_adv", bundle.mu_adv);
  c.put("var_adv", bundle.var_adv);
  c.put("mu_clean", bundle.mu_clean);
  c.put("var_clean", bundle.var_clean);
  write_container(path, c);
}

LayerStatsBundle load_stats(const std::filesystem::path& path, const dualenc::ToyEncoderConfig& config) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("stats bundle " + path.string() + " not found", "compute-stats");
  const Container c = read_container(path, "layer_stats");
  LayerStatsBundle b{c.get("mu_adv"), c.get("var_adv"), c.get("mu_clean"), c.get("var_clean"),
                     c.meta.at("source")};
  b.validate(config.num_layers, config.embed_dim);
  return b;
}

}  // namespace tapt::stats
