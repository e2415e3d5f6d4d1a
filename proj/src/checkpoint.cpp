#include "tapt/checkpoint.hpp"

#include "tapt/container.hpp"
#include "tapt/errors.hpp"

namespace tapt {

using dualenc::ModelWeights;
using dualenc::PromptSet;

void save_weights(const std::filesystem::path& path, const WeightCheckpoint& ckpt) {
  Container c;
  c.kind = "model_weights";
  c.meta = {{"config", ckpt.weights.config},
            {"weights_hash", ckpt.weights.hash()},
            {"manifest", ckpt.manifest}};
  ckpt.weights.for_each([&](const std::string& name, const Matrix& m) { c.put(name, m); });
  write_container(path, c);
}

WeightCheckpoint load_weights(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("weight checkpoint " + path.string() + " not found", "pretrain");
  const Container c = read_container(path, "model_weights");
  WeightCheckpoint out;
  const auto config = c.meta.at("config").get<dualenc::ToyEncoderConfig>();
  // Initialize for shapes, then overwrite every array.
  out.weights = ModelWeights::initialize(config, 0);
  out.weights.for_each([&](const std::string& name, Matrix& m) {
    const Matrix& src = c.get(name);
    if (!src.same_shape(m)) throw IoError("checkpoint array " + name + " has the wrong shape");
    m = src;
  });
  if (out.weights.hash() != c.meta.at("weights_hash"))
    throw IoError("weight checkpoint " + path.string() + " failed its hash check");
  out.manifest = c.meta.at("manifest");
  return out;
}

void save_prompts(const std::filesystem::path& path, const PromptCheckpoint& ckpt) {
  Container c;
  c.kind = "prompts";
  c.meta = {{"design", dualenc::to_string(ckpt.prompts.design())},
            {"handcrafted", ckpt.prompts.is_handcrafted()},
            {"embed_dim", ckpt.prompts.embed_dim()},
            {"prompts_hash", ckpt.prompts.hash()},
            {"manifest", ckpt.manifest}};
  const auto blocks = ckpt.prompts.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) c.put("block" + std::to_string(i), blocks[i]);
  write_container(path, c);
}

PromptCheckpoint load_prompts(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("prompt checkpoint " + path.string() + " not found", "apt-tune");
  const Container c = read_container(path, "prompts");
  PromptCheckpoint out;
  if (c.meta.at("handcrafted").get<bool>()) {
    out.prompts = PromptSet::handcrafted(c.meta.at("embed_dim").get<std::size_t>());
  } else {
    std::vector<Matrix> blocks;
    for (const auto& [name, m] : c.arrays) blocks.push_back(m);
    out.prompts = PromptSet::from_blocks(dualenc::parse_design(c.meta.at("design")), std::move(blocks));
  }
  if (out.prompts.hash() != c.meta.at("prompts_hash"))
    throw IoError("prompt checkpoint " + path.string() + " failed its hash check");
  out.manifest = c.meta.at("manifest");
  return out;
}

}  // namespace tapt
