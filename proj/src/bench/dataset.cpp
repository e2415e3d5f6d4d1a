#include "tapt/bench/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tapt/container.hpp"
#include "tapt/errors.hpp"
#include "tapt/hash.hpp"
#include "tapt/rng.hpp"

namespace tapt::bench {

void to_json(nlohmann::json& j, const RenderParams& p) {
  j = {{"radius_lo", p.radius_lo},         {"radius_hi", p.radius_hi},
       {"center_jitter", p.center_jitter}, {"background_lo", p.background_lo},
       {"background_hi", p.background_hi}, {"noise_std", p.noise_std},
       {"color_jitter", p.color_jitter}};
}

void from_json(const nlohmann::json& j, RenderParams& p) {
  RenderParams d;
  p.radius_lo = j.value("radius_lo", d.radius_lo);
  p.radius_hi = j.value("radius_hi", d.radius_hi);
  p.center_jitter = j.value("center_jitter", d.center_jitter);
  p.background_lo = j.value("background_lo", d.background_lo);
  p.background_hi = j.value("background_hi", d.background_hi);
  p.noise_std = j.value("noise_std", d.noise_std);
  p.color_jitter = j.value("color_jitter", d.color_jitter);
}

void SyntheticDatasetSpec::validate() const {
  const std::size_t combos = shape_words().size() * color_words().size();
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if ((1 + num_zero_shot) * num_classes > combos)
    throw ConfigError("not enough shape x color combos for disjoint class vocabularies");
  if (samples_per_class < 2) throw ConfigError("samples_per_class must be at least 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0,1)");
  if (image_size < 8) throw ConfigError("image_size too small to render shapes");
}

void to_json(nlohmann::json& j, const SyntheticDatasetSpec& s) {
  j = {{"num_classes", s.num_classes},
       {"samples_per_class", s.samples_per_class},
       {"image_size", s.image_size},
       {"num_zero_shot", s.num_zero_shot},
       {"pretrain_samples_per_class", s.pretrain_samples_per_class},
       {"train_fraction", s.train_fraction},
       {"render", s.render},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticDatasetSpec& s) {
  SyntheticDatasetSpec d;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  s.image_size = j.value("image_size", d.image_size);
  s.num_zero_shot = j.value("num_zero_shot", d.num_zero_shot);
  s.pretrain_samples_per_class = j.value("pretrain_samples_per_class", d.pretrain_samples_per_class);
  s.train_fraction = j.value("train_fraction", d.train_fraction);
  s.render = j.value("render", d.render);
  s.seed = j.value("seed", d.seed);
}

const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> w = {"circle", "square", "triangle", "cross", "ring", "diamond"};
  return w;
}

const std::vector<std::string>& color_words() {
  static const std::vector<std::string> w = {"red", "green", "blue", "yellow", "cyan", "magenta"};
  return w;
}

namespace {

constexpr double kPalette[6][3] = {
    {0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.20, 0.30, 0.95},
    {0.95, 0.90, 0.15}, {0.15, 0.85, 0.90}, {0.90, 0.20, 0.85},
};

// Inside test in shape-local coordinates scaled so the shape spans [-1, 1].
bool inside(std::size_t shape, double u, double v) {
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: return v >= -0.85 && v <= 0.85 && std::abs(u) <= (v + 0.85) * 0.56;
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) ||
             (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 5: return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

RenderParams shifted(const RenderParams& p, std::size_t z) {
  RenderParams q = p;
  switch (z % 3) {
    case 0:
      q.background_lo += 0.15;
      q.background_hi += 0.15;
      q.radius_lo -= 1.0;
      q.radius_hi -= 1.0;
      break;
    case 1:
      q.noise_std *= 2.0;
      q.color_jitter *= 1.5;
      break;
    case 2:
      q.radius_lo += 1.0;
      q.radius_hi += 1.0;
      q.center_jitter += 1.0;
      break;
  }
  return q;
}

RenderParams broadened(const RenderParams& p) {
  RenderParams q = p;
  q.radius_lo -= 1.5;
  q.radius_hi += 1.5;
  q.center_jitter += 1.0;
  q.background_hi += 0.2;
  q.noise_std *= 1.5;
  q.color_jitter *= 1.5;
  return q;
}

const char* kTemplates[] = {"a photo of a {}", "a drawing of a {} shape", "a rendering of a {} symbol",
                            "a picture of the {} icon"};

Dataset make_dataset(const std::string& name, const std::string& tmpl,
                     const std::vector<std::size_t>& combos, std::size_t per_class,
                     const SyntheticDatasetSpec& spec, const RenderParams& params, std::uint64_t seed) {
  Dataset d;
  d.name = name;
  d.image_size = spec.image_size;
  d.channels = 3;
  d.catalog.prompt_template = tmpl;
  for (std::size_t c : combos)
    d.catalog.class_names.push_back(color_words()[c % 6] + " " + shape_words()[c / 6]);
  const std::size_t n = combos.size() * per_class;
  d.images = Matrix(n, 3 * spec.image_size * spec.image_size);
  d.labels.resize(n);
  for (std::size_t k = 0; k < combos.size(); ++k)
    for (std::size_t s = 0; s < per_class; ++s) {
      const std::size_t i = k * per_class + s;
      const auto img = render_image(combos[k] / 6, combos[k] % 6, spec.image_size, params,
                                    derive_seed(seed, i));
      std::copy(img.begin(), img.end(), d.images.row(i).begin());
      d.labels[i] = static_cast<int>(k);
    }
  Rng rng(derive_seed(seed, 0xfeed));
  const std::size_t n_train =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::round(spec.train_fraction * per_class)), 1, per_class - 1);
  for (std::size_t k = 0; k < combos.size(); ++k) {
    std::vector<std::size_t> idx(per_class);
    for (std::size_t s = 0; s < per_class; ++s) idx[s] = k * per_class + s;
    rng.shuffle(idx.begin(), idx.end());
    d.train.insert(d.train.end(), idx.begin(), idx.begin() + n_train);
    d.test.insert(d.test.end(), idx.begin() + n_train, idx.end());
  }
  rng.shuffle(d.train.begin(), d.train.end());
  rng.shuffle(d.test.begin(), d.test.end());
  return d;
}

}  // namespace

std::vector<double> render_image(std::size_t shape, std::size_t color, std::size_t image_size,
                                 const RenderParams& p, std::uint64_t seed) {
  Rng rng(seed);
  const double side = static_cast<double>(image_size);
  const double bg = rng.uniform(p.background_lo, p.background_hi);
  const double radius = rng.uniform(p.radius_lo, p.radius_hi);
  const double cx = side / 2.0 + rng.uniform(-p.center_jitter, p.center_jitter);
  const double cy = side / 2.0 + rng.uniform(-p.center_jitter, p.center_jitter);
  double rgb[3];
  for (int c = 0; c < 3; ++c) rgb[c] = kPalette[color][c] + rng.uniform(-p.color_jitter, p.color_jitter);
  double tint[3];
  for (int c = 0; c < 3; ++c) tint[c] = bg + rng.uniform(-0.03, 0.03);

  const std::size_t plane = image_size * image_size;
  std::vector<double> img(3 * plane);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / radius;
          const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      const double a = hits / 4.0;
      for (int c = 0; c < 3; ++c) {
        const double base = tint[c] + p.noise_std * rng.normal();
        img[c * plane + y * image_size + x] = quantize((1.0 - a) * base + a * rgb[c]);
      }
    }
  return img;
}

DatasetFamily build_family(const SyntheticDatasetSpec& spec) {
  spec.validate();
  std::vector<std::size_t> combos(shape_words().size() * color_words().size());
  for (std::size_t i = 0; i < combos.size(); ++i) combos[i] = i;
  Rng rng(derive_seed(spec.seed, 1));
  rng.shuffle(combos.begin(), combos.end());

  DatasetFamily f;
  std::vector<std::size_t> all(combos.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  f.pretrain = make_dataset("pretrain", kTemplates[0], all, spec.pretrain_samples_per_class, spec,
                            broadened(spec.render), derive_seed(spec.seed, 100));
  const std::size_t k = spec.num_classes;
  f.source = make_dataset("source", kTemplates[0], {combos.begin(), combos.begin() + k},
                          spec.samples_per_class, spec, spec.render, derive_seed(spec.seed, 101));
  for (std::size_t z = 0; z < spec.num_zero_shot; ++z) {
    const auto first = combos.begin() + (z + 1) * k;
    f.zero_shot.push_back(make_dataset("zeroshot" + std::to_string(z), kTemplates[1 + z % 3],
                                       {first, first + k}, spec.samples_per_class, spec,
                                       shifted(spec.render, z), derive_seed(spec.seed, 102 + z)));
  }
  return f;
}

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string bytes(d.images.size(), '\0');
  for (std::size_t i = 0; i < d.images.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(d.images[i] * 255.0)));
  write_text_atomic(dir / "images.u8", bytes);
  nlohmann::json m = manifest_of(d);
  m["images_sha256"] = sha256_hex(bytes);
  write_text_atomic(dir / "manifest.json", m.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw MissingArtifactError("dataset manifest " + (dir / "manifest.json").string() + " not found",
                                      "generate-data");
  const nlohmann::json m = nlohmann::json::parse(mf);
  Dataset d;
  d.name = m.at("name");
  d.catalog.class_names = m.at("class_names").get<std::vector<std::string>>();
  d.catalog.prompt_template = m.at("template");
  d.image_size = m.at("image_size");
  d.channels = m.at("channels");
  d.labels = m.at("labels").get<std::vector<int>>();
  d.train = m.at("train").get<std::vector<std::size_t>>();
  d.test = m.at("test").get<std::vector<std::size_t>>();
  std::ifstream in(dir / "images.u8", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t pixels = d.channels * d.image_size * d.image_size;
  if (bytes.size() != d.labels.size() * pixels || sha256_hex(bytes) != m.at("images_sha256"))
    throw IoError("dataset " + dir.string() + ": image payload does not match its manifest");
  d.images = Matrix(d.labels.size(), pixels);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    d.images[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / 255.0;
  return d;
}

void write_family(const DatasetFamily& family, const SyntheticDatasetSpec& spec,
                  const std::filesystem::path& dir) {
  write_dataset(family.pretrain, dir / family.pretrain.name);
  write_dataset(family.source, dir / family.source.name);
  nlohmann::json members = nlohmann::json::array({family.source.name});
  for (const Dataset& z : family.zero_shot) {
    write_dataset(z, dir / z.name);
    members.push_back(z.name);
  }
  const nlohmann::json j = {{"spec", spec}, {"pretrain", family.pretrain.name}, {"members", members}};
  write_text_atomic(dir / "family.json", j.dump(1) + "\n");
}

std::vector<std::string> family_members(const std::filesystem::path& dir) {
  std::ifstream in(dir / "family.json");
  if (!in) throw MissingArtifactError("dataset family " + dir.string() + " not found", "generate-data");
  return nlohmann::json::parse(in).at("members").get<std::vector<std::string>>();
}

}  // namespace tapt::bench
