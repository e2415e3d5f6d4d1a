#include "tapt/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tapt/errors.hpp"
#include "tapt/hash.hpp"

namespace tapt {

static_assert(std::endian::native == std::endian::little, "container format assumes little-endian");

namespace {
constexpr char kMagic[8] = {'T', 'A', 'P', 'T', 'B', 'I', 'N', '1'};

template <class T>
void put_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  return path.string() + ".tmp";
}
}  // namespace

const Matrix& Container::get(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return m;
  throw IoError("container '" + kind + "' has no array '" + name + "'");
}

std::string Container::content_hash() const {
  Hasher h;
  h.update(kind);
  for (const auto& [n, m] : arrays) h.update(n).update(m);
  return h.hex();
}

void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["content_hash"] = c.content_hash();
  auto& list = header["arrays"] = nlohmann::json::array();
  for (const auto& [n, m] : c.arrays) list.push_back({{"name", n}, {"rows", m.rows()}, {"cols", m.cols()}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put_pod(out, Container::kVersion);
    put_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [n, m] : c.arrays)
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(path.string() + ": not a container file");
  const auto version = get_pod<std::uint32_t>(in);
  if (version != Container::kVersion)
    throw IoError(path.string() + ": unsupported container version " + std::to_string(version));
  const auto len = get_pod<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated header");
  const nlohmann::json header = nlohmann::json::parse(text);

  Container c;
  c.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && c.kind != expected_kind)
    throw IoError(path.string() + ": expected a '" + expected_kind + "' container, found '" + c.kind + "'");
  c.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    Matrix m(a.at("rows").get<std::size_t>(), a.at("cols").get<std::size_t>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw IoError(path.string() + ": truncated payload");
    c.arrays.emplace_back(a.at("name").get<std::string>(), std::move(m));
  }
  if (c.content_hash() != header.at("content_hash").get<std::string>())
    throw IoError(path.string() + ": content hash mismatch");
  return c;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace tapt
