#include "tapt/bench/record.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "tapt/errors.hpp"

namespace tapt::bench {

void EvalRecord::validate() const {
  for (double a : {clean_accuracy, clean_accuracy_alt, robust_accuracy})
    if (!(a >= 0.0 && a <= 100.0)) throw ConfigError("record " + cell + ": accuracy outside [0, 100]");
}

bool EvalRecord::same_result(const EvalRecord& o) const {
  return cell == o.cell && dataset_id == o.dataset_id && attack == o.attack && defense == o.defense &&
         clean_accuracy == o.clean_accuracy && clean_accuracy_alt == o.clean_accuracy_alt &&
         robust_accuracy == o.robust_accuracy && num_samples == o.num_samples && seed == o.seed;
}

void to_json(nlohmann::json& j, const EvalRecord& r) {
  j = {{"cell", r.cell},
       {"dataset_id", r.dataset_id},
       {"attack", r.attack},
       {"attack_family", r.attack_family},
       {"epsilon", r.epsilon},
       {"defense", r.defense},
       {"defense_kind", r.defense_kind},
       {"design", r.design},
       {"clean_accuracy", r.clean_accuracy},
       {"clean_accuracy_alt", r.clean_accuracy_alt},
       {"robust_accuracy", r.robust_accuracy},
       {"num_samples", r.num_samples},
       {"wall_time", r.wall_time},
       {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, EvalRecord& r) {
  j.at("cell").get_to(r.cell);
  j.at("dataset_id").get_to(r.dataset_id);
  j.at("attack").get_to(r.attack);
  j.at("attack_family").get_to(r.attack_family);
  j.at("epsilon").get_to(r.epsilon);
  j.at("defense").get_to(r.defense);
  j.at("defense_kind").get_to(r.defense_kind);
  j.at("design").get_to(r.design);
  j.at("clean_accuracy").get_to(r.clean_accuracy);
  j.at("clean_accuracy_alt").get_to(r.clean_accuracy_alt);
  j.at("robust_accuracy").get_to(r.robust_accuracy);
  j.at("num_samples").get_to(r.num_samples);
  j.at("wall_time").get_to(r.wall_time);
  j.at("seed").get_to(r.seed);
}

namespace {

constexpr const char* kHeader =
    "cell,dataset_id,attack,attack_family,epsilon,defense,defense_kind,design,clean_accuracy,"
    "clean_accuracy_alt,robust_accuracy,num_samples,wall_time,seed";

std::string fmt(double v) {
  // Shortest representation that parses back to the same double.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& s, std::size_t line) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("csv line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

}  // namespace

std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const EvalRecord& r : records) {
    for (const std::string& s : {r.cell, r.dataset_id, r.attack, r.attack_family, r.defense, r.defense_kind, r.design})
      if (s.find_first_of(",\n\"") != std::string::npos) throw IoError("csv field contains a separator: " + s);
    out << r.cell << ',' << r.dataset_id << ',' << r.attack << ',' << r.attack_family << ',' << fmt(r.epsilon) << ','
        << r.defense << ',' << r.defense_kind << ',' << r.design << ',' << fmt(r.clean_accuracy) << ','
        << fmt(r.clean_accuracy_alt) << ',' << fmt(r.robust_accuracy) << ',' << r.num_samples << ','
        << fmt(r.wall_time) << ',' << r.seed << '\n';
  }
  return out.str();
}

std::vector<EvalRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw IoError("csv: unexpected header");
  std::vector<EvalRecord> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) f.push_back(cell);
    if (f.size() != 14) throw IoError("csv line " + std::to_string(n) + ": expected 14 fields");
    EvalRecord r;
    r.cell = f[0];
    r.dataset_id = f[1];
    r.attack = f[2];
    r.attack_family = f[3];
    r.epsilon = parse_number<double>(f[4], n);
    r.defense = f[5];
    r.defense_kind = f[6];
    r.design = f[7];
    r.clean_accuracy = parse_number<double>(f[8], n);
    r.clean_accuracy_alt = parse_number<double>(f[9], n);
    r.robust_accuracy = parse_number<double>(f[10], n);
    r.num_samples = parse_number<std::size_t>(f[11], n);
    r.wall_time = parse_number<double>(f[12], n);
    r.seed = parse_number<std::uint64_t>(f[13], n);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EvalRecord> load_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("records file " + path.string() + " not found", "run-matrix");
  std::stringstream ss;
  ss << in.rdbuf();
  return records_from_csv(ss.str());
}

}  // namespace tapt::bench
